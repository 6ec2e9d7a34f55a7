"""This module contains command line entrypoint and functions for corresponding subcommands"""
import argparse
import json
import logging
import os
import os.path
import sys
from typing import Any, Dict, List
from e2tfa import VERSION, influence
from e2tfa.config import RunConfig, parse_override_dict
from e2tfa.dns import FIELD_HEADER, compare, dns_run, element_field_rows
from e2tfa.exceptions import E2tfaError, InvariantError
from e2tfa.macropoint import (
    DEFECT_HEADER,
    defect_row,
    iter_history,
    partition_props,
    record_header,
    record_row,
)
from e2tfa.material import elastic_constants
from e2tfa.rvefe import PHASE_NAMES, generate_mesh, load_mesh, save_mesh
from e2tfa.util import (
    modulus_pretty,
    print_table,
    provenance_lines,
    read_csv,
    write_csv,
    write_json,
)

log = logging.getLogger(__name__)


def sibling(path: str, suffix: str) -> str:
    """Path next to path with suffix added before the extension"""
    root, ext = os.path.splitext(path)
    return root + suffix + ext


def phase_elasticity(config: RunConfig) -> Dict[str, Any]:
    return {
        name: elastic_constants(props.E, props.nu).L for name, props in config.phases().items()
    }


def mesh(parser: argparse.ArgumentParser) -> None:
    """configure 'mesh' subcommand"""

    def action(*, config: RunConfig, **_unused: Any) -> None:
        cell = generate_mesh(**config.mesh_args())
        save_mesh(cell, config.path("mesh_file"), {"config_hash": config.hash})
        volumes = cell.partition_volume_fractions()
        print_table(
            [[i, PHASE_NAMES[p], volumes[i]] for i, p in enumerate(cell.partition_phase)],
            ["Partition", "Phase", "Volume fraction"],
        )

    parser.set_defaults(func=action)


def preprocess(parser: argparse.ArgumentParser) -> None:
    """configure 'preprocess' subcommand"""

    def action(*, config: RunConfig, **_unused: Any) -> None:
        mesh_file = config.path("mesh_file")
        if os.path.exists(mesh_file):
            cell = load_mesh(mesh_file)
        else:
            log.info("No mesh file at %s, generating one", mesh_file)
            cell = generate_mesh(**config.mesh_args())
            save_mesh(cell, mesh_file, {"config_hash": config.hash})
        pp = influence.preprocess(
            cell,
            phase_elasticity(config),
            sbar_index_order=config.sbar_index_order,
            max_workers=config.max_workers,
        )
        influence.save(pp, config.path("preprocess_file"), config.hash)
        header = ["Partition", "Phase", "v_f"] + [
            "E_" + str(k) for k in range(len(pp.active))
        ]
        print_table(influence.summary_rows(pp), header)

    parser.set_defaults(func=action)


def homog(parser: argparse.ArgumentParser) -> None:
    """configure 'homog' subcommand"""

    def action(*, config: RunConfig, **_unused: Any) -> None:
        pp = influence.load(config.path("preprocess_file"))
        constants = influence.engineering_constants(pp.Lbar, pp.dim)
        try:
            influence.check_bounds(pp)
            bounds_ok = True
        except InvariantError as exc:
            log.warning("%s", exc)
            bounds_ok = False
        rows = []
        for key, value in constants.items():
            pretty = format(value, ".4f") if key.startswith("nu") else modulus_pretty(value)
            rows.append([key, pretty])
        print_table(rows, ["Constant", "Value"])
        out = os.path.join(os.path.dirname(config.path("preprocess_file")), "homog.json")
        write_json(
            out,
            {
                "tool": "e2tfa " + VERSION,
                "config_hash": config.hash,
                "constants": constants,
                "within_bounds": bounds_ok,
                "mesh_hash": pp.mesh_hash,
            },
        )

    parser.set_defaults(func=action)


def run(parser: argparse.ArgumentParser) -> None:
    """configure 'run' subcommand"""

    def action(*, config: RunConfig, **_unused: Any) -> None:
        pp = influence.load(config.path("preprocess_file"))
        props = partition_props(pp, config.phases())
        records = [
            record for record, _ in iter_history(pp, props, config.history(), config.tolerances)
        ]
        comments = provenance_lines(config.hash) + [
            "sbar_index_order={}".format(pp.sbar_index_order)
        ]
        tfa_csv = config.path("tfa_csv")
        write_csv(tfa_csv, record_header(pp.M), map(record_row, records), comments)
        if config.write_defects:
            write_csv(
                sibling(tfa_csv, "_defects"), DEFECT_HEADER, map(defect_row, records), comments
            )
        last = records[-1]
        print_table(
            [[last.step, last.eps_o[0], last.sigma_o[0], last.dissipation]],
            ["Steps", "eps_o_11", "sig_o_11", "Dissipation"],
        )

    parser.set_defaults(func=action)


def dns(parser: argparse.ArgumentParser) -> None:
    """configure 'dns' subcommand"""

    def action(*, config: RunConfig, **_unused: Any) -> None:
        cell = load_mesh(config.path("mesh_file"))
        records, state = dns_run(cell, config.phases(), config.history(), config.tolerances)
        comments = provenance_lines(config.hash)
        dns_csv = config.path("dns_csv")
        write_csv(dns_csv, record_header(cell.n_partitions), map(record_row, records), comments)
        if config.write_defects:
            write_csv(
                sibling(dns_csv, "_defects"), DEFECT_HEADER, map(defect_row, records), comments
            )
        if config.write_fields:
            write_csv(
                sibling(dns_csv, "_fields"),
                FIELD_HEADER,
                element_field_rows(cell, state),
                comments,
            )
        last = records[-1]
        print_table(
            [[last.step, last.eps_o[0], last.sigma_o[0], last.dissipation]],
            ["Steps", "eps_o_11", "sig_o_11", "Dissipation"],
        )

    parser.set_defaults(func=action)


def compare_runs(parser: argparse.ArgumentParser) -> None:
    """configure 'compare' subcommand"""

    parser.add_argument(
        "--component",
        default=None,
        help="Voigt component to compare, e.g. 11 (default from config)",
    )

    def action(*, config: RunConfig, component: str, **_unused: Any) -> None:
        component = component or config.component
        metrics = compare(
            read_csv(config.path("tfa_csv")), read_csv(config.path("dns_csv")), component
        )
        print_table([[key, value] for key, value in metrics._asdict().items()], ["Metric", "Value"])
        write_json(
            os.path.join(os.path.dirname(config.path("tfa_csv")), "compare.json"),
            {
                "tool": "e2tfa " + VERSION,
                "config_hash": config.hash,
                "component": component,
                "metrics": metrics._asdict(),
            },
        )

    parser.set_defaults(func=action)


def parse_args(argv: List[str] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Reduced order homogenization of fiber composites with eigenstrain based damage and plasticity"
    )
    parser.add_argument("--version", action="version", version=VERSION)
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="print informational messages"
    )
    parser.add_argument("--debug", action="store_true", help="print debug messages")
    parser.add_argument(
        "-c", "--config", required=True, help="path to the JSON run configuration"
    )
    parser.add_argument(
        "-C",
        "--config-key",
        metavar="<key>=<value>",
        dest="config_keys",
        default=[],
        action="append",
        help="override config key, e.g. -C tolerances.max_iter=80 or -C model=model-1",
    )
    parser.add_argument(
        "--out", default=None, help="directory for outputs, created if missing"
    )

    subcommands = parser.add_subparsers(
        dest="subcommand", metavar="<subcommand>", required=True
    )
    mesh(subcommands.add_parser("mesh", help="generate the unit cell mesh"))
    preprocess(
        subcommands.add_parser(
            "preprocess",
            help="solve the elastic load cases and write the influence tensors",
        )
    )
    homog(
        subcommands.add_parser(
            "homog", help="print homogenized engineering constants"
        )
    )
    run(
        subcommands.add_parser(
            "run", help="drive the reduced material point through the load history"
        )
    )
    dns(
        subcommands.add_parser(
            "dns", help="drive the fully resolved unit cell through the load history"
        )
    )
    compare_runs(
        subcommands.add_parser(
            "compare", help="compare reduced and fully resolved stress curves"
        )
    )
    return parser.parse_args(argv)


def error_record(exc: Exception) -> Dict[str, Any]:
    if isinstance(exc, E2tfaError):
        return exc.record()
    return {"error": "io", "message": str(exc), "details": {}}


def main(argv: List[str] = None) -> None:
    """entrypoint for command line"""
    args = parse_args(argv)

    log_level = logging.WARN
    if args.verbose:
        log_level = logging.INFO
    if args.debug:
        log_level = logging.DEBUG

    log_format = "%(levelname)s " + args.subcommand + "(%(process)d) "
    if log_level <= logging.DEBUG:
        log_format += "[%(name)s:%(funcName)s()] "
    log_format += "%(message)s"

    app_logger = logging.getLogger(__package__)
    app_logger.setLevel(log_level)
    app_log_handler = logging.StreamHandler()
    app_log_handler.setFormatter(logging.Formatter(fmt=log_format))
    app_logger.addHandler(app_log_handler)

    try:
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        override = parse_override_dict(args.config_keys)
        config = RunConfig(path=args.config, override=override, out_dir=args.out)
        kwargs = vars(args)
        kwargs.pop("config")
        args.func(config=config, **kwargs)
    except E2tfaError as exc:
        error_msg = str(exc)
        if exc.__cause__ is not None:
            error_msg += f": {exc.__cause__}"
        elif exc.__context__:
            error_msg += f": {exc.__context__}"
        log.error(error_msg)
        log.debug("Printing traceback for error above", exc_info=True)
        print(json.dumps(error_record(exc)), file=sys.stderr)
        sys.exit(2)
    except OSError as exc:
        log.error("I/O failed: %s", exc)
        log.debug("Printing traceback for error above", exc_info=True)
        print(json.dumps(error_record(exc)), file=sys.stderr)
        sys.exit(1)
    finally:
        app_logger.removeHandler(app_log_handler)
