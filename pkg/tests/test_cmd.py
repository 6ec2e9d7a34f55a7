import json
import os
import pytest
from e2tfa import VERSION
from e2tfa.cmd import main, parse_args, sibling
from e2tfa.util import read_csv


def stderr_record(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_parse_args(run_config):
    args = parse_args(["-c", run_config, "-C", "model=model-1", "-C", "mesh.dim=3", "compare"])
    assert args.subcommand == "compare"
    assert args.config_keys == ["model=model-1", "mesh.dim=3"]
    assert args.component is None
    assert args.out is None


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        parse_args(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == VERSION


def test_sibling():
    assert sibling("/tmp/out/tfa.csv", "_defects") == "/tmp/out/tfa_defects.csv"
    assert sibling("dns", "_fields") == "dns_fields"


def test_pipeline(tmpdir, run_config, capsys):
    out = str(tmpdir.join("results"))
    base = ["-c", run_config, "--out", out, "-C", "output.fields=True"]
    for subcommand in ["mesh", "preprocess", "homog", "run", "dns", "compare"]:
        main(base + [subcommand])
    printed = capsys.readouterr().out
    assert "Partition" in printed
    assert "E_axial" not in printed and "E_1" in printed

    for name in ["mesh.json", "preprocess.json", "homog.json", "tfa.csv", "tfa_defects.csv"]:
        assert os.path.exists(os.path.join(out, name))
    assert os.path.exists(os.path.join(out, "dns_fields.csv"))

    tfa = read_csv(os.path.join(out, "tfa.csv"))
    assert tfa.comments[0].startswith("e2tfa " + VERSION + " config=")
    assert tfa.header[:2] == ["step", "eps_o_11"]
    assert tfa.data.shape[0] == 4
    assert tfa.column("eps_o_11")[-1] == pytest.approx(0.002)

    with open(os.path.join(out, "homog.json")) as file:
        homog = json.load(file)
    assert homog["within_bounds"] is True
    assert set(homog["constants"]) == {"E_1", "E_2", "nu_12", "G_12"}

    with open(os.path.join(out, "compare.json")) as file:
        metrics = json.load(file)["metrics"]
    # elastic cell: reduced model and resolved cell agree
    assert metrics["max_rel_dev"] < 1e-6
    assert metrics["peak_ratio"] == pytest.approx(1.0, rel=1e-6)


def test_preprocess_generates_missing_mesh(tmpdir, run_config):
    main(["-c", run_config, "preprocess"])
    assert os.path.exists(str(tmpdir.join("mesh.json")))
    assert os.path.exists(str(tmpdir.join("preprocess.json")))


def test_config_error(run_config, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["-c", run_config, "-C", "colour=red", "run"])
    assert exc.value.code == 2
    record = stderr_record(capsys)
    assert record["error"] == "config"
    assert record["details"]["key"] == "colour"


def test_missing_files(tmpdir, run_config, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["-c", str(tmpdir.join("nope.json")), "mesh"])
    assert exc.value.code == 1
    assert stderr_record(capsys)["error"] == "io"

    # run before preprocess
    with pytest.raises(SystemExit) as exc:
        main(["-c", run_config, "run"])
    assert exc.value.code == 1


def test_logging_levels(run_config, caplog):
    main(["-c", run_config, "-v", "mesh"])
    assert "Loaded config from" in caplog.text


def test_run_is_reproducible(tmpdir, run_config):
    outputs = []
    for name in ["first", "second"]:
        out = str(tmpdir.join(name))
        for subcommand in ["mesh", "preprocess", "run"]:
            main(["-c", run_config, "--out", out, "-C", "model=model-3", subcommand])
        with open(os.path.join(out, "tfa.csv"), "rb") as file:
            outputs.append(file.read())
    assert outputs[0] == outputs[1]
