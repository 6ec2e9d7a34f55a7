import ast
import json
import logging
import os
import os.path
from typing import Any, Dict, Optional, Sequence
from e2tfa.exceptions import ConfigError, InvalidInputError
from e2tfa.influence import DEFAULT_SBAR_ORDER, SBAR_INDEX_ORDERS
from e2tfa.macropoint import LoadHistory, Tolerances
from e2tfa.material import MODELS, PhaseProps
from e2tfa.rvefe import PARTITION_SCHEMES, PHASE_NAMES
from e2tfa.util import content_hash

log = logging.getLogger(__name__)

THREADS_ENV = "E2TFA_THREADS"

SCHEMA: Dict[str, Any] = {
    "mesh": {
        "dim": int,
        "n_divisions": int,
        "n_layers": int,
        "v_f": float,
        "partition_scheme": str,
        "bands": list,
    },
    "mesh_file": str,
    "preprocess_file": str,
    "tfa_csv": str,
    "dns_csv": str,
    "phases": {name: dict for name in PHASE_NAMES},
    "model": str,
    "history": {"legs": list, "control": object},
    "tolerances": {field: float for field in Tolerances._fields},
    "sbar_index_order": str,
    "solver": {"max_workers": int},
    "compare": {"component": str},
    "output": {"defects": bool, "fields": bool},
}

DEFAULT_PATHS = {
    "mesh_file": "mesh.json",
    "preprocess_file": "preprocess.json",
    "tfa_csv": "tfa.csv",
    "dns_csv": "dns.csv",
}

INT_TOLERANCES = ("max_iter", "max_bisections", "line_search")


def _check_schema(doc: Dict[str, Any], schema: Dict[str, Any], where: str) -> None:
    for key, value in doc.items():
        path = where + "." + key if where else key
        if key not in schema:
            raise ConfigError("Unknown config key", key=path)
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError("Config key must be an object", key=path)
            _check_schema(value, expected, path)
        elif expected is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError("Config key must be a number", key=path, value=value)
        elif expected is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError("Config key must be an integer", key=path, value=value)
        elif expected is not object and not isinstance(value, expected):
            raise ConfigError(
                "Config key has wrong type", key=path, expected=expected.__name__, value=value
            )


def merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merges override into a copy of base"""
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


class RunConfig:
    """
    Validated run configuration. Relative paths resolve against the output
    directory when one is given, otherwise against the config file location
    """

    dim: int = 2
    n_divisions: int = 32
    n_layers: Optional[int] = None
    v_f: Optional[float] = None
    partition_scheme: str = "per-phase"
    bands: Sequence[int] = (2, 3)
    model: Optional[str] = None
    sbar_index_order: str = DEFAULT_SBAR_ORDER
    max_workers: int = 1
    component: str = "11"
    write_defects: bool = True
    write_fields: bool = False

    def __init__(
        self,
        path: str,
        override: Optional[Dict[str, Any]] = None,
        out_dir: Optional[str] = None,
    ) -> None:
        try:
            with open(path, "r") as file:
                raw = json.load(file)
        except json.JSONDecodeError as exc:
            raise ConfigError("Config is not valid JSON", path=path) from exc
        log.info("Loaded config from %s", path)
        if not isinstance(raw, dict):
            raise ConfigError("Config must be a JSON object", path=path)
        if override:
            log.debug("Applying overrides %s", override)
            raw = merge(raw, override)
        _check_schema(raw, SCHEMA, "")
        self.raw = raw
        self.hash = content_hash(raw)
        self.base_dir = out_dir if out_dir else os.path.dirname(os.path.abspath(path))

        mesh = raw.get("mesh", {})
        self.dim = mesh.get("dim", self.dim)
        self.n_divisions = mesh.get("n_divisions", self.n_divisions)
        self.n_layers = mesh.get("n_layers", self.n_layers)
        self.v_f = mesh.get("v_f", self.v_f)
        self.partition_scheme = mesh.get("partition_scheme", self.partition_scheme)
        self.bands = tuple(mesh.get("bands", self.bands))
        if self.dim not in (2, 3):
            raise ConfigError("mesh.dim must be 2 or 3", dim=self.dim)
        if self.partition_scheme not in PARTITION_SCHEMES:
            raise ConfigError("Unknown partition scheme", scheme=self.partition_scheme)
        if len(self.bands) != 2 or any(not isinstance(b, int) or b < 1 for b in self.bands):
            raise ConfigError("mesh.bands needs two positive integers", bands=self.bands)

        self.model = raw.get("model", self.model)
        if self.model is not None and self.model not in MODELS:
            raise ConfigError("Unknown model", model=self.model, known=", ".join(MODELS))
        self.sbar_index_order = raw.get("sbar_index_order", self.sbar_index_order)
        if self.sbar_index_order not in SBAR_INDEX_ORDERS:
            raise ConfigError("Unknown sbar_index_order", value=self.sbar_index_order)

        self.max_workers = raw.get("solver", {}).get("max_workers", self.max_workers)
        if self.max_workers < 1:
            raise ConfigError("solver.max_workers must be positive", value=self.max_workers)
        threads = os.environ.get(THREADS_ENV)
        if threads:
            try:
                cap = int(threads)
            except ValueError as exc:
                raise ConfigError("Invalid thread cap", env=THREADS_ENV, value=threads) from exc
            if cap < 1:
                raise ConfigError("Thread cap must be positive", env=THREADS_ENV, value=cap)
            if cap < self.max_workers:
                log.info("Capping max_workers to %d by %s", cap, THREADS_ENV)
                self.max_workers = cap

        self.component = raw.get("compare", {}).get("component", self.component)
        output = raw.get("output", {})
        self.write_defects = output.get("defects", self.write_defects)
        self.write_fields = output.get("fields", self.write_fields)

        self.tolerances = self._tolerances(raw.get("tolerances", {}))
        self.paths = {
            key: os.path.join(self.base_dir, raw.get(key, default))
            for key, default in DEFAULT_PATHS.items()
        }

    @staticmethod
    def _tolerances(d: Dict[str, Any]) -> Tolerances:
        values = Tolerances()._asdict()
        for key, value in d.items():
            if not value > 0:
                raise ConfigError("Tolerances must be positive", key="tolerances." + key)
            if key in INT_TOLERANCES:
                if int(value) != value:
                    raise ConfigError("Tolerance must be an integer", key="tolerances." + key)
                value = int(value)
            values[key] = value
        return Tolerances(**values)

    def path(self, key: str) -> str:
        return self.paths[key]

    def phases(self) -> Dict[str, PhaseProps]:
        """Phase properties with the configured model applied"""
        phases = self.raw.get("phases")
        if not phases:
            raise ConfigError("Config has no phases")
        out = {}
        for name, d in phases.items():
            try:
                props = PhaseProps.from_dict(d)
                if self.model is not None:
                    props = props.with_model(self.model).validate()
            except InvalidInputError as exc:
                raise ConfigError("Invalid phase properties", phase=name) from exc
            out[name] = props
        return out

    def history(self) -> LoadHistory:
        history = self.raw.get("history")
        if not history or "legs" not in history:
            raise ConfigError("Config has no history legs")
        try:
            return LoadHistory.build(history["legs"], history.get("control", "strain"))
        except (InvalidInputError, KeyError, TypeError) as exc:
            raise ConfigError("Invalid history") from exc

    def mesh_args(self) -> Dict[str, Any]:
        if self.v_f is None:
            raise ConfigError("mesh.v_f is required to build a mesh")
        return {
            "dim": self.dim,
            "n_divisions": self.n_divisions,
            "v_f_target": self.v_f,
            "partition_scheme": self.partition_scheme,
            "n_layers": self.n_layers,
            "bands": self.bands,
        }


def parse_override_dict(keys: Sequence[str]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key_str in keys:
        key_with_dots, _, value = key_str.partition("=")
        if not key_with_dots or not value:
            raise ConfigError("Override must look like key.sub=value", override=key_str)
        key_list = key_with_dots.split(".")
        d = out
        for key in key_list[:-1]:
            d = d.setdefault(key, {})
        # ast.literal_eval can crash the interpreter on long enough input
        if len(value) > 1024:
            d[key_list[-1]] = value
        else:
            try:
                d[key_list[-1]] = ast.literal_eval(value)
            except (ValueError, SyntaxError):
                d[key_list[-1]] = value
    return out
