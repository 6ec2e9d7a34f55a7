import csv
import json
import logging
import shutil
from typing import Any, Dict, Iterable, List, NamedTuple, Sequence
import fnvhash  # type: ignore
import numpy as np
from e2tfa import VERSION

log = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"


def canonical_json(obj: Any) -> str:
    """JSON with sorted keys and no whitespace, stable across runs"""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(obj: Any) -> str:
    """FNV-1a 64 digest of the canonical JSON of obj as a hex string"""
    return "{:016x}".format(fnvhash.fnv1a_64(canonical_json(obj).encode("utf-8")))


def array_hash(*arrays: np.ndarray, prefix: str = "") -> str:
    """FNV-1a 64 digest over the raw bytes of arrays"""
    data = prefix.encode("utf-8") + b"".join(
        np.ascontiguousarray(a).tobytes() for a in arrays
    )
    return "{:016x}".format(fnvhash.fnv1a_64(data))


def provenance_lines(config_hash: str) -> List[str]:
    return ["e2tfa {} config={}".format(VERSION, config_hash)]


def modulus_pretty(value: float) -> str:
    """Convert a modulus in MPa into a human readable string"""
    suf = "MPa"
    for next_suf in ["GPa", "TPa"]:
        if abs(value) / 1000 < 1.0:
            return f"{value:.4g} {suf}"
        value /= 1000
        suf = next_suf
    return f"{value:.4g} {suf}"


def format_cell(elem: Any) -> str:
    if isinstance(elem, (float, np.floating)):
        return format(float(elem), ".6g")
    return str(elem)


def get_column_sizes(table: List[List[str]]) -> List[int]:
    """return a list of max sizes of every column in the table"""
    col_sizes = [0] * len(table[0])
    for row in table:
        for index, elem in enumerate(row):
            col_sizes[index] = max(col_sizes[index], len(elem))
    return col_sizes


def normalize_table(table: List[List[str]]) -> None:
    """
    Bring all elements to the size of the longest string in that column
    padding it with spaces from the right
    """
    col_sizes = get_column_sizes(table)
    for row in table:
        for col_index, elem in enumerate(row):
            row[col_index] += " " * (col_sizes[col_index] - len(elem))


def format_table(orig_table: Sequence[Sequence[Any]], max_col_width: int) -> List[List[str]]:
    """Converts every element to string and cuts cells wider than max_col_width"""
    table = []
    for row in orig_table:
        cells = [format_cell(elem) for elem in row]
        table.append(
            [c if len(c) <= max_col_width else c[: max_col_width - 1] + "~" for c in cells]
        )
    return table


def print_table(
    orig_table: Sequence[Sequence[Any]],
    header: List[str] = None,
    sep: str = " ",
    header_sep: str = "-",
) -> None:
    """Prints matrix orig_table converting every element to string as table"""
    if not orig_table:
        return
    row_len = len(orig_table[0])
    term_width, _ = shutil.get_terminal_size()
    max_col_size = max(term_width // row_len - len(sep), 8)
    table = format_table(orig_table, max_col_size)
    if header:
        table.insert(0, list(header))
    normalize_table(table)
    if header:
        header_sep_row = [header_sep * size for size in map(len, table[0])]
        table.insert(1, header_sep_row)
    for row in table:
        print(*row, sep=sep)


class CsvTable(NamedTuple):
    comments: List[str]
    header: List[str]
    data: np.ndarray

    def column(self, name: str) -> np.ndarray:
        try:
            return self.data[:, self.header.index(name)]
        except ValueError as exc:
            raise KeyError(name) from exc


def write_csv(
    path: str,
    header: Sequence[str],
    rows: Iterable[Sequence[float]],
    comments: Sequence[str] = (),
) -> int:
    """
    Writes numeric rows with 17 significant digits. Comment lines go first,
    prefixed with '#'. Returns number of rows written
    """
    n = 0
    with open(path, "w", newline="") as file:
        for line in comments:
            file.write("# " + line + "\n")
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_value(value) for value in row])
            n += 1
    log.info("Wrote %d rows to %s", n, path)
    return n


def _csv_value(value: Any) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return CSV_FLOAT_FORMAT % float(value)


def read_csv(path: str) -> CsvTable:
    comments = []
    rows = []
    header: List[str] = []
    with open(path, "r", newline="") as file:
        for line in file:
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            if not header:
                header = next(csv.reader([line]))
                continue
            if line.strip():
                rows.append([float(x) for x in next(csv.reader([line]))])
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return CsvTable(comments, header, data)


def write_json(path: str, obj: Dict[str, Any]) -> None:
    with open(path, "w") as file:
        json.dump(obj, file, indent=1, sort_keys=True, allow_nan=False)
        file.write("\n")
    log.info("Wrote %s", path)


def read_json(path: str) -> Dict[str, Any]:
    with open(path, "r") as file:
        return json.load(file)
