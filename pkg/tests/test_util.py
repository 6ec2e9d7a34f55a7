import numpy as np
from e2tfa import VERSION
from e2tfa.util import (
    array_hash,
    content_hash,
    format_table,
    modulus_pretty,
    normalize_table,
    print_table,
    provenance_lines,
    read_csv,
    write_csv,
)


def test_content_hash():
    assert content_hash({"a": 1, "b": [1, 2]}) == content_hash({"b": [1, 2], "a": 1})
    assert content_hash({"a": 1}) != content_hash({"a": 2})
    assert len(content_hash({})) == 16


def test_array_hash():
    a = np.arange(6.0)
    assert array_hash(a) == array_hash(a.copy())
    assert array_hash(a) != array_hash(a, prefix="2:8:1")
    assert array_hash(a[::2]) == array_hash(np.array([0.0, 2.0, 4.0]))


def test_modulus_pretty():
    for inp, expected in [
        (0.0, "0 MPa"),
        (2670.0, "2.67 GPa"),
        (41400.0, "41.4 GPa"),
        (80000.0, "80 GPa"),
        (999.0, "999 MPa"),
        (-2670.0, "-2.67 GPa"),
        (3.5e6, "3.5 TPa"),
        (7.0e9, "7000 TPa"),
    ]:
        assert modulus_pretty(inp) == expected


def test_format_table():
    table = format_table([[1, 0.123456789, "fiber"], [12, 2.0, "matrix"]], 5)
    assert table == [["1", "0.12~", "fiber"], ["12", "2", "matr~"]]
    normalize_table(table)
    assert table == [["1 ", "0.12~", "fiber"], ["12", "2    ", "matr~"]]


def test_print_table(capsys):
    print_table([[1, "fiber", 0.41]], ["i", "phase", "v_f"])
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["i", "phase", "v_f"]
    assert set(lines[1].replace(" ", "")) == {"-"}
    assert lines[2].split() == ["1", "fiber", "0.41"]
    print_table([])
    assert capsys.readouterr().out == ""


def test_csv(tmpdir):
    path = str(tmpdir.join("out.csv"))
    rows = [[1, 0.1, 1.0 / 3.0], [2, -2.5e-17, 26.0]]
    comments = provenance_lines("0123456789abcdef")
    assert write_csv(path, ["step", "a", "b"], rows, comments) == 2
    with open(path) as file:
        first = file.readline()
    assert first == "# e2tfa {} config=0123456789abcdef\n".format(VERSION)
    table = read_csv(path)
    assert table.comments == comments
    assert table.header == ["step", "a", "b"]
    assert np.array_equal(table.data, np.array(rows))
    assert table.column("b")[0] == 1.0 / 3.0
