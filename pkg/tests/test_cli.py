import json

import pytest

from carnot.cli import main

from conftest import H1_SPEC

FAST = ["--points", "1024", "--final-points", "4096", "--starts", "6", "--replicates", "16"]

BAD_GRADING = """\
group bad
step 2
layer 1: X Y
layer 2: T
bracket [X,T] = Y
"""


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def spec_file(tmp_path):
    def write(text, name="g.txt"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return write


def test_validate_ok(capsys, spec_file):
    code, out, _ = run(capsys, "validate", spec_file(H1_SPEC))
    assert code == 0 and "valid" in out


def test_validate_grading_violation(capsys, spec_file):
    code, out, _ = run(capsys, "validate", spec_file(BAD_GRADING))
    assert code == 2 and "line" in out.lower()


def test_validate_syntax(capsys, spec_file):
    code, _, _ = run(capsys, "validate", spec_file("group g\nstep two\n"))
    assert code == 1


def test_validate_missing_file(capsys, tmp_path):
    code, _, _ = run(capsys, "validate", str(tmp_path / "nope.txt"))
    assert code == 64


def test_usage_errors_exit_64(capsys):
    with pytest.raises(SystemExit) as e:
        main(["constants", "--kind", "nonsense"])
    assert e.value.code == 64
    capsys.readouterr()


def test_constants_heis_c_deterministic(capsys, tmp_path):
    argv = ["constants", "--group", "heis:1", "--dist", "koranyi", "--kind", "heis_c", "--k", "1",
            "--no-cache", "--seed", "7"] + FAST
    code1, out1, _ = run(capsys, *argv)
    code2, out2, _ = run(capsys, *argv)
    assert code1 == code2 == 0
    assert out1 == out2
    rec = json.loads(out1)
    assert rec["kind"] == "heis_c" and rec["value"] > 0 and rec["std_error"] > 0
    assert {"value", "std_error", "samples", "seed", "flags", "inputs"} <= set(rec)


def test_constants_cache_round_trip(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("CARNOT_CACHE_DIR", str(tmp_path / "cache"))
    argv = ["constants", "--kind", "heis_c", "--seed", "3"] + FAST
    _, first, _ = run(capsys, *argv)
    _, second, _ = run(capsys, *argv)
    assert first == second
    assert any((tmp_path / "cache").iterdir())


def test_constants_ratio_interval(capsys):
    code, out, _ = run(capsys, "constants", "--kind", "ratio", "--no-cache", *FAST)
    rec = json.loads(out)
    lo, hi = rec["interval"]
    assert code == 0
    assert 1.0 <= lo <= hi <= 2.0 ** rec["inputs"]["Q_minus_m"]


def test_constants_area_needs_splitting(capsys):
    code, _, _ = run(capsys, "constants", "--kind", "area", "--no-cache", *FAST)
    assert code == 64


def test_constants_csv(capsys):
    code, out, _ = run(capsys, "constants", "--kind", "heis_c", "--no-cache", "--format", "csv", *FAST)
    assert code == 0
    header, row = out.splitlines()[:2]
    assert {"kind", "value", "std_error", "samples", "seed"} <= set(header.split(","))


def test_coarea_check_plane_slice(capsys):
    code, out, _ = run(capsys, "coarea-check", "--scenario", "heis1-plane-slice", "--cells", "4", *FAST)
    rep = json.loads(out)
    assert code == 0, rep
    assert rep["passed"] is True


def test_coarea_check_tolerance_zero(capsys):
    code, _, _ = run(capsys, "coarea-check", "--scenario", "heis1-plane-slice", "--cells", "4",
                     "--tolerance", "0", *FAST)
    assert code == 4


def test_coarea_check_xy_hypothesis(capsys):
    # D_H u is onto on the whole tangent space but (x, y) has no split-regular witness
    code, _, err = run(capsys, "coarea-check", "--scenario", "heis1-xy", *FAST)
    assert code == 5 and "hypothesis" in err.lower()


def test_area_check(capsys):
    code, out, _ = run(capsys, "area-check", "--scenario", "heis1-vertical-plane", *FAST)
    rep = json.loads(out)
    assert code == 0 and abs(rep["z"]) <= 3


def test_output_file(capsys, tmp_path):
    target = tmp_path / "out.json"
    code, out, _ = run(capsys, "constants", "--kind", "heis_c", "--no-cache", "--output", str(target), *FAST)
    assert code == 0 and out == ""
    assert json.loads(target.read_text())["kind"] == "heis_c"
