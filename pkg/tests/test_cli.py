import numpy as np
import pytest

from maflow.cli import EXIT_INVARIANT, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main, read_keyvalues
from maflow.fields import read_dump, write_dump

FLAT = """
[model]
kind = flat_integrable
n = 1
shape = 16, 16

[F]
recipe = {recipe}
{extra}

[flow]
t_final = {t_final}
trajectory_until = 3
snapshot_every = 20
"""


def _config(tmp_path, name="c.ini", recipe="manufactured", extra="phi_star = 0.2 sin:1,0 cos:0,1", t_final=40):
    p = tmp_path / name
    p.write_text(FLAT.format(recipe=recipe, extra=extra, t_final=t_final))
    return str(p)


ROTATED = """
[model]
kind = rotated_J
n = 2
shape = 8, 8, 8, 8
amplitude = 0.3
"""


@pytest.mark.parametrize("text", [FLAT.format(recipe="zero", extra="", t_final=1), ROTATED])
def test_verify_model_passes(tmp_path, text):
    cfg = tmp_path / "m.ini"
    cfg.write_text(text)
    out = tmp_path / "out"
    assert main(["verify-model", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "violations.txt").read_text() == ""
    assert "config_hash" in (out / "manifest.txt").read_text()


def test_verify_model_flags_corrupted_dump(tmp_path):
    cfg = _config(tmp_path, recipe="zero", extra="")
    dumps = tmp_path / "dumps"
    assert main(["verify-model", "--config", cfg, "--out", str(dumps), "--write-dumps"]) == EXIT_OK
    assert read_keyvalues(dumps / "model.txt")["shape"] == "16, 16"
    grid, J = read_dump(dumps / "J.maflow")
    J = J.copy()
    J[1, 2, 5] *= 1.01  # J[0, 1] at grid point (2, 5)
    write_dump(dumps / "J.maflow", grid, J)
    text = open(cfg).read().replace("shape = 16, 16", "shape = 16, 16\ndumps = dumps/J.maflow, dumps/G.maflow, dumps/frame.maflow")
    open(cfg, "w").write(text)
    out = tmp_path / "out"
    assert main(["verify-model", "--config", cfg, "--out", str(out)]) == EXIT_INVARIANT
    violations = (out / "violations.txt").read_text()
    assert "J_squared" in violations and "(2, 5)" in violations


def test_run_flow_zero_F(tmp_path):
    cfg = _config(tmp_path, recipe="zero", extra="")
    text = open(cfg).read().replace("trajectory_until = 3", "")
    open(cfg, "w").write(text)
    out = tmp_path / "out"
    assert main(["run-flow", "--config", cfg, "--out", str(out)]) == EXIT_OK
    res = read_keyvalues(out / "result.txt")
    assert res["converged"] == "1" and float(res["b"]) == 0.0 and res["steps"] == "0"


def test_run_flow_resume(tmp_path):
    cfg = _config(tmp_path, t_final=1.0)
    out = tmp_path / "full"
    assert main(["run-flow", "--config", cfg, "--out", str(out)]) == EXIT_NUMERIC  # t_final too short
    snap = sorted((out / "snapshots").iterdir())[0]
    again = tmp_path / "resumed"
    assert main(["run-flow", "--config", cfg, "--out", str(again), "--resume", str(snap)]) == EXIT_NUMERIC
    _, a = read_dump(out / "phi_mean.maflow")
    _, b = read_dump(again / "phi_mean.maflow")
    assert np.max(np.abs(a - b)) <= 1e-12
    other = _config(tmp_path, "other.ini", t_final=2.0)
    assert main(["run-flow", "--config", other, "--out", str(tmp_path / "x"), "--resume", str(snap)]) == EXIT_IO


def test_solve_elliptic_constant(tmp_path):
    cfg = _config(tmp_path, recipe="constant", extra="value = 0.3")
    out = tmp_path / "out"
    assert main(["solve-elliptic", "--config", cfg, "--out", str(out)]) == EXIT_OK
    res = read_keyvalues(out / "result.txt")
    assert float(res["b"]) == pytest.approx(-0.3, abs=1e-14)


def test_flow_elliptic_compare_decay_harnack(tmp_path):
    cfg = _config(tmp_path)
    flow, ell = tmp_path / "flow", tmp_path / "ell"
    assert main(["run-flow", "--config", cfg, "--out", str(flow)]) == EXIT_OK
    assert main(["solve-elliptic", "--config", cfg, "--out", str(ell), "--compare", str(flow)]) == EXIT_OK
    assert main(["compare", str(flow), str(ell), "--out", str(tmp_path / "cmp"), "--tol", "1e-6"]) == EXIT_OK
    assert main(["compare", str(flow), str(ell), "--out", str(tmp_path / "cmp"), "--tol", "1e-300"]) == EXIT_NUMERIC
    assert main(["decay-fit", "--flow-dir", str(flow), "--out", str(tmp_path / "fit")]) == EXIT_OK
    assert (tmp_path / "fit" / "decay.csv").exists()
    hout = tmp_path / "harn"
    assert main(["harnack", "--config", cfg, "--flow-dir", str(flow), "--out", str(hout)]) == EXIT_OK
    lines = (hout / "harnack.csv").read_text().splitlines()
    assert lines[0].startswith("m,solution,vacuous") and len(lines) > 1


def test_harnack_constant_flow_is_vacuous(tmp_path):
    cfg = _config(tmp_path, recipe="constant", extra="value = 0.3", t_final=3.5)
    flow = tmp_path / "flow"
    main(["run-flow", "--config", cfg, "--out", str(flow)])
    hout = tmp_path / "harn"
    assert main(["harnack", "--config", cfg, "--flow-dir", str(flow), "--out", str(hout)]) == EXIT_OK
    rows = [r.split(",") for r in (hout / "harnack.csv").read_text().splitlines()[1:]]
    assert rows and all(r[2] == "1" for r in rows)


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nkind = nope\n")
    assert main(["run-flow", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_IO
    assert main(["run-flow", "--config", str(tmp_path / "missing.ini")]) == EXIT_IO
    assert main(["run-flow", "--out", str(tmp_path / "o")]) == EXIT_IO


def test_outputs_are_deterministic(tmp_path):
    cfg = _config(tmp_path, t_final=2.0)
    for name in ("a", "b"):
        main(["run-flow", "--config", cfg, "--out", str(tmp_path / name)])
    for f in ("monitor.csv", "result.txt", "contraction.csv", "manifest.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
