import math

import numpy as np
import pytest

from maflow.diagnostics import (
    HeatPositivityError, InsufficientDataError, MonitorReport, Trajectory, canonical_laplacian,
    contraction_check, envelope_violations, fit_decay, gradient_estimate_constant, harnack_G,
    harnack_check, harnack_parameters_valid, harnack_time_factor, heat_solve, levi_civita_hessian,
    monitor, christoffel, oscillation_bound_ok, shifted_solutions,
)
from maflow.manifold import ModelSpec, build_model


@pytest.fixture(scope="module")
def flat():
    return build_model(ModelSpec("flat_integrable", 1, (32, 32)))


def _static(model, t_end=3.0):
    z = np.zeros(model.grid.shape)
    tr = Trajectory()
    tr.add(0.0, z, z)
    tr.add(t_end, z, z)
    return tr


def test_monitor_zero_state(flat):
    z = np.zeros(flat.grid.shape)
    row = monitor(0.0, z, z, flat)
    for name in ("sup_phit", "sup_env", "inf_env", "osc_phi", "grad_sq_sup", "hess_sup", "lap_c_min", "theta"):
        assert getattr(row, name) == 0.0, name
    assert row.gtilde_min == 1.0


def test_monitor_csv_roundtrip(flat, tmp_path):
    x1, x2 = flat.grid.mesh()
    rep = MonitorReport()
    for t in (0.0, 0.5, 1.0):
        phi = (1 - t / 2) * 0.2 * np.sin(x1) * np.cos(x2)
        rep.append(monitor(t, phi, -phi, flat))
    rep.to_csv(tmp_path / "m.csv")
    back = MonitorReport.from_csv(tmp_path / "m.csv")
    assert back.rows == rep.rows
    with pytest.raises(ValueError):
        rep.append(monitor(1.0, phi, phi, flat))


def test_levi_civita_flat(flat):
    assert np.max(np.abs(christoffel(flat))) == 0.0
    x1, x2 = flat.grid.mesh()
    phi = 0.3 * np.sin(x1) * np.cos(2 * x2)
    lc = levi_civita_hessian(phi, flat)
    assert np.max(np.abs(lc.hessian[0, 0] + 0.3 * np.sin(x1) * np.cos(2 * x2))) < 1e-4
    assert np.max(np.abs(lc.hessian[0, 1] + 0.6 * np.cos(x1) * np.sin(2 * x2))) < 1e-3
    assert np.max(np.abs(lc.eigenvalues.sum(axis=-1) - lc.laplacian)) <= 1e-10 * np.max(np.abs(lc.laplacian))
    assert np.max(np.abs(lc.laplacian - 2 * canonical_laplacian(phi, flat))) < 1e-12
    lc2 = levi_civita_hessian(2.5 * phi, flat)
    np.testing.assert_allclose(lc2.lambda1, 2.5 * lc.lambda1, rtol=1e-12, atol=1e-14)


def test_levi_civita_trace_identity_rotated():
    m = build_model(ModelSpec("rotated_J", 2, (8,) * 4, amplitude=0.3))
    x = m.grid.mesh()
    phi = 0.2 * np.sin(x[0] + x[3]) * np.cos(x[1]) * np.ones(m.grid.shape)
    lc = levi_civita_hessian(phi, m)
    assert np.max(np.abs(lc.eigenvalues.sum(axis=-1) - lc.laplacian)) <= 1e-10 * max(1.0, np.max(np.abs(lc.laplacian)))


def test_envelope_violations():
    assert envelope_violations([3, 2, 2, 1], [-3, -2, -2, -1]) == []
    assert envelope_violations([3, 2, 2.5], [-3, -2, -2.5]) == [("sup", 2), ("inf", 2)]
    assert envelope_violations([1.0, 1.0 + 1e-12], [0.0, -1e-12]) == []


def test_heat_constant_data(flat):
    run = heat_solve(np.full(flat.grid.shape, 1.7), 0.0, 0.5, _static(flat), flat)
    for s in run.snapshots:
        assert np.max(np.abs(s - 1.7)) == 0.0


def test_heat_maximum_principle_and_decay(flat):
    x1, x2 = flat.grid.mesh()
    u0 = 2.0 + np.sin(x1) * np.cos(x2)
    run = heat_solve(u0, 0.0, 1.0, _static(flat), flat)
    assert envelope_violations(run.sup_series, run.inf_series) == []
    # L = Laplacian / 2 on the flat model, so this mode decays like exp(-t)
    exact = 2.0 + math.exp(-1.0) * np.sin(x1) * np.cos(x2)
    assert np.max(np.abs(run.at(1.0) - exact)) < 1e-4


def test_heat_positivity_guard(flat):
    x1, _ = flat.grid.mesh()
    with pytest.raises(HeatPositivityError):
        heat_solve(np.sin(x1) * np.ones(flat.grid.shape), 0.0, 0.1, _static(flat), flat)


def test_shifted_solutions_nonnegative():
    tr = Trajectory()
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    tr.add(0.0, a, a)
    tr.add(1.0, b, b)
    v, w = shifted_solutions(tr, 1)
    assert np.min(v) == 0.0 and np.min(w) == 0.0
    assert np.max(v) == pytest.approx(np.max(a) - np.min(a))


def test_harnack_parameters():
    assert harnack_time_factor(1, 1 / 3, 2, 0.5, 1) == pytest.approx(8.0)
    assert harnack_time_factor(2, 1 / 3, 2, 0.5, 1) == pytest.approx(64.0)
    for bad in ((0.6, 2, 0.5, 1), (1 / 3, 1.0, 0.5, 1), (1 / 3, 2, 1.0, 0.5)):
        with pytest.raises(ValueError):
            harnack_parameters_valid(*bad)


def test_harnack_constant_solution(flat):
    run = heat_solve(np.full(flat.grid.shape, 3.0), 0.0, 1.0, _static(flat), flat)
    chk = harnack_check(run)
    assert chk.implied_C == 0.0
    assert chk.time_factor == pytest.approx(8.0)
    G, gsup = harnack_G(run, 2.0, 0.5, _static(flat), flat)
    assert gsup == 0.0


def test_harnack_bump_stable_under_refinement():
    Cs = []
    for N in (32, 64):
        m = build_model(ModelSpec("flat_integrable", 1, (N, N)))
        x1, x2 = m.grid.mesh()
        u0 = np.exp(4.0 * (np.cos(x1) + np.cos(x2) - 2.0)) + 1e-3
        chk = harnack_check(heat_solve(u0, 0.0, 1.0, _static(m), m))
        Cs.append(chk.implied_C)
    assert 0 < Cs[0] < np.inf
    assert abs(Cs[1] - Cs[0]) <= 0.2 * Cs[1]


def test_gradient_estimate_constant(flat):
    x1, x2 = flat.grid.mesh()
    u0 = np.exp(2.0 * (np.cos(x1) + np.cos(x2) - 2.0)) + 0.05
    tr = _static(flat)
    run = heat_solve(u0, 0.0, 1.0, tr, flat, record_every=0.1)
    C, times, vals = gradient_estimate_constant(run, 2.0, 1 / 3, tr, flat)
    assert C >= 0 and np.isfinite(C)
    bound = C * 8 / ((1 / 3) * 1) + 1 * 4 / ((2 / 3) * times)
    assert np.all(vals <= bound + 1e-12)


def test_fit_decay_synthetic():
    t = np.linspace(0, 10, 101)
    fit = fit_decay(t, 5 * np.exp(-0.7 * t))
    assert fit.C == pytest.approx(5.0, abs=1e-10)
    assert fit.eta == pytest.approx(0.7, abs=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(InsufficientDataError):
        fit_decay(t[:5], np.exp(-t[:5]))


def test_contraction_synthetic():
    t = np.linspace(0, 10, 41)
    cc = contraction_check(t, 5 * np.exp(-0.7 * t))
    assert cc.passed and not cc.vacuous
    assert np.max(np.abs(np.array(cc.kappas) - math.exp(-0.7))) <= 1e-12
    flat_theta = contraction_check(t, np.zeros_like(t))
    assert flat_theta.vacuous and flat_theta.passed


def test_oscillation_bound(flat):
    x1, x2 = flat.grid.mesh()
    base = np.sin(x1) * np.cos(x2)
    rep = MonitorReport()
    for t in np.linspace(0, 5, 21):
        rep.append(monitor(t, (1 + 0.1 * np.sin(t)) * 0.2 * base, 0 * base, flat))
    assert oscillation_bound_ok(rep)
    rep.append(monitor(6.0, base, 0 * base, flat))
    assert not oscillation_bound_ok(rep)
