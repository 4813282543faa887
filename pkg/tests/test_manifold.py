import numpy as np
import pytest

from maflow.fields import Grid
from maflow.manifold import (
    ModelSpec, TOLERANCES, build_model, check_invariants, invariant_violations, lie_bracket,
    model_from_arrays, nijenhuis_norm, omega, project_01, project_10,
)


@pytest.fixture(scope="module")
def flat():
    return build_model(ModelSpec("flat_integrable", 1, (16, 16)))


@pytest.fixture(scope="module")
def rotated():
    return build_model(ModelSpec("rotated_J", 2, (12, 12, 12, 12), amplitude=0.3, wave=1))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("rotated_J", 1, (16, 16), amplitude=0.3)
    with pytest.raises(ValueError):
        ModelSpec("torus", 1, (16, 16))
    with pytest.raises(ValueError):
        ModelSpec("flat_integrable", 1, (16, 16), amplitude=-1.0)
    assert ModelSpec("rotated_J", 2, (8,) * 4, wave=1).wave == (1, 0, 0, 0)


def test_flat_frame_and_brackets(flat):
    e = flat.frame[0]
    assert np.allclose(e[0], 1 / np.sqrt(2), atol=1e-15)
    assert np.allclose(e[1], -1j / np.sqrt(2), atol=1e-15)
    assert np.max(np.abs(flat.brackets01)) == 0.0
    assert np.max(np.abs(flat.brackets10)) == 0.0
    assert not flat.has_brackets


def test_rotated_amplitude_zero_matches_flat():
    a = build_model(ModelSpec("flat_integrable", 2, (8,) * 4))
    b = build_model(ModelSpec("rotated_J", 2, (8,) * 4, amplitude=0.0))
    assert np.array_equal(a.J, b.J)
    assert np.array_equal(a.G, b.G)
    np.testing.assert_allclose(a.frame, b.frame, atol=1e-15)
    assert nijenhuis_norm(b)[1] <= 1e-10


@pytest.mark.parametrize("which", ["flat", "rotated"])
def test_invariants_within_tolerance(which, request):
    model = request.getfixturevalue(which)
    rep = check_invariants(model)
    for key, tol in TOLERANCES.items():
        assert rep[key] <= tol, key
    assert rep["metric_min_eig"] > 0.5
    assert rep["volume_total"] == pytest.approx(1.0, abs=1e-12)
    assert invariant_violations(model) == []


def test_nijenhuis(flat, rotated):
    assert nijenhuis_norm(flat)[1] <= 1e-10
    assert nijenhuis_norm(rotated)[1] > 0.01


def test_lie_bracket_examples():
    g = Grid(1, (32, 32))
    x1, _ = g.mesh()
    ones = np.ones(g.shape)
    d1 = np.stack([ones, 0 * ones])
    v = np.stack([0 * ones, np.sin(x1) * ones])
    br = lie_bracket(d1, v, g)
    assert np.max(np.abs(br[0])) == 0.0
    assert np.max(np.abs(br[1] - np.cos(x1))) < 1e-4
    const = np.stack([2 * ones, 3 * ones])
    assert np.max(np.abs(lie_bracket(d1, const, g))) == 0.0
    rng = np.random.default_rng(0)
    X = rng.standard_normal((2,) + g.shape)
    Y = rng.standard_normal((2,) + g.shape)
    assert np.array_equal(lie_bracket(X, Y, g), -lie_bracket(Y, X, g))


def test_projections(flat):
    e, J = flat.frame[0], flat.J
    assert np.max(np.abs(project_01(e, J))) < 1e-15
    np.testing.assert_allclose(project_10(e, J), e, atol=1e-15)
    np.testing.assert_allclose(project_01(e.conj(), J), e.conj(), atol=1e-15)
    d1 = np.zeros((2,) + flat.grid.shape)
    d1[0] = 1.0
    p = project_10(d1, J)
    assert np.allclose(p[0], 0.5) and np.allclose(p[1], -0.5j)


def test_bracket_conjugation_symmetry(rotated):
    # [e_i, ebar_j] = -conj([e_j, ebar_i]), so c01[i, j] = -conj(c10[j, i])
    c01, c10 = rotated.brackets01, rotated.brackets10
    assert np.max(np.abs(c01 + np.conj(np.swapaxes(c10, 0, 1)))) < 1e-13
    assert np.max(np.abs(c01)) > 0.05


def test_omega_is_two_form(rotated):
    om = omega(rotated)
    assert np.max(np.abs(om + np.swapaxes(om, 0, 1))) < 1e-14


def test_model_arrays_are_read_only(flat):
    with pytest.raises(ValueError):
        flat.J[0, 0, 0, 0] = 1.0


def test_corrupted_J_is_located():
    spec = ModelSpec("flat_integrable", 1, (8, 8))
    m = build_model(spec)
    J = np.array(m.J)
    J[0, 1, 2, 5] *= 1.01
    bad = model_from_arrays(spec, J, np.array(m.G), np.array(m.frame))
    v = invariant_violations(bad)
    assert any("J_squared" in s for s in v)
    assert any("(2, 5)" in s for s in v)


def test_bracket_coefficients_converge_fourth_order():
    errs = []
    ref = build_model(ModelSpec("rotated_J", 2, (24, 8, 8, 8), amplitude=0.3))
    for N in (8, 12):
        m = build_model(ModelSpec("rotated_J", 2, (N, 8, 8, 8), amplitude=0.3))
        # the coefficients depend on x1 only; compare at shared points
        step = 24 // N
        errs.append(np.max(np.abs(m.brackets01[..., :, 0, 0, 0] - ref.brackets01[..., ::step, 0, 0, 0])))
    assert errs[1] < errs[0] / 3.5
