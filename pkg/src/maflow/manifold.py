"""Discrete almost Hermitian tori.

A model carries, at every grid point, an almost complex structure ``J``, a
compatible metric ``G``, a g-unitary frame ``e_i`` of ``T^{1,0}`` and the
structure coefficients of the brackets ``[e_i, conj(e_j)]``.

Array conventions (component axes first, grid axes last):

* ``J[a, b]``: ``J d_b = sum_a J[a, b] d_a``
* ``G[a, b] = g(d_a, d_b)``
* ``frame[i, a]``: ``e_i = sum_a frame[i, a] d_a``
* ``brackets01[i, j, k]``: ``[e_i, conj e_j]^(0,1) = sum_k c_k conj(e_k)``
* ``brackets10[i, j, k]``: ``[e_i, conj e_j]^(1,0) = sum_k d_k e_k``
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .fields import Grid, derivative

KINDS = ("flat_integrable", "rotated_J")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "flat_integrable"
    n: int = 1
    shape: tuple = (64, 64)
    amplitude: float = 0.0
    wave: tuple = (1,)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        wave = (self.wave,) if np.isscalar(self.wave) else tuple(self.wave)
        if len(wave) > 2 * self.n:
            raise ValueError(f"wave vector {wave} longer than real dimension {2 * self.n}")
        object.__setattr__(self, "wave", tuple(int(w) for w in wave) + (0,) * (2 * self.n - len(wave)))
        object.__setattr__(self, "amplitude", float(self.amplitude))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.kind == "rotated_J" and self.n != 2:
            raise ValueError("rotated_J needs n=2: every almost complex structure in real dimension 2 is integrable")
        Grid(self.n, self.shape)


@dataclass(frozen=True, eq=False)
class AlmostHermitianModel:
    spec: ModelSpec
    grid: Grid
    J: np.ndarray
    G: np.ndarray
    Ginv: np.ndarray
    vol: np.ndarray
    weights: np.ndarray
    frame: np.ndarray
    brackets01: np.ndarray
    brackets10: np.ndarray

    @property
    def n(self) -> int:
        return self.grid.n

    @cached_property
    def frame_bar(self) -> np.ndarray:
        return np.ascontiguousarray(self.frame.conj())

    @cached_property
    def has_brackets(self) -> bool:
        return bool(np.any(self.brackets01))


def standard_J(n: int) -> np.ndarray:
    """Constant block structure with ``J0 d_{2k} = d_{2k+1}`` (zero based)."""
    J0 = np.zeros((2 * n, 2 * n))
    for k in range(n):
        J0[2 * k + 1, 2 * k] = 1.0
        J0[2 * k, 2 * k + 1] = -1.0
    return J0


def _pointwise(mat: np.ndarray, grid: Grid) -> np.ndarray:
    return np.broadcast_to(mat.reshape(mat.shape + (1,) * grid.real_dim), mat.shape + grid.shape).copy()


def _structure(spec: ModelSpec, grid: Grid) -> np.ndarray:
    J0 = standard_J(spec.n)
    if spec.kind == "flat_integrable":
        return _pointwise(J0, grid)
    phase = sum(k * x for k, x in zip(spec.wave, grid.coords))
    angle = np.broadcast_to(spec.amplitude * np.sin(phase), grid.shape)
    c, s = np.cos(angle), np.sin(angle)
    A = _pointwise(np.eye(4), grid)
    A[1, 1], A[1, 2], A[2, 1], A[2, 2] = c, -s, s, c
    # A is a rotation, so A^{-1} = A^T
    return np.einsum("ab...,bc...,dc...->ad...", A, _pointwise(J0, grid), A)


def compatible_metric(J: np.ndarray, h: np.ndarray | None = None) -> np.ndarray:
    """Average a Riemannian metric over ``J``: ``g = (h + h(J., J.)) / 2``."""
    dim = J.shape[0]
    if h is None:
        h = np.eye(dim)
    if h.ndim == 2:
        h = h.reshape(h.shape + (1,) * (J.ndim - 2))
    hJJ = np.einsum("ca...,cd...,db...->ab...", J, h, J)
    return 0.5 * (h + hJJ)


def _mat_inv(M: np.ndarray) -> np.ndarray:
    moved = np.moveaxis(M, (0, 1), (-2, -1))
    return np.ascontiguousarray(np.moveaxis(np.linalg.inv(moved), (-2, -1), (0, 1)))


def _min_eig_sym(M: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(np.moveaxis(M, (0, 1), (-2, -1)))[..., 0]


def hermitian_pairing(V: np.ndarray, W: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``g(V, conj W)`` for complex vector fields under the bilinear extension of g."""
    return np.einsum("a...,ab...,b...->...", V, G, W.conj())


def project_10(V: np.ndarray, J: np.ndarray) -> np.ndarray:
    """``(V - i J V) / 2``, the component in the +i eigenspace of J."""
    JV = np.einsum("ab...,b...->a...", J, V)
    return 0.5 * (V - 1j * JV)


def project_01(V: np.ndarray, J: np.ndarray) -> np.ndarray:
    """``(V + i J V) / 2``, the component in the -i eigenspace of J."""
    JV = np.einsum("ab...,b...->a...", J, V)
    return 0.5 * (V + 1j * JV)


def unitary_frame(J: np.ndarray, G: np.ndarray, n: int) -> np.ndarray:
    """Gram-Schmidt of the (1,0)-projections of ``d_0, d_2, ...`` in that order."""
    frame = []
    for i in range(n):
        d = np.zeros(J.shape[1:], dtype=complex)
        d[2 * i] = 1.0
        v = project_10(d, J)
        for e in frame:
            v = v - hermitian_pairing(v, e, G) * e
        norm = np.sqrt(hermitian_pairing(v, v, G).real)
        frame.append(v / norm)
    return np.stack(frame)


def lie_bracket(X: np.ndarray, Y: np.ndarray, grid: Grid) -> np.ndarray:
    """``[X, Y]^a = X^b d_b Y^a - Y^b d_b X^a`` with finite-difference partials."""
    out = None
    for b in range(grid.real_dim):
        term = X[b] * derivative(Y, grid, b) - Y[b] * derivative(X, grid, b)
        out = term if out is None else out + term
    return out


def frame_brackets(frame: np.ndarray, grid: Grid) -> np.ndarray:
    """All ``[e_i, conj e_j]`` as an ``(n, n, 2n, *grid)`` complex array.

    Same formula as :func:`lie_bracket`, accumulated one axis at a time to
    keep a single derivative of the frame in memory.
    """
    n = frame.shape[0]
    fbar = frame.conj()
    out = np.zeros((n, n) + frame.shape[1:], dtype=complex)
    for b in range(grid.real_dim):
        dE = derivative(frame, grid, b)
        dEbar = dE.conj()
        for i in range(n):
            for j in range(n):
                out[i, j] += frame[i, b] * dEbar[j] - fbar[j, b] * dE[i]
        del dE, dEbar
    return out


def bracket_coefficients(brackets: np.ndarray, J: np.ndarray, G: np.ndarray, frame: np.ndarray):
    """Split brackets into (0,1) and (1,0) parts and express them in the frame."""
    n = frame.shape[0]
    shape = (n, n, n) + frame.shape[2:]
    c01 = np.empty(shape, dtype=complex)
    c10 = np.empty(shape, dtype=complex)
    for i in range(n):
        for j in range(n):
            V = brackets[i, j]
            V01 = project_01(V, J)
            V10 = V - V01
            for k in range(n):
                # g(conj e_l, e_k) = delta_lk picks out the conj(e_k) coefficient
                c01[i, j, k] = np.einsum("a...,ab...,b...->...", V01, G, frame[k])
                c10[i, j, k] = hermitian_pairing(V10, frame[k], G)
    return c01, c10


def build_model(spec: ModelSpec) -> AlmostHermitianModel:
    """Construct the model described by ``spec``.

    Raises
    ------
    ValueError
        For an invalid spec (including ``rotated_J`` with ``n=1``) or if the
        resulting metric fails to be positive definite.
    """
    grid = Grid(spec.n, spec.shape)
    J = _structure(spec, grid)
    G = compatible_metric(J)
    min_eig = float(np.min(_min_eig_sym(G)))
    if min_eig < 1e-8:
        raise ValueError(f"metric is not positive definite (min eigenvalue {min_eig:.3e})")
    Ginv = _mat_inv(G)
    density = np.sqrt(np.linalg.det(np.moveaxis(G, (0, 1), (-2, -1))))
    total = float(np.sum(density)) * grid.cell_volume
    vol = density / total
    weights = vol * grid.cell_volume
    frame = unitary_frame(J, G, spec.n)
    brackets = frame_brackets(frame, grid)
    c01, c10 = bracket_coefficients(brackets, J, G, frame)
    del brackets
    arrays = dict(J=J, G=G, Ginv=Ginv, vol=vol, weights=weights, frame=frame, brackets01=c01, brackets10=c10)
    for arr in arrays.values():
        arr.setflags(write=False)
    return AlmostHermitianModel(spec=spec, grid=grid, **arrays)


def model_from_arrays(spec: ModelSpec, J: np.ndarray, G: np.ndarray, frame: np.ndarray) -> AlmostHermitianModel:
    """Rebuild a model around externally supplied J, G and frame (e.g. loaded dumps).

    Nothing is validated here; run :func:`check_invariants` on the result.
    """
    grid = Grid(spec.n, spec.shape)
    Ginv = _mat_inv(G)
    density = np.sqrt(np.abs(np.linalg.det(np.moveaxis(G, (0, 1), (-2, -1)))))
    vol = density / (float(np.sum(density)) * grid.cell_volume)
    brackets = frame_brackets(frame, grid)
    c01, c10 = bracket_coefficients(brackets, J, G, frame)
    return AlmostHermitianModel(
        spec=spec, grid=grid, J=J, G=G, Ginv=Ginv, vol=vol, weights=vol * grid.cell_volume,
        frame=frame, brackets01=c01, brackets10=c10,
    )


def omega(model: AlmostHermitianModel) -> np.ndarray:
    """``omega[a, b] = g(J d_a, d_b)``."""
    return np.einsum("ca...,cb...->ab...", model.J, model.G)


def nijenhuis_norm(model: AlmostHermitianModel):
    """Pointwise ``sqrt(sum_{a<b} |N(d_a, d_b)|_g^2)`` and its supremum.

    ``N(X, Y) = [JX, JY] - J[JX, Y] - J[X, JY] - [X, Y]``.
    """
    grid, J, G = model.grid, model.J, model.G
    dim = grid.real_dim
    total = np.zeros(grid.shape)
    coord = [np.zeros((dim,) + grid.shape) for _ in range(dim)]
    for a in range(dim):
        coord[a][a] = 1.0
    for a in range(dim):
        for b in range(a + 1, dim):
            X, Y = coord[a], coord[b]
            JX, JY = J[:, a], J[:, b]
            N = (
                lie_bracket(JX, JY, grid)
                - np.einsum("ab...,b...->a...", J, lie_bracket(JX, Y, grid))
                - np.einsum("ab...,b...->a...", J, lie_bracket(X, JY, grid))
                - lie_bracket(X, Y, grid)
            )
            total += np.einsum("a...,ab...,b...->...", N, G, N)
    norm = np.sqrt(np.maximum(total, 0.0))
    return norm, float(np.max(norm))


def check_invariants(model: AlmostHermitianModel) -> dict:
    """Maximum pointwise deviations of every structural invariant."""
    J, G, E = model.J, model.G, model.frame
    dim = model.grid.real_dim
    eye = np.eye(dim).reshape((dim, dim) + (1,) * dim)
    J2 = np.einsum("ab...,bc...->ac...", J, J)
    JtGJ = np.einsum("ca...,cd...,db...->ab...", J, G, J)
    JE = np.einsum("ab...,ib...->ia...", J, E)
    n = model.n
    gram = np.stack([np.stack([hermitian_pairing(E[i], E[j], G) for j in range(n)]) for i in range(n)])
    eye_n = np.eye(n).reshape((n, n) + (1,) * dim)
    om = omega(model)
    JtomJ = np.einsum("ca...,cd...,db...->ab...", J, om, J)
    return {
        "J_squared": float(np.max(np.abs(J2 + eye))),
        "compatibility": float(np.max(np.abs(JtGJ - G))),
        "metric_min_eig": float(np.min(_min_eig_sym(G))),
        "symmetry": float(np.max(np.abs(G - np.swapaxes(G, 0, 1)))),
        "eigenframe": float(np.max(np.abs(JE - 1j * E))),
        "unitarity": float(np.max(np.abs(gram - eye_n))),
        "omega_antisymmetry": float(np.max(np.abs(om + np.swapaxes(om, 0, 1)))),
        "omega_J_invariance": float(np.max(np.abs(JtomJ - om))),
        "volume_total": float(np.sum(model.vol) * model.grid.cell_volume),
    }


TOLERANCES = {
    "J_squared": 1e-12,
    "compatibility": 1e-12,
    "symmetry": 1e-12,
    "eigenframe": 1e-10,
    "unitarity": 1e-10,
    "omega_antisymmetry": 1e-12,
    "omega_J_invariance": 1e-12,
}


def invariant_violations(model: AlmostHermitianModel) -> list:
    """Human-readable violations with the grid location of the worst point."""
    report = check_invariants(model)
    out = [f"{k} = {report[k]:.3e} exceeds {tol:.0e}" for k, tol in TOLERANCES.items() if report[k] > tol]
    if report["metric_min_eig"] < 1e-8:
        out.append(f"metric_min_eig = {report['metric_min_eig']:.3e} below 1e-08")
    if abs(report["volume_total"] - 1.0) > 1e-12:
        out.append(f"volume_total = {report['volume_total']!r} differs from 1")
    if report["J_squared"] > TOLERANCES["J_squared"]:
        dim = model.grid.real_dim
        eye = np.eye(dim).reshape((dim, dim) + (1,) * dim)
        dev = np.max(np.abs(np.einsum("ab...,bc...->ac...", model.J, model.J) + eye), axis=(0, 1))
        loc = np.unravel_index(int(np.argmax(dev)), dev.shape)
        out.append(f"J^2 != -I worst at grid index {tuple(int(i) for i in loc)}")
    return out
