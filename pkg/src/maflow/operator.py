"""Monge-Ampere calculus in the unitary frame of an almost Hermitian model.

``H_{i jbar}(phi) = e_i(conj(e_j)(phi)) - [e_i, conj e_j]^(0,1)(phi)`` is the
``ddbar``-Hessian; ``gtilde = delta + H`` is the deformed metric, and the
flow's right-hand side is ``log det gtilde``. Because the frame is unitary
for g, ``g_{i jbar} = delta_ij`` and determinants need no background factor.
"""

from __future__ import annotations

import logging

import numba
import numpy as np

from .fields import derivative, gradient, herm_det, herm_inv, herm_min_eig, nested_defect

log = logging.getLogger(__name__)

EPS_POS = 1e-10


class PositivityError(ValueError):
    """``gtilde`` failed to be positive definite somewhere on the grid."""

    def __init__(self, index, eigenvalue):
        self.index = index
        self.eigenvalue = eigenvalue
        super().__init__(f"gtilde not positive definite at grid index {index}: min eigenvalue {eigenvalue:.6e}")


def _dagger(H):
    return np.conj(np.swapaxes(H, 0, 1))


@numba.njit(cache=True)
def _ebar_apply(fbar, dphi, out):
    n, dim, size = fbar.shape
    for j in range(n):
        for p in range(size):
            acc = 0j
            for a in range(dim):
                acc += fbar[j, a, p] * dphi[a, p]
            out[j, p] = acc


@numba.njit(cache=True)
def _assemble(frame, fbar, d_ebar, defect, ebar_phi, c01, with_brackets, out):
    n, dim, size = frame.shape
    for i in range(n):
        for j in range(n):
            for p in range(size):
                acc = 0j
                for b in range(dim):
                    acc += frame[i, b, p] * (d_ebar[b, j, p] + fbar[j, b, p] * defect[b, p])
                if with_brackets:
                    for k in range(n):
                        acc -= c01[i, j, k, p] * ebar_phi[k, p]
                out[i, j, p] = acc


def _raw_hessian(phi, model):
    grid = model.grid
    n, size = model.n, grid.size
    dphi = gradient(phi, grid).reshape(grid.real_dim, size)
    ebar_phi = np.empty((n, size), dtype=complex)
    _ebar_apply(model.frame_bar.reshape(n, grid.real_dim, size), dphi, ebar_phi)
    ebar_grid = ebar_phi.reshape((n,) + grid.shape)
    d_ebar = np.stack([derivative(ebar_grid, grid, b) for b in range(grid.real_dim)])
    defect = np.stack([nested_defect(phi, grid, b) for b in range(grid.real_dim)])
    H = np.empty((n, n, size), dtype=complex)
    _assemble(
        model.frame.reshape(n, grid.real_dim, size),
        model.frame_bar.reshape(n, grid.real_dim, size),
        d_ebar.reshape(grid.real_dim, n, size),
        defect.reshape(grid.real_dim, size),
        ebar_phi,
        model.brackets01.reshape(n, n, n, size),
        model.has_brackets,
        H,
    )
    return H.reshape((n, n) + grid.shape)


def hermitian_deficit(phi, model) -> float:
    """``sup |H - H^dagger|`` of the nested finite-difference Hessian."""
    H = _raw_hessian(phi, model)
    return float(np.max(np.abs(H - _dagger(H))))


def dbar_hessian(phi, model, symmetrize: bool = True) -> np.ndarray:
    """The ``ddbar``-Hessian as an ``(n, n, *grid)`` complex field.

    ``e_i(ebar_j phi)`` is evaluated as nested first differences. On its own
    that stencil cannot see grid-scale (Nyquist) modes, so each pure second
    difference ``D_a D_a`` is swapped for the compact one by adding
    ``e_i^a ebar_j^a (C_a - D_a D_a) phi``; the swap is Hermitian and
    4th-order small. Nested frame derivatives leave an O(h^4)
    anti-Hermitian residue, which is removed by ``H <- (H + H^dagger) / 2``
    unless ``symmetrize`` is false.
    """
    H = _raw_hessian(phi, model)
    if not symmetrize:
        return H
    Hd = _dagger(H)
    if log.isEnabledFor(logging.DEBUG):
        log.debug("ddbar Hessian Hermitian deficit %.3e", float(np.max(np.abs(H - Hd))))
    return 0.5 * (H + Hd)


def g_tilde(phi, model):
    """Return ``(gtilde, min eigenvalue field)``."""
    H = dbar_hessian(phi, model)
    for i in range(model.n):
        H[i, i] += 1.0
    return H, herm_min_eig(H)


def _require_positive(lam, eps=EPS_POS):
    k = int(np.argmin(lam))
    if not lam.flat[k] > eps:
        idx = tuple(int(i) for i in np.unravel_index(k, lam.shape))
        raise PositivityError(idx, float(lam.flat[k]))


def log_det_ratio(phi, model, eps: float = EPS_POS) -> np.ndarray:
    """``log det(gtilde)``, i.e. ``log (omega + i ddbar phi)^n / omega^n``.

    Raises :class:`PositivityError` at the first grid point (row-major) of
    minimal eigenvalue if that eigenvalue does not exceed ``eps``.
    """
    Gt, lam = g_tilde(phi, model)
    _require_positive(lam, eps)
    return np.log(herm_det(Gt))


def canonical_laplacian(phi, model) -> np.ndarray:
    """Trace of the ``ddbar``-Hessian against g."""
    H = dbar_hessian(phi, model)
    return np.einsum("ii...->...", H).real


class LinearizedOperator:
    """``L(u) = gtilde^{i jbar} H_{i jbar}(u)`` frozen at a potential ``phi``."""

    def __init__(self, phi, model, eps: float = EPS_POS):
        self.model = model
        Gt, lam = g_tilde(phi, model)
        _require_positive(lam, eps)
        self.gtilde = Gt
        self.gtilde_min = lam
        self.inverse = herm_inv(Gt)

    def __call__(self, u):
        H = dbar_hessian(u, self.model)
        return np.einsum("ij...,ji...->...", self.inverse, H).real

    def inverse_trace(self) -> np.ndarray:
        return np.einsum("ii...->...", self.inverse).real

    def diagonal(self) -> np.ndarray:
        """Leading-order diagonal of the discrete operator.

        Pure second differences have the compact centre weight
        ``-30 / (12 h_a^2)``; mixed and first-order terms vanish at the centre.
        """
        grid = self.model.grid
        E = self.model.frame
        out = np.zeros(grid.shape)
        for a, h in enumerate(grid.spacing):
            M = np.einsum("i...,j...->ij...", E[:, a], E[:, a].conj())
            out += -30.0 / (12.0 * h * h) * np.einsum("ji...,ij...->...", self.inverse, M).real
        return out


def linearized_L(u, phi, model) -> np.ndarray:
    return LinearizedOperator(phi, model)(u)
