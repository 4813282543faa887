"""Periodic grid fields: geometry, 4th-order finite differences, reductions.

Fields are plain numpy arrays whose *trailing* ``2n`` axes are the grid axes
of a :class:`Grid`. Leading axes, when present, index tensor components, so a
vector field has shape ``(2n, *grid.shape)`` and a matrix field
``(k, k, *grid.shape)``. Every operation returns a new array; inputs are
never modified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np

TWO_PI = 2.0 * math.pi


class NonFiniteFieldError(FloatingPointError):
    """A field acquired NaN or Inf entries."""

    def __init__(self, name, index):
        self.name = name
        self.index = index
        super().__init__(f"non-finite value in {name} at grid index {index}")


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid over ``[0, 2*pi)^(2n)``.

    Parameters
    ----------
    n : int
        Complex dimension, 1 or 2.
    shape : tuple of int
        Points per real axis; ``len(shape) == 2 * n``, every entry even and
        at least 8.
    """

    n: int
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.n not in (1, 2):
            raise ValueError(f"complex dimension must be 1 or 2, got {self.n}")
        if len(self.shape) != 2 * self.n:
            raise ValueError(f"need {2 * self.n} grid axes for n={self.n}, got shape {self.shape}")
        for s in self.shape:
            if s < 8 or s % 2:
                raise ValueError(f"grid sizes must be even and >= 8, got {self.shape}")

    @property
    def real_dim(self) -> int:
        return 2 * self.n

    @property
    def spacing(self) -> tuple:
        return tuple(TWO_PI / s for s in self.shape)

    @property
    def h_min(self) -> float:
        return min(self.spacing)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @cached_property
    def coords(self) -> tuple:
        """Broadcastable coordinate arrays ``x_a = a-th spacing * index``."""
        dim = len(self.shape)
        return tuple(
            np.reshape(np.arange(s, dtype=float) * h, [s if b == a else 1 for b in range(dim)])
            for a, (s, h) in enumerate(zip(self.shape, self.spacing))
        )

    def mesh(self) -> list:
        """Dense coordinate arrays, one per axis."""
        return [np.broadcast_to(x, self.shape) for x in self.coords]

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.n, tuple(factor * s for s in self.shape))


# --- 4th-order central difference kernels -----------------------------------

@numba.njit(cache=True)
def _d4_mid(f, out, c1, c2):
    p_count, n, q_count = f.shape
    for i in range(p_count):
        for j in range(n):
            jp1 = j + 1 if j + 1 < n else j + 1 - n
            jp2 = j + 2 if j + 2 < n else j + 2 - n
            jm1 = j - 1 if j >= 1 else j - 1 + n
            jm2 = j - 2 if j >= 2 else j - 2 + n
            for k in range(q_count):
                out[i, j, k] = c1 * (f[i, jp1, k] - f[i, jm1, k]) - c2 * (f[i, jp2, k] - f[i, jm2, k])


# the last axis gets its own kernel: an inner loop of length one defeats vectorization
@numba.njit(cache=True)
def _d4_last(f, out, c1, c2):
    p_count, n = f.shape
    for i in range(p_count):
        for j in range(2, n - 2):
            out[i, j] = c1 * (f[i, j + 1] - f[i, j - 1]) - c2 * (f[i, j + 2] - f[i, j - 2])
        for j in (0, 1, n - 2, n - 1):
            jp1 = j + 1 if j + 1 < n else j + 1 - n
            jp2 = j + 2 if j + 2 < n else j + 2 - n
            jm1 = j - 1 if j >= 1 else j - 1 + n
            jm2 = j - 2 if j >= 2 else j - 2 + n
            out[i, j] = c1 * (f[i, jp1] - f[i, jm1]) - c2 * (f[i, jp2] - f[i, jm2])


def derivative(f: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """Periodic 4th-order central difference of ``f`` along grid ``axis``.

    The stencil is ``(8 (f[j+1] - f[j-1]) - (f[j+2] - f[j-2])) / (12 h)``;
    it is evaluated identically at every point, so it commutes exactly
    with whole-cell translations.
    """
    f = np.asarray(f)
    if not (np.issubdtype(f.dtype, np.floating) or np.issubdtype(f.dtype, np.complexfloating)):
        f = f.astype(float)
    ax = f.ndim - grid.real_dim + axis
    h = grid.spacing[axis]
    c1, c2 = 8.0 / (12.0 * h), 1.0 / (12.0 * h)
    f = np.ascontiguousarray(f)
    shape = f.shape
    outer = math.prod(shape[:ax])
    inner = math.prod(shape[ax + 1:])
    out = np.empty_like(f)
    if inner == 1:
        _d4_last(f.reshape(outer, shape[ax]), out.reshape(outer, shape[ax]), c1, c2)
    else:
        _d4_mid(f.reshape(outer, shape[ax], inner), out.reshape(outer, shape[ax], inner), c1, c2)
    return out


@numba.njit(cache=True)
def _sym_mid(f, out, w):
    p_count, n, q_count = f.shape
    r = w.shape[0] - 1
    for i in range(p_count):
        for j in range(n):
            for k in range(q_count):
                out[i, j, k] = 0.0
            for m in range(1, r + 1):
                jp = (j + m) % n
                jm = (j - m) % n
                for k in range(q_count):
                    c = f[i, j, k]
                    out[i, j, k] += w[m] * ((f[i, jp, k] - c) + (f[i, jm, k] - c))


@numba.njit(cache=True)
def _sym_last(f, out, w):
    p_count, n = f.shape
    r = w.shape[0] - 1
    for i in range(p_count):
        for j in range(n):
            c = f[i, j]
            acc = 0.0 * c
            if r <= j < n - r:
                for m in range(1, r + 1):
                    acc += w[m] * ((f[i, j + m] - c) + (f[i, j - m] - c))
            else:
                for m in range(1, r + 1):
                    acc += w[m] * ((f[i, (j + m) % n] - c) + (f[i, (j - m) % n] - c))
            out[i, j] = acc


def _apply_symmetric(f, grid: Grid, axis: int, w: np.ndarray) -> np.ndarray:
    """Periodic symmetric stencil ``sum_m w[m] ((f[j+m] - f[j]) + (f[j-m] - f[j]))``.

    ``w[0]`` is implied by consistency (weights sum to zero), and the
    difference form maps constants to exactly zero.
    """
    w = np.asarray(w, dtype=float)
    f = np.ascontiguousarray(f, dtype=np.result_type(f, float))
    ax = f.ndim - grid.real_dim + axis
    shape = f.shape
    outer = math.prod(shape[:ax])
    inner = math.prod(shape[ax + 1:])
    out = np.empty_like(f)
    if inner == 1:
        _sym_last(f.reshape(outer, shape[ax]), out.reshape(outer, shape[ax]), w)
    else:
        _sym_mid(f.reshape(outer, shape[ax], inner), out.reshape(outer, shape[ax], inner), w)
    return out


def _compact_weights(h: float) -> np.ndarray:
    # (-f[j+2] + 16 f[j+1] - 30 f[j] + 16 f[j-1] - f[j-2]) / (12 h^2)
    return np.array([-30.0, 16.0, -1.0]) / (12.0 * h * h)


def _nested_weights(h: float) -> np.ndarray:
    c1, c2 = 8.0 / (12.0 * h), 1.0 / (12.0 * h)
    d = np.array([c2, -c1, 0.0, c1, -c2])
    return np.convolve(d, d)[4:].copy()  # symmetric: offsets 0..4


def second_derivative(f: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """Compact periodic 4th-order ``d^2 f / dx_axis^2``."""
    return _apply_symmetric(f, grid, axis, _compact_weights(grid.spacing[axis]))


def nested_defect(f: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """``(C - D D) f`` along ``axis``, with ``C`` the compact second difference.

    Both operators are 4th-order accurate, so the defect is O(h^4) on smooth
    fields, but only ``C`` sees the Nyquist mode: ``D`` annihilates it.
    Adding the defect to a nested second derivative removes that spurious
    kernel.
    """
    h = grid.spacing[axis]
    w = _nested_weights(h)
    w = -w
    w[:3] += _compact_weights(h)
    return _apply_symmetric(f, grid, axis, w)


def gradient(f: np.ndarray, grid: Grid) -> np.ndarray:
    """All coordinate partials, stacked on a new leading axis."""
    return np.stack([derivative(f, grid, a) for a in range(grid.real_dim)])


def frame_derivative(f: np.ndarray, vector: np.ndarray, grid: Grid) -> np.ndarray:
    """Apply the (complex) vector field ``vector`` to ``f``: ``sum_a V^a d_a f``."""
    out = None
    for a in range(grid.real_dim):
        term = vector[a] * derivative(f, grid, a)
        out = term if out is None else out + term
    return out


# --- reductions ---------------------------------------------------------------


def mean(f: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Volume-weighted mean; ``weights`` sum to one (uniform if omitted)."""
    f = np.asarray(f, dtype=float)
    if weights is None:
        return float(np.sum(f) / f.size)
    return float(np.sum(f * weights))


def sup_norm(f: np.ndarray) -> float:
    return float(np.max(np.abs(f)))


def oscillation(f: np.ndarray) -> float:
    """``max f - min f`` over grid points."""
    return float(np.max(f) - np.min(f))


def check_finite(f: np.ndarray, name: str = "field") -> np.ndarray:
    """Return ``f`` unchanged, raising :class:`NonFiniteFieldError` on NaN/Inf."""
    finite = np.isfinite(f)
    if not finite.all():
        idx = np.unravel_index(int(np.argmin(finite)), np.shape(f))
        raise NonFiniteFieldError(name, tuple(int(i) for i in idx))
    return f


# --- small Hermitian matrix fields (n <= 2), component-first layout ----------


def herm_det(A: np.ndarray) -> np.ndarray:
    """Real determinant of a Hermitian ``(k, k, ...)`` field, k in {1, 2}."""
    if A.shape[0] == 1:
        return A[0, 0].real.copy()
    return A[0, 0].real * A[1, 1].real - np.abs(A[0, 1]) ** 2


def herm_min_eig(A: np.ndarray) -> np.ndarray:
    if A.shape[0] == 1:
        return A[0, 0].real.copy()
    a, d = A[0, 0].real, A[1, 1].real
    return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + np.abs(A[0, 1]) ** 2)


def herm_inv(A: np.ndarray) -> np.ndarray:
    """Inverse of a Hermitian positive definite ``(k, k, ...)`` field."""
    if A.shape[0] == 1:
        return 1.0 / A
    det = herm_det(A)
    out = np.empty_like(A)
    out[0, 0] = A[1, 1] / det
    out[1, 1] = A[0, 0] / det
    out[0, 1] = -A[0, 1] / det
    out[1, 0] = -A[1, 0] / det
    return out


def gradient_norm_sq(f: np.ndarray, model, metric: np.ndarray | None = None) -> np.ndarray:
    """``|df|^2`` in the unitary frame of ``model``.

    With ``metric=None`` this is the background metric, for which
    ``g^{i jbar} = delta``; otherwise ``metric`` is a Hermitian field
    ``gtilde_{i jbar}`` and ``gtilde^{i jbar} e_i(f) conj(e_j(f))`` is
    returned. Raises ``ValueError`` if ``metric`` is not positive definite.
    """
    grid = model.grid
    grad = gradient(f, grid)
    fi = np.einsum("ia...,a...->i...", model.frame, grad)
    if metric is None:
        return np.sum(np.abs(fi) ** 2, axis=0)
    lam = herm_min_eig(metric)
    if np.min(lam) <= 0:
        idx = np.unravel_index(int(np.argmin(lam)), lam.shape)
        raise ValueError(f"metric not positive definite at {idx}: min eigenvalue {lam[idx]:.3e}")
    inv = herm_inv(metric)
    # v^dagger A^{-1} v with v_i = e_i(f)
    val = np.einsum("i...,ij...,j...->...", fi.conj(), inv, fi)
    resid = float(np.max(np.abs(val.imag)))
    scale = max(1.0, float(np.max(np.abs(val.real))))
    if resid > 1e-13 * scale:
        raise FloatingPointError(f"Hermitian pairing has imaginary residue {resid:.2e}")
    return val.real


# --- field dump format --------------------------------------------------------

MAGIC = "MAFLOW1"


def write_dump(path, grid: Grid, components) -> None:
    """Write real components in the MAFLOW1 format.

    Header: ``MAFLOW1 <n> <shape...> <count>`` then ``count`` records of
    little-endian float64, row-major over the grid.
    """
    comps = [np.ascontiguousarray(c, dtype="<f8") for c in components]
    for c in comps:
        if c.shape != grid.shape:
            raise ValueError(f"component shape {c.shape} does not match grid {grid.shape}")
    header = " ".join([MAGIC, str(grid.n), *map(str, grid.shape), str(len(comps))]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for c in comps:
            fh.write(c.tobytes(order="C"))


def read_dump(path) -> tuple:
    """Inverse of :func:`write_dump`; returns ``(grid, array of shape (count, *grid))``."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if not header or header[0] != MAGIC:
            raise ValueError(f"{path}: not a {MAGIC} dump")
        n = int(header[1])
        shape = tuple(int(s) for s in header[2:2 + 2 * n])
        count = int(header[2 + 2 * n])
        grid = Grid(n, shape)
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != count * grid.size:
        raise ValueError(f"{path}: expected {count * grid.size} values, found {data.size}")
    return grid, data.reshape((count, *shape)).astype(float)


def pack_complex(arr: np.ndarray, grid: Grid) -> list:
    """Flatten a real or complex component field into real records."""
    arr = np.asarray(arr)
    flat = arr.reshape((-1, *grid.shape))
    if np.iscomplexobj(arr):
        out = []
        for c in flat:
            out.extend([c.real, c.imag])
        return out
    return list(flat)


def unpack_complex(data: np.ndarray, comp_shape: tuple, is_complex: bool) -> np.ndarray:
    grid_shape = data.shape[1:]
    if is_complex:
        data = data[0::2] + 1j * data[1::2]
    return data.reshape((*comp_shape, *grid_shape))
