"""Newton solver for ``log det gtilde(phi) = F + b`` with mean-zero ``phi``.

The constant ``b`` is a genuine unknown. Each Newton step solves the
bordered system

    [ L_phi   -1 ] [dphi]   [-R]
    [ w^T      0 ] [ db ] = [ 0]

matrix-free with GMRES, where ``w`` are the quadrature weights, so the
constants in the kernel of ``L`` are removed structurally.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .fields import mean
from .operator import LinearizedOperator, PositivityError, log_det_ratio

log = logging.getLogger(__name__)


@dataclass
class EllipticSolution:
    phi: np.ndarray
    b: float
    residual_sup: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)  # (iteration, residual_sup, step length, b)
    message: str = ""

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "residual_sup", "step", "b", "linear_iters"])
            for row in self.history:
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4]])


def manufactured_F(phi_star, model) -> np.ndarray:
    """Right-hand side for which ``(phi_star - mean, b = 0)`` is the exact discrete solution."""
    return log_det_ratio(phi_star, model)


def residual(phi, b, F, model) -> np.ndarray:
    return log_det_ratio(phi, model) - F - b


def _bordered_operator(op: LinearizedOperator, weights: np.ndarray):
    shape = weights.shape
    size = weights.size
    w = weights.ravel()

    def matvec(x):
        x = np.asarray(x).ravel()
        top = op(x[:size].reshape(shape)).ravel() - x[size]
        return np.concatenate([top, [w @ x[:size]]])

    return LinearOperator((size + 1, size + 1), matvec=matvec, dtype=float)


def newton_solve(
    F,
    model,
    tol: float = 1e-10,
    max_iter: int = 30,
    phi0=None,
    forcing: float = 1e-3,
    restart: int = 80,
    max_linear: int = 2000,
    max_halvings: int = 30,
) -> EllipticSolution:
    """Damped inexact Newton with backtracking on ``sup |R|``.

    The linear solve stops once its residual 2-norm falls below
    ``forcing * sup |R|``, which bounds the sup norm as well. A step is
    accepted once ``gtilde`` stays positive and ``sup |R|`` strictly drops.
    On line-search failure or ``max_iter`` exhaustion the best iterate is
    returned with ``converged=False``.
    """
    weights = model.weights
    size = weights.size
    phi = np.zeros(model.grid.shape) if phi0 is None else np.array(phi0, dtype=float)
    phi = phi - mean(phi, weights)
    b = mean(residual(phi, 0.0, F, model), weights)
    R = residual(phi, b, F, model)
    res = float(np.max(np.abs(R)))
    history = [(0, res, 0.0, b, 0)]
    message = ""
    it = 0
    while res > tol:
        if it >= max_iter:
            message = f"max_iter={max_iter} exhausted"
            break
        it += 1
        op = LinearizedOperator(phi, model)
        A = _bordered_operator(op, weights)
        diag = np.concatenate([op.diagonal().ravel(), [1.0]])
        M = LinearOperator(A.shape, matvec=lambda x: np.asarray(x).ravel() / diag, dtype=float)
        count = [0]

        def tick(_):
            count[0] += 1

        rhs_vec = np.concatenate([-R.ravel(), [0.0]])
        sol, info = gmres(
            A, rhs_vec, rtol=0.0, atol=forcing * res, restart=restart, maxiter=max_linear,
            M=M, callback=tick, callback_type="pr_norm",
        )
        if info != 0:
            log.warning("GMRES did not reach forcing tolerance (info=%d)", info)
        dphi = sol[:size].reshape(phi.shape)
        db = float(sol[size])

        s = 1.0
        for _ in range(max_halvings + 1):
            trial = phi + s * dphi
            try:
                R_try = residual(trial, b + s * db, F, model)
            except PositivityError:
                s *= 0.5
                continue
            res_try = float(np.max(np.abs(R_try)))
            if res_try < res:
                break
            s *= 0.5
        else:
            message = f"line search failed at iteration {it}"
            break
        shift = mean(trial, weights)
        phi = trial - shift
        b = b + s * db
        R = residual(phi, b, F, model)
        res = float(np.max(np.abs(R)))
        history.append((it, res, s, b, count[0]))
        log.info("newton %d: residual %.3e, step %.3g, b %.12g, %d linear iterations", it, res, s, b, count[0])
    return EllipticSolution(phi, b, res, it, res <= tol, history, message)
