"""Explicit time integration of the parabolic Monge-Ampere flow.

``d phi / dt = log det gtilde(phi) - F`` is advanced by classical RK4 under a
parabolic step cap. The oscillation of ``phi_t`` is the convergence residual:
it tends to zero while ``phi_t`` itself tends to the constant ``b``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import MonitorReport, Trajectory, monitor
from .fields import (
    Grid, NonFiniteFieldError, check_finite, herm_det, herm_inv, mean, oscillation,
    read_dump, write_dump,
)
from .operator import EPS_POS, PositivityError, g_tilde, log_det_ratio

log = logging.getLogger(__name__)


class FlowBlowUp(RuntimeError):
    """A step could not be completed even after the maximum number of halvings."""


class FlowConsistencyError(RuntimeError):
    """The two estimates of the limiting constant ``b`` disagree."""


@dataclass(frozen=True)
class FlowConfig:
    cfl_safety: float = 0.2
    t_final: float = 100.0
    conv_tol: float = 1e-9
    snapshot_every: int = 1000
    monitor_every: int = 50
    max_halvings: int = 30
    growth: float = 1.1
    # keep (t, phi, phi_t) at monitor rows up to this time, for heat solves
    trajectory_until: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.cfl_safety <= 1.0:
            raise ValueError("cfl_safety must lie in (0, 1]")
        for name in ("t_final", "conv_tol", "snapshot_every", "monitor_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.growth < 1.0 or self.growth > 1.1:
            raise ValueError("growth factor must lie in [1, 1.1]")

    def digest(self) -> str:
        text = repr(sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class FlowState:
    t: float
    phi: np.ndarray
    dt: float
    phi_t: np.ndarray
    gtilde_min: float
    dt_cap: float
    steps: int = 0


@dataclass
class FlowResult:
    phi_mean: np.ndarray
    phi_sup: np.ndarray
    b: float
    b_integral: float
    converged: bool
    theta: float
    state: FlowState
    monitor: MonitorReport
    trajectory: Trajectory = field(default_factory=Trajectory)


def rhs(phi, F, model) -> np.ndarray:
    """``log det gtilde(phi) - F``."""
    return log_det_ratio(phi, model) - F


def normalize(phi, weights=None):
    """Return ``(phi - mean(phi), phi - sup(phi))``."""
    return phi - mean(phi, weights), phi - float(np.max(phi))


def _step_cap(inverse_trace_sup, grid: Grid, config: FlowConfig) -> float:
    return config.cfl_safety * grid.h_min ** 2 / (2 * grid.n * inverse_trace_sup)


def _evaluate(phi, F, model):
    """``(phi_t, min eigenvalue of gtilde, sup trace gtilde^{-1})`` at an admissible ``phi``."""
    Gt, lam = g_tilde(phi, model)
    k = int(np.argmin(lam))
    if not lam.flat[k] > EPS_POS:
        raise PositivityError(tuple(int(i) for i in np.unravel_index(k, lam.shape)), float(lam.flat[k]))
    with np.errstate(all="raise"):
        phi_t = np.log(herm_det(Gt)) - F
    tr = np.einsum("ii...->...", herm_inv(Gt)).real
    return phi_t, float(lam.flat[k]), float(np.max(tr))


def initial_state(phi0, F, model, config: FlowConfig) -> FlowState:
    phi0 = np.array(phi0, dtype=float, copy=True)
    check_finite(phi0, "phi0")
    phi_t, lam, tr = _evaluate(phi0, F, model)
    cap = _step_cap(tr, model.grid, config)
    return FlowState(t=0.0, phi=phi0, dt=cap, phi_t=phi_t, gtilde_min=lam, dt_cap=cap, steps=0)


def step(state: FlowState, F, model, config: FlowConfig) -> FlowState:
    """One accepted RK4 step; halves ``dt`` on positivity loss or non-finite values.

    Raises :class:`FlowBlowUp` after ``config.max_halvings`` failed halvings.
    """
    dt = min(state.dt, state.dt_cap)
    phi, k1 = state.phi, state.phi_t
    for _ in range(config.max_halvings + 1):
        try:
            k2 = rhs(phi + 0.5 * dt * k1, F, model)
            k3 = rhs(phi + 0.5 * dt * k2, F, model)
            k4 = rhs(phi + dt * k3, F, model)
            phi_new = phi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            check_finite(phi_new, "phi")
            phi_t, lam, tr = _evaluate(phi_new, F, model)
            check_finite(phi_t, "phi_t")
        except (PositivityError, NonFiniteFieldError, FloatingPointError) as exc:
            log.debug("step rejected at t=%.6g, dt=%.3e: %s", state.t, dt, exc)
            dt *= 0.5
            continue
        cap = _step_cap(tr, model.grid, config)
        return FlowState(
            t=state.t + dt,
            phi=phi_new,
            dt=min(config.growth * dt, cap),
            phi_t=phi_t,
            gtilde_min=lam,
            dt_cap=cap,
            steps=state.steps + 1,
        )
    raise FlowBlowUp(f"step at t={state.t:.6g} failed after {config.max_halvings} halvings")


def run(
    phi0,
    F,
    model,
    config: FlowConfig = FlowConfig(),
    state: FlowState | None = None,
    snapshot_dir=None,
    with_monitor: bool = True,
) -> FlowResult:
    """Integrate until ``theta = osc(phi_t) < conv_tol`` or ``t >= t_final``.

    With ``config.trajectory_until > 0`` integration continues at least to
    that time so the stored trajectory covers it.

    ``state`` resumes from a restored snapshot instead of ``phi0``. When
    ``snapshot_dir`` is given a snapshot is written every
    ``config.snapshot_every`` steps into ``snapshot_dir/step_<k>``.
    """
    if state is None:
        state = initial_state(phi0, F, model, config)
    report = MonitorReport()
    traj = Trajectory()

    def record(s: FlowState):
        if with_monitor:
            report.append(monitor(s.t, s.phi, s.phi_t, model, s.gtilde_min))
        # keep rows until one lands at or past trajectory_until
        if not traj.times or traj.t_end < config.trajectory_until:
            traj.add(s.t, s.phi, s.phi_t)

    record(state)
    converged = False
    while True:
        theta = oscillation(state.phi_t)
        converged = theta < config.conv_tol
        # a requested trajectory is recorded in full even after convergence
        if converged and state.t >= config.trajectory_until:
            break
        if state.t >= config.t_final:
            break
        state = step(state, F, model, config)
        if state.steps % config.monitor_every == 0:
            record(state)
        if snapshot_dir is not None and state.steps % config.snapshot_every == 0:
            save_snapshot(Path(snapshot_dir) / f"step_{state.steps:08d}", state, model.grid, config.digest())
    if (report.rows and report.rows[-1].t < state.t) or (not report.rows and with_monitor):
        record(state)

    phi_mean, phi_sup = normalize(state.phi, model.weights)
    b = mean(state.phi_t, model.weights)
    b_integral = mean(log_det_ratio(phi_mean, model) - F, model.weights)
    if converged and abs(b - b_integral) > 10 * config.conv_tol:
        raise FlowConsistencyError(f"b from phi_t ({b!r}) and from the integral formula ({b_integral!r}) disagree")
    if not converged:
        log.warning("flow not converged by t=%.6g: theta=%.3e", state.t, theta)
    return FlowResult(phi_mean, phi_sup, b, b_integral, converged, theta, state, report, traj)


# --- snapshots ------------------------------------------------------------------


def save_snapshot(path, state: FlowState, grid: Grid, config_hash: str = "") -> None:
    """Write ``phi``/``phi_t`` dumps plus a text manifest of the controller state."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_dump(path / "phi.maflow", grid, [state.phi])
    write_dump(path / "phi_t.maflow", grid, [state.phi_t])
    lines = [
        f"t = {state.t!r}",
        f"dt = {state.dt!r}",
        f"dt_cap = {state.dt_cap!r}",
        f"gtilde_min = {state.gtilde_min!r}",
        f"steps = {state.steps}",
        f"config_hash = {config_hash}",
        f"maflow_version = {__version__}",
    ]
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_snapshot(path):
    """Inverse of :func:`save_snapshot`; returns ``(state, config_hash)``."""
    path = Path(path)
    meta = {}
    for line in (path / "manifest.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    _, phi = read_dump(path / "phi.maflow")
    _, phi_t = read_dump(path / "phi_t.maflow")
    state = FlowState(
        t=float(meta["t"]),
        phi=phi[0],
        dt=float(meta["dt"]),
        phi_t=phi_t[0],
        gtilde_min=float(meta["gtilde_min"]),
        dt_cap=float(meta["dt_cap"]),
        steps=int(meta["steps"]),
    )
    return state, meta.get("config_hash", "")
