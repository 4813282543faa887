"""Monitored estimate quantities, heat-type solves and Harnack/decay analysis.

The uniform constants of the a priori estimates are existential, so nothing
here compares against a numeric value of them. Instead the quantities are
measured along a run and structural facts are checked: monotone envelopes,
bounded growth, finite implied Harnack constants, contraction ratios below
one and a positive fitted decay rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .fields import derivative, gradient, gradient_norm_sq, oscillation, second_derivative
from .operator import LinearizedOperator, canonical_laplacian, g_tilde

MONITOR_HEADER = (
    "t", "sup_phit", "sup_env", "inf_env", "osc_phi", "grad_sq_sup",
    "hess_sup", "lap_c_min", "gtilde_min", "theta",
)


@dataclass
class MonitorRow:
    t: float
    sup_phit: float
    sup_env: float
    inf_env: float
    osc_phi: float
    grad_sq_sup: float
    hess_sup: float
    lap_c_min: float
    gtilde_min: float
    theta: float


@dataclass
class MonitorReport:
    rows: list = field(default_factory=list)

    def append(self, row: MonitorRow) -> None:
        if self.rows and not row.t > self.rows[-1].t:
            raise ValueError(f"monitor rows must increase in t ({row.t} after {self.rows[-1].t})")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MONITOR_HEADER)
            for r in self.rows:
                w.writerow([repr(float(getattr(r, k))) for k in MONITOR_HEADER])

    @classmethod
    def from_csv(cls, path) -> "MonitorReport":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MONITOR_HEADER:
                raise ValueError(f"{path}: unexpected monitor header {reader.fieldnames}")
            return cls([MonitorRow(**{k: float(v) for k, v in row.items()}) for row in reader])


# --- Levi-Civita Hessian ------------------------------------------------------


def christoffel(model) -> np.ndarray:
    """``Gamma[c, a, b]`` of the metric, from finite differences of ``G``."""
    grid, G = model.grid, model.G
    dim = grid.real_dim
    dG = np.stack([derivative(G, grid, e) for e in range(dim)])  # dG[e, a, b] = d_e G_ab
    lowered = 0.5 * (
        np.einsum("abd...->dab...", dG) + np.einsum("bad...->dab...", dG) - dG
    )
    return np.einsum("cd...,dab...->cab...", model.Ginv, lowered)


@dataclass
class LeviCivitaHessian:
    hessian: np.ndarray  # (2n, 2n, *grid)
    eigenvalues: np.ndarray  # (*grid, 2n), descending
    laplacian: np.ndarray

    @property
    def lambda1(self) -> np.ndarray:
        return self.eigenvalues[..., 0]


def levi_civita_hessian(phi, model, gamma=None) -> LeviCivitaHessian:
    """``phi_{;ab} = d_a d_b phi - Gamma^c_ab d_c phi`` and its g-eigenvalues."""
    grid = model.grid
    dim = grid.real_dim
    dphi = gradient(phi, grid)
    hess = np.empty((dim, dim) + grid.shape)
    for a in range(dim):
        hess[a, a] = second_derivative(phi, grid, a)
        for b in range(a + 1, dim):
            hess[a, b] = derivative(dphi[b], grid, a)
    for a in range(dim):
        for b in range(a):
            hess[a, b] = hess[b, a]
    if gamma is None:
        gamma = christoffel(model)
    if np.any(gamma):
        hess = hess - np.einsum("cab...,c...->ab...", gamma, dphi)
        hess = 0.5 * (hess + np.swapaxes(hess, 0, 1))
    G = np.moveaxis(model.G, (0, 1), (-2, -1))
    Hm = np.moveaxis(hess, (0, 1), (-2, -1))
    Linv = np.linalg.inv(np.linalg.cholesky(G))
    M = Linv @ Hm @ np.swapaxes(Linv, -1, -2)
    eig = np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, -1, -2)))[..., ::-1]
    lap = np.einsum("ab...,ab...->...", model.Ginv, hess)
    return LeviCivitaHessian(hess, eig, lap)


def monitor(t, phi, phi_t, model, gtilde_min=None) -> MonitorRow:
    """All monitored quantities at one accepted state."""
    if gtilde_min is None:
        gtilde_min = float(np.min(g_tilde(phi, model)[1]))
    return MonitorRow(
        t=float(t),
        sup_phit=float(np.max(np.abs(phi_t))),
        sup_env=float(np.max(phi_t)),
        inf_env=float(np.min(phi_t)),
        osc_phi=oscillation(phi),
        grad_sq_sup=float(np.max(gradient_norm_sq(phi, model))),
        hess_sup=float(np.max(levi_civita_hessian(phi, model).lambda1)),
        lap_c_min=float(np.min(canonical_laplacian(phi, model))),
        gtilde_min=float(gtilde_min),
        theta=oscillation(phi_t),
    )


# --- structural checks on a monitor report ------------------------------------


def envelope_violations(sup_series, inf_series, slack: float = 1e-10) -> list:
    """Indices where ``sup`` increases or ``inf`` decreases beyond ``slack * (1 + |value|)``."""
    sup_series = np.asarray(sup_series)
    inf_series = np.asarray(inf_series)
    bad = []
    for k in range(1, len(sup_series)):
        if sup_series[k] > sup_series[k - 1] + slack * (1.0 + abs(sup_series[k - 1])):
            bad.append(("sup", k))
        if inf_series[k] < inf_series[k - 1] - slack * (1.0 + abs(inf_series[k - 1])):
            bad.append(("inf", k))
    return bad


def oscillation_bound_ok(report: MonitorReport, t_start: float = 1.0, factor: float = 2.0) -> bool:
    """No row after ``t_start`` exceeds ``factor`` times the max of the first 10% of those rows."""
    t = report.column("t")
    osc = report.column("osc_phi")[t >= t_start]
    if osc.size == 0:
        return True
    head = osc[: max(1, int(math.ceil(0.1 * osc.size)))]
    return bool(np.all(osc <= factor * np.max(head)))


# --- heat-type equation along the flow ------------------------------------------


class HeatPositivityError(ValueError):
    def __init__(self, t, index, value):
        self.t, self.index, self.value = t, index, value
        super().__init__(f"heat solution lost positivity at t={t:.6g}, grid index {index}: {value:.3e}")


@dataclass
class Trajectory:
    """Flow snapshots ``(t, phi, phi_t)`` with piecewise-linear interpolation."""

    times: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    phi_t: list = field(default_factory=list)

    def add(self, t, phi, phi_t) -> None:
        if self.times and not t > self.times[-1]:
            raise ValueError("trajectory times must increase")
        self.times.append(float(t))
        self.phi.append(np.array(phi, copy=True))
        self.phi_t.append(np.array(phi_t, copy=True))

    @property
    def t_end(self) -> float:
        return self.times[-1]

    def _interp(self, seq, t):
        times = self.times
        if not times[0] - 1e-12 <= t <= times[-1] + 1e-12:
            raise ValueError(f"t={t} outside stored trajectory [{times[0]}, {times[-1]}]")
        k = int(np.searchsorted(times, t, side="right"))
        if k <= 0:
            return seq[0]
        if k >= len(times):
            return seq[-1]
        t0, t1 = times[k - 1], times[k]
        if t == t0:
            return seq[k - 1]
        w = (t - t0) / (t1 - t0)
        return (1.0 - w) * seq[k - 1] + w * seq[k]

    def phi_at(self, t) -> np.ndarray:
        return self._interp(self.phi, t)

    def phit_at(self, t) -> np.ndarray:
        return self._interp(self.phi_t, t)


@dataclass
class HeatRun:
    t_from: float
    times: np.ndarray  # relative to t_from
    snapshots: list
    step_times: np.ndarray
    sup_series: np.ndarray
    inf_series: np.ndarray
    n: int

    def at(self, t_rel) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t_rel)))
        if abs(self.times[k] - t_rel) > 1e-9:
            raise KeyError(f"no snapshot recorded at t={t_rel}")
        return self.snapshots[k]


def heat_solve(
    u0,
    t_from: float,
    t_to: float,
    trajectory: Trajectory,
    model,
    cfl_safety: float = 0.2,
    record_every: float = 0.05,
    check_positivity: bool = True,
) -> HeatRun:
    """RK4 integration of ``du/dt = L_{phi(t)} u`` on ``[t_from, t_to]``.

    ``phi(t)`` is interpolated from ``trajectory``. Steps are clipped to land
    on multiples of ``record_every`` (relative time), where ``u`` is stored.
    With ``check_positivity`` a negative value anywhere raises
    :class:`HeatPositivityError` (exact zeros are allowed).
    """
    grid = model.grid
    u = np.array(u0, dtype=float, copy=True)
    span = t_to - t_from
    n_rec = int(round(span / record_every))
    marks = [k * record_every for k in range(1, n_rec + 1)]
    if not marks or abs(marks[-1] - span) > 1e-12:
        marks.append(span)
    base = cfl_safety * grid.h_min ** 2 / (2 * grid.n)

    def apply(s, v):
        return LinearizedOperator(trajectory.phi_at(t_from + s), model)(v)

    s = 0.0
    times, snaps = [0.0], [u.copy()]
    step_times, sups, infs = [0.0], [float(np.max(u))], [float(np.min(u))]
    for mark in marks:
        while s < mark - 1e-14:
            op = LinearizedOperator(trajectory.phi_at(t_from + s), model)
            dt = min(base / float(np.max(op.inverse_trace())), mark - s)
            k1 = op(u)
            k2 = apply(s + 0.5 * dt, u + 0.5 * dt * k1)
            k3 = apply(s + 0.5 * dt, u + 0.5 * dt * k2)
            k4 = apply(s + dt, u + dt * k3)
            u = u + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            s = mark if mark - (s + dt) < 1e-14 else s + dt
            if not np.all(np.isfinite(u)):
                raise FloatingPointError(f"heat solve produced non-finite values at t={t_from + s}")
            if check_positivity and np.min(u) < 0.0:
                k = int(np.argmin(u))
                raise HeatPositivityError(t_from + s, np.unravel_index(k, u.shape), float(u.flat[k]))
            step_times.append(s)
            sups.append(float(np.max(u)))
            infs.append(float(np.min(u)))
        times.append(mark)
        snaps.append(u.copy())
    return HeatRun(
        t_from=float(t_from),
        times=np.array(times),
        snapshots=snaps,
        step_times=np.array(step_times),
        sup_series=np.array(sups),
        inf_series=np.array(infs),
        n=grid.n,
    )


def shifted_solutions(trajectory: Trajectory, m: int):
    """Initial data of ``v_m = sup u(m-1) - u`` and ``w_m = u - inf u(m-1)`` with ``u = phi_t``."""
    u = trajectory.phit_at(m - 1.0)
    return float(np.max(u)) - u, u - float(np.min(u))


# --- Harnack inequality ---------------------------------------------------------


@dataclass
class HarnackCheck:
    eps: float
    alpha: float
    t1: float
    t2: float
    lhs: float
    inf_t2: float
    time_factor: float
    rhs_core: float
    exp_weight: float
    implied_C: float

    def to_csv_line(self) -> str:
        return ",".join(repr(float(v)) for v in asdict(self).values())

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in fields(HarnackCheck))


def harnack_parameters_valid(eps, alpha, t1, t2) -> None:
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 1/2), got {eps}")
    if not alpha > 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if not t2 > t1 > 0.0:
        raise ValueError(f"need t2 > t1 > 0, got t1={t1}, t2={t2}")


def harnack_time_factor(n, eps, alpha, t1, t2) -> float:
    """``(t2 / t1)^(n alpha / (1 - eps))``."""
    return (t2 / t1) ** (n * alpha / (1.0 - eps))


def harnack_check(run: HeatRun, eps=1.0 / 3.0, alpha=2.0, t1=0.5, t2=1.0) -> HarnackCheck:
    """Smallest ``C >= 0`` making the Harnack inequality hold for this solution.

    ``sup u(t1) <= inf u(t2) (t2/t1)^(n alpha/(1-eps))
    exp(C [alpha/(t2-t1) + (t2-t1) alpha^2 / (eps (alpha-1))])``.
    """
    harnack_parameters_valid(eps, alpha, t1, t2)
    u1, u2 = run.at(t1), run.at(t2)
    lhs, low = float(np.max(u1)), float(np.min(u2))
    if not (np.min(u1) > 0 and low > 0):
        raise ValueError("Harnack check needs u > 0 at t1 and t2")
    factor = harnack_time_factor(run.n, eps, alpha, t1, t2)
    rhs_core = low * factor
    weight = alpha / (t2 - t1) + (t2 - t1) * alpha ** 2 / (eps * (alpha - 1.0))
    implied = max(0.0, math.log(lhs / rhs_core) / weight)
    return HarnackCheck(eps, alpha, t1, t2, lhs, low, factor, rhs_core, weight, implied)


def harnack_G(run: HeatRun, alpha: float, t_rel: float, trajectory: Trajectory, model):
    """``G = t (|df|^2_gtilde - alpha df/dt)`` with ``f = log u``; returns ``(G, sup G)``.

    ``df/dt`` is a centred difference of the neighbouring stored snapshots.
    """
    k = int(np.argmin(np.abs(run.times - t_rel)))
    if abs(run.times[k] - t_rel) > 1e-9 or k == 0 or k == len(run.times) - 1:
        raise KeyError(f"t={t_rel} is not an interior recorded time")
    u = run.snapshots[k]
    if np.min(u) <= 0:
        raise ValueError("G needs u > 0")
    f = np.log(u)
    f_t = (np.log(run.snapshots[k + 1]) - np.log(run.snapshots[k - 1])) / (run.times[k + 1] - run.times[k - 1])
    Gt, _ = g_tilde(trajectory.phi_at(run.t_from + t_rel), model)
    G = t_rel * (gradient_norm_sq(f, model, metric=Gt) - alpha * f_t)
    return G, float(np.max(G))


def gradient_estimate_constant(run: HeatRun, alpha, eps, trajectory, model, times=None):
    """Fit the constant of ``|df|^2 - alpha f_t <= C a^3/(eps(a-1)) + n a^2/((1-eps) t)``.

    Returns ``(C, times, sup values of G/t)``; ``C`` is the smallest
    nonnegative value making the bound hold at every sampled time.
    """
    if times is None:
        # centred differences need strictly positive neighbours
        pos = [bool(np.min(s) > 0) for s in run.snapshots]
        times = [run.times[k] for k in range(1, len(run.times) - 1) if pos[k - 1] and pos[k] and pos[k + 1]]
    n = model.n
    vals, C = [], 0.0
    for t in times:
        _, gsup = harnack_G(run, alpha, t, trajectory, model)
        q = gsup / t
        vals.append(q)
        C = max(C, (q - n * alpha ** 2 / ((1.0 - eps) * t)) * eps * (alpha - 1.0) / alpha ** 3)
    return C, np.asarray(times), np.asarray(vals)


# --- decay and contraction ------------------------------------------------------


class InsufficientDataError(ValueError):
    pass


@dataclass
class DecayFit:
    C: float
    eta: float
    r_squared: float
    t_start: float
    t_end: float
    rows_used: int

    def to_csv_line(self) -> str:
        return ",".join(repr(float(v)) for v in asdict(self).values())

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in fields(DecayFit))


def fit_decay(t, theta, window=None, min_rows: int = 10) -> DecayFit:
    """Least-squares line through ``(t, log theta)``; ``eta = -slope``."""
    t = np.asarray(t, dtype=float)
    theta = np.asarray(theta, dtype=float)
    scale = float(np.max(np.abs(theta))) if theta.size else 0.0
    mask = theta > 10.0 * np.finfo(float).eps * scale
    if window is not None:
        mask &= (t >= window[0]) & (t <= window[1])
    if np.count_nonzero(mask) < min_rows:
        raise InsufficientDataError(f"{np.count_nonzero(mask)} usable rows, need {min_rows}")
    x, y = t[mask], np.log(theta[mask])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(math.exp(intercept)), float(-slope), r2, float(x[0]), float(x[-1]), int(x.size))


@dataclass
class ContractionCheck:
    ms: list
    kappas: list
    kappa_max: float
    vacuous: bool

    @property
    def passed(self) -> bool:
        return self.vacuous or self.kappa_max < 1.0


def _theta_at(t, theta, s):
    """Log-linear interpolation of a positive series (exact for exponentials)."""
    k = int(np.searchsorted(t, s))
    if k < len(t) and abs(t[k] - s) < 1e-12:
        return theta[k]
    if k == 0 or k >= len(t):
        raise ValueError(f"t={s} outside series")
    t0, t1 = t[k - 1], t[k]
    th0, th1 = theta[k - 1], theta[k]
    if th0 <= 0 or th1 <= 0:
        return th0 + (th1 - th0) * (s - t0) / (t1 - t0)
    w = (s - t0) / (t1 - t0)
    return math.exp((1 - w) * math.log(th0) + w * math.log(th1))


def contraction_check(t, theta, floor: float = 1e-13) -> ContractionCheck:
    """Ratios ``theta(m) / theta(m - 1)`` at integer times while above ``floor``."""
    t = np.asarray(t, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if float(np.max(np.abs(theta), initial=0.0)) == 0.0:
        return ContractionCheck([], [], 0.0, True)
    ms, kappas = [], []
    m = max(1, int(math.ceil(t[0])) + 1)
    while m <= t[-1] + 1e-12:
        prev, cur = _theta_at(t, theta, m - 1.0), _theta_at(t, theta, float(m))
        if prev <= floor or cur <= floor:
            break
        ms.append(m)
        kappas.append(cur / prev)
        m += 1
    if not kappas:
        return ContractionCheck([], [], 0.0, True)
    return ContractionCheck(ms, kappas, float(max(kappas)), False)
