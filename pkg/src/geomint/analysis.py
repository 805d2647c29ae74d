"""Diagnostics turning steppers and trajectories into measured quantities.

Stability spectra of the linear test equation, finite-difference
symplecticity defects, convergence exponents, windowed multiplier estimates,
penalty scaling scans, oxygen-oxygen distance histograms and energy drift.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .core import ConfigurationError, ConstraintSet, PhaseState, Trajectory
from .integrators import IntegratorConfig, Step, StepError, as_stepper, run_trajectory


# ---------------------------------------------------------------------------
# parallel helper
# ---------------------------------------------------------------------------

_TASK = None


def _call_task(i):
    fn, items = _TASK
    return fn(items[i])


def parallel_map(fn, items, jobs=1):
    """``[fn(x) for x in items]`` over up to ``jobs`` forked worker processes.

    Closures are fine because workers inherit them by fork; only results are
    pickled.  Falls back to a serial loop when ``jobs <= 1`` or fork is
    unavailable.
    """
    global _TASK
    items = list(items)
    jobs = min(int(jobs or 1), len(items))
    if jobs <= 1 or "fork" not in multiprocessing.get_all_start_methods():
        return [fn(x) for x in items]
    _TASK = (fn, items)
    try:
        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            return pool.map(_call_task, range(len(items)))
    finally:
        _TASK = None


# ---------------------------------------------------------------------------
# linear stability
# ---------------------------------------------------------------------------

def _alpha(M, K, beta, h):
    return K / (M + K * beta * h * h)


def update_matrix(M, K, beta, h) -> np.ndarray:
    """SyLiPN one-step matrix on (x, v) for V = K x^2 / 2."""
    a = _alpha(M, K, beta, h)
    d = 1.0 - 0.5 * a * h * h
    return np.array([[d, h], [a * h * (0.25 * a * h * h - 1.0), d]])


def linear_stability_spectrum(M, K, beta, h):
    """Moduli of the two eigenvalues of :func:`update_matrix` from the closed form.

    lambda = (2 - alpha h^2 +- h sqrt(alpha^2 h^2 - 4 alpha)) / 2 with
    alpha = K / (M + K beta h^2).  Broadcasts over array arguments.
    """
    M, K, beta, h = (np.asarray(x, dtype=float) for x in (M, K, beta, h))
    a = _alpha(M, K, beta, h)
    root = np.sqrt((a * a * h * h - 4.0 * a).astype(complex))
    lam1 = 0.5 * (2.0 - a * h * h + h * root)
    lam2 = 0.5 * (2.0 - a * h * h - h * root)
    return np.abs(lam1), np.abs(lam2)


class HarmonicBoundedness(NamedTuple):
    bounded: np.ndarray
    max_ratio: np.ndarray


def harmonic_sylipn_boundedness(M, K, beta, h, n_steps, x0=1.0, v0=0.0,
                                tol=1e-9) -> HarmonicBoundedness:
    """Run SyLiPN on V = K x^2 / 2 for a whole grid at once.

    The scheme is stepped elementwise (broadcasting over M, K, beta, h).
    Boundedness is judged against the initial amplitude: the half-axes
    of the ellipse through (x0, v0) on which the exact discrete flow lies
    when both eigenvalues have modulus one.  For unstable cells the
    reference is the circle of radius |(x0, v0)|.  ``max_ratio`` is the
    largest |x_k| / x_amp or |v_k| / v_amp seen.
    """
    M, K, beta, h = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (M, K, beta, h)))
    a_coef = K / (M + K * beta * h * h)
    x = np.full(M.shape, float(x0))
    v = np.full(M.shape, float(v0))
    c = a_coef * h * (0.25 * a_coef * h * h - 1.0)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        q0 = -c * x * x + h * v * v
        elliptic = (c < 0) & (q0 > 0)
        x_amp = np.where(elliptic, np.sqrt(q0 / np.where(c < 0, -c, 1.0)), math.hypot(x0, v0))
        v_amp = np.where(elliptic, np.sqrt(q0 / h), math.hypot(x0, v0))
    x_amp = np.where(x_amp > 0, x_amp, 1.0)
    v_amp = np.where(v_amp > 0, v_amp, 1.0)
    acc = -a_coef * x
    worst = np.maximum(np.abs(x) / x_amp, np.abs(v) / v_amp)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(int(n_steps)):
            x = x + h * v + 0.5 * h * h * acc
            acc_new = -a_coef * x
            v = v + 0.5 * h * (acc + acc_new)
            acc = acc_new
            worst = np.fmax(worst, np.maximum(np.abs(x) / x_amp, np.abs(v) / v_amp))
    worst = np.where(np.isfinite(worst), worst, np.inf)
    return HarmonicBoundedness(worst <= 1.0 + tol, worst)


# ---------------------------------------------------------------------------
# symplecticity
# ---------------------------------------------------------------------------

def _as_map(stepper, system, cfg):
    if cfg is not None:
        step = as_stepper(stepper, system, cfg)
    else:
        step = stepper

    def F(state):
        out = step(state)
        return out.state if isinstance(out, Step) else out
    return F


def symplecticity_defect(stepper, system, state: PhaseState,
                         cfg: Optional[IntegratorConfig] = None, fd_step=None) -> float:
    """||D^T J D - J||_F for the one-step map in (q, p = M v) coordinates.

    ``stepper`` is anything :func:`as_stepper` accepts when ``cfg`` is given,
    otherwise a callable ``state -> PhaseState | Step``.  D is built by central
    differences with steps ``fd_step`` (default 1e-5 (1 + |z_i|)).  The map is
    applied to fresh states, so multistep registers are recomputed.
    """
    F = _as_map(stepper, system, cfg)
    n = state.dof
    mass = system.mass if system is not None else None

    def to_p(v):
        return v if mass is None else mass.apply(v)

    def to_v(p):
        return p if mass is None else mass.solve(p)

    z0 = np.concatenate([state.q, to_p(state.v)])
    if fd_step is None:
        steps = 1e-5 * (1.0 + np.abs(z0))
    else:
        steps = np.broadcast_to(np.asarray(fd_step, dtype=float), z0.shape)

    def image(z):
        out = F(PhaseState(z[:n], to_v(z[n:]), state.t))
        return np.concatenate([out.q, to_p(out.v)])

    D = np.empty((2 * n, 2 * n))
    for j in range(2 * n):
        e = np.zeros(2 * n)
        e[j] = steps[j]
        D[:, j] = (image(z0 + e) - image(z0 - e)) / (2.0 * steps[j])
    J = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    return float(np.linalg.norm(D.T @ J @ D - J))


# ---------------------------------------------------------------------------
# convergence
# ---------------------------------------------------------------------------

def local_exponents(errors_h, errors_alpha_h, alpha):
    """p = log_alpha(error(alpha h) / error(h)); NaN where either error is not positive."""
    e1 = np.asarray(errors_h, dtype=float)
    e2 = np.asarray(errors_alpha_h, dtype=float)
    out = np.full(e1.shape, np.nan)
    ok = (e1 > 0) & (e2 > 0)
    out[ok] = np.log(e2[ok] / e1[ok]) / math.log(alpha)
    return out


def fit_power_law(h, errors):
    """Least-squares fit of log error = log C + p log h.  Returns (p, C)."""
    h = np.asarray(h, dtype=float)
    e = np.asarray(errors, dtype=float)
    ok = e > 0
    if ok.sum() < 2:
        raise ConfigurationError("need at least two positive errors to fit a power law")
    p, logc = np.polyfit(np.log(h[ok]), np.log(e[ok]), 1)
    return float(p), float(math.exp(logc))


@dataclass
class ConvergenceReport:
    """Errors on the grid h and at alpha h, the pairwise exponents and a global fit."""

    h: np.ndarray
    error: np.ndarray
    error_alpha: np.ndarray
    exponent: np.ndarray
    alpha: float
    order: float
    constant: float

    def rows(self):
        for k in range(self.h.size):
            p = self.exponent[k]
            yield self.h[k], self.error[k], None if np.isnan(p) else float(p)


def hermite_interpolator(traj: Trajectory):
    """Cubic Hermite interpolation of a recorded trajectory using q and v.

    Only valid for trajectories whose v is the time derivative of q.
    """
    t = traj.t

    def at(s) -> PhaseState:
        s = float(s)
        if s < t[0] - 1e-12 or s > t[-1] + 1e-12:
            raise ConfigurationError(f"time {s} outside reference span [{t[0]}, {t[-1]}]")
        k = int(np.clip(np.searchsorted(t, s, side="right") - 1, 0, t.size - 2))
        dt = t[k + 1] - t[k]
        u = (s - t[k]) / dt
        q0, q1, v0, v1 = traj.q[k], traj.q[k + 1], traj.v[k], traj.v[k + 1]
        h00 = 2 * u ** 3 - 3 * u ** 2 + 1
        h10 = u ** 3 - 2 * u ** 2 + u
        h01 = -2 * u ** 3 + 3 * u ** 2
        h11 = u ** 3 - u ** 2
        q = h00 * q0 + h10 * dt * v0 + h01 * q1 + h11 * dt * v1
        d00 = (6 * u ** 2 - 6 * u) / dt
        d10 = 3 * u ** 2 - 4 * u + 1
        d01 = (-6 * u ** 2 + 6 * u) / dt
        d11 = 3 * u ** 2 - 2 * u
        v = d00 * q0 + d10 * v0 + d01 * q1 + d11 * v1
        return PhaseState(q, v, s)
    return at


def trajectory_error(traj: Trajectory, reference, n_samples: Optional[int] = None) -> float:
    """Max over sampled times of the phase-space sup-norm distance to ``reference``.

    ``reference`` is a callable ``t -> PhaseState``.  ``n_samples`` limits the
    comparison to about that many evenly spaced records (always including the
    last); ``None`` compares every record.
    """
    idx = np.arange(len(traj))
    if n_samples is not None and n_samples < idx.size:
        idx = np.unique(np.round(np.linspace(0, idx.size - 1, max(n_samples, 1))).astype(int))
    err = 0.0
    for k in idx:
        ref = reference(traj.t[k])
        err = max(err, float(np.max(np.abs(traj.q[k] - ref.q))),
                  float(np.max(np.abs(traj.v[k] - ref.v))))
    return err


def convergence_scan(stepper, system, reference, h_grid: Sequence[float], alpha: float,
                     t_end: float, initial: PhaseState,
                     cfg_factory: Optional[Callable[[float], IntegratorConfig]] = None,
                     n_samples: Optional[int] = 20, jobs: int = 1) -> ConvergenceReport:
    """Errors of ``stepper`` at each h and alpha h against ``reference``.

    ``reference`` is a :class:`Trajectory` (interpolated) or a callable
    ``t -> PhaseState``.  Each run takes floor(t_end / h) steps of exactly h
    and is compared at its own sample times, so no step size is rounded.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError("alpha must lie in (0, 1)")
    if isinstance(reference, Trajectory):
        reference = hermite_interpolator(reference)
    cfg_factory = cfg_factory or (lambda h: IntegratorConfig(h=h))
    h_grid = np.asarray(h_grid, dtype=float)
    span = t_end - initial.t

    def error_for(h):
        cfg = cfg_factory(h)
        n = int(math.floor(span / h + 1e-9))
        if n < 1:
            raise ConfigurationError(f"h = {h} exceeds the integration span")
        stride = max(1, n // n_samples) if n_samples else 1
        n -= n % stride
        traj = run_trajectory(stepper, system, initial, initial.t + n * h, cfg, stride)
        return trajectory_error(traj, reference)

    hs = np.concatenate([h_grid, alpha * h_grid])
    errs = np.asarray(parallel_map(error_for, hs, jobs))
    e_h, e_ah = errs[:h_grid.size], errs[h_grid.size:]
    p, C = fit_power_law(hs, errs)
    return ConvergenceReport(h_grid, e_h, e_ah, local_exponents(e_h, e_ah, alpha), alpha, p, C)


# ---------------------------------------------------------------------------
# equivalent multiplier
# ---------------------------------------------------------------------------

@dataclass
class MultiplierSeries:
    t: np.ndarray
    value: np.ndarray
    window: float
    spacing: float


def equivalent_multiplier(traj: Trajectory, constraints: ConstraintSet, omega: float,
                          window_T: float = 0.2, spacing: Optional[float] = None,
                          n_window_samples: int = 3, stride: int = 1,
                          centered: bool = False) -> MultiplierSeries:
    """lambda(t) ~ -(1/n) sum_j omega^2 g(q(s_j)) over s_j in [t, t + window_T].

    The samples s_j are t, t + spacing, ..., t + window_T.  ``centered=True``
    shifts the window to [t - window_T / 2, t + window_T / 2], which removes
    the first-order lag of the forward window.  ``spacing=None``
    uses every recorded state; otherwise it must be a whole multiple of the
    record interval.  Estimates are emitted at every ``stride``-th record
    whose window fits inside the trajectory.
    """
    dt = traj.h * traj.stride
    if spacing is None:
        every = 1
    else:
        every = int(round(spacing / dt))
        if every < 1 or abs(every * dt - spacing) > 1e-9 * max(1.0, spacing):
            raise ConfigurationError(
                f"window spacing {spacing} is not a multiple of the record interval {dt}")
    per_window = int(math.floor(window_T / dt + 1e-9))
    n_samples = per_window // every + 1
    if n_samples < n_window_samples:
        raise ConfigurationError(
            f"window of {window_T} holds {n_samples} samples at interval {dt * every}; "
            f"need {n_window_samples}")
    G = np.array([constraints.g(q) for q in traj.q])
    starts = np.arange(0, len(traj) - per_window, stride)
    if starts.size == 0:
        raise ConfigurationError("trajectory shorter than one averaging window")
    offsets = np.arange(0, per_window + 1, every)
    vals = -(omega ** 2) * G[starts[:, None] + offsets[None, :]].mean(axis=1)
    times = traj.t[starts]
    if centered:
        if per_window % 2:
            raise ConfigurationError("a centred window needs an even number of record intervals")
        times = traj.t[starts + per_window // 2]
    return MultiplierSeries(times, vals, window_T, dt * every)


def multiplier_relative_error(estimate: MultiplierSeries, reference_t, reference_value,
                              t_max: Optional[float] = None) -> float:
    """sup |estimate - reference| / sup |reference| over common times up to t_max."""
    ref_t = np.asarray(reference_t, dtype=float)
    ref_v = np.asarray(reference_value, dtype=float)
    pos = np.searchsorted(ref_t, estimate.t)
    pos = np.clip(pos, 0, ref_t.size - 1)
    match = np.abs(ref_t[pos] - estimate.t) <= 1e-9 * max(1.0, float(ref_t[-1]))
    if t_max is not None:
        match &= estimate.t <= t_max + 1e-12
    if not np.any(match):
        raise ConfigurationError("no common sample times")
    a = estimate.value[match]
    b = ref_v[pos[match]]
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


# ---------------------------------------------------------------------------
# penalty scaling
# ---------------------------------------------------------------------------

class ScalingRow(NamedTuple):
    omega: float
    scaled_violation: float


def constraint_scaling_scan(system_builder: Callable[[float], object], omega_grid,
                            stepper, h: float, T: float, initial: PhaseState,
                            beta: float = 0.4, jobs: int = 1):
    """Rows (omega, omega^2 ||g(q(T))||) from one run per omega.

    ``system_builder(omega)`` returns a penalty system carrying its constraints.
    """
    def one(omega):
        system = system_builder(omega)
        cfg = IntegratorConfig(h=h, beta=beta)
        n = int(round((T - initial.t) / h))
        try:
            traj = run_trajectory(stepper, system, initial, T, cfg, record_stride=max(n, 1))
        except StepError as exc:
            raise StepError(f"omega = {omega}: {exc}", exc.step_index) from exc
        return ScalingRow(float(omega), float(omega ** 2 * traj.g_norm[-1]))

    return parallel_map(one, list(omega_grid), jobs)


# ---------------------------------------------------------------------------
# oxygen-oxygen distances
# ---------------------------------------------------------------------------

OXYGEN_INDEX = 1  # atom order per molecule is H, O, H


def oxygen_distances(q, n_molecules) -> np.ndarray:
    """All pairwise oxygen-oxygen distances of one configuration."""
    P = np.asarray(q, dtype=float).reshape(n_molecules, 3, 3)[:, OXYGEN_INDEX, :]
    i, j = np.triu_indices(n_molecules, 1)
    return np.linalg.norm(P[i] - P[j], axis=1)


@dataclass
class RadialHistogram:
    edges: np.ndarray
    mass: np.ndarray
    n_distances: int

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def bin_width(self):
        return float(self.edges[1] - self.edges[0])

    def first_peak(self, smooth_bins: int = 5, min_height: float = 0.5) -> float:
        """Centre of the smallest-r local maximum reaching ``min_height`` of the tallest one.

        The histogram is smoothed by a centred moving average first.
        """
        if smooth_bins > 1:
            kernel = np.ones(smooth_bins) / smooth_bins
            y = np.convolve(self.mass, kernel, mode="same")
        else:
            y = self.mass
        top = y.max()
        left = np.concatenate([[-np.inf], y[:-1]])
        right = np.concatenate([y[1:], [-np.inf]])
        peaks = np.flatnonzero((y >= left) & (y >= right) & (y >= min_height * top))
        return float(self.centers[peaks[0]])


def _pooled_distances(traj, n_molecules, t_min):
    sel = traj.q[traj.t >= t_min - 1e-12]
    if sel.shape[0] == 0 or n_molecules < 2:
        raise ConfigurationError("no oxygen-oxygen distances to histogram")
    return np.concatenate([oxygen_distances(q, n_molecules) for q in sel])


def oo_radial_histogram(traj: Trajectory, n_molecules: int, t_min: float = 0.0,
                        bins: int = 5000, r_max: Optional[float] = None) -> RadialHistogram:
    """Histogram of pooled O-O distances for samples with t >= t_min, unit total mass.

    ``r_max`` defaults to the largest observed distance.
    """
    d = _pooled_distances(traj, n_molecules, t_min)
    top = float(d.max()) if r_max is None else float(r_max)
    counts, edges = np.histogram(d, bins=bins, range=(0.0, top * (1 + 1e-12)))
    return RadialHistogram(edges, counts / d.size, d.size)


def paired_radial_histograms(trajs: Sequence[Trajectory], n_molecules: int, t_min: float,
                             bins: int = 5000):
    """Histograms of several runs on a shared range so bins line up."""
    r_max = max(float(_pooled_distances(t, n_molecules, t_min).max()) for t in trajs)
    return [oo_radial_histogram(t, n_molecules, t_min, bins, r_max) for t in trajs]


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

class EnergyDrift(NamedTuple):
    max_abs_error: float
    slope: float


def energy_drift(traj: Trajectory) -> EnergyDrift:
    """Sup deviation of energy from its initial value and the least-squares slope."""
    E = np.asarray(traj.energy, dtype=float)
    dev = float(np.max(np.abs(E - E[0])))
    if E.size < 2 or np.ptp(traj.t) == 0:
        return EnergyDrift(dev, 0.0)
    slope = float(np.polyfit(traj.t, E, 1)[0])
    return EnergyDrift(dev, slope)


def trend_within_noise(traj: Trajectory, n_sigma: float = 3.0) -> bool:
    """True when the fitted linear change over the run is within n_sigma of the residual spread."""
    E = np.asarray(traj.energy, dtype=float)
    slope, icpt = np.polyfit(traj.t, E, 1)
    resid = E - (slope * traj.t + icpt)
    return bool(abs(slope) * np.ptp(traj.t) <= n_sigma * np.std(resid))
