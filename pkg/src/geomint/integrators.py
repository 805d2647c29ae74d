"""One-step maps for the Newmark family, SyLiPN, SHAKE and the Langevin composition.

Every stepper returns a :class:`Step`.  Newmark-type schemes carry an
acceleration register: ``accel`` passed in is the scheme's acceleration at
``state.q`` (recomputed when ``None``) and the returned ``Step.accel`` is the
one at the new position, ready to be fed to the next call.  SHAKE uses the
same slot for the previous position q_{k-1}, which its backward-difference
velocity already determines; the register only separates the first step,
whose velocity is a true velocity, from the later ones.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .core import (ConfigurationError, ConstraintSet, PhaseState, StiffSplitSystem,
                   Trajectory, total_energy)
from .solvers import (DEFAULT_TOL, SolverError, newton_solve, solve_block_diagonal,
                      solve_symmetric)
from .stochastic import RngStream, gaussian_vector


class StepError(RuntimeError):
    """A step failed; ``step_index`` is set by :func:`run_trajectory`."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


@dataclass(frozen=True)
class IntegratorConfig:
    h: float
    beta: float = 0.4
    tol_x: float = DEFAULT_TOL
    tol_f: float = DEFAULT_TOL
    max_iter: int = 50
    stiff_only_hessian: bool = False
    drift_warning: float = 1e-6

    gamma_newmark = 0.5

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigurationError(f"h must be positive, got {self.h}")
        if not self.beta >= 0:
            raise ConfigurationError(f"beta must be non-negative, got {self.beta}")


@dataclass(frozen=True)
class LangevinConfig:
    friction: float
    inv_temperature: float
    seed: int = 0

    def __post_init__(self):
        if not self.friction >= 0:
            raise ConfigurationError("friction must be non-negative")
        if not self.inv_temperature > 0:
            raise ConfigurationError("inv_temperature must be positive")


class Step(NamedTuple):
    """Result of one step.

    ``accel`` is the register for the next call (the previous position for
    SHAKE).  ``position`` is the physical configuration when the integrator state is a
    shifted variable (push-forward schemes: q = x + beta h^2 a); otherwise None.
    """

    state: PhaseState
    accel: Optional[np.ndarray] = None
    iterations: int = 0
    linear_solves: int = 0
    multiplier: Optional[np.ndarray] = None
    position: Optional[np.ndarray] = None


def _advance(state, q, v, h):
    return PhaseState(q, v, state.t + h)


# ---------------------------------------------------------------------------
# explicit
# ---------------------------------------------------------------------------

def velocity_verlet_step(system, state, cfg, accel=None) -> Step:
    h = cfg.h
    a = system.acceleration(state.q) if accel is None else accel
    q = state.q + h * state.v + 0.5 * h * h * a
    a_new = system.acceleration(q)
    v = state.v + 0.5 * h * (a + a_new)
    return Step(_advance(state, q, v, h), a_new)


# ---------------------------------------------------------------------------
# Newmark, gamma = 1/2
# ---------------------------------------------------------------------------

def _newmark_residual(system, state, a_k, cfg):
    h, beta = cfg.h, cfg.beta
    base = state.q + h * state.v + 0.5 * h * h * (1.0 - 2.0 * beta) * a_k
    M = system.mass

    def residual(q):
        return q - base - h * h * beta * system.acceleration(q)

    def jacobian(q):
        return np.eye(q.size) + h * h * beta * M.solve(system.hessian(q))

    return residual, jacobian


def _newmark_finish(system, state, a_k, q, cfg, iterations, solves):
    h = cfg.h
    a_new = system.acceleration(q)
    v = state.v + 0.5 * h * (a_k + a_new)
    return Step(_advance(state, q, v, h), a_new, iterations, solves)


def newmark_step(system, state, prev_accel, cfg) -> Step:
    """Implicit Newmark (gamma = 1/2), nonlinear position equation solved by Newton.

    ``prev_accel`` must be -M^-1 grad V(q_k); ``None`` recomputes it.
    """
    h = cfg.h
    a_k = system.acceleration(state.q) if prev_accel is None else prev_accel
    residual, jacobian = _newmark_residual(system, state, a_k, cfg)
    guess = state.q + h * state.v + 0.5 * h * h * a_k
    rep = newton_solve(residual, jacobian, guess, cfg.tol_x, cfg.tol_f, cfg.max_iter)
    if not rep.converged:
        raise StepError(f"Newmark Newton iteration did not converge "
                        f"(residual {rep.final_residual:.3e})")
    return _newmark_finish(system, state, a_k, rep.solution, cfg, rep.iterations,
                           rep.iterations)


def linearized_newmark_step(system, state, prev_accel, cfg) -> Step:
    """Newmark with the Newton loop cut after exactly one iteration."""
    h = cfg.h
    a_k = system.acceleration(state.q) if prev_accel is None else prev_accel
    residual, jacobian = _newmark_residual(system, state, a_k, cfg)
    guess = state.q + h * state.v + 0.5 * h * h * a_k
    q = guess - np.linalg.solve(jacobian(guess), residual(guess))
    return _newmark_finish(system, state, a_k, q, cfg, 1, 1)


# ---------------------------------------------------------------------------
# push-forward Newmark and SyLiPN
# ---------------------------------------------------------------------------

def _pushforward_accel(system, x, guess, cfg):
    """Solve M a + grad V(x + beta h^2 a) = 0 for a."""
    s = cfg.beta * cfg.h * cfg.h
    M = system.mass

    def residual(a):
        return M.apply(a) + system.gradient(x + s * a)

    def jacobian(a):
        return M.add_to(s * system.hessian(x + s * a))

    if guess is None:
        guess = system.acceleration(x)
    rep = newton_solve(residual, jacobian, guess, cfg.tol_x, cfg.tol_f, cfg.max_iter)
    if not rep.converged:
        raise StepError(f"push-forward Newmark Newton iteration did not converge "
                        f"(residual {rep.final_residual:.3e})")
    return rep.solution, rep.iterations


def pushforward_newmark_step(system, state, cfg, accel=None) -> Step:
    h = cfg.h
    iters = 0
    if accel is None:
        accel, iters = _pushforward_accel(system, state.q, None, cfg)
    q = state.q + h * state.v + 0.5 * h * h * accel
    a_new, it = _pushforward_accel(system, q, accel, cfg)
    v = state.v + 0.5 * h * (accel + a_new)
    return Step(_advance(state, q, v, h), a_new, iters + it, iters + it,
                position=physical_position(q, a_new, cfg))


def physical_position(x, accel, cfg) -> np.ndarray:
    """Newmark configuration q = x + beta h^2 a behind a push-forward state x."""
    return x + cfg.beta * cfg.h * cfg.h * accel


def sylipn_accel(system, x, cfg) -> np.ndarray:
    """a = -(M + beta h^2 Hess V(x))^-1 grad V(x), one symmetric linear solve.

    With ``cfg.stiff_only_hessian`` and a stiff split system only the stiff
    Hessian enters the coefficient matrix; block-diagonal stiff Hessians on a
    diagonal mass matrix are solved block by block.
    """
    s = cfg.beta * cfg.h * cfg.h
    M = system.mass
    grad = system.gradient(x)
    if cfg.stiff_only_hessian and isinstance(system, StiffSplitSystem):
        stiff = system.stiff
        if stiff.hessian_blocks is not None and M.is_diagonal:
            blocks = (s * system.inv_eps) * stiff.hessian_blocks(x)
            nb, bs, _ = blocks.shape
            d = M.diagonal.reshape(nb, bs)
            idx = np.arange(bs)
            blocks[:, idx, idx] += d
            return -solve_block_diagonal(blocks, grad)
        A = M.add_to(s * system.stiff_hessian(x))
    else:
        A = M.add_to(s * system.hessian(x))
    try:
        return -solve_symmetric(A, grad).solution
    except SolverError as exc:
        raise StepError(f"SyLiPN coefficient matrix is singular: {exc}") from exc


def sylipn_step(system, state, cfg, accel=None) -> Step:
    h = cfg.h
    solves = 0
    if accel is None:
        accel = sylipn_accel(system, state.q, cfg)
        solves += 1
    q = state.q + h * state.v + 0.5 * h * h * accel
    a_new = sylipn_accel(system, q, cfg)
    v = state.v + 0.5 * h * (accel + a_new)
    return Step(_advance(state, q, v, h), a_new, 0, solves + 1,
                position=physical_position(q, a_new, cfg))


# ---------------------------------------------------------------------------
# SHAKE
# ---------------------------------------------------------------------------

class ShakeResult(NamedTuple):
    q: np.ndarray
    multiplier: np.ndarray
    iterations: int


def shake_step(system, constraints: ConstraintSet, q_k, q_km1, cfg) -> ShakeResult:
    """q_{k+1} = 2 q_k - q_{k-1} - h^2 M^-1 grad V(q_k) + h^2 M^-1 grad g(q_k)^T lambda.

    The multiplier is solved (scaled by h^2) so that g(q_{k+1}) = 0, and
    reported unscaled, i.e. as the force coefficient of M q'' = -grad V + lambda^T grad g.
    """
    h2 = cfg.h * cfg.h
    M = system.mass
    q_free = 2.0 * q_k - q_km1 - h2 * M.solve(system.gradient(q_k))
    G = M.solve(constraints.jacobian(q_k).T)
    if G.ndim == 1:
        G = G[:, None]

    def residual(mu):
        return constraints.g(q_free + G @ mu)

    def jacobian(mu):
        return constraints.jacobian(q_free + G @ mu) @ G

    rep = newton_solve(residual, jacobian, np.zeros(constraints.m), cfg.tol_x, cfg.tol_f,
                       cfg.max_iter)
    if not rep.converged:
        raise StepError(f"SHAKE multiplier iteration did not converge "
                        f"(residual {rep.final_residual:.3e})")
    q_new = q_free + G @ rep.solution
    drift = np.max(np.abs(constraints.g(q_new)))
    if drift > cfg.drift_warning:
        warnings.warn(f"SHAKE constraint drift {drift:.2e}", RuntimeWarning, stacklevel=2)
    return ShakeResult(q_new, rep.solution / h2, rep.iterations)


def constrained_acceleration(system, constraints, state) -> np.ndarray:
    """a = M^-1 (-grad V + J^T lambda) with lambda chosen so that d^2 g / dt^2 = 0."""
    q, v = state.q, state.v
    M = system.mass
    J = np.atleast_2d(constraints.jacobian(q))
    curv = np.array([v @ constraints.curvature(q, e) @ v for e in np.eye(constraints.m)])
    free = M.solve(-system.gradient(q))
    G = np.atleast_2d(M.solve(J.T).T).T
    lam = np.linalg.solve(J @ G, -(J @ free) - curv)
    return free + G @ lam


def shake_state_step(system, constraints, state, cfg, previous=None) -> Step:
    """SHAKE on phase states whose velocity is the backward difference (q_k - q_{k-1}) / h.

    ``previous`` is q_{k-1}.  Without it the step starts from a true velocity
    and sets q_{-1} = q0 - h v0 + h^2/2 a0 with a0 the constrained
    acceleration.  The returned register (``accel`` slot) holds q_k.
    """
    h = cfg.h
    if previous is None:
        a0 = constrained_acceleration(system, constraints, state)
        q_km1 = state.q - h * state.v + 0.5 * h * h * a0
    else:
        q_km1 = previous
    res = shake_step(system, constraints, state.q, q_km1, cfg)
    v = (res.q - state.q) / h
    return Step(_advance(state, res.q, v, h), state.q, res.iterations, res.iterations,
                res.multiplier)


def _backward_difference_shake(system, constraints, state, cfg):
    res = shake_step(system, constraints, state.q, state.q - cfg.h * state.v, cfg)
    v = (res.q - state.q) / cfg.h
    return Step(_advance(state, res.q, v, cfg.h), None, res.iterations, res.iterations,
                res.multiplier)


# ---------------------------------------------------------------------------
# Langevin
# ---------------------------------------------------------------------------

def ou_update(mass, v, h, langevin: LangevinConfig, rng: RngStream) -> np.ndarray:
    """Exact Ornstein-Uhlenbeck flow dp = -gamma M^-1 p dt + sqrt(2 gamma / beta) dW on p = M v."""
    if langevin.friction == 0.0:
        return v
    gam, beta_t = langevin.friction, langevin.inv_temperature
    if mass.is_diagonal:
        m = mass.diagonal
        c = np.exp(-gam * h / m)
        sd = np.sqrt(m / beta_t * (1.0 - c * c))
        p = c * (m * v) + gaussian_vector(rng, v.size, 0.0, sd)
        return p / m
    mu, U = np.linalg.eigh(mass.dense())
    c = np.exp(-gam * h / mu)
    sd = np.sqrt(mu / beta_t * (1.0 - c * c))
    p_t = c * (U.T @ mass.apply(v)) + gaussian_vector(rng, v.size, 0.0, sd)
    return mass.solve(U @ p_t)


def gla_step(system, state, cfg, langevin, rng, inner: Callable = sylipn_step,
             accel=None, **inner_kwargs) -> Step:
    """OU momentum update followed by one deterministic symplectic step."""
    v = ou_update(system.mass, state.v, cfg.h, langevin, rng)
    return inner(system, PhaseState(state.q, v, state.t), cfg, accel=accel, **inner_kwargs)


# ---------------------------------------------------------------------------
# uniform driver
# ---------------------------------------------------------------------------

INTEGRATORS = ("vv", "newmark", "newmark-lin", "pfn", "sylipn", "sylipn-stiff", "shake",
               "gla-sylipn", "gla-shake")
PENALTY_INTEGRATORS = ("vv", "newmark", "newmark-lin", "pfn", "sylipn", "sylipn-stiff",
                       "gla-sylipn")
CONSTRAINED_INTEGRATORS = ("shake", "gla-shake")
PUSHFORWARD_INTEGRATORS = ("pfn", "sylipn", "sylipn-stiff", "gla-sylipn")


def _bootstrap(name, system, state, cfg):
    if name == "pfn":
        a, it = _pushforward_accel(system, state.q, None, cfg)
        return a, it, it
    if name in PUSHFORWARD_INTEGRATORS:
        return sylipn_accel(system, state.q, cfg), 0, 1
    return None


def _newmark_adapter(fn):
    def step(system, state, cfg, accel=None):
        return fn(system, state, accel, cfg)
    return step


class Stepper:
    """Named integrator bound to a system and configuration.

    Calling it advances one step: ``stepper(state, accel) -> Step``.
    Stochastic steppers own a random stream that :meth:`reset` rewinds.
    """

    def __init__(self, name, system, cfg: IntegratorConfig, constraints=None,
                 langevin: Optional[LangevinConfig] = None):
        if name not in INTEGRATORS:
            raise ConfigurationError(f"unknown integrator {name!r}")
        self.name = name
        self.system = system
        self.cfg = cfg
        self.constraints = constraints if constraints is not None else system.constraints
        self.langevin = langevin
        if name in CONSTRAINED_INTEGRATORS and self.constraints is None:
            raise ConfigurationError(f"{name} needs a constraint set")
        if name.startswith("gla") and langevin is None:
            raise ConfigurationError(f"{name} needs a Langevin configuration")
        if name == "sylipn-stiff":
            if not isinstance(system, StiffSplitSystem):
                raise ConfigurationError("sylipn-stiff needs a stiff split system")
            self.cfg = IntegratorConfig(**{**cfg.__dict__, "stiff_only_hessian": True})
        self.rng = None
        self.reset()

    @property
    def pushforward(self) -> bool:
        return self.name in PUSHFORWARD_INTEGRATORS

    def reset(self):
        if self.langevin is not None:
            self.rng = RngStream(self.langevin.seed)

    def bootstrap(self, state):
        """Acceleration register at ``state`` for push-forward schemes.

        Returns ``(accel, iterations, linear_solves)`` or None when the
        scheme keeps no shifted state.
        """
        return _bootstrap(self.name, self.system, state, self.cfg)

    def __call__(self, state, accel=None) -> Step:
        n, sys_, cfg = self.name, self.system, self.cfg
        if n == "vv":
            return velocity_verlet_step(sys_, state, cfg, accel)
        if n == "newmark":
            return newmark_step(sys_, state, accel, cfg)
        if n == "newmark-lin":
            return linearized_newmark_step(sys_, state, accel, cfg)
        if n == "pfn":
            return pushforward_newmark_step(sys_, state, cfg, accel)
        if n in ("sylipn", "sylipn-stiff"):
            return sylipn_step(sys_, state, cfg, accel)
        if n == "shake":
            return shake_state_step(sys_, self.constraints, state, cfg, accel)
        if n == "gla-sylipn":
            return gla_step(sys_, state, cfg, self.langevin, self.rng, sylipn_step, accel)
        return gla_step(sys_, state, cfg, self.langevin, self.rng,
                        _shake_inner(self.constraints))


def _shake_inner(constraints):
    # the OU kick replaces v, so q_{k-1} is rebuilt from it each step
    def inner(system, state, cfg, accel=None):
        return _backward_difference_shake(system, constraints, state, cfg)
    return inner


_FUNCTION_NAMES = {sylipn_step: "sylipn", pushforward_newmark_step: "pfn"}


class _FunctionStepper:
    def __init__(self, fn, system, cfg):
        self.name = _FUNCTION_NAMES.get(fn)
        if fn in (newmark_step, linearized_newmark_step):
            fn = _newmark_adapter(fn)
        self.fn, self.system, self.cfg = fn, system, cfg

    def bootstrap(self, state):
        return _bootstrap(self.name, self.system, state, self.cfg)

    def reset(self):
        pass

    def __call__(self, state, accel=None):
        return self.fn(self.system, state, self.cfg, accel=accel)


def as_stepper(stepper, system, cfg):
    """Accept a :class:`Stepper`, an integrator name, or a bare step function."""
    if isinstance(stepper, Stepper):
        return stepper
    if isinstance(stepper, str):
        return Stepper(stepper, system, cfg)
    return _FunctionStepper(stepper, system, cfg)


def run_trajectory(stepper, system, initial: PhaseState, t_end: float,
                   cfg: IntegratorConfig, record_stride: int = 1,
                   constraints: Optional[ConstraintSet] = None) -> Trajectory:
    """Step from ``initial`` to ``t_end`` recording every ``record_stride`` steps.

    Recorded times are exactly ``t0 + k * record_stride * h``.  SHAKE
    multipliers are stored in ``extras["multiplier"]`` against the sample time
    at which the corresponding constraint force acts.

    Push-forward schemes record the physical configuration q = x + beta h^2 a
    in ``q`` (energy and constraint norms are evaluated there) and their
    integrator state x in ``extras["x"]``.
    """
    if record_stride < 1:
        raise ConfigurationError("record_stride must be >= 1")
    span = t_end - initial.t
    if span < -1e-12:
        raise ConfigurationError("t_end precedes the initial time")
    h = cfg.h
    n_steps = int(round(span / h))
    if abs(n_steps * h - span) > 1e-9 * max(1.0, abs(t_end)):
        raise ConfigurationError(f"t_end - t0 = {span} is not a multiple of h = {h}")
    step = as_stepper(stepper, system, cfg)
    step.reset()
    constraints = constraints if constraints is not None else getattr(system, "constraints", None)

    n_rec = n_steps // record_stride + 1
    n = system.dof
    T = initial.t + h * record_stride * np.arange(n_rec)
    Q = np.empty((n_rec, n))
    V = np.empty((n_rec, n))
    E = np.empty(n_rec)
    Gn = np.full(n_rec, np.nan)
    iters = np.zeros(n_rec, dtype=int)
    solves = np.zeros(n_rec, dtype=int)
    mult = None
    X = None

    def record(j, s, it, ls, position=None):
        q = s.q if position is None else position
        if position is not None:
            X[j] = s.q
        Q[j], V[j] = q, s.v
        E[j] = total_energy(system, PhaseState(q, s.v))
        if constraints is not None:
            Gn[j] = constraints.norm(q)
        iters[j] = it
        solves[j] = ls

    state = initial
    stats = {"steps": n_steps, "iterations": 0, "linear_solves": 0}
    accel = None
    position = None
    boot = step.bootstrap(state)
    if boot is not None:
        accel, it, ls = boot
        stats["iterations"] += it
        stats["linear_solves"] += ls
        X = np.empty((n_rec, n))
        position = physical_position(state.q, accel, cfg)
    record(0, state, 0, 0, position)
    for k in range(1, n_steps + 1):
        try:
            res = step(state, accel)
        except (StepError, SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
            err = StepError(f"step {k} failed: {exc}", step_index=k)
            raise err from exc
        stats["iterations"] += res.iterations
        stats["linear_solves"] += res.linear_solves
        if res.multiplier is not None and (k - 1) % record_stride == 0:
            if mult is None:
                mult = np.full((n_rec, res.multiplier.size), np.nan)
            mult[(k - 1) // record_stride] = res.multiplier
        state = PhaseState(res.state.q, res.state.v, initial.t + k * h)
        accel = res.accel
        if k % record_stride == 0:
            record(k // record_stride, state, res.iterations, res.linear_solves,
                   res.position if X is not None else None)

    traj = Trajectory(T, Q, V, E, Gn, iters, h, record_stride, stats=stats)
    traj.extras["linear_solves"] = solves
    if mult is not None:
        traj.extras["multiplier"] = mult
    if X is not None:
        traj.extras["x"] = X
    return traj
