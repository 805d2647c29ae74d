"""Domain types for mechanical systems, holonomic constraints and trajectories.

Everything here is immutable after construction.  Potentials and constraint
maps are plain callables on 1-D numpy arrays and must be pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ConfigurationError(ValueError):
    """Inconsistent dimensions or parameters."""


Vector = np.ndarray
ScalarFn = Callable[[Vector], float]
VectorFn = Callable[[Vector], Vector]
MatrixFn = Callable[[Vector], np.ndarray]


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def fd_steps(q):
    return np.maximum(1e-5, 1e-7 * np.abs(q))


def fd_gradient(f, q, steps=None):
    """Central-difference gradient of a scalar function."""
    q = np.asarray(q, dtype=float)
    steps = fd_steps(q) if steps is None else steps
    out = np.empty_like(q)
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = steps[i]
        out[i] = (f(q + e) - f(q - e)) / (2 * steps[i])
    return out


def fd_jacobian(F, q, steps=None):
    """Central-difference Jacobian, rows indexed by output component."""
    q = np.asarray(q, dtype=float)
    steps = fd_steps(q) if steps is None else steps
    cols = []
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = steps[i]
        cols.append((np.asarray(F(q + e)) - np.asarray(F(q - e))) / (2 * steps[i]))
    return np.column_stack(cols)


def fd_hessian(gradient, q):
    """Hessian from central differences of the gradient, symmetrized."""
    H = fd_jacobian(gradient, q)
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseState:
    q: Vector
    v: Vector
    t: float = 0.0

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        v = np.array(self.v, dtype=float).reshape(-1)
        if q.size == 0 or q.shape != v.shape:
            raise ConfigurationError(
                f"q and v must be non-empty and of equal length, got {q.shape} and {v.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v)) and np.isfinite(self.t)):
            raise FloatingPointError("non-finite phase state")
        q.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "t", float(self.t))

    @property
    def dof(self) -> int:
        return self.q.size


# ---------------------------------------------------------------------------
# mass matrix
# ---------------------------------------------------------------------------

class MassMatrix:
    """Constant symmetric positive definite mass matrix.

    Stored either as its diagonal or as a dense matrix with a cached
    Cholesky factor.
    """

    def __init__(self, diagonal=None, dense=None):
        if (diagonal is None) == (dense is None):
            raise ConfigurationError("give exactly one of diagonal or dense")
        if diagonal is not None:
            d = np.array(diagonal, dtype=float).reshape(-1)
            if d.size == 0 or np.any(d <= 0) or not np.all(np.isfinite(d)):
                raise ConfigurationError("diagonal masses must be positive and finite")
            self._diag = d
            self._dense = None
            self._chol = None
        else:
            A = np.array(dense, dtype=float)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ConfigurationError("dense mass matrix must be square")
            A = 0.5 * (A + A.T)
            try:
                self._chol = np.linalg.cholesky(A)
            except np.linalg.LinAlgError as exc:
                raise ConfigurationError("mass matrix is not positive definite") from exc
            self._dense = A
            self._diag = None

    @classmethod
    def identity(cls, n):
        return cls(diagonal=np.ones(n))

    @property
    def n(self) -> int:
        return self._diag.size if self._diag is not None else self._dense.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self._diag is not None

    @property
    def diagonal(self) -> Vector:
        return self._diag.copy() if self._diag is not None else np.diag(self._dense).copy()

    def dense(self) -> np.ndarray:
        return np.diag(self._diag) if self._diag is not None else self._dense.copy()

    def apply(self, x):
        """M @ x"""
        if self._diag is not None:
            x = np.asarray(x)
            return self._diag.reshape((-1,) + (1,) * (x.ndim - 1)) * x
        return self._dense @ x

    def solve(self, x):
        """M^-1 @ x"""
        if self._diag is not None:
            x = np.asarray(x)
            return x / self._diag.reshape((-1,) + (1,) * (x.ndim - 1))
        y = np.linalg.solve(self._chol, x)
        return np.linalg.solve(self._chol.T, y)

    def add_to(self, A):
        """Return M + A for a dense n x n matrix A."""
        out = np.array(A, dtype=float, copy=True)
        if self._diag is not None:
            out[np.diag_indices_from(out)] += self._diag
        else:
            out += self._dense
        return out


# ---------------------------------------------------------------------------
# potentials and constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Potential:
    """Scalar potential with gradient and Hessian.

    ``hessian=None`` synthesizes the Hessian from central differences of the
    gradient.  Returned Hessians are always symmetrized.  ``hessian_blocks``
    optionally returns the Hessian as ``(nblocks, b, b)`` diagonal blocks when
    the potential is known to be block diagonal with block size ``block_size``.
    """

    value: ScalarFn
    gradient: VectorFn
    hessian: Optional[MatrixFn] = None
    hessian_blocks: Optional[Callable[[Vector], np.ndarray]] = None
    block_size: Optional[int] = None
    finite_difference_hessian: bool = field(default=False, init=False)

    def __post_init__(self):
        raw = self.hessian
        if raw is None:
            grad = self.gradient
            object.__setattr__(self, "finite_difference_hessian", True)

            def hess(q):
                return fd_hessian(grad, q)
        else:
            def hess(q):
                H = np.asarray(raw(q), dtype=float)
                return 0.5 * (H + H.T)
        object.__setattr__(self, "hessian", hess)

    @classmethod
    def zero(cls):
        return cls(lambda q: 0.0,
                   lambda q: np.zeros_like(q, dtype=float),
                   lambda q: np.zeros((q.size, q.size)))

    @classmethod
    def quadratic(cls, K, center=None):
        """V(q) = 1/2 (q - c)^T K (q - c)."""
        K = np.atleast_2d(np.array(K, dtype=float))
        K = 0.5 * (K + K.T)
        c = np.zeros(K.shape[0]) if center is None else np.asarray(center, dtype=float)
        return cls(lambda q: 0.5 * (q - c) @ K @ (q - c),
                   lambda q: K @ (q - c),
                   lambda q: K.copy())

    def __add__(self, other: "Potential") -> "Potential":
        return Potential(lambda q: self.value(q) + other.value(q),
                         lambda q: self.gradient(q) + other.gradient(q),
                         lambda q: self.hessian(q) + other.hessian(q))

    def scaled(self, c: float) -> "Potential":
        blocks = None
        if self.hessian_blocks is not None:
            blocks = lambda q: c * self.hessian_blocks(q)  # noqa: E731
        return Potential(lambda q: c * self.value(q),
                         lambda q: c * self.gradient(q),
                         lambda q: c * self.hessian(q),
                         hessian_blocks=blocks, block_size=self.block_size)


@dataclass(frozen=True)
class ConstraintSet:
    """Holonomic constraints g(q) = 0 with Jacobian rows dg_i/dq.

    ``weighted_hessian(q, w)`` returns sum_i w_i Hess g_i(q); when absent it
    is obtained from central differences of ``jacobian(q).T @ w``.
    ``block_size`` marks constraints that couple only coordinates inside
    consecutive blocks of that size (one block per ``m // nblocks`` rows).
    """

    g: VectorFn
    jacobian: MatrixFn
    m: int
    weighted_hessian: Optional[Callable[[Vector, Vector], np.ndarray]] = None
    block_size: Optional[int] = None
    n: Optional[int] = None

    def __post_init__(self):
        if self.n is not None and self.m > self.n:
            raise ConfigurationError("more constraints than coordinates")

    def norm(self, q) -> float:
        return float(np.linalg.norm(self.g(q)))

    def curvature(self, q, w) -> np.ndarray:
        if self.weighted_hessian is not None:
            return np.asarray(self.weighted_hessian(q, w), dtype=float)
        jac = self.jacobian
        return fd_hessian(lambda x: jac(x).T @ w, q)


@dataclass(frozen=True)
class MechanicalSystem:
    """M v' = -grad V(q) with constant mass matrix."""

    mass: MassMatrix
    potential: Potential
    constraints: Optional[ConstraintSet] = None
    name: str = "system"

    def __post_init__(self):
        if self.constraints is not None and self.constraints.m > self.dof:
            raise ConfigurationError("more constraints than degrees of freedom")

    @property
    def dof(self) -> int:
        return self.mass.n

    def value(self, q) -> float:
        return float(self.potential.value(q))

    def gradient(self, q) -> Vector:
        return np.asarray(self.potential.gradient(q), dtype=float)

    def hessian(self, q) -> np.ndarray:
        return self.potential.hessian(q)

    def acceleration(self, q) -> Vector:
        return -self.mass.solve(self.gradient(q))


@dataclass(frozen=True)
class StiffSplitSystem:
    """Potential V0 + inv_eps * V1 with V1 the stiff part.

    For penalty systems V1 = 1/2 g^T g and inv_eps = omega^2.
    """

    base: MechanicalSystem
    stiff: Potential
    inv_eps: float
    omega: Optional[float] = None

    def __post_init__(self):
        if not self.inv_eps > 0:
            raise ConfigurationError("inv_eps must be positive")

    @property
    def mass(self) -> MassMatrix:
        return self.base.mass

    @property
    def constraints(self) -> Optional[ConstraintSet]:
        return self.base.constraints

    @property
    def dof(self) -> int:
        return self.base.dof

    @property
    def name(self) -> str:
        return self.base.name

    @property
    def potential(self) -> Potential:
        return self.base.potential + self.stiff.scaled(self.inv_eps)

    def value(self, q) -> float:
        return self.base.value(q) + self.inv_eps * float(self.stiff.value(q))

    def gradient(self, q) -> Vector:
        return self.base.gradient(q) + self.inv_eps * np.asarray(self.stiff.gradient(q))

    def hessian(self, q) -> np.ndarray:
        return self.base.hessian(q) + self.inv_eps * self.stiff.hessian(q)

    def stiff_hessian(self, q) -> np.ndarray:
        return self.inv_eps * self.stiff.hessian(q)

    def acceleration(self, q) -> Vector:
        return -self.mass.solve(self.gradient(q))


def build_penalty_system(base: MechanicalSystem, constraints: ConstraintSet,
                         omega: float, drop_curvature: bool = False) -> StiffSplitSystem:
    """Replace g(q) = 0 by the stiff potential 1/2 omega^2 g^T g.

    The stiff Hessian is J^T J + sum_i g_i Hess g_i; ``drop_curvature``
    discards the second term, which is O(omega^-2) near the manifold.
    """
    if not omega > 0:
        raise ConfigurationError("omega must be positive")
    n = base.dof
    if constraints.n is not None and constraints.n != n:
        raise ConfigurationError(f"constraints act on {constraints.n} coordinates, system has {n}")
    if constraints.m > n:
        raise ConfigurationError("more constraints than degrees of freedom")
    q_probe = np.ones(n)
    try:
        g0 = np.asarray(constraints.g(q_probe))
        J0 = np.asarray(constraints.jacobian(q_probe))
    except (IndexError, ValueError) as exc:
        raise ConfigurationError(f"constraints incompatible with {n} coordinates") from exc
    if g0.shape != (constraints.m,) or J0.shape != (constraints.m, n):
        raise ConfigurationError(
            f"constraint shapes g{g0.shape}, J{J0.shape} incompatible with "
            f"m={constraints.m}, n={n}")

    g, jac = constraints.g, constraints.jacobian

    def value(q):
        r = g(q)
        return 0.5 * float(r @ r)

    def gradient(q):
        return jac(q).T @ g(q)

    def hessian(q):
        J = jac(q)
        H = J.T @ J
        if not drop_curvature:
            H = H + constraints.curvature(q, g(q))
        return H

    blocks = None
    bs = constraints.block_size
    if bs is not None:
        nb = n // bs
        rows = constraints.m // nb

        def blocks(q):
            H = hessian(q)
            idx = np.arange(nb)[:, None] * bs + np.arange(bs)
            return H[idx[:, :, None], idx[:, None, :]]

        if constraints.weighted_hessian is not None:
            # direct per-block assembly avoids forming the full n x n matrix
            def blocks(q):  # noqa: F811
                J = jac(q)
                r = g(q)
                out = np.empty((nb, bs, bs))
                for b in range(nb):
                    Jb = J[b * rows:(b + 1) * rows, b * bs:(b + 1) * bs]
                    out[b] = Jb.T @ Jb
                if not drop_curvature:
                    C = constraints.curvature(q, r)
                    for b in range(nb):
                        sl = slice(b * bs, (b + 1) * bs)
                        out[b] += C[sl, sl]
                return out

    stiff = Potential(value, gradient, hessian, hessian_blocks=blocks, block_size=bs)
    new_base = MechanicalSystem(base.mass, base.potential, constraints, base.name)
    return StiffSplitSystem(new_base, stiff, float(omega) ** 2, omega=float(omega))


def total_energy(system, state: PhaseState) -> float:
    """Kinetic plus full potential energy (including any penalty term)."""
    if state.dof != system.dof:
        raise ConfigurationError(f"state has {state.dof} dof, system has {system.dof}")
    v = state.v
    return 0.5 * float(v @ system.mass.apply(v)) + system.value(state.q)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Recorded samples of a run plus per-sample diagnostics.

    ``extras`` holds optional per-sample arrays such as SHAKE multipliers.
    """

    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    energy: np.ndarray
    g_norm: np.ndarray
    solver_iters: np.ndarray
    h: float
    stride: int
    extras: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.size

    def state(self, k) -> PhaseState:
        return PhaseState(self.q[k], self.v[k], self.t[k])

    @property
    def final(self) -> PhaseState:
        return self.state(-1)

    def select(self, mask) -> "Trajectory":
        return Trajectory(self.t[mask], self.q[mask], self.v[mask], self.energy[mask],
                          self.g_norm[mask], self.solver_iters[mask], self.h, self.stride,
                          {k: v[mask] for k, v in self.extras.items()}, dict(self.stats))


def check_derivatives(f, grad, points, rtol):
    """Largest relative mismatch between ``grad`` and central differences of ``f``.

    Works for scalar f with vector gradient and for vector f with Jacobian.
    """
    worst = 0.0
    for q in points:
        q = np.asarray(q, dtype=float)
        fq = np.asarray(f(q))
        ref = fd_gradient(f, q) if fq.ndim == 0 else fd_jacobian(f, q)
        got = np.asarray(grad(q))
        err = np.linalg.norm(got - ref) / max(1.0, np.linalg.norm(ref))
        worst = max(worst, err)
    return worst, worst <= rtol
