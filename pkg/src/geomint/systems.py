"""Test systems: double pendulum, pendulum chain, circular motion, water cluster."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (ConfigurationError, ConstraintSet, MassMatrix, MechanicalSystem,
                   PhaseState, Potential, Trajectory, total_energy)
from .solvers import newton_solve


# ---------------------------------------------------------------------------
# pendulums
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoublePendulumParams:
    """Unit masses; ``V = gravity * (y1 + y2)``.

    ``gravity=1`` hangs the pendulum below the pivot.  ``gravity=-1`` flips
    the field so the rest configuration (0, -1, 1, -2) sits at the top of
    the potential.
    """

    L1: float = 1.0
    L2: float = math.sqrt(2.0)
    gravity: float = 1.0

    def __post_init__(self):
        if not (self.L1 > 0 and self.L2 > 0):
            raise ConfigurationError("pendulum lengths must be positive")


@dataclass(frozen=True)
class ChainParams:
    n: int
    lengths: tuple = ()
    gravity: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("chain needs at least one pendulum")
        L = tuple(float(x) for x in self.lengths) if len(self.lengths) else (1.0,) * self.n
        if len(L) != self.n or min(L) <= 0:
            raise ConfigurationError("need n positive lengths")
        object.__setattr__(self, "lengths", L)


def _chain_constraints(lengths):
    """Rows (x_i - x_{i-1})^2 + (y_i - y_{i-1})^2 - L_i^2 with (x_0, y_0) the pivot."""
    L2 = np.asarray(lengths, dtype=float) ** 2
    n = L2.size

    def links(q):
        P = q.reshape(n, 2)
        prev = np.vstack([np.zeros((1, 2)), P[:-1]])
        return P - prev

    def g(q):
        d = links(q)
        return np.einsum("ij,ij->i", d, d) - L2

    def jacobian(q):
        d = links(q)
        J = np.zeros((n, 2 * n))
        rows = np.arange(n)
        J[rows, 2 * rows] = 2 * d[:, 0]
        J[rows, 2 * rows + 1] = 2 * d[:, 1]
        J[rows[1:], 2 * rows[1:] - 2] = -2 * d[1:, 0]
        J[rows[1:], 2 * rows[1:] - 1] = -2 * d[1:, 1]
        return J

    def weighted_hessian(q, w):
        H = np.zeros((2 * n, 2 * n))
        for i in range(n):
            for c in range(2):
                a = 2 * i + c
                H[a, a] += 2 * w[i]
                if i > 0:
                    b = a - 2
                    H[b, b] += 2 * w[i]
                    H[a, b] -= 2 * w[i]
                    H[b, a] -= 2 * w[i]
        return H

    return ConstraintSet(g, jacobian, n, weighted_hessian, n=2 * n)


def pendulum_chain(params: ChainParams):
    """Chain of unit point masses under V = gravity * sum_i y_i with rigid links."""
    n = params.n
    gravity = float(params.gravity)
    grad = np.zeros(2 * n)
    grad[1::2] = gravity
    potential = Potential(lambda q: gravity * float(np.sum(q[1::2])),
                          lambda q: grad.copy(),
                          lambda q: np.zeros((2 * n, 2 * n)))
    constraints = _chain_constraints(params.lengths)
    system = MechanicalSystem(MassMatrix.identity(2 * n), potential, constraints,
                              name=f"chain{n}")
    return system, constraints


def double_pendulum_cartesian(params: DoublePendulumParams = DoublePendulumParams()):
    """q = (x1, y1, x2, y2), V = gravity * (y1 + y2), two length constraints."""
    system, constraints = pendulum_chain(ChainParams(2, (params.L1, params.L2), params.gravity))
    return replace(system, name="double-pendulum"), constraints


def double_pendulum_initial_state() -> PhaseState:
    """Positions (0, -1, 1, -2) at rest."""
    return PhaseState([0.0, -1.0, 1.0, -2.0], np.zeros(4))


def chain_initial_state(n) -> PhaseState:
    """Stretched horizontal chain x_i = i, y_i = 0, at rest."""
    q = np.zeros(2 * n)
    q[0::2] = np.arange(1, n + 1)
    return PhaseState(q, np.zeros(2 * n))


def pendulum_embedding(params: DoublePendulumParams, theta, phi):
    L1, L2 = params.L1, params.L2
    x1, y1 = L1 * np.sin(theta), -L1 * np.cos(theta)
    return np.array([x1, y1, x1 + L2 * np.sin(phi), y1 - L2 * np.cos(phi)])


def _generalized_mass(params, th, ph):
    c = params.L1 * params.L2 * math.cos(th - ph)
    return np.array([[2 * params.L1 ** 2, c], [c, params.L2 ** 2]])


def double_pendulum_generalized_benchmark(params: DoublePendulumParams, theta0: float,
                                          phi0: float, h: float, t_end: float,
                                          theta_dot0: float = 0.0, phi_dot0: float = 0.0,
                                          record_stride: int = 1,
                                          tol: float = 1e-13) -> Trajectory:
    """Implicit variational Euler in (theta, phi), output in Cartesian coordinates.

    The discrete Lagrangian is the rectangle rule h * L(q_k, (q_{k+1} - q_k) / h)
    with the Lagrangian obtained by pulling the Cartesian potential back
    through the embedding.  Each step solves the discrete Euler-Lagrange equation in
    momentum form for the increment (q_{k+1} - q_k) / h.
    """
    if not h > 0:
        raise ConfigurationError("h must be positive")
    L1, L2, grav = params.L1, params.L2, params.gravity
    n_steps = int(round(t_end / h))
    n_rec = n_steps // record_stride + 1

    def dLdq(th, ph, u):
        s12 = L1 * L2 * math.sin(th - ph)
        k = s12 * u[0] * u[1]
        return np.array([-k - 2 * grav * L1 * math.sin(th), k - grav * L2 * math.sin(ph)])

    def cartesian(th, ph, p):
        qd = np.linalg.solve(_generalized_mass(params, th, ph), p)
        x = pendulum_embedding(params, th, ph)
        dx1, dy1 = L1 * math.cos(th) * qd[0], L1 * math.sin(th) * qd[0]
        v = np.array([dx1, dy1, dx1 + L2 * math.cos(ph) * qd[1],
                      dy1 + L2 * math.sin(ph) * qd[1]])
        return x, v

    system, constraints = double_pendulum_cartesian(params)
    T = h * record_stride * np.arange(n_rec)
    Q = np.empty((n_rec, 4))
    Vv = np.empty((n_rec, 4))
    E = np.empty(n_rec)
    Gn = np.empty(n_rec)
    iters = np.zeros(n_rec, dtype=int)

    th, ph = float(theta0), float(phi0)
    p = _generalized_mass(params, th, ph) @ np.array([theta_dot0, phi_dot0])
    u = np.linalg.solve(_generalized_mass(params, th, ph), p)

    def record(j, it):
        x, v = cartesian(th, ph, p)
        Q[j], Vv[j] = x, v
        E[j] = total_energy(system, PhaseState(x, v))
        Gn[j] = constraints.norm(x)
        iters[j] = it

    record(0, 0)
    for k in range(1, n_steps + 1):
        Mk = _generalized_mass(params, th, ph)
        s12 = L1 * L2 * math.sin(th - ph)

        def residual(w, Mk=Mk, th=th, ph=ph, p=p):
            return Mk @ w - h * dLdq(th, ph, w) - p

        def jacobian(w, Mk=Mk, s12=s12):
            return Mk - h * np.array([[-s12 * w[1], -s12 * w[0]], [s12 * w[1], s12 * w[0]]])

        rep = newton_solve(residual, jacobian, u, tol, tol, 50)
        if not rep.converged:
            raise RuntimeError(f"generalized-coordinate step {k} did not converge")
        u = rep.solution
        p = Mk @ u
        th, ph = th + h * u[0], ph + h * u[1]
        if k % record_stride == 0:
            record(k // record_stride, rep.iterations)
    return Trajectory(T, Q, Vv, E, Gn, iters, h, record_stride)


# ---------------------------------------------------------------------------
# circle
# ---------------------------------------------------------------------------

def circular_motion(q0=(1.0, 0.0), v0=(0.0, 1.0)):
    """Free particle on x^2 + y^2 = 1.  Returns (system, constraints, exact)."""
    q0 = np.asarray(q0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    if abs(q0 @ q0 - 1.0) > 1e-12 or abs(q0 @ v0) > 1e-12:
        raise ConfigurationError("initial condition must lie on the unit circle with tangential velocity")

    def g(q):
        return np.array([q @ q - 1.0])

    def jac(q):
        return 2.0 * q.reshape(1, 2)

    constraints = ConstraintSet(g, jac, 1, lambda q, w: 2.0 * w[0] * np.eye(2), n=2)
    system = MechanicalSystem(MassMatrix.identity(2), Potential.zero(), constraints,
                              name="circle")
    speed = float(np.linalg.norm(v0))
    phase0 = math.atan2(q0[1], q0[0])
    # orientation of travel: +1 counter-clockwise
    orient = 1.0 if (q0[0] * v0[1] - q0[1] * v0[0]) >= 0 else -1.0

    def exact(t):
        ang = phase0 + orient * speed * t
        q = np.array([math.cos(ang), math.sin(ang)])
        v = orient * speed * np.array([-math.sin(ang), math.cos(ang)])
        return PhaseState(q, v, t)

    return system, constraints, exact


# ---------------------------------------------------------------------------
# water cluster
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WaterParams:
    """TIP3P-style rigid water; units are angstrom, kcal/mol and amu.

    Atom order inside a molecule is (H, O, H).
    """

    N: int = 3
    m_H: float = 1.008
    m_O: float = 15.9994
    K_c: float = 332.0637
    Q_H: float = 0.417
    Q_O: float = -0.834
    A: float = 582000.0
    C: float = 595.0
    r_OH: float = 0.9572
    alpha_HOH_degrees: float = 104.52

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError("need at least one molecule")
        if not (self.m_H > 0 and self.m_O > 0 and self.r_OH > 0):
            raise ConfigurationError("masses and bond length must be positive")

    @property
    def alpha_HOH(self) -> float:
        return math.radians(self.alpha_HOH_degrees)

    @property
    def r_HH(self) -> float:
        return 2.0 * self.r_OH * math.sin(self.alpha_HOH / 2.0)

    @property
    def charges(self) -> np.ndarray:
        return np.array([self.Q_H, self.Q_O, self.Q_H])

    @classmethod
    def from_file(cls, path, **overrides) -> "WaterParams":
        """Read flat ``key=value`` lines; ``#`` starts a comment."""
        keys = {f.name for f in fields(cls)}
        vals = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"bad parameter line: {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in keys:
                raise ConfigurationError(f"unknown water parameter {k!r}")
            vals[k] = int(v) if k == "N" else float(v)
        vals.update(overrides)
        return cls(**vals)

    @classmethod
    def default(cls, **overrides) -> "WaterParams":
        ref = resources.files("geomint") / "data" / "tip3p.txt"
        with resources.as_file(ref) as path:
            return cls.from_file(path, **overrides)


def _water_pairs(params: WaterParams):
    N = params.N
    mol = np.repeat(np.arange(N), 3)
    kind = np.tile(np.arange(3), N)
    I, J = np.triu_indices(3 * N, k=1)
    keep = mol[I] != mol[J]
    I, J = I[keep], J[keep]
    Q = params.charges
    coul = params.K_c * Q[kind[I]] * Q[kind[J]]
    oo = (kind[I] == 1) & (kind[J] == 1)
    return I, J, coul, np.where(oo, params.A, 0.0), np.where(oo, params.C, 0.0)


def water_cluster(params: WaterParams):
    """Intermolecular Coulomb + O-O Lennard-Jones potential and 3N rigidity constraints."""
    N = params.N
    n = 9 * N
    natoms = 3 * N
    I, J, coul, lja, ljc = _water_pairs(params)

    def geometry(q):
        X = q.reshape(natoms, 3)
        d = X[I] - X[J]
        r = np.sqrt(np.einsum("ij,ij->i", d, d))
        if r.size and np.min(r) == 0.0:
            raise FloatingPointError("coincident atoms")
        return d, r

    def value(q):
        if I.size == 0:
            return 0.0
        _, r = geometry(q)
        r6 = r ** -6
        return float(np.sum(coul / r + lja * r6 * r6 - ljc * r6))

    def dfdr(r):
        r6 = r ** -6
        return -coul / r ** 2 - 12 * lja * r6 * r6 / r + 6 * ljc * r6 / r

    def gradient(q):
        out = np.zeros((natoms, 3))
        if I.size == 0:
            return out.reshape(-1)
        d, r = geometry(q)
        f = (dfdr(r) / r)[:, None] * d
        np.add.at(out, I, f)
        np.add.at(out, J, -f)
        return out.reshape(-1)

    def hessian(q):
        H = np.zeros((natoms, natoms, 3, 3))
        if I.size:
            d, r = geometry(q)
            u = d / r[:, None]
            r6 = r ** -6
            f1 = dfdr(r)
            f2 = 2 * coul / r ** 3 + 156 * lja * r6 * r6 / r ** 2 - 42 * ljc * r6 / r ** 2
            uu = u[:, :, None] * u[:, None, :]
            blk = f2[:, None, None] * uu + (f1 / r)[:, None, None] * (np.eye(3) - uu)
            np.add.at(H, (I, I), blk)
            np.add.at(H, (J, J), blk)
            np.add.at(H, (I, J), -blk)
            np.add.at(H, (J, I), -blk)
        return H.transpose(0, 2, 1, 3).reshape(n, n)

    # constraint rows per molecule: |H1-O|^2, |H2-O|^2, |H1-H2|^2
    base = 3 * np.arange(N)
    ca = np.stack([base, base + 2, base], axis=1).reshape(-1)
    cb = np.stack([base + 1, base + 1, base + 2], axis=1).reshape(-1)
    target = np.tile([params.r_OH ** 2, params.r_OH ** 2, params.r_HH ** 2], N)
    m = 3 * N

    def g(q):
        X = q.reshape(natoms, 3)
        d = X[ca] - X[cb]
        return np.einsum("ij,ij->i", d, d) - target

    def jacobian(q):
        X = q.reshape(natoms, 3)
        d = X[ca] - X[cb]
        Jm = np.zeros((m, natoms, 3))
        rows = np.arange(m)
        Jm[rows, ca] = 2 * d
        Jm[rows, cb] = -2 * d
        return Jm.reshape(m, n)

    def weighted_hessian(q, w):
        H = np.zeros((natoms, natoms))
        np.add.at(H, (ca, ca), 2 * w)
        np.add.at(H, (cb, cb), 2 * w)
        np.add.at(H, (ca, cb), -2 * w)
        np.add.at(H, (cb, ca), -2 * w)
        return np.kron(H, np.eye(3))

    masses = np.tile(np.repeat([params.m_H, params.m_O, params.m_H], 3), N)
    constraints = ConstraintSet(g, jacobian, m, weighted_hessian, block_size=9, n=n)
    system = MechanicalSystem(MassMatrix(diagonal=masses),
                              Potential(value, gradient, hessian), constraints,
                              name=f"water{N}")
    return system, constraints


def water_molecule(params: WaterParams, center, rotation=np.eye(3)) -> np.ndarray:
    """Ideal-geometry molecule (H, O, H) with oxygen at ``center``."""
    s, c = math.sin(params.alpha_HOH / 2), math.cos(params.alpha_HOH / 2)
    body = params.r_OH * np.array([[s, 0.0, c], [0.0, 0.0, 0.0], [-s, 0.0, c]])
    return (body @ np.asarray(rotation).T + np.asarray(center)).reshape(-1)


def water_initial_configuration(params: WaterParams, seed: int = 0,
                                v_stop: Optional[float] = None,
                                spacing: float = 3.2, maxiter: int = 2000) -> np.ndarray:
    """Rigid molecules placed at random, then relaxed by BFGS until V <= v_stop.

    Molecules start on a jittered cubic lattice with random orientations.  The
    relaxation runs over rigid-body parameters (oxygen position and rotation
    vector per molecule) so the returned positions satisfy the constraints
    exactly; it stops early once the potential drops below ``v_stop``
    (default -24/7 kcal/mol per molecule).
    """
    from scipy.optimize import minimize
    from scipy.spatial.transform import Rotation

    N = params.N
    rng = np.random.default_rng(seed)
    side = math.ceil(N ** (1.0 / 3.0))
    grid = np.array([(i, j, k) for i in range(side) for j in range(side)
                     for k in range(side)], dtype=float)[:N]
    centers = spacing * grid + rng.uniform(-0.3, 0.3, size=(N, 3))
    rotvecs = Rotation.random(N, random_state=rng.integers(2 ** 32)).as_rotvec()
    system, _ = water_cluster(params)
    if v_stop is None:
        v_stop = -24.0 / 7.0 * N

    def positions(x):
        c = x[:3 * N].reshape(N, 3)
        R = Rotation.from_rotvec(x[3 * N:].reshape(N, 3)).as_matrix()
        return np.concatenate([water_molecule(params, c[a], R[a]) for a in range(N)])

    x0 = np.concatenate([centers.reshape(-1), rotvecs.reshape(-1)])
    if N == 1:
        return positions(x0)
    best = {"x": x0}

    def objective(x):
        return system.value(positions(x))

    def stop(intermediate_result):
        best["x"] = intermediate_result.x
        if intermediate_result.fun <= v_stop:
            raise StopIteration

    res = minimize(objective, x0, method="BFGS", callback=stop,
                   options={"maxiter": maxiter, "gtol": 1e-8})
    x = res.x if res.fun <= objective(best["x"]) else best["x"]
    return positions(x)
