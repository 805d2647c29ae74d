"""Dense symmetric linear solves and a damped Newton iteration."""

from __future__ import annotations

from typing import Callable, NamedTuple, Optional, Union

import numpy as np
from scipy.linalg import lapack

from .core import fd_jacobian

DEFAULT_TOL = 1e-6


class SolverError(ArithmeticError):
    """Raised for singular systems; ``condition`` is min |pivot| / ||A||."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class LinearSolveReport(NamedTuple):
    solution: np.ndarray
    residual_norm: float


class NewtonReport(NamedTuple):
    solution: np.ndarray
    iterations: int
    converged: bool
    final_residual: float


def _min_pivot(ldu, ipiv):
    """Smallest |eigenvalue| over the 1x1 and 2x2 diagonal blocks of D."""
    n = ldu.shape[0]
    smallest = np.inf
    k = 0
    while k < n:
        if ipiv[k] > 0:
            smallest = min(smallest, abs(ldu[k, k]))
            k += 1
        else:
            # 2x2 block stored in rows/cols k, k+1 (lower storage)
            block = np.array([[ldu[k, k], ldu[k + 1, k]], [ldu[k + 1, k], ldu[k + 1, k + 1]]])
            smallest = min(smallest, np.min(np.abs(np.linalg.eigvalsh(block))))
            k += 2
    return smallest


def solve_symmetric(A, b, pivot_tol=1e-14) -> LinearSolveReport:
    """Solve A x = b for symmetric, possibly indefinite A.

    Uses a Bunch-Kaufman LDL^T factorization (LAPACK ``dsytrf``/``dsytrs``);
    A^-1 is never formed.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"shape mismatch: A{A.shape}, b{b.shape}")
    scale = np.linalg.norm(A, np.inf)
    if scale == 0.0:
        raise SolverError("zero matrix", condition=0.0)
    ldu, ipiv, info = lapack.dsytrf(A, lower=1)
    if info < 0:
        raise ValueError(f"dsytrf: illegal argument {-info}")
    pivot = 0.0 if info > 0 else _min_pivot(ldu, ipiv)
    if pivot < pivot_tol * scale:
        raise SolverError(f"matrix is numerically singular (pivot ratio {pivot / scale:.3e})",
                          condition=pivot / scale)
    x, info = lapack.dsytrs(ldu, ipiv, b.reshape(n, -1), lower=1)
    if info != 0:
        raise SolverError(f"dsytrs failed with info={info}")
    x = x.reshape(b.shape)
    return LinearSolveReport(x, float(np.linalg.norm(A @ x - b)))


def solve_block_diagonal(blocks, b) -> np.ndarray:
    """Solve with a block-diagonal matrix given as ``(nb, s, s)`` blocks."""
    nb, s, _ = blocks.shape
    x = np.linalg.solve(blocks, b.reshape(nb, s, 1))
    return x.reshape(-1)


def newton_solve(residual: Callable[[np.ndarray], np.ndarray],
                 jacobian: Union[Callable[[np.ndarray], np.ndarray], str, None],
                 x0,
                 tol_x: float = DEFAULT_TOL,
                 tol_f: float = DEFAULT_TOL,
                 max_iter: int = 50) -> NewtonReport:
    """Damped Newton iteration.

    Converged when either ||dx||_inf <= tol_x or ||r||_inf <= tol_f.  The step
    is halved (at most 30 times) while ||r|| fails to decrease.  Passing
    ``jacobian="finite-difference"`` or ``None`` differentiates the residual
    with steps 1e-7 (1 + |x_i|).
    """
    if jacobian is None or isinstance(jacobian, str):
        if jacobian not in (None, "finite-difference"):
            raise ValueError(f"unknown jacobian mode {jacobian!r}")

        def jacobian(x):
            return fd_jacobian(residual, x, 1e-7 * (1.0 + np.abs(x)))

    x = np.array(x0, dtype=float)
    scalar = x.ndim == 0
    x = x.reshape(-1)

    def res(y):
        return np.atleast_1d(np.asarray(residual(y[0] if scalar else y), dtype=float))

    def jac(y):
        return np.atleast_2d(np.asarray(jacobian(y[0] if scalar else y), dtype=float))

    r = res(x)
    rnorm = np.max(np.abs(r))
    if rnorm <= tol_f:
        return NewtonReport(x[0] if scalar else x, 0, True, float(rnorm))

    for it in range(1, max_iter + 1):
        try:
            dx = np.linalg.solve(jac(x), -r)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Jacobian at Newton iteration {it}") from exc
        lam = 1.0
        for _ in range(31):
            x_new = x + lam * dx
            r_new = res(x_new)
            if np.all(np.isfinite(r_new)) and np.linalg.norm(r_new) < np.linalg.norm(r):
                break
            lam *= 0.5
        else:
            # no decrease found; accept the full step and let the tests decide
            x_new = x + dx
            r_new = res(x_new)
        step = np.max(np.abs(x_new - x))
        x, r = x_new, r_new
        rnorm = np.max(np.abs(r))
        if step <= tol_x or rnorm <= tol_f:
            return NewtonReport(x[0] if scalar else x, it, True, float(rnorm))
    return NewtonReport(x[0] if scalar else x, max_iter, False, float(rnorm))
