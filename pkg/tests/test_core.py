import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geomint.core import (ConfigurationError, ConstraintSet, MassMatrix, MechanicalSystem,
                          PhaseState, Potential, Trajectory, build_penalty_system,
                          check_derivatives, fd_gradient, total_energy)
from geomint.systems import double_pendulum_cartesian

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_phase_state_rejects_mismatch_and_nan():
    with pytest.raises(ConfigurationError):
        PhaseState([1.0, 2.0], [1.0])
    with pytest.raises(FloatingPointError):
        PhaseState([np.nan], [0.0])


def test_phase_state_is_read_only():
    s = PhaseState([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        s.q[0] = 3.0


@given(arrays(float, 5, elements=st.floats(0.1, 10)), arrays(float, (5, 3), elements=finite))
def test_diagonal_mass_matches_dense(d, X):
    diag = MassMatrix(diagonal=d)
    dense = MassMatrix(dense=np.diag(d))
    assert np.allclose(diag.apply(X), dense.apply(X))
    assert np.allclose(diag.solve(X), dense.solve(X))
    assert np.allclose(diag.solve(diag.apply(X[:, 0])), X[:, 0])


def test_dense_mass_requires_positive_definite():
    with pytest.raises(ConfigurationError):
        MassMatrix(dense=np.array([[1.0, 2.0], [2.0, 1.0]]))


@given(arrays(float, 3, elements=finite))
def test_quadratic_potential_gradient_matches_differences(q):
    K = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.1], [0.0, 0.1, 3.0]])
    V = Potential.quadratic(K, center=[1.0, 0.0, -1.0])
    assert np.allclose(V.gradient(q), fd_gradient(V.value, q), atol=1e-5)


def test_fd_hessian_is_used_when_missing():
    V = Potential(lambda q: np.sum(q ** 4), lambda q: 4 * q ** 3)
    q = np.array([0.5, -1.0])
    assert V.finite_difference_hessian
    assert np.allclose(V.hessian(q), np.diag(12 * q ** 2), rtol=1e-6)


def test_potential_sum_and_scale():
    a, b = Potential.quadratic(np.eye(2)), Potential.quadratic(2 * np.eye(2))
    q = np.array([1.0, 2.0])
    assert (a + b).value(q) == pytest.approx(7.5)
    assert np.allclose(a.scaled(3).hessian(q), 3 * np.eye(2))


def test_penalty_system_derivatives_against_differences():
    base, cons = double_pendulum_cartesian()
    system = build_penalty_system(base, cons, 20.0)
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((5, 4))
    worst, ok = check_derivatives(system.value, system.gradient, pts, 1e-6)
    assert ok, worst
    worst, ok = check_derivatives(system.gradient, system.hessian, pts, 1e-6)
    assert ok, worst


def test_penalty_value_is_half_omega_squared_g_squared():
    base, cons = double_pendulum_cartesian()
    system = build_penalty_system(base, cons, 7.0)
    q = np.array([0.3, -0.8, 1.1, -2.5])
    g = cons.g(q)
    assert system.value(q) == pytest.approx(base.value(q) + 0.5 * 49.0 * g @ g)


def test_penalty_stiff_hessian_excludes_soft_part():
    base, cons = double_pendulum_cartesian()
    system = build_penalty_system(base, cons, 5.0)
    q = np.array([0.1, -1.0, 0.9, -2.1])
    assert np.allclose(system.hessian(q), base.hessian(q) + system.stiff_hessian(q))
    assert np.allclose(system.stiff_hessian(q), 25.0 * system.stiff.hessian(q))


def test_penalty_system_rejects_bad_inputs():
    base, cons = double_pendulum_cartesian()
    with pytest.raises(ConfigurationError):
        build_penalty_system(base, cons, 0.0)
    wrong = ConstraintSet(lambda q: q[:1], lambda q: np.eye(3)[:1], 1, n=3)
    with pytest.raises(ConfigurationError):
        build_penalty_system(base, wrong, 1.0)


def test_constraint_curvature_default_matches_explicit():
    g = lambda q: np.array([q @ q - 1.0])  # noqa: E731
    J = lambda q: 2 * q.reshape(1, -1)  # noqa: E731
    implicit = ConstraintSet(g, J, 1)
    explicit = ConstraintSet(g, J, 1, lambda q, w: 2 * w[0] * np.eye(2))
    q, w = np.array([0.3, 0.4]), np.array([1.7])
    assert np.allclose(implicit.curvature(q, w), explicit.curvature(q, w), atol=1e-6)


def test_total_energy_and_dof_check():
    system = MechanicalSystem(MassMatrix(diagonal=[2.0]), Potential.quadratic([[3.0]]))
    assert total_energy(system, PhaseState([1.0], [2.0])) == pytest.approx(4.0 + 1.5)
    with pytest.raises(ConfigurationError):
        total_energy(system, PhaseState([1.0, 0.0], [0.0, 0.0]))


@settings(max_examples=20)
@given(st.integers(2, 30))
def test_trajectory_select_keeps_extras_aligned(n):
    t = np.arange(n, dtype=float)
    traj = Trajectory(t, np.zeros((n, 1)), np.zeros((n, 1)), t.copy(), t.copy(),
                      np.zeros(n, int), 1.0, 1, {"x": t[:, None] * 2})
    sub = traj.select(t >= n / 2)
    assert np.all(sub.extras["x"][:, 0] == 2 * sub.t)
