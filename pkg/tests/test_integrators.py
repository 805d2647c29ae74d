import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomint.analysis import symplecticity_defect, update_matrix
from geomint.core import (ConfigurationError, MassMatrix, MechanicalSystem, PhaseState, Potential,
                          build_penalty_system, total_energy)
from geomint.integrators import (INTEGRATORS, IntegratorConfig, LangevinConfig, Stepper,
                                 StepError, gla_step, linearized_newmark_step, newmark_step,
                                 constrained_acceleration, physical_position,
                                 pushforward_newmark_step, run_trajectory,
                                 shake_step, sylipn_accel, sylipn_step, velocity_verlet_step)
from geomint.stochastic import RngStream
from geomint.systems import (circular_motion, double_pendulum_cartesian,
                             double_pendulum_initial_state)


def harmonic(k=4.0, m=1.0):
    return MechanicalSystem(MassMatrix(diagonal=[m]), Potential.quadratic([[k]]))


@pytest.fixture(scope="module")
def penalty():
    base, cons = double_pendulum_cartesian()
    return base, cons, build_penalty_system(base, cons, 20.0)


def test_velocity_verlet_is_second_order_on_harmonic():
    system = harmonic()
    s0 = PhaseState([1.0], [0.0])
    errs = []
    for h in (0.02, 0.01):
        traj = run_trajectory("vv", system, s0, 1.0, IntegratorConfig(h=h))
        errs.append(abs(traj.q[-1, 0] - np.cos(2.0)))
    assert np.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.05)


@settings(max_examples=30)
@given(st.floats(0.1, 1e4), st.floats(0.01, 2.0), st.floats(0.25, 2.0),
       st.floats(-2, 2), st.floats(-2, 2))
def test_sylipn_harmonic_step_equals_update_matrix(k, h, beta, x, v):
    system = harmonic(k)
    cfg = IntegratorConfig(h=h, beta=beta)
    out = sylipn_step(system, PhaseState([x], [v]), cfg).state
    expected = update_matrix(1.0, k, beta, h) @ np.array([x, v])
    assert np.allclose([out.q[0], out.v[0]], expected, rtol=1e-10, atol=1e-10)


def test_sylipn_acceleration_solves_modified_system(penalty):
    _, _, system = penalty
    cfg = IntegratorConfig(h=0.05, beta=0.4)
    x = np.array([0.1, -1.05, 1.0, -1.9])
    a = sylipn_accel(system, x, cfg)
    lhs = system.mass.dense() + 0.4 * 0.05 ** 2 * system.hessian(x)
    assert np.allclose(lhs @ a, -system.gradient(x))


def test_sylipn_is_time_reversible(penalty):
    _, _, system = penalty
    cfg = IntegratorConfig(h=0.05)
    s0 = PhaseState([0.2, -0.9, 1.3, -1.8], [0.4, -0.3, 0.1, 0.7])
    s1 = sylipn_step(system, s0, cfg).state
    back = sylipn_step(system, PhaseState(s1.q, -s1.v), cfg).state
    assert np.allclose(back.q, s0.q, atol=1e-12)
    assert np.allclose(-back.v, s0.v, atol=1e-12)


def test_sylipn_symplectic_on_quadratic_potential():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    system = MechanicalSystem(MassMatrix(diagonal=[1.0, 2.0, 3.0]),
                              Potential.quadratic(A @ A.T + np.eye(3)))
    s = PhaseState(rng.standard_normal(3), rng.standard_normal(3))
    assert symplecticity_defect("sylipn", system, s, IntegratorConfig(h=0.3)) < 1e-8


def test_sylipn_not_symplectic_on_nonlinear_pendulum(penalty):
    # D a = -(M + s H)^-1 (H + s V'''[a]) is not M-symmetric when V''' != 0
    _, _, system = penalty
    s = PhaseState([0.3, -0.95, 1.4, -1.7], [0.5, 0.2, -0.3, 0.8])
    cfg = IntegratorConfig(h=0.05)
    assert symplecticity_defect("sylipn", system, s, cfg, fd_step=1e-6) > 1e-2
    assert symplecticity_defect("vv", system, s, cfg, fd_step=1e-6) < 1e-5


def test_pushforward_newmark_symplectic_on_pendulum(penalty):
    _, _, system = penalty
    s = PhaseState([0.3, -0.95, 1.4, -1.7], [0.5, 0.2, -0.3, 0.8])
    cfg = IntegratorConfig(h=0.05, tol_x=1e-13, tol_f=1e-15)
    assert symplecticity_defect("pfn", system, s, cfg, fd_step=1e-6) < 1e-6


def test_pushforward_newmark_acceleration_fixed_point(penalty):
    _, _, system = penalty
    cfg = IntegratorConfig(h=0.05, tol_x=1e-13, tol_f=1e-13)
    s = PhaseState([0.1, -1.0, 1.0, -2.0], np.zeros(4))
    step = pushforward_newmark_step(system, s, cfg)
    x = step.state.q
    a = step.accel
    assert np.allclose(system.mass.apply(a), -system.gradient(x + 0.4 * 0.05 ** 2 * a),
                       atol=1e-9)
    assert np.allclose(step.position, physical_position(x, a, cfg))


def test_newmark_variants_agree_on_quadratics():
    system = harmonic(9.0)
    s = PhaseState([1.0], [0.5])
    cfg = IntegratorConfig(h=0.1, beta=0.25, tol_x=1e-14, tol_f=1e-14)
    a0 = system.acceleration(s.q)
    full = newmark_step(system, s, a0, cfg)
    lin = linearized_newmark_step(system, s, a0, cfg)
    assert np.allclose(full.state.q, lin.state.q)
    assert np.allclose(full.state.v, lin.state.v)


def test_newmark_trapezoidal_conserves_harmonic_energy():
    system = harmonic(9.0)
    s0 = PhaseState([1.0], [0.0])
    traj = run_trajectory("newmark", system, s0, 20.0, IntegratorConfig(h=0.1, beta=0.25))
    assert np.ptp(traj.energy) < 1e-9


def test_shake_keeps_constraints():
    base, cons, exact = circular_motion()
    cfg = IntegratorConfig(h=0.05, tol_x=1e-12, tol_f=1e-12)
    traj = run_trajectory(Stepper("shake", base, cfg, cons), base, exact(0.0), 5.0, cfg)
    assert np.max(traj.g_norm) < 1e-10
    # circle of radius 1 at unit speed needs centripetal multiplier of magnitude 1/2
    lam = traj.extras["multiplier"][:-1, 0]
    assert np.allclose(np.abs(lam), 0.5, atol=5e-3)


def test_shake_step_on_exact_circle_points():
    base, cons, exact = circular_motion()
    cfg = IntegratorConfig(h=0.01, tol_x=1e-13, tol_f=1e-13)
    res = shake_step(base, cons, exact(0.01).q, exact(0.0).q, cfg)
    assert abs(cons.g(res.q)[0]) < 1e-12
    assert np.allclose(res.q, exact(0.02).q, atol=1e-7)


def test_constrained_acceleration_on_circle():
    base, cons, exact = circular_motion(v0=(0.0, 2.0))
    s = exact(0.3)
    assert np.allclose(constrained_acceleration(base, cons, s), -4.0 * s.q)


def test_gla_without_friction_reduces_to_sylipn(penalty):
    _, _, system = penalty
    cfg = IntegratorConfig(h=0.05)
    s = PhaseState([0.1, -1.0, 1.0, -2.0], [0.1, 0.0, 0.0, 0.2])
    a = gla_step(system, s, cfg, LangevinConfig(0.0, 1.0), RngStream(0)).state
    b = sylipn_step(system, s, cfg).state
    assert np.array_equal(a.q, b.q) and np.array_equal(a.v, b.v)


def test_stochastic_stepper_reset_reproduces(penalty):
    _, cons, system = penalty
    cfg = IntegratorConfig(h=0.05)
    step = Stepper("gla-sylipn", system, cfg, cons, LangevinConfig(1.0, 5.0, seed=11))
    s0 = double_pendulum_initial_state()
    a = run_trajectory(step, system, s0, 1.0, cfg)
    b = run_trajectory(step, system, s0, 1.0, cfg)
    assert np.array_equal(a.q, b.q)


@pytest.mark.parametrize("name", INTEGRATORS)
def test_every_integrator_runs_on_pendulum(name, penalty):
    base, cons, system = penalty
    cfg = IntegratorConfig(h=0.01)
    sys_ = base if name in ("shake", "gla-shake") else system
    lang = LangevinConfig(0.1, 10.0) if name.startswith("gla") else None
    traj = run_trajectory(Stepper(name, sys_, cfg, cons, lang), sys_,
                          double_pendulum_initial_state(), 0.5, cfg, 5)
    assert traj.t[-1] == pytest.approx(0.5)
    assert np.all(np.isfinite(traj.q))
    assert np.max(traj.g_norm) < 0.05


def test_pushforward_records_physical_position(penalty):
    _, _, system = penalty
    cfg = IntegratorConfig(h=0.05)
    traj = run_trajectory("sylipn", system, double_pendulum_initial_state(), 1.0, cfg)
    x = traj.extras["x"]
    a = np.array([sylipn_accel(system, xi, cfg) for xi in x])
    assert np.allclose(traj.q, x + 0.4 * 0.05 ** 2 * a)
    assert total_energy(system, traj.state(3)) == pytest.approx(traj.energy[3])


def test_sylipn_energy_bounded_on_hanging_pendulum(penalty):
    _, _, system = penalty
    traj = run_trajectory("sylipn", system, double_pendulum_initial_state(), 100.0,
                          IntegratorConfig(h=0.05), 10)
    assert np.ptp(traj.energy) < 5e-3


def test_run_trajectory_validates_span():
    with pytest.raises(ConfigurationError):
        run_trajectory("vv", harmonic(), PhaseState([1.0], [0.0]), 0.33,
                       IntegratorConfig(h=0.1))
    with pytest.raises(ConfigurationError):
        run_trajectory("vv", harmonic(), PhaseState([1.0], [0.0]), 1.0,
                       IntegratorConfig(h=0.1), record_stride=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_reports_step_index():
    system = harmonic(1e8)
    with pytest.raises(StepError) as exc:
        run_trajectory("vv", system, PhaseState([1.0], [0.0]), 100.0, IntegratorConfig(h=1.0))
    assert exc.value.step_index is not None and exc.value.step_index > 1


def test_stepper_configuration_errors(penalty):
    base, cons, system = penalty
    cfg = IntegratorConfig(h=0.1)
    with pytest.raises(ConfigurationError):
        Stepper("rk4", system, cfg)
    with pytest.raises(ConfigurationError):
        Stepper("gla-sylipn", system, cfg)
    with pytest.raises(ConfigurationError):
        Stepper("sylipn-stiff", base, cfg)
    with pytest.raises(ConfigurationError):
        IntegratorConfig(h=-1.0)


def test_step_functions_match_named_steppers(penalty):
    _, _, system = penalty
    cfg = IntegratorConfig(h=0.05)
    s0 = double_pendulum_initial_state()
    by_name = run_trajectory("sylipn", system, s0, 1.0, cfg)
    by_fn = run_trajectory(sylipn_step, system, s0, 1.0, cfg)
    assert np.array_equal(by_name.q, by_fn.q)
    cfg = IntegratorConfig(h=0.005)
    vv = run_trajectory(velocity_verlet_step, system, s0, 1.0, cfg)
    assert np.array_equal(vv.q, run_trajectory("vv", system, s0, 1.0, cfg).q)
