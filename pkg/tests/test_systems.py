import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from geomint.core import ConfigurationError, PhaseState, build_penalty_system, check_derivatives
from geomint.integrators import IntegratorConfig, Stepper, run_trajectory
from geomint.systems import (ChainParams, DoublePendulumParams, WaterParams, chain_initial_state,
                             circular_motion, double_pendulum_cartesian,
                             double_pendulum_generalized_benchmark,
                             double_pendulum_initial_state, pendulum_chain, pendulum_embedding,
                             water_cluster, water_initial_configuration, water_molecule)


def test_initial_state_lies_on_constraints():
    _, cons = double_pendulum_cartesian()
    assert cons.norm(double_pendulum_initial_state().q) < 1e-14


def test_gravity_sign_sets_initial_potential():
    q0 = double_pendulum_initial_state().q
    hanging, _ = double_pendulum_cartesian()
    flipped, _ = double_pendulum_cartesian(DoublePendulumParams(gravity=-1.0))
    assert hanging.value(q0) == pytest.approx(-3.0)
    assert flipped.value(q0) == pytest.approx(3.0)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_chain_derivatives(n):
    system, cons = pendulum_chain(ChainParams(n, gravity=0.7))
    rng = np.random.default_rng(n)
    pts = rng.standard_normal((4, 2 * n))
    assert check_derivatives(system.value, system.gradient, pts, 1e-7)[1]
    assert check_derivatives(cons.g, cons.jacobian, pts, 1e-7)[1]
    w = rng.standard_normal(n)
    for q in pts:
        fd = check_derivatives(lambda x: cons.jacobian(x).T @ w,
                               lambda x: cons.weighted_hessian(x, w), [q], 1e-7)
        assert fd[1]
    assert cons.norm(chain_initial_state(n).q) < 1e-14


@settings(max_examples=25)
@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_embedding_satisfies_constraints(th, ph):
    params = DoublePendulumParams()
    _, cons = double_pendulum_cartesian(params)
    assert cons.norm(pendulum_embedding(params, th, ph)) < 1e-12


def test_generalized_benchmark_matches_shake():
    params = DoublePendulumParams()
    base, cons = double_pendulum_cartesian(params)
    ref = double_pendulum_generalized_benchmark(params, 0.0, math.pi / 4, 1e-4, 1.0,
                                                record_stride=1000)
    assert np.allclose(ref.q[0], double_pendulum_initial_state().q)
    cfg = IntegratorConfig(h=1e-3, tol_x=1e-12, tol_f=1e-12)
    shake = run_trajectory(Stepper("shake", base, cfg, cons), base,
                           double_pendulum_initial_state(), 1.0, cfg, 100)
    assert np.max(np.abs(ref.q - shake.q)) < 5e-3
    assert np.max(ref.g_norm) < 1e-12
    assert np.ptp(ref.energy) < 1e-2


def test_circle_exact_solution_is_consistent():
    base, cons, exact = circular_motion(v0=(0.0, -2.0))
    s = exact(0.7)
    assert cons.norm(s.q) < 1e-14
    fd = (exact(0.7 + 1e-6).q - exact(0.7 - 1e-6).q) / 2e-6
    assert np.allclose(fd, s.v, atol=1e-8)
    with pytest.raises(ConfigurationError):
        circular_motion(q0=(2.0, 0.0))


def test_water_defaults_from_data_file():
    params = WaterParams.default()
    assert params.N == 3
    assert params.r_HH == pytest.approx(1.5139, abs=1e-4)
    assert params.charges.sum() == pytest.approx(0.0)


def test_water_params_file_overrides(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("# custom\nN = 2\nr_OH = 1.0\n")
    params = WaterParams.from_file(path, N=4)
    assert params.N == 4 and params.r_OH == 1.0
    path.write_text("bogus = 3\n")
    with pytest.raises(ConfigurationError):
        WaterParams.from_file(path)


def test_water_molecule_is_rigid_under_rotation():
    params = WaterParams.default(N=1)
    _, cons = water_cluster(params)
    R = Rotation.from_rotvec([0.3, -1.2, 0.5]).as_matrix()
    assert cons.norm(water_molecule(params, [1.0, 2.0, 3.0], R)) < 1e-12


def test_water_derivatives_against_differences():
    params = WaterParams.default(N=2)
    system, cons = water_cluster(params)
    q = water_initial_configuration(params, seed=1)
    rng = np.random.default_rng(0)
    pts = [q, q + 0.05 * rng.standard_normal(q.size)]
    assert check_derivatives(system.value, system.gradient, pts, 1e-6)[1]
    assert check_derivatives(system.gradient, system.hessian, pts, 1e-5)[1]
    assert check_derivatives(cons.g, cons.jacobian, pts, 1e-7)[1]


def test_water_penalty_blocks_match_full_hessian():
    params = WaterParams.default(N=2)
    _, cons = water_cluster(params)
    penalty = build_penalty_system(*water_cluster(params), 10.0)
    q = water_initial_configuration(params, seed=0) + 0.01
    H = penalty.stiff.hessian(q)
    blocks = penalty.stiff.hessian_blocks(q)
    for b in range(params.N):
        sl = slice(9 * b, 9 * b + 9)
        assert np.allclose(blocks[b], H[sl, sl])


def test_water_initial_configuration_is_rigid_and_bound():
    params = WaterParams.default(N=3)
    system, cons = water_cluster(params)
    q = water_initial_configuration(params, seed=0)
    assert cons.norm(q) < 1e-10
    assert system.value(q) < 0
    assert np.array_equal(q, water_initial_configuration(params, seed=0))


def test_short_water_runs_agree_without_noise():
    params = WaterParams.default(N=2)
    base, cons = water_cluster(params)
    q0 = water_initial_configuration(params, seed=0)
    s0 = PhaseState(q0, np.zeros_like(q0))
    cfg = IntegratorConfig(h=0.01, tol_x=1e-12, tol_f=1e-12, stiff_only_hessian=True)
    penalty = build_penalty_system(base, cons, 300.0)
    a = run_trajectory("sylipn", penalty, s0, 1.0, cfg, 10)
    b = run_trajectory(Stepper("shake", base, cfg, cons), base, s0, 1.0, cfg, 10)
    assert np.max(np.abs(a.q - b.q)) < 1e-2
