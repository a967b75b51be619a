import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecon.exceptions import ContractError, ControlBoundsError, RolloutError
from sparsecon.systems import (
    PlanarQuadrotor,
    Trajectory,
    Unicycle,
    eval_dynamics,
    eval_true_constraint,
    make_system,
    rollout,
    wrap_to_pi,
)


@pytest.fixture
def uni():
    return Unicycle()


@pytest.fixture
def quad():
    return PlanarQuadrotor()


def random_states(sys, rng, k):
    x = rng.uniform(-3, 3, size=(k, sys.state_dim))
    if sys.angle_dims:
        x[:, list(sys.angle_dims)] = rng.uniform(-np.pi, np.pi, size=(k, len(sys.angle_dims)))
    return x


def test_unicycle_dynamics_examples(uni):
    np.testing.assert_array_equal(eval_dynamics(uni, [0, 0, 0], [1, 0]), [1, 0, 0])
    wide = Unicycle(speed_bounds=(0.0, 2.0))
    np.testing.assert_allclose(eval_dynamics(wide, [5, -3, np.pi / 2], [2, 1]), [0, 2, 1], atol=1e-12)


def test_quadrotor_hover_is_equilibrium(quad):
    u = [quad.mass * quad.gravity / 2] * 2
    np.testing.assert_allclose(eval_dynamics(quad, np.zeros(6), u), np.zeros(6), atol=1e-15)


def test_dynamics_rejects_bad_input(uni):
    with pytest.raises(ContractError):
        uni.dynamics([0, 0], [1, 0])
    with pytest.raises(ContractError):
        uni.dynamics([0, 0, 0], [1, 0, 0])
    with pytest.raises(ControlBoundsError) as info:
        uni.dynamics([0, 0, 0], [1.5, 0])
    assert info.value.violations == [0]
    assert "u[0]=1.5" in str(info.value)


def test_true_constraint_unicycle_examples(uni):
    np.testing.assert_allclose(np.abs(eval_true_constraint(uni, [3, -2, 0.0])), [[0, 1, 0, 0]], atol=1e-15)
    # pivot-scaled echelon form of [-sqrt(2)/2, sqrt(2)/2, 0, 0]
    g = uni.true_constraint(np.array([0, 0, np.pi / 4]), row_scale="pivot")
    np.testing.assert_allclose(g, [[1, -1, 0, 0]], atol=1e-12)
    g = uni.true_constraint(np.array([0, 0, np.pi / 4]), pivoting="leftmost", row_scale="pivot")
    np.testing.assert_allclose(g, [[1, -1, 0, 0]], atol=1e-12)


def test_true_constraint_quadrotor_has_thrust_row(quad):
    g = quad.true_constraint(np.zeros(6))
    assert g.shape == (4, 7)
    rows = {tuple(np.round(np.abs(r), 12)) for r in g}
    assert (0, 0, 0, 1, 0, 0, 0) in rows
    x = np.array([0, 0, 0.2, 0.3, -0.1, 0.05])
    R = quad.true_constraint(x, row_scale="pivot")
    s = quad._normal_rows(x)
    # same row space as the analytic rows
    assert np.linalg.matrix_rank(np.vstack([R, s]), tol=1e-9) == 4


@pytest.mark.parametrize("name", ["unicycle", "quadrotor"])
def test_constraint_consistency(name):
    sys = make_system(name)
    rng = np.random.default_rng(0)
    X = random_states(sys, rng, 1000)
    U = sys.sample_controls(rng, 1000)
    F = sys.dynamics(X, U)
    for x, f in zip(X, F):
        G = sys.true_constraint(x)
        assert np.abs(G @ np.append(f, 1.0)).max() <= 1e-9
    assert sys.constraint_count < sys.state_dim


@pytest.mark.parametrize("name", ["unicycle", "quadrotor"])
def test_position_invariance_is_exact(name):
    sys = make_system(name)
    rng = np.random.default_rng(1)
    X = random_states(sys, rng, 200)
    U = sys.sample_controls(rng, 200)
    X2 = X.copy()
    X2[:, list(sys.invariant_dims)] += rng.normal(scale=50, size=(200, len(sys.invariant_dims)))
    np.testing.assert_array_equal(sys.dynamics(X, U), sys.dynamics(X2, U))


def test_rollout_straight_line(uni):
    tr = rollout(uni, [0, 0, 0], [[1, 0]] * 10, 0.1)
    assert len(tr) == 11 and tr.controls.shape == (10, 2)
    np.testing.assert_allclose(tr.states[-1], [1, 0, 0], atol=1e-9)


def test_rollout_hover(quad):
    u = [[quad.hover_thrust] * 2] * 100
    x0 = np.array([0.3, -0.2, 0.0, 0.0, 0.0, 0.0])
    tr = rollout(quad, x0, u, 0.01)
    np.testing.assert_allclose(tr.states[-1], x0, atol=1e-9)


def test_rollout_circle(uni):
    tr = rollout(uni, [0, 0, 0], [[1, 1]] * 1000, 1e-3)
    # closed form: p(t) = (sin t, 1 - cos t)
    r = np.hypot(tr.states[:, 0], tr.states[:, 1] - 1.0)
    assert np.abs(r - 1.0).max() <= 1e-3
    np.testing.assert_allclose(tr.states[-1, :2], [np.sin(1.0), 1 - np.cos(1.0)], atol=1e-3)


def test_rollout_records_exact_derivatives(quad):
    rng = np.random.default_rng(2)
    U = quad.sample_controls(rng, 30)
    tr = rollout(quad, np.zeros(6), U, 0.02)
    np.testing.assert_array_equal(tr.derivs, quad.dynamics(tr.states, tr.sample_controls))


def test_rk4_order(uni):
    t_end = 2.0
    x0 = [0, 0, 0.3]
    u = [0.6, 0.8]
    ref = rollout(uni, x0, [u] * 2000, t_end / 2000).states[-1]
    errs = [np.linalg.norm(rollout(uni, x0, [u] * n, t_end / n).states[-1] - ref) for n in (10, 20)]
    assert errs[0] / errs[1] >= 8.0


def test_rollout_rejects_nonfinite():
    sys = Unicycle(speed_bounds=(0.0, 1e308))
    with pytest.raises(RolloutError):
        rollout(sys, [0, 0, 0], [[1e308, 0]] * 3, 10.0)


def test_rollout_wraps_angles(uni):
    tr = rollout(uni, [0, 0, 3.0], [[0, 1]] * 20, 0.1)
    assert np.all(tr.states[:, 2] >= -np.pi) and np.all(tr.states[:, 2] < np.pi)


def test_trajectory_validation():
    with pytest.raises(ContractError):
        Trajectory(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros((3, 2)), 0.1)
    with pytest.raises(ContractError):
        Trajectory(np.full((2, 1), np.nan), np.zeros((1, 1)), np.zeros((2, 1)), 0.1)


def test_make_system_unknown():
    with pytest.raises(ContractError):
        make_system("segway")


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_wrap_to_pi_range(a):
    w = float(wrap_to_pi(a))
    assert -np.pi <= w < np.pi
    assert abs(np.sin(w) - np.sin(a)) < 1e-9 and abs(np.cos(w) - np.cos(a)) < 1e-9
