import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import null_space
from scipy.sparse.linalg import minres

from sparsecon.exceptions import ContractError
from sparsecon.project import project, project_batch, predict_projected


def kkt_dense(G, g, xp):
    c, n = G.shape
    K = np.block([[np.eye(n), G.T], [G, np.zeros((c, c))]])
    return np.linalg.solve(K, np.concatenate([xp, -g]))[:n]


def kkt_minres(G, g, xp):
    c, n = G.shape
    K = np.block([[np.eye(n), G.T], [G, np.zeros((c, c))]])
    sol, info = minres(K, np.concatenate([xp, -g]), rtol=1e-14, maxiter=1000)
    assert info == 0
    return sol[:n]


def random_instance(rng):
    n = int(rng.integers(1, 9))
    c = int(rng.integers(1, n + 1))
    return rng.normal(size=(c, n)), rng.normal(size=c), rng.normal(size=n)


def test_axis_plane_example():
    r = project([[0, 1, 0]], [0], [1, 1, 1])
    np.testing.assert_array_equal(r.projected, [1, 0, 1])
    np.testing.assert_array_equal(r.residual_before, [1])
    assert r.correction_norm == 1.0 and not r.degenerate


def test_feasible_point_unchanged():
    G, g = np.array([[1.0, 2.0, -1.0]]), np.array([0.5])
    xp = np.array([0.5, 0.0, 1.0])
    r = project(G, g, xp)
    np.testing.assert_array_equal(r.projected, xp)
    assert r.correction_norm == 0.0


def test_c2_n6_against_iterative_kkt():
    rng = np.random.default_rng(0)
    for _ in range(200):
        G, g, xp = rng.normal(size=(2, 6)), rng.normal(size=2), rng.normal(size=6)
        np.testing.assert_allclose(project(G, g, xp).projected, kkt_minres(G, g, xp), atol=1e-8)


def test_dense_kkt_oracle_many_instances():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        G, g, xp = random_instance(rng)
        r = project(G, g, xp)
        np.testing.assert_allclose(r.projected, kkt_dense(G, g, xp), atol=1e-8)
        if not r.degenerate:
            assert np.abs(G @ r.projected + g).max() <= 1e-8


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_properties(seed):
    rng = np.random.default_rng(seed)
    G, g, xp = random_instance(rng)
    r = project(G, g, xp)
    p = r.projected
    # idempotent on its own output, exactly when well conditioned
    again = project(G, g, p)
    if r.degenerate:
        np.testing.assert_allclose(again.projected, p, atol=1e-10)
    else:
        assert np.array_equal(again.projected, p) and again.correction_norm == 0.0
    # minimum norm: correction orthogonal to the null space of G
    N = null_space(G)
    if N.size:
        assert np.abs((xp - p) @ N).max() <= 1e-8
    # Pythagoras for any feasible point
    f = p + (N @ rng.normal(size=N.shape[1]) if N.size else 0.0)
    lhs = np.sum((xp - f) ** 2)
    rhs = np.sum((p - f) ** 2) + np.sum((xp - p) ** 2)
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, lhs)


def test_zero_constraint_is_vacuous():
    r = project(np.zeros((2, 3)), [0.3, 0.0], [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(r.projected, [1, 2, 3])
    assert r.degenerate and r.correction_norm == 0.0


def test_rank_deficient_rows_regularized():
    G = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    r = project(G, [1.0, 2.0], [3.0, 1.0, 1.0])
    assert r.degenerate
    np.testing.assert_allclose(r.projected, [-1.0, 1.0, 1.0], atol=1e-6)


def test_no_constraints_and_shape_checks():
    r = project(np.zeros((0, 3)), np.zeros(0), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(r.projected, [1, 2, 3])
    with pytest.raises(ContractError):
        project(np.ones((3, 2)), np.ones(3), np.ones(2))
    with pytest.raises(ContractError):
        project(np.ones((1, 2)), np.ones(1), np.ones(3))


def test_batch_matches_single():
    rng = np.random.default_rng(2)
    G = rng.normal(size=(50, 2, 5))
    G[3] = 0.0
    G[7, 1] = 2 * G[7, 0]
    g = rng.normal(size=(50, 2))
    X = rng.normal(size=(50, 5))
    P, flags = project_batch(G, g, X)
    for i in range(50):
        r = project(G[i], g[i], X[i])
        np.testing.assert_allclose(P[i], r.projected, atol=1e-12)
        assert flags[i] == r.degenerate
    assert flags[3] and flags[7] and flags.sum() == 2
    P0, f0 = project_batch(np.zeros((4, 0, 3)), np.zeros((4, 0)), X[:4, :3])
    np.testing.assert_array_equal(P0, X[:4, :3])
    assert not f0.any()


def test_predict_projected_unicycle(unicycle_run):
    _, art, _ = unicycle_run
    sys = art.bundle.make_system()
    T = art.bundle.test
    out = predict_projected(art.sparse, art.manifold, T.states, T.controls)
    Gam = art.manifold.gamma(T.states)
    assert np.abs(np.einsum("sn,sn->s", Gam[:, 0, :-1], out) + Gam[:, 0, -1]).max() <= 1e-6
    th = T.states[:, 2]
    assert np.abs(-np.sin(th) * out[:, 0] + np.cos(th) * out[:, 1]).max() <= 5e-2
    single = predict_projected(art.sparse, art.manifold, T.states[0], T.controls[0])
    np.testing.assert_allclose(single, out[0], atol=1e-12)
    # with the true constraint, projecting never increases the error
    F = sys.dynamics(T.states, T.controls)
    pred = art.sparse.predict(T.inputs)
    G = np.stack([sys.true_constraint(x) for x in T.states])
    P, _ = project_batch(G[..., :-1], G[..., -1], pred)
    assert np.all(np.linalg.norm(P - F, axis=1) <= np.linalg.norm(pred - F, axis=1) + 1e-10)


class NoConstraints:
    def gamma(self, X):
        return np.zeros((len(np.atleast_2d(X)), 0, 4))


def test_predict_projected_without_constraints(unicycle_run):
    _, art, _ = unicycle_run
    T = art.bundle.test
    out = predict_projected(art.sparse, NoConstraints(), T.states[:5], T.controls[:5])
    np.testing.assert_array_equal(out, art.sparse.predict(T.inputs[:5]))
