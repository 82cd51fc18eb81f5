import numpy as np
import pytest

from conftest import random_rotation
from rcp.data_io import make_rng
from rcp.errors import DegenerateFit, InvalidInput
from rcp.features import FeatureMap
from rcp.geometry import PointCloud, RigidMotion, apply_motion
from rcp.matching import (
    DEFAULT_EPSILON, DEFAULT_MAX_ITERS, DEFAULT_TOL, TransportPlan, cost_matrix, init_flow, init_motion,
    sinkhorn,
)


def plan_from(weights):
    w = np.asarray(weights, dtype=float)
    return TransportPlan(w, w.sum(1), w.sum(0), 0.0, 0)


def naive_sinkhorn(c, eps, iters):
    """Textbook scaling iterations; only valid for mild costs."""
    k = np.exp(-c / eps)
    a = np.full(c.shape[0], 1 / c.shape[0])
    b = np.full(c.shape[1], 1 / c.shape[1])
    v = np.ones(c.shape[1])
    for _ in range(iters):
        u = a / (k @ v)
        v = b / (k.T @ u)
    return u[:, None] * k * v[None, :]


def test_defaults():
    assert (DEFAULT_EPSILON, DEFAULT_MAX_ITERS, DEFAULT_TOL) == (0.03, 100, 1e-6)


def test_cost_matrix_values():
    e = np.eye(3)
    fp = FeatureMap(np.array([e[0], e[0], -e[0], [0.0, 0, 0]]))
    fq = FeatureMap(np.array([e[0], e[1]]))
    c = cost_matrix(fp, fq)
    np.testing.assert_allclose(c, [[0, 1], [0, 1], [2, 1], [1, 1]], atol=1e-15)
    with pytest.raises(InvalidInput):
        cost_matrix(fp, FeatureMap(np.ones((2, 4))))


def test_sinkhorn_trivial_cases():
    assert sinkhorn(np.array([[3.7]])).weights.tolist() == [[1.0]]
    p = sinkhorn(np.full((4, 6), 0.3))
    np.testing.assert_allclose(p.weights, 1 / 24, atol=1e-15)
    sharp = sinkhorn(np.array([[0.0, 50.0], [50.0, 0.0]]), epsilon=0.01)
    np.testing.assert_allclose(np.diag(sharp.weights), 0.5, atol=1e-12)
    assert sharp.weights[0, 1] < 1e-6 and sharp.weights[1, 0] < 1e-6


def test_sinkhorn_rejects_bad_cost():
    with pytest.raises(InvalidInput):
        sinkhorn(np.array([[0.0, np.nan]]))


def test_sinkhorn_matches_naive_iterations():
    rng = make_rng(0)
    c = rng.uniform(size=(12, 9))
    ours = sinkhorn(c, epsilon=0.5, max_iters=500, tol=1e-14)
    ref = naive_sinkhorn(c, 0.5, 2000)
    np.testing.assert_allclose(ours.weights, ref, atol=1e-12)


def test_sinkhorn_marginals_and_monotone_violation():
    rng = make_rng(1)
    for _ in range(20):
        c = rng.uniform(size=(64, 64))
        p = sinkhorn(c)
        assert p.converged()
        np.testing.assert_allclose(p.weights.sum(1), 1 / 64, atol=1e-6)
        np.testing.assert_allclose(p.weights.sum(0), 1 / 64, atol=1e-12)
        assert all(b <= a for a, b in zip(p.history, p.history[1:]))


def test_sinkhorn_shift_invariance():
    rng = make_rng(2)
    c = rng.uniform(size=(20, 30))
    base = sinkhorn(c, tol=1e-12, max_iters=1000).weights
    shifted = c + rng.normal(size=(20, 1)) + rng.normal(size=(1, 30))
    np.testing.assert_allclose(sinkhorn(shifted, tol=1e-12, max_iters=1000).weights, base, atol=1e-9)


def test_sinkhorn_stable_for_tiny_epsilon():
    c = make_rng(3).uniform(size=(30, 30)) * 2
    p = sinkhorn(c, epsilon=1e-4, max_iters=500)
    assert np.all(np.isfinite(p.weights))
    assert np.all(p.weights >= 0)


def test_sinkhorn_entropy_decreases_with_epsilon():
    rng = make_rng(4)
    for _ in range(10):
        c = rng.uniform(size=(16, 16))
        assert sinkhorn(c, 0.003, max_iters=2000).entropy() <= sinkhorn(c, 0.03, max_iters=2000).entropy()


# ---------------------------------------------------------------- init

def test_init_flow_uniform_plan():
    rng = make_rng(5)
    P, Q = PointCloud(rng.normal(size=(5, 3))), PointCloud(rng.normal(size=(7, 3)))
    flow = init_flow(plan_from(np.full((5, 7), 1 / 35)), P, Q)
    np.testing.assert_allclose(flow.vectors, Q.points.mean(0) - P.points, atol=1e-14)


def test_init_flow_single_target_and_empty_rows():
    P = PointCloud(make_rng(6).normal(size=(4, 3)))
    Q = PointCloud([[1.0, 2.0, 3.0]])
    w = np.array([[0.25], [0.25], [0.5], [0.0]])
    flow = init_flow(plan_from(w), P, Q).vectors
    np.testing.assert_array_equal(flow[:3], Q.points - P.points[:3])
    np.testing.assert_array_equal(flow[3], 0.0)


def test_init_flow_diagonal_plan_self_alignment():
    pts = make_rng(7).normal(size=(50, 3))
    c = ((pts[:, None] - pts[None]) ** 2).sum(2)
    plan = sinkhorn(c, epsilon=1e-3, max_iters=200)
    flow = init_flow(plan, PointCloud(pts), PointCloud(pts))
    assert np.max(np.linalg.norm(flow.vectors, axis=1)) < 1e-6


def test_init_motion_recovers_permuted_match():
    rng = make_rng(8)
    P = PointCloud(rng.normal(size=(40, 3)))
    m = RigidMotion.from_matrix(random_rotation(rng), rng.normal(size=3))
    perm = rng.permutation(40)
    Q = apply_motion(P, m).permuted(perm)
    w = np.zeros((40, 40))
    w[perm, np.arange(40)] = 1 / 40
    fit = init_motion(plan_from(w), P, Q)
    assert fit.angle_to(m) < 1e-6
    same = init_motion(plan_from(np.eye(40) / 40), P, P)
    assert same.angle_to(RigidMotion.identity()) < 1e-4


def test_init_motion_uniform_plan_is_degenerate():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [0, 0, 1.0], [0, 0, -1.0]])
    P = PointCloud(pts)
    try:
        m = init_motion(plan_from(np.full((6, 6), 1 / 36)), P, P)
    except DegenerateFit:
        return
    assert m.angle_to(RigidMotion.identity()) < 1e-9
    np.testing.assert_allclose(m.translation, 0.0, atol=1e-12)


def test_plan_dimension_check():
    P = PointCloud(np.eye(3))
    with pytest.raises(InvalidInput):
        init_flow(plan_from(np.ones((2, 3))), P, P)
