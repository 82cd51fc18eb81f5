import numpy as np
import pytest

from oracles import scalar_set_conv, sigmoid
from rcp.data_io import make_rng, random_shape
from rcp.errors import InvalidInput, WeightShapeError
from rcp.features import FeatureMap, WeightBundle
from rcp.geometry import FlowField, PointCloud, RigidMotion, build_index
from rcp.regularizer import (
    DEFAULT_HIDDEN, DEFAULT_LAMBDA, DEFAULT_SMOOTH_K, DEFAULT_SWEEPS, DEFAULT_TAU_INT, Grouping, HiddenState,
    RecurrentRegularizer, gru_gates, gru_input, gru_step, init_hidden, interpolate_feature, knn_graph,
    laplacian_objective, laplacian_smooth, predict_residual_flow, predict_residual_motion,
    random_regularizer_weights,
)


def test_defaults():
    assert DEFAULT_HIDDEN == 64
    assert DEFAULT_TAU_INT == 0.01
    assert (DEFAULT_LAMBDA, DEFAULT_SWEEPS, DEFAULT_SMOOTH_K) == (1.0, 10, 8)


# ---------------------------------------------------------------- interpolation

def test_interpolate_feature_full_softmax_oracle():
    rng = make_rng(0)
    Q = PointCloud(rng.normal(size=(25, 3)))
    fQ = FeatureMap(rng.normal(size=(25, 4)))
    x = rng.normal(size=(10, 3))
    got = interpolate_feature(fQ, build_index(Q), x, k_omega=25, tau_int=0.5)
    for i in range(10):
        logit = np.array([-np.sum((q - x[i]) ** 2) / 0.5 for q in Q.points])
        w = np.exp(logit - logit.max())
        w /= w.sum()
        np.testing.assert_allclose(got[i], w @ fQ.descriptors, atol=1e-12)


def test_interpolate_feature_at_target_point_and_single():
    Q = random_shape(100, 1)
    fQ = FeatureMap(make_rng(1).normal(size=(100, 3)))
    got = interpolate_feature(fQ, build_index(Q), Q.points[7], tau_int=1e-6)
    assert got.shape == (3,)
    np.testing.assert_allclose(got, fQ.descriptors[7], atol=1e-12)


def test_gru_input_layout():
    fP = FeatureMap(np.ones((2, 2)))
    v = gru_input(fP, np.zeros((2, 2)), FlowField([[1.0, 2, 3], [4.0, 5, 6]]))
    np.testing.assert_array_equal(v, [[1, 1, 1, 2, 3], [1, 1, 4, 5, 6]])
    with pytest.raises(InvalidInput):
        gru_input(fP, np.full((2, 2), np.inf), FlowField.zeros(2))


# ---------------------------------------------------------------- recurrent unit

def test_gru_step_matches_scalar_loop():
    P = random_shape(5, 2)
    weights = random_regularizer_weights(2, hidden=4, seed=3, group_k=3)
    arrays = {n: l.array for n, l in zip(weights.names(), weights.layers)}
    group = Grouping.build(build_index(P), 3)
    rng = make_rng(4)
    v = rng.normal(size=(5, 5))
    h0 = HiddenState(np.tanh(rng.normal(size=(5, 4))))
    got = gru_step(h0, v, weights, group).h

    hv = np.c_[h0.h, v]
    w = sigmoid(scalar_set_conv(P.points, hv, group.nbr, arrays, "gru.w", False))
    r = sigmoid(scalar_set_conv(P.points, hv, group.nbr, arrays, "gru.r", False))
    cand = np.tanh(scalar_set_conv(P.points, np.c_[r * h0.h, v], group.nbr, arrays, "gru.h", False))
    np.testing.assert_allclose(got, (1 - w) * h0.h + w * cand, atol=1e-9)

    init = init_hidden(v, weights, group).h
    x = scalar_set_conv(P.points, v, group.nbr, arrays, "init.0", True)
    np.testing.assert_allclose(init, np.tanh(scalar_set_conv(P.points, x, group.nbr, arrays, "init.1", False)), atol=1e-9)


def _setup(n=40, d=3, hidden=8, seed=0, **kw):
    P = random_shape(n, seed)
    weights = random_regularizer_weights(d, hidden=hidden, seed=seed, group_k=8, **kw)
    group = Grouping.build(build_index(P), 8)
    v = make_rng(seed).normal(size=(n, d + 3))
    return P, weights, group, v


def test_gates_open_interval():
    _, weights, group, v = _setup()
    h = init_hidden(v, weights, group)
    w, r, cand = gru_gates(h, v, weights, group)
    for g in (w, r):
        assert np.all(g > 0) and np.all(g < 1)
    assert np.all(np.abs(cand) <= 1)


def test_gate_limits():
    _, closed, group, v = _setup(gate_bias=-60.0)
    h = init_hidden(v, closed, group)
    np.testing.assert_allclose(gru_step(h, v, closed, group).h, h.h, atol=1e-12)
    _, opened, group, v = _setup(gate_bias=60.0)
    h = init_hidden(v, opened, group)
    _, _, cand = gru_gates(h, v, opened, group)
    np.testing.assert_allclose(gru_step(h, v, opened, group).h, cand, atol=1e-12)


def test_hidden_state_bounded_over_many_steps():
    _, weights, group, v = _setup(seed=5)
    rng = make_rng(6)
    h = init_hidden(v, weights, group)
    for _ in range(50):
        h = gru_step(h, rng.normal(scale=3.0, size=v.shape), weights, group)
        assert np.all(np.isfinite(h.h)) and np.max(np.abs(h.h)) <= 1.0


def test_gru_shape_errors():
    _, weights, group, v = _setup()
    h = init_hidden(v, weights, group)
    with pytest.raises(WeightShapeError):
        gru_step(HiddenState(h.h[:-1]), v, weights, group)


def test_zero_heads_give_zero_residual_and_identity():
    P, weights, group, v = _setup()
    arrays = {n: l.array for n, l in zip(weights.names(), weights.layers)}
    for name in ("flow.head.weight", "flow.head.bias", "motion.head.weight", "motion.head.bias"):
        arrays[name] = np.zeros_like(arrays[name])
    zero = WeightBundle.from_arrays(arrays, weights.meta)
    h = init_hidden(v, zero, group)
    np.testing.assert_array_equal(predict_residual_flow(h, zero, group).vectors, 0.0)
    m = predict_residual_motion(h, zero)
    np.testing.assert_array_equal(m.rotation, [1.0, 0, 0, 0])
    np.testing.assert_array_equal(m.translation, 0.0)


def test_motion_head_permutation_invariant_and_flow_equivariant():
    P, weights, _, v = _setup(seed=7)
    perm = make_rng(8).permutation(len(P))
    a = RecurrentRegularizer(weights, build_index(P))
    b = RecurrentRegularizer(weights, build_index(P.permuted(perm)))
    a.start(v)
    b.start(v[perm])
    for _ in range(3):
        a.step(v)
        b.step(v[perm])
    np.testing.assert_allclose(b.hidden.h, a.hidden.h[perm], atol=1e-12)
    np.testing.assert_allclose(b.residual_flow().vectors, a.residual_flow().vectors[perm], atol=1e-12)
    assert b.residual_motion().angle_to(a.residual_motion()) < 1e-12


def test_regularizer_uses_group_k_from_meta():
    P, weights, _, _ = _setup()
    assert RecurrentRegularizer(weights, build_index(P)).group.nbr.shape == (len(P), 8)
    assert RecurrentRegularizer(weights, build_index(P), group_k=4).group.nbr.shape == (len(P), 4)


# ---------------------------------------------------------------- Laplacian smoother

def test_knn_graph_symmetric_without_self():
    P = random_shape(60, 3)
    g = knn_graph(build_index(P), 5)
    adj = np.zeros((60, 60), dtype=bool)
    for i in range(60):
        nb = g.indices[g.indptr[i]:g.indptr[i + 1]]
        assert i not in nb
        adj[i, nb] = True
    assert np.array_equal(adj, adj.T)
    assert len(g.edges) == adj.sum() // 2
    assert np.all(g.degree >= 5)


def test_laplacian_monotone_objective():
    P = random_shape(200, 4)
    z = FlowField(make_rng(5).normal(size=(200, 3)))
    _, hist = laplacian_smooth(z, build_index(P), lam=2.0, iters=30, return_history=True)
    assert len(hist) == 31
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]


def test_laplacian_converges_to_dense_solve():
    # a 50-point chain: each point's 2 nearest others are its chain neighbors
    pts = np.c_[np.arange(50.0), np.zeros(50), np.zeros(50)]
    P = PointCloud(pts)
    z = make_rng(6).normal(size=(50, 3))
    lam = 0.5
    index = build_index(P)
    g = knn_graph(index, 2)
    lap = np.zeros((50, 50))
    for i, j in g.edges:
        lap[i, i] += 1
        lap[j, j] += 1
        lap[i, j] -= 1
        lap[j, i] -= 1
    exact = np.linalg.solve(np.eye(50) + lam * lap, z)
    x = laplacian_smooth(FlowField(z), index, lam=lam, iters=500, k=2)
    np.testing.assert_allclose(x.vectors, exact, atol=1e-8)
    assert laplacian_objective(x.vectors, z, g, lam) <= laplacian_objective(z, z, g, lam)


def test_laplacian_constant_fixed_point():
    P = random_shape(80, 7)
    z = FlowField(np.tile([0.3, -0.1, 0.2], (80, 1)))
    np.testing.assert_allclose(laplacian_smooth(z, build_index(P), iters=20).vectors, z.vectors, atol=1e-15)


def test_laplacian_zero_sweeps_and_errors():
    P = random_shape(30, 8)
    z = FlowField(make_rng(9).normal(size=(30, 3)))
    np.testing.assert_array_equal(laplacian_smooth(z, build_index(P), iters=0).vectors, z.vectors)
    with pytest.raises(InvalidInput):
        laplacian_smooth(z, build_index(P), lam=0.0)
    with pytest.raises(InvalidInput):
        laplacian_smooth(FlowField.zeros(29), build_index(P))


def test_laplacian_single_point():
    P = PointCloud([[0.0, 0, 0]])
    z = FlowField([[1.0, 2, 3]])
    np.testing.assert_array_equal(laplacian_smooth(z, build_index(P)).vectors, z.vectors)


def test_identity_motion_type():
    assert isinstance(RigidMotion.identity(), RigidMotion)
