"""Regularization step: turn the auxiliary flow into the next iterate.

Two interchangeable solvers:

* a GRU-style recurrent unit whose spatial operator is a full-resolution
  set-conv, with residual heads for flow and for rigid motion;
* a classic graph-Laplacian smoother solving
  ``min_X |Z - X|^2 + lam * sum_{(i,j) in E} |x_i - x_j|^2`` by Jacobi sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from rcp import kernels
from rcp.errors import InvalidInput, WeightShapeError
from rcp.features import FeatureMap, WeightBundle, set_conv
from rcp.geometry import FlowField, NeighborIndex, PointCloud, RigidMotion, canonical_quaternion

DEFAULT_HIDDEN = 64
DEFAULT_TAU_INT = 0.01
DEFAULT_LAMBDA = 1.0
DEFAULT_SWEEPS = 10
DEFAULT_SMOOTH_K = 8


@dataclass(frozen=True)
class HiddenState:
    h: np.ndarray

    @property
    def channel_dim(self) -> int:
        return self.h.shape[1]

    def __len__(self):
        return self.h.shape[0]


# --------------------------------------------------------------------------
# feature interpolation and recurrent inputs
# --------------------------------------------------------------------------

def interpolate_feature(
    fQ: FeatureMap, Q_index: NeighborIndex, points, k_omega: int = 32, tau_int: float = DEFAULT_TAU_INT
) -> np.ndarray:
    """Target descriptor at arbitrary positions.

    Softmax over the ``k_omega`` nearest targets with logits
    ``-|q_n - x|^2 / tau_int``. Accepts one point or an ``(N, 3)`` array.
    """
    x = np.asarray(points, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    idx, dist = Q_index.query(x, k_omega)
    logits = -(dist ** 2) / tau_int
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("nk,nkd->nd", w, fQ.descriptors[idx])
    return out[0] if single else out


def gru_input(fP: FeatureMap, fQ_at_warped: np.ndarray, z: FlowField) -> np.ndarray:
    """``v = [f_P(p) - f_Q(p + x) | z]``, one row per source point."""
    v = np.concatenate([fP.descriptors - fQ_at_warped, z.vectors], axis=1)
    if not np.all(np.isfinite(v)):
        raise InvalidInput("recurrent input is not finite")
    return v


# --------------------------------------------------------------------------
# recurrent unit
# --------------------------------------------------------------------------

@dataclass
class Grouping:
    """Full-resolution grouping of the source cloud used by every set-conv."""

    points: np.ndarray
    nbr: np.ndarray

    @classmethod
    def build(cls, P_index: NeighborIndex, k: int):
        nbr, _ = P_index.query(P_index.points, k)
        return cls(P_index.points, nbr)


def _conv(group: Grouping, feats, weights, prefix, final_relu):
    return set_conv(group.points, feats, group.points, group.nbr, weights, prefix, final_relu)


def init_hidden(v1: np.ndarray, weights: WeightBundle, group: Grouping) -> HiddenState:
    """Two set-convs over ``v1`` squashed by tanh."""
    x = _conv(group, v1, weights, "init.0", final_relu=True)
    x = _conv(group, x, weights, "init.1", final_relu=False)
    return HiddenState(np.tanh(x))


def gru_gates(h_prev: HiddenState, v: np.ndarray, weights: WeightBundle, group: Grouping):
    hv = np.concatenate([h_prev.h, v], axis=1)
    w = expit(_conv(group, hv, weights, "gru.w", final_relu=False))
    r = expit(_conv(group, hv, weights, "gru.r", final_relu=False))
    cand = np.tanh(_conv(group, np.concatenate([r * h_prev.h, v], axis=1), weights, "gru.h", final_relu=False))
    return w, r, cand


def gru_step(h_prev: HiddenState, v: np.ndarray, weights: WeightBundle, group: Grouping) -> HiddenState:
    """Gated update ``h = (1 - w) * h_prev + w * h_tilde``."""
    if len(h_prev) != len(v):
        raise WeightShapeError("hidden state and input have different point counts")
    w, _, cand = gru_gates(h_prev, v, weights, group)
    if cand.shape != h_prev.h.shape:
        raise WeightShapeError(f"gru.h produces {cand.shape[1]} channels, hidden state has {h_prev.channel_dim}")
    h = (1.0 - w) * h_prev.h + w * cand
    # a convex combination of values in [-1, 1]; clip only absorbs rounding
    return HiddenState(np.clip(h, -1.0, 1.0))


def predict_residual_flow(h: HiddenState, weights: WeightBundle, group: Grouping) -> FlowField:
    x = _conv(group, h.h, weights, "flow.0", final_relu=True)
    x = _conv(group, x, weights, "flow.1", final_relu=True)
    w, b = weights.affine("flow.head")
    if w.shape[0] != 3:
        raise WeightShapeError("flow.head must produce 3 channels")
    return FlowField(x @ w.T + b)


def predict_residual_motion(h: HiddenState, weights: WeightBundle) -> RigidMotion:
    """Global max-pool, affine head to 7 numbers, identity-biased quaternion."""
    pooled = h.h.max(axis=0)
    w, b = weights.affine("motion.head")
    if w.shape != (7, h.channel_dim):
        raise WeightShapeError(f"motion.head must be (7, {h.channel_dim}), got {w.shape}")
    out = w @ pooled + b
    q = out[:4] + np.array([1.0, 0.0, 0.0, 0.0])
    n = np.linalg.norm(q)
    q = np.array([1.0, 0.0, 0.0, 0.0]) if not np.isfinite(n) or n < 1e-12 else canonical_quaternion(q)
    return RigidMotion(q, out[4:])


class RecurrentRegularizer:
    """Holds weights and the source grouping; threads the hidden state."""

    def __init__(self, weights: WeightBundle, P_index: NeighborIndex, group_k: int | None = None):
        self.weights = weights
        k = int(group_k or weights.meta.get("group_k", 16))
        self.group = Grouping.build(P_index, k)
        self.hidden = None

    def start(self, v1):
        self.hidden = init_hidden(v1, self.weights, self.group)
        return self.hidden

    def step(self, v):
        self.hidden = gru_step(self.hidden, v, self.weights, self.group)
        return self.hidden

    def residual_flow(self):
        return predict_residual_flow(self.hidden, self.weights, self.group)

    def residual_motion(self):
        return predict_residual_motion(self.hidden, self.weights)


def random_regularizer_weights(
    feature_dim: int, hidden: int = DEFAULT_HIDDEN, mlp_hidden: int | None = None,
    seed: int = 0, scale: float = 0.2, gate_bias: float = -2.0, group_k: int = 16,
) -> WeightBundle:
    """Seeded random bundle for the recurrent regularizer.

    The update-gate bias starts at ``gate_bias`` so early steps lean on memory.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    mh = mlp_hidden or hidden
    v_dim = feature_dim + 3
    arrays = {}

    def block(prefix, c_in, c_out, bias_shift=0.0):
        arrays[f"{prefix}.fc1.weight"] = rng.normal(0, scale, (mh, 3 + c_in))
        arrays[f"{prefix}.fc1.bias"] = rng.normal(0, scale, mh)
        arrays[f"{prefix}.fc2.weight"] = rng.normal(0, scale, (c_out, mh))
        arrays[f"{prefix}.fc2.bias"] = rng.normal(0, scale, c_out) + bias_shift

    block("init.0", v_dim, hidden)
    block("init.1", hidden, hidden)
    block("gru.w", hidden + v_dim, hidden, gate_bias)
    block("gru.r", hidden + v_dim, hidden)
    block("gru.h", hidden + v_dim, hidden)
    block("flow.0", hidden, hidden)
    block("flow.1", hidden, hidden)
    arrays["flow.head.weight"] = rng.normal(0, scale * 0.1, (3, hidden))
    arrays["flow.head.bias"] = np.zeros(3)
    arrays["motion.head.weight"] = rng.normal(0, scale * 0.1, (7, hidden))
    arrays["motion.head.bias"] = np.zeros(7)
    meta = {"kind": "regularizer", "hidden": hidden, "feature_dim": feature_dim, "group_k": group_k}
    return WeightBundle.from_arrays(arrays, meta)


# --------------------------------------------------------------------------
# graph-Laplacian smoother
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NeighborGraph:
    """Undirected k-NN graph (self excluded) in CSR form, plus its edge list."""

    indptr: np.ndarray
    indices: np.ndarray
    edges: np.ndarray  # (E, 2), i < j, each undirected edge once

    @property
    def degree(self):
        return np.diff(self.indptr)


def knn_graph(P_index: NeighborIndex, k: int = DEFAULT_SMOOTH_K) -> NeighborGraph:
    m = len(P_index)
    if m == 1:
        return NeighborGraph(np.zeros(2, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 2), dtype=np.int64))
    idx = directed_neighbors(P_index, k)
    src = np.repeat(np.arange(m), idx.shape[1])
    dst = idx.ravel()
    pairs = np.unique(np.sort(np.stack([src, dst], axis=1), axis=1), axis=0)
    both = np.concatenate([pairs, pairs[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    indptr = np.zeros(m + 1, dtype=np.int64)
    np.add.at(indptr, both[:, 0] + 1, 1)
    return NeighborGraph(np.cumsum(indptr), both[:, 1].astype(np.int64), pairs.astype(np.int64))


def directed_neighbors(P_index: NeighborIndex, k: int) -> np.ndarray:
    """The ``min(k, M-1)`` nearest other points of every point, nearest first."""
    m = len(P_index)
    kk = min(k, m - 1)
    idx, _ = P_index.query(P_index.points, kk + 1)
    out = np.empty((m, kk), dtype=np.int64)
    for i in range(m):
        row = idx[i][idx[i] != i]
        out[i] = row[:kk]
    return out


def laplacian_objective(x, z, graph: NeighborGraph, lam: float) -> float:
    x = np.asarray(x)
    data = float(np.sum((np.asarray(z) - x) ** 2))
    e = graph.edges
    smooth = float(np.sum((x[e[:, 0]] - x[e[:, 1]]) ** 2)) if len(e) else 0.0
    return data + lam * smooth


def laplacian_smooth(
    z: FlowField, P_index: NeighborIndex, lam: float = DEFAULT_LAMBDA, iters: int = DEFAULT_SWEEPS,
    k: int = DEFAULT_SMOOTH_K, graph: NeighborGraph | None = None, return_history: bool = False,
):
    """Jacobi sweeps ``x_i <- (z_i + lam * sum_j x_j) / (1 + lam * deg_i)`` from ``x = z``.

    The objective is checked after every sweep and must not increase.
    """
    if not lam > 0:
        raise InvalidInput("lambda must be positive")
    if iters < 0:
        raise InvalidInput("iteration count must be nonnegative")
    if z.source_size != len(P_index):
        raise InvalidInput("flow is not aligned with the indexed cloud")
    if graph is None:
        graph = knn_graph(P_index, k)
    x = np.array(z.vectors)
    history = [laplacian_objective(x, z.vectors, graph, lam)]
    # rounding slack scaled to the data so a converged iterate can sit at 1e-31
    slack = 1e-12 * (history[0] + float(np.sum(z.vectors ** 2))) + 1e-300
    for _ in range(iters):
        x = kernels.jacobi_sweeps(x, z.vectors, graph.indptr, graph.indices, lam, 1)
        history.append(laplacian_objective(x, z.vectors, graph, lam))
        if history[-1] > history[-2] + slack:
            raise AssertionError(f"smoother objective increased: {history[-2]} -> {history[-1]}")
    out = FlowField(x)
    return (out, history) if return_history else out
