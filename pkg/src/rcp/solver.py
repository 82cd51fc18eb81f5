"""Alternating solver: matching init, then K rounds of data step + regularization."""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import numpy as np

from rcp.errors import DegenerateFit, InvalidInput, NumericalFailure
from rcp.features import (
    DEFAULT_BANDS, DEFAULT_GROUP_K, DEFAULT_SAMPLE_RATIO, FeatureMap, WeightBundle,
    handcrafted_features, set_conv_forward,
)
from rcp.geometry import FlowField, PointCloud, RigidMotion, build_index, flow_from_motion
from rcp.matching import (
    DEFAULT_EPSILON, DEFAULT_MAX_ITERS, DEFAULT_TOL, cost_matrix, init_flow, init_motion, sinkhorn,
)
from rcp.metrics import flow_metrics
from rcp.pointwise import (
    DEFAULT_K_OMEGA, PointwiseContext, UpdateMode, pointwise_step, pointwise_step_registration,
)
from rcp.regularizer import (
    DEFAULT_LAMBDA, DEFAULT_SMOOTH_K, DEFAULT_SWEEPS, DEFAULT_TAU_INT, RecurrentRegularizer,
    gru_input, interpolate_feature, knn_graph, laplacian_objective, laplacian_smooth,
)

DEFAULT_ITERATIONS = 7


@dataclass(frozen=True)
class GraphLaplacian:
    lam: float = DEFAULT_LAMBDA
    iters: int = DEFAULT_SWEEPS
    k: int = DEFAULT_SMOOTH_K

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidInput("lambda must be positive")


@dataclass(frozen=True)
class RecurrentSetConv:
    weights: WeightBundle
    group_k: Optional[int] = None


@dataclass(frozen=True)
class Handcrafted:
    k: int = 16


@dataclass(frozen=True)
class SetConv:
    weights: WeightBundle
    sample_ratio: Fraction = DEFAULT_SAMPLE_RATIO
    group_k: int = DEFAULT_GROUP_K


@dataclass(frozen=True)
class SolverConfig:
    iterations: int = DEFAULT_ITERATIONS
    update_mode: UpdateMode = field(default_factory=UpdateMode)
    regularizer: Union[GraphLaplacian, RecurrentSetConv] = field(default_factory=GraphLaplacian)
    features: Union[Handcrafted, SetConv] = field(default_factory=Handcrafted)
    k_omega: int = DEFAULT_K_OMEGA
    bands: int = DEFAULT_BANDS
    tau_int: float = DEFAULT_TAU_INT
    sinkhorn_epsilon: float = DEFAULT_EPSILON
    sinkhorn_iters: int = DEFAULT_MAX_ITERS
    sinkhorn_tol: float = DEFAULT_TOL
    early_stop: bool = False
    early_stop_tol: float = 1e-5
    trace: bool = True
    timing: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInput("iterations must be >= 1")
        if self.k_omega < 1:
            raise InvalidInput("k_omega must be >= 1")


@dataclass
class TraceRow:
    iter: int
    cost: float
    mean_flow: float
    epe3d: Optional[float] = None
    millis: Optional[float] = None


@dataclass
class Trace:
    rows: list = field(default_factory=list)
    flows: list = field(default_factory=list)     # X^k as arrays
    motions: list = field(default_factory=list)   # registration only

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "cost", "mean_flow", "epe3d", "millis"])
        for r in self.rows:
            w.writerow([
                r.iter, repr(r.cost), repr(r.mean_flow),
                "" if r.epe3d is None else repr(r.epe3d),
                "" if r.millis is None else f"{r.millis:.3f}",
            ])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def compute_features(cloud: PointCloud, cfg: SolverConfig, index=None) -> FeatureMap:
    if isinstance(cfg.features, SetConv):
        return set_conv_forward(cloud, cfg.features.weights, cfg.features.sample_ratio, cfg.features.group_k)
    return handcrafted_features(cloud, index, min(cfg.features.k, len(cloud)))


class _Problem:
    """Shared setup of both tasks: indices, features, matching, tracing."""

    def __init__(self, P, Q, cfg: SolverConfig):
        self.cfg = cfg
        self.P, self.Q = P, Q
        self.P_index = build_index(P)
        self.Q_index = build_index(Q)
        self.fP = compute_features(P, cfg, self.P_index)
        self.fQ = compute_features(Q, cfg, self.Q_index)
        if self.fP.dim != self.fQ.dim:
            raise InvalidInput("source and target descriptors differ in width")
        self.plan = sinkhorn(
            cost_matrix(self.fP, self.fQ), cfg.sinkhorn_epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol
        )
        self.ctx = PointwiseContext(P, Q, self.fP, self.fQ, self.Q_index, cfg.bands, cfg.k_omega)
        self.trace = Trace()
        self._t0 = time.perf_counter()
        self.recurrent = None
        self.graph = None
        if isinstance(cfg.regularizer, RecurrentSetConv):
            self.recurrent = RecurrentRegularizer(cfg.regularizer.weights, self.P_index, cfg.regularizer.group_k)
        else:
            self.graph = knn_graph(self.P_index, cfg.regularizer.k)

    def f_q_at(self, flow: np.ndarray) -> np.ndarray:
        return interpolate_feature(self.fQ, self.Q_index, self.P.points + flow, self.cfg.k_omega, self.cfg.tau_int)

    def cost(self, x, x_prev) -> float:
        """Mean point-wise objective at ``x`` measured from ``x_prev``."""
        feat = np.linalg.norm(self.fP.descriptors - self.f_q_at(x), axis=1)
        move = np.linalg.norm(x - x_prev, axis=1)
        return float(np.mean(feat + move))

    def record(self, k, x, x_prev, gt_flow):
        if not np.all(np.isfinite(x)):
            raise NumericalFailure("non-finite flow", k)
        cost = self.cost(x, x_prev) if self.cfg.trace else float("nan")
        if self.cfg.trace and not np.isfinite(cost):
            raise NumericalFailure("non-finite cost", k)
        epe = None if gt_flow is None else flow_metrics(x, gt_flow).epe3d
        millis = (time.perf_counter() - self._t0) * 1e3 if self.cfg.timing else None
        self.trace.rows.append(TraceRow(k, cost, float(np.linalg.norm(x, axis=1).mean()), epe, millis))
        self.trace.flows.append(np.array(x))

    def stop_early(self, x, x_prev) -> bool:
        return self.cfg.early_stop and float(np.linalg.norm(x - x_prev, axis=1).mean()) < self.cfg.early_stop_tol


def _guard(stage, k):
    """Re-raise non-finite intermediate values as NumericalFailure."""
    try:
        return stage()
    except InvalidInput as exc:
        raise NumericalFailure(f"stage produced invalid values: {exc}", k) from exc


def run_scene_flow(P: PointCloud, Q: PointCloud, cfg: SolverConfig = SolverConfig(), gt: Optional[FlowField] = None):
    """Estimate a per-point flow from ``P`` to ``Q``. Returns ``(flow, trace)``."""
    if gt is not None and gt.source_size != len(P):
        raise InvalidInput("ground-truth flow is not aligned with the source cloud")
    prob = _Problem(P, Q, cfg)
    x = init_flow(prob.plan, P, Q)
    zero = np.zeros((len(P), 3))
    prob.record(0, x.vectors, zero, gt)
    if prob.recurrent is not None:
        _guard(lambda: prob.recurrent.start(gru_input(prob.fP, prob.f_q_at(x.vectors), x)), 0)

    for k in range(1, cfg.iterations + 1):
        prev = x
        z, _ = _guard(lambda: pointwise_step(prob.ctx, prev, cfg.update_mode), k)
        if prob.recurrent is None:
            reg = cfg.regularizer
            x = _guard(lambda: laplacian_smooth(z, prob.P_index, reg.lam, reg.iters, reg.k, graph=prob.graph), k)
        else:
            def recurrent_stage():
                prob.recurrent.step(gru_input(prob.fP, prob.f_q_at(prev.vectors), z))
                return FlowField(z.vectors + prob.recurrent.residual_flow().vectors)
            x = _guard(recurrent_stage, k)
        prob.record(k, x.vectors, prev.vectors, gt)
        if prob.stop_early(x.vectors, prev.vectors):
            break
    return x, prob.trace


def run_registration(
    P: PointCloud, Q: PointCloud, cfg: SolverConfig = SolverConfig(), gt: Optional[RigidMotion] = None
):
    """Estimate one rigid motion taking ``P`` onto ``Q``. Returns ``(motion, trace)``."""
    prob = _Problem(P, Q, cfg)
    gt_flow = None if gt is None else flow_from_motion(P, gt)
    try:
        motion = init_motion(prob.plan, P, Q)
    except DegenerateFit as exc:
        warnings.warn(f"initial rigid fit degenerate ({exc}); starting from identity", RuntimeWarning, stacklevel=2)
        motion = RigidMotion.identity()
    x = flow_from_motion(P, motion)
    prob.record(0, x.vectors, np.zeros((len(P), 3)), gt_flow)
    prob.trace.motions.append(motion)
    if prob.recurrent is not None:
        _guard(lambda: prob.recurrent.start(gru_input(prob.fP, prob.f_q_at(x.vectors), x)), 0)

    for k in range(1, cfg.iterations + 1):
        prev_motion, prev = motion, x
        try:
            z, aux = _guard(lambda: pointwise_step_registration(prob.ctx, prev_motion, cfg.update_mode), k)
        except DegenerateFit as exc:
            warnings.warn(f"iteration {k}: rigid fit degenerate ({exc}); keeping previous iterate",
                          RuntimeWarning, stacklevel=2)
            z, aux = None, prev_motion
        if prob.recurrent is not None and z is not None:
            def recurrent_stage():
                prob.recurrent.step(gru_input(prob.fP, prob.f_q_at(prev.vectors), z))
                return prob.recurrent.residual_motion().compose(aux)
            motion = _guard(recurrent_stage, k)
        else:
            motion = aux
        # renormalization happens in RigidMotion's constructor
        x = flow_from_motion(P, motion)
        prob.record(k, x.vectors, prev.vectors, gt_flow)
        prob.trace.motions.append(motion)
        if prob.stop_early(x.vectors, prev.vectors):
            break
    return motion, prob.trace


def smoother_objectives(z: FlowField, x: FlowField, P: PointCloud, reg: GraphLaplacian):
    """Objective of the Laplacian subproblem at ``z`` and at ``x`` (same data term ``z``)."""
    graph = knn_graph(build_index(P), reg.k)
    return laplacian_objective(z.vectors, z.vectors, graph, reg.lam), laplacian_objective(x.vectors, z.vectors, graph, reg.lam)
