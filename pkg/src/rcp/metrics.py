"""Evaluation metrics and scalar loss functionals.

Flow thresholds follow the usual scene-flow benchmark definitions; rotation
errors are reported in degrees, Euler angles in the intrinsic Z-Y-X order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rcp.errors import InvalidInput
from rcp.features import interpolate_idw
from rcp.geometry import FlowField, NeighborIndex, PointCloud, RigidMotion, build_index
from rcp.regularizer import directed_neighbors

REL_GUARD = 1e-12


@dataclass(frozen=True)
class FlowMetrics:
    epe3d: float
    acc3ds: float
    acc3dr: float
    outliers3d: float

    def as_dict(self):
        return {"epe3d": self.epe3d, "acc3ds": self.acc3ds, "acc3dr": self.acc3dr, "outliers3d": self.outliers3d}


@dataclass(frozen=True)
class RegMetrics:
    error_r: float
    error_t: float
    mae_r: float
    mae_t: float

    def as_dict(self):
        return {"error_r": self.error_r, "error_t": self.error_t, "mae_r": self.mae_r, "mae_t": self.mae_t}


@dataclass(frozen=True)
class SelfSupWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.3

    def __post_init__(self):
        a = np.array([self.alpha1, self.alpha2, self.alpha3])
        if np.any(a < 0) or not np.any(a > 0):
            raise InvalidInput("self-supervised weights must be nonnegative and not all zero")

    def as_array(self):
        return np.array([self.alpha1, self.alpha2, self.alpha3])


@dataclass(frozen=True)
class SelfSupLoss:
    total: float
    chamfer: float
    smoothness: float
    laplacian: float

    @property
    def terms(self):
        return np.array([self.chamfer, self.smoothness, self.laplacian])


def _vectors(x):
    return x.vectors if isinstance(x, FlowField) else np.asarray(x, dtype=np.float64)


def _pair(pred, gt):
    a, b = _vectors(pred), _vectors(gt)
    if a.shape != b.shape:
        raise InvalidInput(f"prediction has {len(a)} vectors, ground truth has {len(b)}")
    return a, b


def flow_metrics(pred, gt) -> FlowMetrics:
    a, b = _pair(pred, gt)
    err = np.linalg.norm(a - b, axis=1)
    gt_norm = np.linalg.norm(b, axis=1)
    has_rel = gt_norm >= REL_GUARD
    rel = np.divide(err, gt_norm, out=np.full_like(err, np.nan), where=has_rel)
    with np.errstate(invalid="ignore"):
        acc_s = (err < 0.05) | (has_rel & (rel < 0.05))
        acc_r = (err < 0.1) | (has_rel & (rel < 0.1))
        outl = (err > 0.3) | (has_rel & (rel > 0.1))
    return FlowMetrics(float(err.mean()), float(acc_s.mean()), float(acc_r.mean()), float(outl.mean()))


def euler_zyx(r) -> np.ndarray:
    """Intrinsic Z-Y-X angles (yaw, pitch, roll) in degrees: R = Rz Ry Rx."""
    yaw = np.arctan2(r[1, 0], r[0, 0])
    pitch = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    roll = np.arctan2(r[2, 1], r[2, 2])
    return np.degrees([yaw, pitch, roll])


def _wrap_deg(a):
    return (np.asarray(a) + 180.0) % 360.0 - 180.0


def reg_metrics(pred: RigidMotion, gt: RigidMotion) -> RegMetrics:
    """Isotropic (geodesic) and anisotropic (per-axis mean absolute) errors."""
    rp, rg = pred.matrix, gt.matrix
    cos = (np.trace(rg.T @ rp) - 1.0) / 2.0
    error_r = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    dt = pred.translation - gt.translation
    error_t = float(np.linalg.norm(rg.T @ dt))
    mae_r = float(np.mean(np.abs(_wrap_deg(euler_zyx(rg) - euler_zyx(rp)))))
    mae_t = float(np.mean(np.abs(dt)))
    return RegMetrics(error_r, error_t, mae_r, mae_t)


def l1_flow_loss(pred, gt) -> float:
    a, b = _pair(pred, gt)
    return float(np.linalg.norm(a - b, axis=1).mean())


def register_loss(P: PointCloud, pred: RigidMotion, gt: RigidMotion) -> float:
    d = pred.transform_points(P.points) - gt.transform_points(P.points)
    return float(np.linalg.norm(d, axis=1).mean())


def _points(c):
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)


def chamfer(Pprime, Q) -> float:
    """Sum (not mean) of squared nearest distances, both directions."""
    a, b = _points(Pprime), _points(Q)
    _, da = build_index(PointCloud(b)).query(a, 1)
    _, db = build_index(PointCloud(a)).query(b, 1)
    return float(np.sum(da ** 2) + np.sum(db ** 2))


def smoothness(flow, P_index: NeighborIndex, k: int = 8) -> float:
    x = _vectors(flow)
    if len(x) != len(P_index):
        raise InvalidInput("flow is not aligned with the indexed cloud")
    if len(x) < 2:
        return 0.0
    nbr = directed_neighbors(P_index, k)
    diff = x[nbr] - x[:, None, :]
    return float(np.sum(np.einsum("mkc,mkc->mk", diff, diff).mean(axis=1)))


def laplacian_coordinates(points, k: int = 8) -> np.ndarray:
    """Mean offset from each point to its k nearest other points."""
    pts = _points(points)
    if len(pts) < 2:
        return np.zeros_like(pts)
    nbr = directed_neighbors(build_index(PointCloud(pts)), k)
    return (pts[nbr] - pts[:, None, :]).mean(axis=1)


def laplacian_term(Pprime, Q, k: int = 8) -> float:
    a, b = _points(Pprime), _points(Q)
    delta_p = laplacian_coordinates(a, k)
    delta_q = interpolate_idw(b, laplacian_coordinates(b, k), a, 3)
    return float(np.sum((delta_p - delta_q) ** 2))


def self_supervised_loss(P: PointCloud, Q: PointCloud, flow, weights: SelfSupWeights = SelfSupWeights(), k: int = 8):
    x = _vectors(flow)
    if len(x) != len(P):
        raise InvalidInput("flow is not aligned with the source cloud")
    moved = P.points + x
    lc = chamfer(moved, Q)
    ls = smoothness(x, build_index(P), k)
    lr = laplacian_term(moved, Q, k)
    total = float(weights.as_array() @ np.array([lc, ls, lr]))
    return SelfSupLoss(total, lc, ls, lr)
