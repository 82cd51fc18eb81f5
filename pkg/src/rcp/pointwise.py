"""Point-wise data step: soft or hard correspondence over a local window.

For each source point ``p_m`` the candidates are the ``k_omega`` nearest
target points of the warped position ``p_m + x_m``; each candidate ``q_n``
proposes the displacement ``u_n = q_n - p_m``. The three update rules blend
these proposals differently:

``attention``  softmax of ``g_m . g_n / tau`` (descriptor + positional code)
``bilateral``  ``exp(-|f_m - f_n|/sigma_f - |u_n - x_m|/sigma_u)``, normalized
``hard``       the single candidate minimizing ``|f_m - f_n| + |u_n - x_m|``
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from rcp import kernels
from rcp.errors import InvalidInput
from rcp.features import DEFAULT_BANDS, EncodedFeatures, FeatureMap, encode
from rcp.geometry import FlowField, NeighborIndex, PointCloud, RigidMotion, flow_from_motion, rigid_fit

DEFAULT_K_OMEGA = 32


class UpdateKind(enum.Enum):
    ATTENTION = "attention"
    BILATERAL = "bilateral"
    HARD = "hard"


@dataclass(frozen=True)
class UpdateMode:
    kind: UpdateKind = UpdateKind.ATTENTION
    tau: float = 1.0
    sigma_f: float = 0.5
    sigma_u: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", UpdateKind(self.kind))
        for name in ("tau", "sigma_f", "sigma_u"):
            if not getattr(self, name) > 0:
                raise InvalidInput(f"{name} must be positive")

    @classmethod
    def attention(cls, tau=1.0):
        return cls(UpdateKind.ATTENTION, tau=tau)

    @classmethod
    def bilateral(cls, sigma_f=0.5, sigma_u=0.5):
        return cls(UpdateKind.BILATERAL, sigma_f=sigma_f, sigma_u=sigma_u)

    @classmethod
    def hard(cls):
        return cls(UpdateKind.HARD)


@dataclass(frozen=True)
class CandidateSet:
    indices: np.ndarray        # (M, K) target indices, nearest first
    displacements: np.ndarray  # (M, K, 3), q_n - p_m

    def __len__(self):
        return self.indices.shape[0]

    @property
    def size(self) -> int:
        return self.indices.shape[1]


def gather_candidates(
    P: PointCloud, Q_index: NeighborIndex, prev_flow: FlowField, k_omega: int = DEFAULT_K_OMEGA
) -> CandidateSet:
    if prev_flow.source_size != len(P):
        raise InvalidInput("previous flow is not aligned with the source cloud")
    warped = P.points + prev_flow.vectors
    idx, _ = Q_index.query(warped, k_omega)
    u = Q_index.points[idx] - P.points[:, None, :]
    return CandidateSet(idx, u)


def update_attention(
    cands: CandidateSet, gP: EncodedFeatures, gQ: EncodedFeatures, tau: float = 1.0,
    return_weights: bool = False,
):
    """Softmax-weighted candidate displacement.

    ``gP`` rows encode the warped sources, ``gQ`` rows the targets; the same
    vectors act as query and key.
    """
    z, w = kernels.attention_update(gP.g, gQ.g, cands.indices, cands.displacements, tau)
    flow = FlowField(z)
    return (flow, w) if return_weights else flow


def update_bilateral(
    cands: CandidateSet, fP: FeatureMap, fQ: FeatureMap, prev_flow: FlowField,
    sigma_f: float = 0.5, sigma_u: float = 0.5, return_mass: bool = False,
):
    """Bilateral blend; points whose weights all underflow take the nearest candidate."""
    if sigma_f <= 0 or sigma_u <= 0:
        raise InvalidInput("bandwidths must be positive")
    z, mass, fell_back = kernels.bilateral_update(
        fP.descriptors, fQ.descriptors, cands.indices, cands.displacements,
        prev_flow.vectors, sigma_f, sigma_u,
    )
    if fell_back.any():
        warnings.warn(
            f"bilateral weights underflowed for {int(fell_back.sum())} points; used nearest candidate",
            RuntimeWarning, stacklevel=2,
        )
    flow = FlowField(z)
    return (flow, mass, fell_back) if return_mass else flow


def update_hard(
    cands: CandidateSet, fP: FeatureMap, fQ: FeatureMap, prev_flow: FlowField,
    return_choice: bool = False,
):
    z, choice = kernels.hard_update(
        fP.descriptors, fQ.descriptors, cands.indices, cands.displacements, prev_flow.vectors
    )
    flow = FlowField(z)
    return (flow, choice) if return_choice else flow


@dataclass
class PointwiseContext:
    """Per-problem constants reused across iterations."""

    P: PointCloud
    Q: PointCloud
    fP: FeatureMap
    fQ: FeatureMap
    Q_index: NeighborIndex
    bands: int = DEFAULT_BANDS
    k_omega: int = DEFAULT_K_OMEGA

    def __post_init__(self):
        self.gQ = encode(self.fQ, self.Q.points, self.bands)


def pointwise_step(ctx: PointwiseContext, prev_flow: FlowField, mode: UpdateMode):
    """Run one data step. Returns ``(z, per-point fit weights or None)``."""
    cands = gather_candidates(ctx.P, ctx.Q_index, prev_flow, ctx.k_omega)
    if mode.kind is UpdateKind.ATTENTION:
        gP = encode(ctx.fP, ctx.P.points + prev_flow.vectors, ctx.bands)
        return update_attention(cands, gP, ctx.gQ, mode.tau), None
    if mode.kind is UpdateKind.BILATERAL:
        z, mass, _ = update_bilateral(
            cands, ctx.fP, ctx.fQ, prev_flow, mode.sigma_f, mode.sigma_u, return_mass=True
        )
        return z, mass
    return update_hard(cands, ctx.fP, ctx.fQ, prev_flow), None


def pointwise_step_registration(ctx: PointwiseContext, prev_motion: RigidMotion, mode: UpdateMode):
    """Data step for the rigid case: flow from motion, update, weighted rigid fit."""
    prev_flow = flow_from_motion(ctx.P, prev_motion)
    z, mass = pointwise_step(ctx, prev_flow, mode)
    weights = None
    if mass is not None and np.count_nonzero(mass > 0) >= 3:
        weights = mass / mass.max()
    motion = rigid_fit(ctx.P, ctx.P.points + z.vectors, weights)
    return z, motion
