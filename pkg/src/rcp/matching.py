"""Entropic optimal-transport matching used to initialize the solver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rcp.errors import InvalidInput
from rcp.features import FeatureMap
from rcp.geometry import FlowField, PointCloud, RigidMotion, rigid_fit

DEFAULT_EPSILON = 0.03
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6

# scaling vectors are folded into the log potentials once they leave e^±30
_ABSORB = 30.0


@dataclass(frozen=True)
class TransportPlan:
    weights: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    violation: float
    iterations: int
    history: list = field(default_factory=list, repr=False)

    @property
    def shape(self):
        return self.weights.shape

    def converged(self, tol=DEFAULT_TOL) -> bool:
        return self.violation < tol

    def entropy(self) -> float:
        p = self.weights[self.weights > 0]
        return float(-(p * np.log(p)).sum())


def cost_matrix(fp: FeatureMap, fq: FeatureMap) -> np.ndarray:
    """``1 - cosine similarity``; zero-norm descriptors cost 1 to everything."""
    a, b = fp.descriptors, fq.descriptors
    if a.shape[1] != b.shape[1]:
        raise InvalidInput(f"descriptor dims differ: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ua = np.divide(a, na[:, None], out=np.zeros_like(a), where=na[:, None] > 0)
    ub = np.divide(b, nb[:, None], out=np.zeros_like(b), where=nb[:, None] > 0)
    return 1.0 - ua @ ub.T


def sinkhorn(
    cost,
    epsilon: float = DEFAULT_EPSILON,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> TransportPlan:
    """Entropic OT toward uniform marginals, log-stabilized.

    Potentials ``f``, ``g`` live in the log domain; between absorptions the
    iteration runs on the rescaled kernel ``exp((f_i + g_j - C_ij)/eps)``,
    whose entries never exceed 1 at absorption time. One iteration is a row
    rescale followed by a column rescale; convergence is measured as the
    largest absolute row-marginal error after the column step.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise InvalidInput("cost must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise InvalidInput("cost matrix contains non-finite entries")
    if epsilon <= 0:
        raise InvalidInput("epsilon must be positive")
    m, n = c.shape
    a = np.full(m, 1.0 / m)
    b = np.full(n, 1.0 / n)

    # row/col minima make every row and column hold an exp(0) entry
    f = c.min(axis=1)
    g = (c - f[:, None]).min(axis=0)
    kern = np.exp((f[:, None] + g[None, :] - c) / epsilon)
    u = np.ones(m)
    v = np.ones(n)
    history = []
    violation = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        u = a / (kern @ v)
        kv_t = kern.T @ u
        v = b / kv_t
        violation = float(np.max(np.abs(u * (kern @ v) - a)))
        history.append(violation)
        if max(np.abs(np.log(u)).max(), np.abs(np.log(v)).max()) > _ABSORB:
            f = f + epsilon * np.log(u)
            g = g + epsilon * np.log(v)
            kern = np.exp((f[:, None] + g[None, :] - c) / epsilon)
            u[:] = 1.0
            v[:] = 1.0
        if violation < tol:
            break
    plan = u[:, None] * kern * v[None, :]
    return TransportPlan(plan, a, b, violation, it, history)


def barycentric_targets(plan: TransportPlan, Q: PointCloud):
    w = plan.weights
    mass = w.sum(axis=1)
    ok = mass >= 1e-12
    targets = np.zeros((w.shape[0], 3))
    targets[ok] = (w[ok] @ Q.points) / mass[ok, None]
    return targets, mass, ok


def _check_dims(plan, P, Q):
    if plan.weights.shape != (len(P), len(Q)):
        raise InvalidInput(f"plan shape {plan.weights.shape} does not match clouds ({len(P)}, {len(Q)})")


def init_flow(plan: TransportPlan, P: PointCloud, Q: PointCloud) -> FlowField:
    _check_dims(plan, P, Q)
    targets, _, ok = barycentric_targets(plan, Q)
    flow = np.where(ok[:, None], targets - P.points, 0.0)
    return FlowField(flow)


def init_motion(plan: TransportPlan, P: PointCloud, Q: PointCloud) -> RigidMotion:
    _check_dims(plan, P, Q)
    targets, mass, ok = barycentric_targets(plan, Q)
    targets[~ok] = P.points[~ok]
    return rigid_fit(P, targets, np.where(ok, mass, 0.0))
