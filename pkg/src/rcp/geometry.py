"""Point-cloud containers, exact neighbor search and SE(3) algebra.

Rotations are carried as unit quaternions ``(w, x, y, z)``. A motion maps a
point as ``p -> R(q) p + t``; ``b.compose(a)`` means "apply ``a`` first, then
``b``".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from rcp import kernels
from rcp.errors import DegenerateFit, InvalidInput


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    id: Optional[str] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInput(f"points must have shape (M, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidInput("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self):
        return self.points.shape[0]

    def permuted(self, order) -> "PointCloud":
        return PointCloud(self.points[np.asarray(order)], self.id)

    def displaced(self, flow: "FlowField") -> "PointCloud":
        if flow.source_size != len(self):
            raise InvalidInput("flow does not match cloud size")
        return PointCloud(self.points + flow.vectors, self.id)


@dataclass(frozen=True)
class FlowField:
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidInput(f"flow vectors must have shape (M, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInput("flow vectors must be finite")
        object.__setattr__(self, "vectors", _frozen(v))

    @property
    def source_size(self) -> int:
        return self.vectors.shape[0]

    def __len__(self):
        return self.source_size

    @classmethod
    def zeros(cls, m: int) -> "FlowField":
        return cls(np.zeros((m, 3)))


# --------------------------------------------------------------------------
# quaternion helpers
# --------------------------------------------------------------------------

def canonical_quaternion(q) -> np.ndarray:
    """Normalize ``q`` and flip it into the w >= 0 hemisphere.

    When ``w`` is exactly zero the first nonzero vector component decides.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidInput("quaternion has zero or non-finite norm")
    q = q / n
    for c in q:
        if c > 0.0:
            break
        if c < 0.0:
            q = -q
            break
    return q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(r) -> np.ndarray:
    # Shepperd's method: branch on the largest diagonal term for stability.
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > max(r[0, 0], r[1, 1], r[2, 2]):
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return canonical_quaternion(q)


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    h = 0.5 * angle
    return canonical_quaternion(np.concatenate([[np.cos(h)], np.sin(h) * axis]))


def rotation_angle(r) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class RigidMotion:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise InvalidInput("motion needs a 4-vector quaternion and a 3-vector translation")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise InvalidInput("motion components must be finite")
        object.__setattr__(self, "rotation", _frozen(canonical_quaternion(q)))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls()

    @classmethod
    def from_matrix(cls, r, t) -> "RigidMotion":
        return cls(matrix_to_quat(r), t)

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)) -> "RigidMotion":
        return cls(axis_angle_to_quat(axis, angle), translation)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_homogeneous(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.matrix
        out[:3, 3] = self.translation
        return out

    def compose(self, first: "RigidMotion") -> "RigidMotion":
        """Return ``self ∘ first``: apply ``first``, then ``self``."""
        q = quat_multiply(self.rotation, first.rotation)
        t = self.matrix @ first.translation + self.translation
        return RigidMotion(q, t)

    def inverse(self) -> "RigidMotion":
        w, x, y, z = self.rotation
        conj = np.array([w, -x, -y, -z])
        return RigidMotion(conj, -(quat_to_matrix(conj) @ self.translation))

    def transform_points(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.matrix.T + self.translation

    def angle_to(self, other: "RigidMotion") -> float:
        """Geodesic angle (radians) between the two rotations."""
        rel = quat_multiply(self.rotation * [1, -1, -1, -1], other.rotation)
        return float(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0])))


def apply_motion(cloud: PointCloud, m: RigidMotion) -> PointCloud:
    return PointCloud(m.transform_points(cloud.points), cloud.id)


def flow_from_motion(cloud: PointCloud, m: RigidMotion) -> FlowField:
    return FlowField(m.transform_points(cloud.points) - cloud.points)


def rigid_fit(src: PointCloud, dst_points, weights=None) -> RigidMotion:
    """Weighted least-squares rigid alignment of ``src`` onto ``dst_points``.

    Minimizes ``sum_i w_i |R p_i + t - d_i|^2`` with a proper rotation (Kabsch).
    """
    p = src.points
    d = np.asarray(dst_points, dtype=np.float64)
    if d.shape != p.shape:
        raise InvalidInput(f"destination shape {d.shape} does not match source {p.shape}")
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(p),) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInput("weights must be finite, nonnegative and one per point")
    if np.count_nonzero(w > 0) < 3:
        raise DegenerateFit("rigid fit needs at least 3 points with positive weight")
    w = w / w.sum()
    pc = w @ p
    dc = w @ d
    p0 = p - pc
    d0 = d - dc
    spread = np.linalg.svd(p0 * np.sqrt(w)[:, None], compute_uv=False)
    if spread[0] <= 0.0 or spread[1] <= 1e-12 * spread[0]:
        raise DegenerateFit("source points are collinear or coincident")
    h = (p0 * w[:, None]).T @ d0
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    if sign == 0:
        sign = 1.0
    r = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return RigidMotion.from_matrix(r, dc - r @ pc)


# --------------------------------------------------------------------------
# neighbor search
# --------------------------------------------------------------------------

class NeighborIndex:
    """Exact k-NN / radius search over one cloud.

    Results are ordered by squared euclidean distance, ties to lower index.
    Small-k queries on small clouds use an exhaustive scan. Otherwise the
    kd-tree proposes candidates and the final order is decided on distances
    recomputed here, so the tie rule is exact on both paths. The most recent
    result is memoized because the solver asks the same question twice per
    iteration (trace cost, then candidate gathering).
    """

    _SLACK = 4
    BRUTE_LIMIT = 1 << 21  # queries x points handled by the exhaustive scan
    BRUTE_MAX_K = 16

    def __init__(self, cloud: PointCloud):
        if not isinstance(cloud, PointCloud):
            cloud = PointCloud(cloud)
        self.cloud = cloud
        self.points = cloud.points
        self._tree = cKDTree(self.points)
        self._last = None

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int):
        """Return ``(indices, distances)`` of shape ``(Q, min(k, N))``."""
        x = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        if k < 1:
            raise InvalidInput("k must be >= 1")
        k = min(k, n)
        last = self._last
        if last is not None and last[0] == k and last[1].shape == x.shape and np.array_equal(last[1], x):
            return last[2].copy(), last[3].copy()
        idx, dist = self._query(x, k)
        self._last = (k, x.copy(), idx, dist)
        return idx.copy(), dist.copy()

    def _query(self, x, k):
        n = len(self.points)
        if k <= self.BRUTE_MAX_K and len(x) * n <= self.BRUTE_LIMIT:
            idx, d2 = kernels.knn(self.points, x, k)
            return idx, np.sqrt(d2)
        kk = min(k + self._SLACK, n)
        _, idx = self._tree.query(x, kk)
        idx = np.asarray(idx).reshape(len(x), kk)
        idx, d2 = self._sorted(x, idx)
        if kk > k:
            # a tie straddling the slack window needs the full ball
            suspect = d2[:, kk - 1] <= d2[:, k - 1] * (1 + 1e-9) + 1e-300
            for row in np.flatnonzero(suspect):
                idx_r, d2_r = self._ball_sorted(x[row], d2[row, k - 1])
                idx[row, :k] = idx_r[:k]
                d2[row, :k] = d2_r[:k]
        return idx[:, :k].copy(), np.sqrt(d2[:, :k])

    def query_radius(self, point, radius: float):
        idx, d2 = self._ball_sorted(np.asarray(point, dtype=np.float64), radius * radius)
        keep = d2 <= radius * radius
        return idx[keep], np.sqrt(d2[keep])

    def _sorted(self, x, idx):
        diff = self.points[idx] - x[:, None, :]
        d2 = np.einsum("qkc,qkc->qk", diff, diff)
        # the tree already orders by distance; only rows with ties or
        # rounding inversions need the exact (distance, index) sort
        bad = np.flatnonzero(np.any(np.diff(d2, axis=1) <= 0, axis=1))
        if len(bad):
            sub = _lexsort_rows(d2[bad], idx[bad])
            idx[bad] = np.take_along_axis(idx[bad], sub, 1)
            d2[bad] = np.take_along_axis(d2[bad], sub, 1)
        return idx, d2

    def _ball_sorted(self, x, r2):
        r = np.sqrt(r2)
        cand = np.asarray(self._tree.query_ball_point(x, r * (1 + 1e-7) + 1e-12), dtype=np.int64)
        diff = self.points[cand] - x
        d2 = np.einsum("kc,kc->k", diff, diff)
        order = np.lexsort((cand, d2))
        return cand[order], d2[order]


def _lexsort_rows(d2, idx):
    # stable sort by index first, then by distance: equal distances keep index order
    first = np.argsort(idx, axis=1, kind="stable")
    d2s = np.take_along_axis(d2, first, 1)
    second = np.argsort(d2s, axis=1, kind="stable")
    return np.take_along_axis(first, second, 1)


def build_index(cloud: PointCloud) -> NeighborIndex:
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    return NeighborIndex(cloud)


def farthest_point_sample(cloud: PointCloud, count: int, seed_index: int = 0) -> np.ndarray:
    m = len(cloud)
    if not 1 <= count <= m:
        raise InvalidInput(f"sample count {count} outside [1, {m}]")
    if not 0 <= seed_index < m:
        raise InvalidInput(f"seed index {seed_index} outside [0, {m})")
    return kernels.fps(cloud.points, int(count), int(seed_index))
