"""Per-point descriptors and positional encodings.

Two descriptor providers share the :class:`FeatureMap` output type:

* :func:`handcrafted_features`: local PCA geometry, no parameters.
* :func:`set_conv_forward`: a PointNet++-style forward pass whose layers are
  read from a :class:`WeightBundle`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from rcp.errors import InvalidInput, WeightShapeError
from rcp.geometry import NeighborIndex, PointCloud, build_index, farthest_point_sample

HANDCRAFTED_DIM = 7
DEFAULT_BANDS = 4
DEFAULT_SAMPLE_RATIO = Fraction(1, 4)
DEFAULT_GROUP_K = 32


@dataclass(frozen=True)
class FeatureMap:
    descriptors: np.ndarray

    def __post_init__(self):
        d = np.array(self.descriptors, dtype=np.float64)
        if d.ndim != 2:
            raise InvalidInput("descriptors must be a 2-D array")
        if not np.all(np.isfinite(d)):
            raise InvalidInput("descriptors must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "descriptors", d)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def cloud_size(self) -> int:
        return self.descriptors.shape[0]

    def __len__(self):
        return self.cloud_size


@dataclass(frozen=True)
class EncodedFeatures:
    """Rows ``g = [descriptor | positional encoding]``."""

    g: np.ndarray
    descriptor_dim: int
    encoding_dim: int

    def __post_init__(self):
        if self.g.shape[1] != self.descriptor_dim + self.encoding_dim:
            raise InvalidInput("encoded width must equal descriptor_dim + encoding_dim")


# --------------------------------------------------------------------------
# handcrafted provider
# --------------------------------------------------------------------------

def handcrafted_features(
    cloud: PointCloud,
    index: NeighborIndex | None = None,
    k: int = 16,
    density_scale: float = 0.01,
) -> FeatureMap:
    """Local-geometry descriptor, 7 values per point, L2-normalized per row.

    Layout: ``[normal(3), λ1/tr, λ2/tr, λ3/tr, density]``. The normal is the
    smallest-eigenvalue eigenvector of the k-NN covariance, flipped into the
    +z hemisphere (ties: +y, then +x). Density is ``density_scale`` divided by
    the mean distance to the k-1 other neighbors, clamped to [0, 1].
    """
    if k < 4:
        raise InvalidInput("handcrafted features need k >= 4")
    if len(cloud) < k:
        raise InvalidInput(f"cloud has {len(cloud)} points, fewer than k={k}")
    if index is None:
        index = build_index(cloud)
    nbr, dist = index.query(cloud.points, k)
    return FeatureMap(_local_descriptors(cloud.points, nbr, dist, density_scale))


def _local_descriptors(points, nbr, dist, density_scale):
    local = points[nbr]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / nbr.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    normal = evecs[:, :, 0].copy()
    normal *= _hemisphere_sign(normal)[:, None]
    trace = evals.sum(axis=1, keepdims=True)
    ratios = np.divide(evals, trace, out=np.zeros_like(evals), where=trace > 0)
    # column 0 is the query point itself
    mean_d = dist[:, 1:].mean(axis=1)
    with np.errstate(divide="ignore"):
        density = np.where(mean_d > 0, density_scale / mean_d, 1.0)
    density = np.clip(density, 0.0, 1.0)
    desc = np.concatenate([normal, ratios, density[:, None]], axis=1)
    return desc / np.linalg.norm(desc, axis=1, keepdims=True)


def _hemisphere_sign(n):
    sign = np.sign(n[:, 2])
    for axis in (1, 0):
        sign = np.where(sign == 0, np.sign(n[:, axis]), sign)
    return np.where(sign == 0, 1.0, sign)


# --------------------------------------------------------------------------
# positional encoding
# --------------------------------------------------------------------------

def positional_encoding(p, bands: int = DEFAULT_BANDS) -> np.ndarray:
    """Sinusoidal encoding with frequencies ``2**j * pi``, j < bands.

    Accepts one point ``(3,)`` or many ``(N, 3)``. Output layout is all
    sines (axis-major, then band) followed by all cosines; width ``6*bands``.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    if not np.all(np.isfinite(pts)):
        raise InvalidInput("positional encoding needs finite coordinates")
    freqs = (2.0 ** np.arange(bands)) * np.pi
    phase = (pts[:, :, None] * freqs).reshape(len(pts), -1)
    out = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
    return out[0] if single else out


def encode(fmap: FeatureMap, positions, bands: int = DEFAULT_BANDS) -> EncodedFeatures:
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) != fmap.cloud_size:
        raise InvalidInput("positions and descriptors are not index-aligned")
    enc = positional_encoding(pos.reshape(-1, 3), bands)
    return EncodedFeatures(np.concatenate([fmap.descriptors, enc], axis=1), fmap.dim, enc.shape[1])


# --------------------------------------------------------------------------
# weight bundles
# --------------------------------------------------------------------------

@dataclass
class Layer:
    name: str
    shape: tuple
    params: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.params = np.asarray(self.params, dtype=np.float64).ravel()
        expected = int(np.prod(self.shape)) if self.shape else 1
        if self.params.size != expected:
            raise WeightShapeError(
                f"layer {self.name}: {self.params.size} parameters, shape {self.shape} implies {expected}"
            )

    @property
    def array(self) -> np.ndarray:
        return self.params.reshape(self.shape)


@dataclass
class WeightBundle:
    """Ordered named parameter blocks plus free-form metadata.

    Affine layers come in ``<prefix>.weight`` (out, in) / ``<prefix>.bias``
    (out,) pairs. Within one block ``<block>.fc1``, ``<block>.fc2``, ... must
    chain: the output width of ``fcN`` is the input width of ``fcN+1``.
    """

    layers: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_name = {}
        for layer in self.layers:
            if layer.name in self._by_name:
                raise WeightShapeError(f"duplicate layer name {layer.name}")
            self._by_name[layer.name] = layer
        self.validate()

    @classmethod
    def from_arrays(cls, arrays: dict, meta=None) -> "WeightBundle":
        return cls([Layer(n, np.shape(a), np.asarray(a)) for n, a in arrays.items()], dict(meta or {}))

    def __contains__(self, name):
        return name in self._by_name

    def names(self):
        return [layer.name for layer in self.layers]

    def get(self, name) -> np.ndarray:
        try:
            return self._by_name[name].array
        except KeyError:
            raise WeightShapeError(f"weight bundle has no layer {name!r}") from None

    def affine(self, prefix):
        return self.get(prefix + ".weight"), self.get(prefix + ".bias")

    def param_count(self) -> int:
        return sum(layer.params.size for layer in self.layers)

    def validate(self):
        for layer in self.layers:
            if layer.name.endswith(".weight"):
                if len(layer.shape) != 2:
                    raise WeightShapeError(f"{layer.name} must be 2-D, got {layer.shape}")
                bias = layer.name[: -len(".weight")] + ".bias"
                if bias in self._by_name and self._by_name[bias].shape != (layer.shape[0],):
                    raise WeightShapeError(
                        f"{bias} has shape {self._by_name[bias].shape}, expected ({layer.shape[0]},)"
                    )
        for block in {n.rsplit(".fc", 1)[0] for n in self.names() if ".fc" in n}:
            j = 1
            while f"{block}.fc{j + 1}.weight" in self._by_name:
                out_dim = self._by_name[f"{block}.fc{j}.weight"].shape[0]
                in_dim = self._by_name[f"{block}.fc{j + 1}.weight"].shape[1]
                if out_dim != in_dim:
                    raise WeightShapeError(
                        f"{block}: fc{j} outputs {out_dim} channels but fc{j + 1} expects {in_dim}"
                    )
                j += 1


def _relu(x):
    return np.maximum(x, 0.0)


def set_conv(points, feats, centers, nbr, weights: WeightBundle, prefix, final_relu=True):
    """One grouping + shared two-layer map + channelwise max-pool.

    ``nbr[c]`` lists the indices (into ``points``/``feats``) grouped around
    ``centers[c]``. Each neighbor contributes ``[p_j - center | feats_j]``.
    """
    w1, b1 = weights.affine(prefix + ".fc1")
    w2, b2 = weights.affine(prefix + ".fc2")
    width = 3 + feats.shape[1]
    if w1.shape[1] != width:
        raise WeightShapeError(f"{prefix}.fc1 expects {w1.shape[1]} inputs, grouping gives {width}")
    rel = points[nbr] - centers[:, None, :]
    grouped = np.concatenate([rel, feats[nbr]], axis=2)
    hidden = _relu(grouped @ w1.T + b1)
    out = hidden @ w2.T + b2
    if final_relu:
        out = _relu(out)
    return out.max(axis=1)


def _fps_seed(points):
    # farthest point from the centroid: independent of storage order
    d = np.einsum("ij,ij->i", points - points.mean(axis=0), points - points.mean(axis=0))
    return int(np.argmax(d))


def interpolate_idw(src_points, src_feats, dst_points, k=3):
    """Inverse-distance interpolation over the ``k`` nearest source points."""
    index = build_index(PointCloud(src_points))
    nbr, dist = index.query(dst_points, min(k, len(src_points)))
    w = 1.0 / np.maximum(dist, 1e-9)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("mk,mkc->mc", w, src_feats[nbr])


def backbone_levels(weights: WeightBundle) -> int:
    n = 0
    while f"level{n}.fc1.weight" in weights:
        n += 1
    if n == 0:
        raise WeightShapeError("weight bundle defines no set-conv levels (level0.fc1...)")
    return n


def set_conv_forward(
    cloud: PointCloud,
    weights: WeightBundle,
    sample_ratio=DEFAULT_SAMPLE_RATIO,
    group_k: int = DEFAULT_GROUP_K,
) -> FeatureMap:
    """Chained set-conv levels, then 3-NN propagation back to every point."""
    ratio = Fraction(sample_ratio).limit_denominator(10**6)
    if not 0 < ratio <= 1:
        raise InvalidInput("sample_ratio must lie in (0, 1]")
    pts = cloud.points
    feats = np.zeros((len(pts), 0))
    for level in range(backbone_levels(weights)):
        n_centers = max(1, math.ceil(len(pts) * ratio))
        sub = PointCloud(pts)
        idx = farthest_point_sample(sub, n_centers, _fps_seed(pts))
        centers = pts[idx]
        nbr, _ = build_index(sub).query(centers, min(group_k, len(pts)))
        feats = set_conv(pts, feats, centers, nbr, weights, f"level{level}", final_relu=True)
        pts = centers
    return FeatureMap(interpolate_idw(pts, feats, cloud.points))


def random_backbone_weights(widths=(32, 64), hidden=None, seed=0, scale=0.3) -> WeightBundle:
    """Seeded random backbone bundle, e.g. for tests and benchmarks."""
    rng = np.random.Generator(np.random.Philox(seed))
    arrays = {}
    c_in = 0
    for i, c_out in enumerate(widths):
        h = hidden or c_out
        arrays[f"level{i}.fc1.weight"] = rng.normal(0, scale, (h, 3 + c_in))
        arrays[f"level{i}.fc1.bias"] = rng.normal(0, scale, h)
        arrays[f"level{i}.fc2.weight"] = rng.normal(0, scale, (c_out, h))
        arrays[f"level{i}.fc2.bias"] = rng.normal(0, scale, c_out)
        c_in = c_out
    return WeightBundle.from_arrays(arrays, {"kind": "backbone", "widths": list(widths)})
