"""File formats and seeded synthetic data.

Formats
-------
cloud   PLY with a ``vertex`` element holding float ``x``, ``y``, ``z``
        (ASCII or binary little-endian on read, ASCII on write).
flow    CSV, header ``index,dx,dy,dz``, one row per source point in order.
motion  JSON ``{"quat": [w, x, y, z], "trans": [x, y, z]}``.
weights JSON manifest listing ``{"name", "shape"}`` per layer plus a sibling
        blob of little-endian float32 values in manifest order.
trace   CSV ``iter,cost,mean_flow,epe3d,millis``.

All random generation draws from ``numpy.random.Philox`` (a counter-based
generator) seeded with the caller's 64-bit seed, in a fixed draw order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rcp.errors import InvalidInput, ParseError
from rcp.features import Layer, WeightBundle
from rcp.geometry import FlowField, PointCloud, RigidMotion, apply_motion, flow_from_motion

WEIGHTS_FORMAT = "rcp-weights"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _fmt32(v) -> str:
    return repr(float(np.float32(v)))


def write_cloud(path, cloud: PointCloud):
    pts = cloud.points
    lines = ["ply", "format ascii 1.0"]
    if cloud.id:
        lines.append(f"comment id {cloud.id}")
    lines += [
        f"element vertex {len(pts)}",
        "property float x", "property float y", "property float z",
        "end_header",
    ]
    lines += [" ".join(_fmt32(c) for c in p) for p in pts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cloud(path) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing 'ply' magic or end_header)", path, "line 1")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    header = data[:end].decode("utf-8", errors="replace").splitlines()

    fmt = None
    elements = []  # (name, count, [(prop name, type or ("list", count type, item type))])
    cloud_id = None
    for lineno, raw in enumerate(header, start=1):
        tok = raw.split()
        if not tok or tok[0] == "ply" or tok[0] == "obj_info":
            continue
        if tok[0] == "comment":
            if len(tok) >= 3 and tok[1] == "id":
                cloud_id = " ".join(tok[2:])
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format {' '.join(tok[1:])!r}", path, f"line {lineno}")
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append((tok[1], int(tok[2]), []))
            except (IndexError, ValueError):
                raise ParseError(f"bad element line {raw!r}", path, f"line {lineno}") from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", path, f"line {lineno}")
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError(f"unknown list type in {raw!r}", path, f"line {lineno}")
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[2], tok[1]))
            else:
                raise ParseError(f"bad property line {raw!r}", path, f"line {lineno}")
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", path, f"line {lineno}")
    if fmt is None:
        raise ParseError("PLY header has no format line", path, "header")
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise ParseError("PLY has no vertex element", path, "header")
    vprops = [p[0] for p in elements[names.index("vertex")][2]]
    for axis in "xyz":
        if axis not in vprops:
            raise ParseError(f"vertex element lacks property {axis!r}", path, "header")
    if fmt == "ascii":
        pts = _read_ascii_body(data[body_start:], elements, len(header) + 2, path)
    else:
        pts = _read_binary_body(data[body_start:], elements, body_start, path)
    try:
        return PointCloud(pts, cloud_id)
    except InvalidInput as exc:
        raise ParseError(str(exc), path, "vertex data") from None


def _read_ascii_body(body, elements, first_line, path):
    lines = body.decode("utf-8", errors="replace").splitlines()
    pos = 0
    out = None
    for name, count, props in elements:
        scalar = all(not isinstance(t, tuple) for _, t in props)
        cols = [p[0] for p in props]
        rows = []
        for _ in range(count):
            while pos < len(lines) and not lines[pos].strip():
                pos += 1
            if pos >= len(lines):
                raise ParseError(f"file ends inside element {name!r}", path, f"line {first_line + pos}")
            if name == "vertex":
                tok = lines[pos].split()
                if scalar and len(tok) != len(cols):
                    raise ParseError(
                        f"expected {len(cols)} values, found {len(tok)}", path, f"line {first_line + pos}"
                    )
                try:
                    rows.append([float(tok[cols.index(a)]) for a in "xyz"])
                except (ValueError, IndexError):
                    raise ParseError(f"bad vertex row {lines[pos]!r}", path, f"line {first_line + pos}") from None
            pos += 1
        if name == "vertex":
            out = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return out


def _read_binary_body(body, elements, offset, path):
    pos = 0
    out = None
    for name, count, props in elements:
        if any(isinstance(t, tuple) for _, t in props):
            if name == "vertex":
                raise ParseError("list properties on vertices are not supported", path, f"offset {offset + pos}")
            # variable-size rows: walk them
            for _ in range(count):
                for _, t in props:
                    if isinstance(t, tuple):
                        cdt = np.dtype("<" + _PLY_TYPES[t[1]])
                        idt = np.dtype("<" + _PLY_TYPES[t[2]])
                        if pos + cdt.itemsize > len(body):
                            raise ParseError("truncated binary element", path, f"offset {offset + pos}")
                        n = int(np.frombuffer(body, cdt, 1, pos)[0])
                        pos += cdt.itemsize + n * idt.itemsize
                    else:
                        pos += np.dtype(_PLY_TYPES[t]).itemsize
            continue
        dt = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props])
        need = dt.itemsize * count
        if pos + need > len(body):
            raise ParseError(f"truncated binary element {name!r}", path, f"offset {offset + pos}")
        arr = np.frombuffer(body, dt, count, pos)
        pos += need
        if name == "vertex":
            out = np.stack([arr[a].astype(np.float64) for a in "xyz"], axis=1)
    return out


# --------------------------------------------------------------------------
# flow CSV
# --------------------------------------------------------------------------

FLOW_HEADER = ["index", "dx", "dy", "dz"]


def write_flow(path, flow: FlowField):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FLOW_HEADER)
    for i, v in enumerate(flow.vectors):
        w.writerow([i] + [repr(float(c)) for c in v])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_flow(path) -> FlowField:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != FLOW_HEADER:
        raise ParseError("flow CSV header must be 'index,dx,dy,dz'", path, "line 1")
    vecs = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 columns, found {len(row)}", path, f"line {lineno}")
        try:
            idx = int(row[0])
            vec = [float(c) for c in row[1:]]
        except ValueError:
            raise ParseError(f"non-numeric value in {row!r}", path, f"line {lineno}") from None
        if idx != len(vecs):
            raise ParseError(f"index {idx} out of sequence (expected {len(vecs)})", path, f"line {lineno}")
        if not all(math.isfinite(c) for c in vec):
            raise ParseError("non-finite flow component", path, f"line {lineno}")
        vecs.append(vec)
    if not vecs:
        raise ParseError("flow CSV has no rows", path, "line 2")
    return FlowField(np.array(vecs))


# --------------------------------------------------------------------------
# motion JSON
# --------------------------------------------------------------------------

def motion_to_dict(m: RigidMotion) -> dict:
    return {"quat": [float(c) for c in m.rotation], "trans": [float(c) for c in m.translation]}


def write_motion(path, m: RigidMotion):
    Path(path).write_text(json.dumps(motion_to_dict(m), indent=2) + "\n", encoding="utf-8")


def read_motion(path) -> RigidMotion:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, f"line {exc.lineno}") from None
    if not isinstance(doc, dict) or set(doc) != {"quat", "trans"}:
        raise ParseError("motion JSON must have exactly the keys 'quat' and 'trans'", path, "top level")
    try:
        q = np.array(doc["quat"], dtype=np.float64)
        t = np.array(doc["trans"], dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError("quat/trans must be numeric arrays", path, "top level") from None
    if q.shape != (4,) or t.shape != (3,):
        raise ParseError("quat needs 4 numbers and trans needs 3", path, "top level")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
        raise ParseError("motion has non-finite components", path, "top level")
    n = np.linalg.norm(q)
    if n == 0:
        raise ParseError("quaternion has zero norm", path, "quat")
    if abs(n - 1.0) > 1e-9:
        warnings.warn(f"{path}: quaternion norm {n:.6g} renormalized to 1", RuntimeWarning, stacklevel=2)
    return RigidMotion(q / n, t)


# --------------------------------------------------------------------------
# weight bundles
# --------------------------------------------------------------------------

def write_weights(manifest_path, bundle: WeightBundle, blob_name=None):
    manifest_path = Path(manifest_path)
    blob_name = blob_name or manifest_path.with_suffix(".bin").name
    doc = {
        "format": WEIGHTS_FORMAT,
        "version": 1,
        "blob": blob_name,
        "meta": bundle.meta,
        "layers": [{"name": l.name, "shape": list(l.shape)} for l in bundle.layers],
    }
    blob = b"".join(l.params.astype("<f4").tobytes() for l in bundle.layers)
    (manifest_path.parent / blob_name).write_bytes(blob)
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_weights(manifest_path) -> WeightBundle:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", manifest_path, f"line {exc.lineno}") from None
    if not isinstance(doc, dict) or doc.get("format") != WEIGHTS_FORMAT:
        raise ParseError(f"manifest format must be {WEIGHTS_FORMAT!r}", manifest_path, "format")
    layers_doc = doc.get("layers")
    if not isinstance(layers_doc, list):
        raise ParseError("manifest needs a 'layers' list", manifest_path, "layers")
    blob_path = manifest_path.parent / doc.get("blob", manifest_path.with_suffix(".bin").name)
    if not blob_path.exists():
        raise ParseError(f"weight blob {blob_path} not found", manifest_path, "blob")
    raw = blob_path.read_bytes()
    if len(raw) % 4:
        raise ParseError(f"blob length {len(raw)} is not a multiple of 4", blob_path, f"offset {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    sizes = []
    for i, entry in enumerate(layers_doc):
        try:
            shape = tuple(int(s) for s in entry["shape"])
            name = str(entry["name"])
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"layer entry {i} needs 'name' and integer 'shape'", manifest_path, f"layers[{i}]") from None
        if any(s < 0 for s in shape):
            raise ParseError(f"negative dimension in layer {name}", manifest_path, f"layers[{i}]")
        sizes.append((name, shape, int(np.prod(shape)) if shape else 1))
    total = sum(s for _, _, s in sizes)
    if total != len(values):
        raise ParseError(
            f"manifest shapes imply {total} values but blob holds {len(values)}", blob_path, f"offset {len(raw)}"
        )
    layers = []
    pos = 0
    for name, shape, size in sizes:
        layers.append(Layer(name, shape, values[pos:pos + size]))
        pos += size
    return WeightBundle(layers, dict(doc.get("meta") or {}))


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PairSpec:
    rotation_deg: tuple = (0.0, 45.0)
    translation: tuple = (-0.5, 0.5)
    partial_fraction: float = 0.3
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.rotation_deg[0] <= self.rotation_deg[1]:
            raise InvalidInput("rotation range is not ordered")
        if not self.translation[0] <= self.translation[1]:
            raise InvalidInput("translation range is not ordered")
        if not 0.0 <= self.partial_fraction < 1.0:
            raise InvalidInput("partial_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise InvalidInput("noise_sigma must be nonnegative")

    @classmethod
    def zero(cls, seed=0):
        return cls((0.0, 0.0), (0.0, 0.0), 0.0, 0.0, seed)


@dataclass(frozen=True)
class SyntheticPair:
    P: PointCloud
    Q: PointCloud
    motion: RigidMotion
    flow: FlowField
    p_index: np.ndarray  # retained source indices into the normalized input
    q_index: np.ndarray  # retained target indices (same numbering)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    pts = cloud.points - cloud.points.mean(axis=0)
    r = np.linalg.norm(pts, axis=1).max()
    return PointCloud(pts / r if r > 0 else pts, cloud.id)


def random_motion(rng, rotation_deg, translation) -> RigidMotion:
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(rotation_deg[0], rotation_deg[1]))
    t = rng.uniform(translation[0], translation[1], size=3)
    return RigidMotion.from_axis_angle(axis, angle, t)


def _unit(rng):
    d = rng.normal(size=3)
    return d / np.linalg.norm(d)


def crop_by_direction(points, direction, fraction) -> np.ndarray:
    """Indices kept after dropping ``floor(fraction * M)`` lowest projections."""
    drop = int(math.floor(fraction * len(points)))
    order = np.argsort(points @ direction, kind="stable")
    return np.sort(order[drop:])


def synth_pair(source: PointCloud, spec: PairSpec = PairSpec()) -> SyntheticPair:
    """Rigidly moved, optionally noisy and cropped copy of ``source``.

    Draw order: rotation axis, angle, translation, noise, crop direction for
    the source, crop direction for the target.
    """
    if len(source) < 16:
        raise InvalidInput("synthetic pairs need a source of at least 16 points")
    base = normalize_unit_sphere(source)
    rng = make_rng(spec.seed)
    motion = random_motion(rng, spec.rotation_deg, spec.translation)
    noise = rng.normal(0.0, 1.0, size=base.points.shape) * spec.noise_sigma
    target = apply_motion(base, motion).points + noise
    dir_p, dir_q = _unit(rng), _unit(rng)
    keep_p = crop_by_direction(base.points, dir_p, spec.partial_fraction)
    keep_q = crop_by_direction(target, dir_q, spec.partial_fraction)
    P = PointCloud(base.points[keep_p], source.id)
    Q = PointCloud(target[keep_q], source.id)
    return SyntheticPair(P, Q, motion, flow_from_motion(P, motion), keep_p, keep_q)


def random_shape(n: int, seed: int, bumps: int = 4, radius: float = 1.0) -> PointCloud:
    """Closed, asymmetric, star-shaped surface sampled with ``n`` points."""
    rng = make_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    freq = rng.normal(size=(bumps, 3)) * 1.5
    phase = rng.uniform(0, 2 * np.pi, size=bumps)
    amp = rng.uniform(0.05, 0.2, size=bumps)
    r = 1.0 + np.sin(d @ freq.T + phase) @ amp
    # well separated semi-axes keep the shape free of near symmetries
    axes = np.array([1.0, 0.7, 0.45]) * rng.uniform(0.9, 1.1, size=3)
    pts = d * r[:, None] * axes * radius
    return PointCloud(pts)


@dataclass(frozen=True)
class SyntheticScene:
    P: PointCloud
    Q: PointCloud
    flow: FlowField
    labels: np.ndarray
    motions: tuple


def synth_scene_flow_scene(
    num_objects: int = 2,
    points_per_object: int = 256,
    spec: PairSpec = PairSpec((0.0, 10.0), (-0.2, 0.2), 0.0, 0.0, 0),
    seed: int | None = None,
    object_radius: float = 0.4,
    spacing: float = 1.5,
) -> SyntheticScene:
    """Several disjoint blobs, each moved by its own rigid motion about its centroid.

    Objects sit on a jittered row ``spacing`` apart so blobs never overlap.
    Per-object rotation and translation ranges come from ``spec``; its
    partial/noise fields add target noise only (no cropping).
    """
    if num_objects < 1 or points_per_object < 8:
        raise InvalidInput("need at least one object of at least 8 points")
    rng = make_rng(spec.seed if seed is None else seed)
    src, dst, labels, motions = [], [], [], []
    for k in range(num_objects):
        shape_seed = int(rng.integers(0, 2**63 - 1))
        blob = random_shape(points_per_object, shape_seed, radius=object_radius).points
        center = np.array([k * spacing, 0.0, 0.0]) + rng.uniform(-0.1, 0.1, size=3)
        local = random_motion(rng, spec.rotation_deg, spec.translation)
        # rotate about the object's own center
        world = RigidMotion(local.rotation, center + local.translation - local.matrix @ center)
        pts = blob + center
        src.append(pts)
        dst.append(world.transform_points(pts))
        labels.append(np.full(points_per_object, k))
        motions.append(world)
    P = PointCloud(np.concatenate(src))
    target = np.concatenate(dst)
    target = target + rng.normal(0.0, 1.0, size=target.shape) * spec.noise_sigma
    flow = FlowField(np.concatenate(dst) - P.points)
    return SyntheticScene(P, PointCloud(target), flow, np.concatenate(labels), tuple(motions))
