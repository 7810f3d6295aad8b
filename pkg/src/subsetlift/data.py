"""Datasets, camera models, synthetic data and preprocessing.

Dataset files are JSON lines. The first line is the manifest::

    {"kind": "manifest", "format": "subsetlift-dataset", "version": 1,
     "keypoints": K, "count": N, "camera": {"kind": "orthographic"}, ...}

A perspective camera adds ``"projection"``: the 4x4 matrix as 16 row-major
numbers. Every following line is one sample::

    {"w": [[x, y], ...], "v": [1, 0, ...], "gt": [[x, y, z], ...]}

``w`` holds K screen (orthographic) or NDC (perspective) pairs, zero for
occluded points, ``v`` the K visibility flags and the optional ``gt`` the K
ground-truth 3D points (camera space).

Depth convention: camera space is right-handed with ``z`` growing away from
the camera. The perspective matrix maps the near plane to NDC ``z = -1`` and
the far plane to ``z = +1``, so NDC depth also grows with distance.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    InvalidInputError,
    ParseError,
    ProjectionError,
    SchemaError,
    SizeError,
    UnsupportedAugmentationError,
)
from .linalg import random_rotation, rotation_from_axis_angle

FORMAT = "subsetlift-dataset"


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


@dataclass
class CameraModel:
    kind: str = "orthographic"
    projection: np.ndarray = None
    near: float = None
    far: float = None

    def __post_init__(self):
        if self.kind not in ("orthographic", "perspective"):
            raise InvalidInputError(f"unknown camera kind {self.kind!r}")
        if self.kind == "perspective":
            if self.projection is None:
                raise InvalidInputError("perspective camera needs a 4x4 projection matrix")
            self.projection = np.asarray(self.projection, dtype=np.float64).reshape(4, 4)
            if abs(np.linalg.det(self.projection)) < 1e-12:
                raise InvalidInputError("projection matrix is singular")
            if self.near is not None and self.far is not None and not self.near < self.far:
                raise InvalidInputError("need near < far")

    @property
    def is_perspective(self):
        return self.kind == "perspective"

    def to_dict(self):
        d = {"kind": self.kind}
        if self.is_perspective:
            d["projection"] = [float(x) for x in self.projection.ravel()]
            if self.near is not None:
                d["near"] = float(self.near)
                d["far"] = float(self.far)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "orthographic"), d.get("projection"), d.get("near"), d.get("far"))


def perspective_matrix(fov_y_deg, aspect, near, far):
    """Projection for a camera looking down +z; near -> NDC z=-1, far -> +1."""
    if not 0 < near < far:
        raise InvalidInputError("need 0 < near < far")
    f = 1.0 / np.tan(np.radians(fov_y_deg) / 2.0)
    return np.array(
        [
            [f / aspect, 0.0, 0.0, 0.0],
            [0.0, f, 0.0, 0.0],
            [0.0, 0.0, (far + near) / (far - near), -2.0 * far * near / (far - near)],
            [0.0, 0.0, 1.0, 0.0],
        ]
    )


def perspective_camera(fov_y_deg=60.0, aspect=1.0, near=0.1, far=100.0):
    return CameraModel("perspective", perspective_matrix(fov_y_deg, aspect, near, far), near, far)


def _homogeneous_apply(matrix, points):
    points = np.asarray(points, dtype=np.float64)
    h = points @ matrix[:, :3].T + matrix[:, 3]
    w = h[..., 3:4]
    if np.any(np.abs(w) < 1e-300):
        raise ProjectionError("point at zero homogeneous w")
    return h[..., :3] / w


def project(points, camera):
    """Camera space -> screen/NDC. Orthographic keeps (x, y, z)."""
    points = np.asarray(points, dtype=np.float64)
    if not camera.is_perspective:
        return points.copy()
    return _homogeneous_apply(camera.projection, points)


def unproject(points, camera):
    """Inverse of :func:`project`."""
    points = np.asarray(points, dtype=np.float64)
    if not camera.is_perspective:
        return points.copy()
    return _homogeneous_apply(np.linalg.inv(camera.projection), points)


def unproject_tensor(points, camera):
    """Differentiable :func:`unproject` for a (..., 3) tensor."""
    points = ad.as_tensor(points)
    if not camera.is_perspective:
        return points
    inv = np.linalg.inv(camera.projection)
    h = ad.matmul(points, inv[:3, :3].T) + inv[:3, 3]
    w = ad.matmul(points, inv[3:4, :3].T) + inv[3, 3]
    return h / w


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    w: np.ndarray
    v: np.ndarray
    gt: np.ndarray = None


@dataclass
class DatasetManifest:
    keypoints: int
    camera: CameraModel = field(default_factory=CameraModel)
    count: int = 0
    split: str = "train"
    notes: str = ""
    normalization: dict = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "kind": "manifest",
            "format": FORMAT,
            "version": 1,
            "keypoints": int(self.keypoints),
            "count": int(self.count),
            "camera": self.camera.to_dict(),
            "split": self.split,
            "notes": self.notes,
        }
        if self.normalization is not None:
            d["normalization"] = self.normalization
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            keypoints=int(d["keypoints"]),
            camera=CameraModel.from_dict(d.get("camera", {})),
            count=int(d.get("count", 0)),
            split=d.get("split", "train"),
            notes=d.get("notes", ""),
            normalization=d.get("normalization"),
            extra=d.get("extra", {}),
        )


@dataclass
class Dataset:
    """Arrays ``w`` (N, K, 2), ``v`` (N, K) and optional ``gt`` (N, K, 3)."""

    manifest: DatasetManifest
    w: np.ndarray
    v: np.ndarray
    gt: np.ndarray = None

    def __post_init__(self):
        k = self.manifest.keypoints
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1, k, 2)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1, k)
        if self.gt is not None:
            self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, k, 3)
        self.manifest.count = len(self.w)

    def __len__(self):
        return len(self.w)

    @property
    def keypoints(self):
        return self.manifest.keypoints

    @property
    def camera(self):
        return self.manifest.camera

    def __getitem__(self, i):
        return Sample(self.w[i], self.v[i], None if self.gt is None else self.gt[i])

    def samples(self):
        for i in range(len(self)):
            yield self[i]

    def occlusion_rate(self):
        return float(1.0 - self.v.mean()) if len(self) else 0.0


def validate_sample(sample):
    v = np.asarray(sample.v)
    if not np.all((v == 0) | (v == 1)):
        raise SchemaError("visibility must be binary")
    if np.any(sample.w[v == 0] != 0.0):
        raise SchemaError("occluded points must have zeroed coordinates")
    if not np.all(np.isfinite(sample.w)):
        raise SchemaError("non-finite coordinates")


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def write_dataset(path, dataset):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dataset.manifest.to_dict(), sort_keys=True) + "\n")
        for i in range(len(dataset)):
            rec = {"w": dataset.w[i].tolist(), "v": [int(x) for x in dataset.v[i]]}
            if dataset.gt is not None:
                rec["gt"] = dataset.gt[i].tolist()
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_dataset(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file, expected a manifest line", line=1)
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed manifest: {exc.msg}", line=1) from exc
    if head.get("kind") != "manifest" or "keypoints" not in head:
        raise SchemaError("first line must be a manifest with 'keypoints'", line=1)
    try:
        manifest = DatasetManifest.from_dict(head)
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad manifest: {exc}", line=1) from exc
    k = manifest.keypoints
    ws, vs, gts = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            w = np.asarray(rec["w"], dtype=np.float64)
            v = np.asarray(rec["v"], dtype=np.float64)
            gt = np.asarray(rec["gt"], dtype=np.float64) if "gt" in rec else None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed sample: {exc}", line=lineno) from exc
        if w.shape != (k, 2) or v.shape != (k,) or (gt is not None and gt.shape != (k, 3)):
            raise SchemaError(f"sample does not match K={k}", line=lineno)
        try:
            validate_sample(Sample(w, v, gt))
        except SchemaError as exc:
            raise SchemaError(str(exc), line=lineno) from exc
        ws.append(w)
        vs.append(v)
        gts.append(gt)
    has_gt = [g is not None for g in gts]
    if any(has_gt) and not all(has_gt):
        raise SchemaError("either all samples or none carry ground truth")
    if head.get("count") is not None and int(head["count"]) != len(ws):
        raise SchemaError(f"manifest announces {head['count']} samples, file has {len(ws)}")
    w = np.array(ws).reshape(-1, k, 2)
    v = np.array(vs).reshape(-1, k)
    gt = np.array(gts).reshape(-1, k, 3) if ws and all(has_gt) else None
    return Dataset(manifest, w, v, gt)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def compute_normalization(w, v):
    """Center and scale of the visible observations (one scale for both axes)."""
    vis = np.asarray(v) > 0
    pts = np.asarray(w)[vis]
    if len(pts) < 2:
        return {"center": [0.0, 0.0], "scale": 1.0}
    center = pts.mean(axis=0)
    scale = float(np.sqrt(np.mean((pts - center) ** 2)))
    return {"center": [float(c) for c in center], "scale": scale if scale > 0 else 1.0}


def normalize_observations(w, v, norm):
    center = np.asarray(norm["center"], dtype=np.float64)
    return (np.asarray(w) - center) / norm["scale"] * (np.asarray(v)[..., None] > 0)


def denormalize_points(x, norm):
    """Map normalized (..., 3) reconstructions back to dataset coordinates."""
    center = np.asarray(norm["center"], dtype=np.float64)
    out = np.asarray(x, dtype=np.float64) * norm["scale"]
    out[..., :2] += center
    return out


# ---------------------------------------------------------------------------
# synthetic articulated chains
# ---------------------------------------------------------------------------


def occlusion_mask(points, radius, margin):
    """Visibility from pairwise screen proximity.

    A point is occluded when another point lies strictly within ``radius``
    in screen distance and is closer to the camera by more than ``margin``.
    """
    points = np.asarray(points, dtype=np.float64)
    if radius <= 0:
        return np.ones(len(points))
    d = points[:, None, :2] - points[None, :, :2]
    near = np.einsum("ijk,ijk->ij", d, d) < radius * radius
    closer = points[None, :, 2] < points[:, None, 2] - margin
    np.fill_diagonal(near, False)
    return np.where(np.any(near & closer, axis=1), 0.0, 1.0)


def synth_hinge_chain(
    frames,
    keypoints,
    segments=3,
    max_angle=60.0,
    tube_radius=0.05,
    occlusion_radius=0.03,
    depth_margin=0.02,
    seed=0,
):
    """Articulated chain of unit segments seen by an orthographic camera.

    Keypoints are scattered once on tubes around the segments. Each frame
    draws one hinge angle per joint uniformly in ``[-max_angle, max_angle]``
    degrees and a uniformly random global rotation; the shape is centered,
    projected along ``z`` and occluded with :func:`occlusion_mask`.
    """
    if keypoints < 3 * segments:
        raise InvalidInputError("need at least 3 keypoints per segment")
    children = np.random.SeedSequence(seed).spawn(frames + 1)
    layout_rng = np.random.default_rng(children[0])
    segment_of = np.repeat(np.arange(segments), np.diff(np.linspace(0, keypoints, segments + 1).round().astype(int)))
    along = layout_rng.uniform(0.0, 1.0, keypoints)
    phi = layout_rng.uniform(0.0, 2.0 * np.pi, keypoints)
    local = np.stack([along, tube_radius * np.cos(phi), tube_radius * np.sin(phi)], axis=1)
    axis_angle = layout_rng.uniform(0.0, 2.0 * np.pi, max(segments - 1, 0))
    hinge_axes = np.stack([np.zeros_like(axis_angle), np.cos(axis_angle), np.sin(axis_angle)], axis=1)
    limit = np.radians(max_angle)

    ws = np.zeros((frames, keypoints, 2))
    vs = np.zeros((frames, keypoints))
    gts = np.zeros((frames, keypoints, 3))
    for f in range(frames):
        rng = np.random.default_rng(children[f + 1])
        angles = rng.uniform(-limit, limit, segments - 1)
        glob = random_rotation(rng)
        rot = np.eye(3)
        origin = np.zeros(3)
        world = np.zeros((keypoints, 3))
        for s in range(segments):
            sel = segment_of == s
            world[sel] = origin + local[sel] @ rot.T
            if s < segments - 1:
                origin = origin + rot[:, 0]
                rot = rot @ rotation_from_axis_angle(hinge_axes[s], angles[s])
        pts = (world - world.mean(axis=0)) @ glob.T
        vis = occlusion_mask(pts, occlusion_radius, depth_margin)
        gts[f] = pts
        vs[f] = vis
        ws[f] = pts[:, :2] * vis[:, None]
    manifest = DatasetManifest(
        keypoints=keypoints,
        camera=CameraModel(),
        notes="synthetic hinge chain",
        normalization=compute_normalization(ws, vs),
        extra={
            "generator": "hinge-chain",
            "frames": frames,
            "segments": segments,
            "max_angle": max_angle,
            "tube_radius": tube_radius,
            "occlusion_radius": occlusion_radius,
            "depth_margin": depth_margin,
            "seed": seed,
            "rigid": max_angle == 0,
        },
    )
    return Dataset(manifest, ws, vs, gts)


# ---------------------------------------------------------------------------
# augmentation and sequence preprocessing
# ---------------------------------------------------------------------------


def augment_inplane_rotation(sample, angle, camera=None):
    """Rotate observed (and ground-truth) screen coordinates by ``angle`` radians."""
    if camera is not None and camera.is_perspective:
        raise UnsupportedAugmentationError("in-plane rotation is only defined for orthographic cameras")
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    w = (np.asarray(sample.w) @ rot.T) * (np.asarray(sample.v)[..., None] > 0)
    gt = None
    if sample.gt is not None:
        gt = np.array(sample.gt, dtype=np.float64)
        gt[..., :2] = gt[..., :2] @ rot.T
    return Sample(w, np.array(sample.v, copy=True), gt)


def augment_batch_rotation(w, v, angles):
    """Vectorized in-plane rotation of a (B, K, 2) batch by per-sample angles."""
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    x, y = w[..., 0], w[..., 1]
    out = np.stack([c * x - s * y, s * x + c * y], axis=-1)
    return out * (np.asarray(v)[..., None] > 0)


def farthest_point_sampling(points, count, first=0):
    """Greedy max-min selection of ``count`` row indices, starting at ``first``."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if count > n:
        raise SizeError(f"cannot pick {count} of {n} points")
    chosen = [first]
    dist = np.linalg.norm(points - points[first], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen, dtype=np.intp)


def preprocess_sequence(w, v, gt=None, min_visibility=0.30, target_keypoints=100, camera=None):
    """Drop rarely visible tracks, then downsample by farthest point sampling.

    ``w`` (T, N, 2), ``v`` (T, N), ``gt`` (T, N, 3). A track survives when it
    is visible in at least ``min_visibility`` of the frames. Distances for
    the sampling use mean ground-truth positions when available, otherwise
    mean observed positions over visible frames. Sampling starts at the first
    surviving track. Returns a :class:`Dataset` whose manifest records the
    kept original track indices.
    """
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    frac = v.mean(axis=0)
    keep = np.flatnonzero(frac >= min_visibility)
    if len(keep) < target_keypoints:
        raise SizeError(f"only {len(keep)} tracks survive the visibility filter, need {target_keypoints}")
    if gt is not None:
        gt = np.asarray(gt, dtype=np.float64)
        feature = gt[:, keep].mean(axis=0)
    else:
        vis = v[:, keep]
        feature = (w[:, keep] * vis[..., None]).sum(axis=0) / vis.sum(axis=0)[:, None]
    if len(keep) == target_keypoints:
        picked = np.arange(target_keypoints)
    else:
        picked = farthest_point_sampling(feature, target_keypoints, first=0)
    tracks = keep[picked]
    ws = w[:, tracks] * (v[:, tracks, None] > 0)
    manifest = DatasetManifest(
        keypoints=target_keypoints,
        camera=camera or CameraModel(),
        notes="preprocessed tracked sequence",
        normalization=compute_normalization(ws, v[:, tracks]),
        extra={"tracks": [int(t) for t in tracks], "min_visibility": min_visibility, "sequence": True},
    )
    return Dataset(manifest, ws, v[:, tracks], None if gt is None else gt[:, tracks])
