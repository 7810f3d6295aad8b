"""Reconstruction metrics, evaluation reports and point-cloud export."""
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateScaleError, InvalidInputError, ParseError

PLY_HEADER = (
    "ply\n"
    "format ascii 1.0\n"
    "element vertex {count}\n"
    "property double x\n"
    "property double y\n"
    "property double z\n"
    "end_header\n"
)


def _pair(xp, xg):
    xp = np.asarray(xp, dtype=np.float64)
    xg = np.asarray(xg, dtype=np.float64)
    if xp.shape != xg.shape or xp.ndim < 2 or xp.shape[-1] != 3:
        raise InvalidInputError(f"shape mismatch: {xp.shape} vs {xg.shape}")
    if not (np.all(np.isfinite(xp)) and np.all(np.isfinite(xg))):
        raise InvalidInputError("non-finite coordinates")
    return xp, xg


def per_sample_errors(xp, xg):
    """Mean point distance of each sample; accepts (K, 3) or (..., K, 3)."""
    xp, xg = _pair(xp, xg)
    return np.linalg.norm(xp - xg, axis=-1).mean(axis=-1)


def mpjpe(xp, xg):
    return float(np.mean(per_sample_errors(xp, xg)))


def depth_offset(xp, xg, max_iter=200):
    """Per-sample depth constant ``c`` minimizing the MPJPE of ``zp - c``.

    The objective ``sum_k sqrt(r_k^2 + (d_k - c)^2)`` with ``d = zp - zg`` is
    convex in ``c`` and its derivative is monotone, so bisection on the
    derivative over ``[min d, max d]`` finds the minimizer. Returns shape
    ``(..., 1)``.
    """
    xp, xg = _pair(xp, xg)
    d = xp[..., 2] - xg[..., 2]
    r2 = np.sum((xp[..., :2] - xg[..., :2]) ** 2, axis=-1)
    lo = d.min(axis=-1, keepdims=True)
    hi = d.max(axis=-1, keepdims=True)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        diff = mid - d
        den = np.sqrt(r2 + diff * diff)
        slope = np.sum(np.where(den > 0, diff / np.where(den > 0, den, 1.0), 0.0), axis=-1, keepdims=True)
        lo = np.where(slope < 0, mid, lo)
        hi = np.where(slope < 0, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid))):
            break
    return 0.5 * (lo + hi)


def remove_depth_offset(xp, xg):
    """Shift predicted depth by :func:`depth_offset`."""
    xp, xg = _pair(xp, xg)
    out = xp.copy()
    out[..., 2] -= depth_offset(xp, xg)
    return out


def mpjpe_depth_offset(xp, xg):
    """MPJPE minimized over a per-sample depth constant. Mirrors are not forgiven."""
    return mpjpe(remove_depth_offset(xp, xg), xg)


def sequence_scale(preds, gts):
    """Least-squares scale for centered predictions shared by every frame."""
    preds, gts = _pair(preds, gts)
    pc = preds - preds.mean(axis=-2, keepdims=True)
    gc = gts - gts.mean(axis=-2, keepdims=True)
    denom = float(np.sum(pc * pc))
    if denom <= 0.0:
        raise DegenerateScaleError("predictions are all zero after centering")
    return float(np.sum(pc * gc)) / denom, pc, gc


def mpjpe_sequence_scale(preds, gts):
    s, pc, gc = sequence_scale(preds, gts)
    return mpjpe(s * pc, gc)


def error_breakdown(xp, xg, v):
    """``(in_plane, depth)``: xy error on occluded points, |dz| after offset removal.

    ``in_plane`` is ``None`` when no point is occluded.
    """
    xp, xg = _pair(xp, xg)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != xp.shape[:-1]:
        raise InvalidInputError("visibility shape does not match the points")
    hidden = v == 0
    in_plane = None
    if np.any(hidden):
        in_plane = float(np.linalg.norm((xp[..., :2] - xg[..., :2])[hidden], axis=-1).mean())
    shifted = remove_depth_offset(xp, xg)
    depth = float(np.abs(shifted[..., 2] - xg[..., 2]).mean())
    return in_plane, depth


def depth_correlation(xp, xg):
    """Pearson correlation of per-sample centered predicted and true depths."""
    xp, xg = _pair(xp, xg)
    zp = xp[..., 2] - xp[..., 2].mean(axis=-1, keepdims=True)
    zg = xg[..., 2] - xg[..., 2].mean(axis=-1, keepdims=True)
    denom = np.sqrt(np.sum(zp * zp) * np.sum(zg * zg))
    return float(np.sum(zp * zg) / denom) if denom > 0 else 0.0


def mean_radius(xg):
    """Mean distance of ground-truth points from their sample centroid."""
    xg = np.asarray(xg, dtype=np.float64)
    return float(np.linalg.norm(xg - xg.mean(axis=-2, keepdims=True), axis=-1).mean())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mpjpe: float
    per_sample: np.ndarray
    mpjpe_depth_offset: float = None
    mpjpe_sequence_scale: float = None
    in_plane_error: float = None
    depth_error: float = None
    depth_correlation: float = None
    metadata: dict = field(default_factory=dict)

    def lines(self):
        out = []
        for key in (
            "mpjpe",
            "mpjpe_depth_offset",
            "mpjpe_sequence_scale",
            "in_plane_error",
            "depth_error",
            "depth_correlation",
        ):
            val = getattr(self, key)
            out.append(f"{key} = {'absent' if val is None else repr(float(val))}")
        for key in sorted(self.metadata):
            out.append(f"meta.{key} = {self.metadata[key]}")
        out.append("per_sample = " + " ".join(repr(float(x)) for x in self.per_sample))
        return out

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.lines()) + "\n")


def read_report(path):
    """Parse a report file back into a ``{key: value}`` dict of strings/floats."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            key, sep, val = line.partition(" = ")
            if not sep:
                raise ParseError("expected 'key = value'", line=lineno)
            if key == "per_sample":
                out[key] = np.array([float(x) for x in val.split()])
            elif key.startswith("meta.") or val == "absent":
                out[key] = None if val == "absent" else val
            else:
                out[key] = float(val)
    return out


def evaluate(preds, gts, v, metrics=("mpjpe", "depth-offset", "sequence-scale"), metadata=None):
    """Full report for (N, K, 3) predictions against ground truth."""
    preds, gts = _pair(preds, gts)
    report = EvalReport(mpjpe=mpjpe(preds, gts), per_sample=per_sample_errors(preds, gts))
    if "depth-offset" in metrics:
        report.mpjpe_depth_offset = mpjpe_depth_offset(preds, gts)
    if "sequence-scale" in metrics:
        report.mpjpe_sequence_scale = mpjpe_sequence_scale(preds, gts)
    report.in_plane_error, report.depth_error = error_breakdown(preds, gts, v)
    report.depth_correlation = depth_correlation(preds, gts)
    report.metadata = dict(metadata or {})
    report.metadata.setdefault("samples", len(preds))
    report.metadata.setdefault("gt_mean_radius", repr(mean_radius(gts)))
    return report


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


def export_pointcloud(points, path, fmt=None):
    """Write (K, 3) points as ASCII PLY (9 significant digits) or exact CSV."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError(f"expected (K, 3) points, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("non-finite coordinates")
    fmt = fmt or os.path.splitext(path)[1].lstrip(".").lower()
    if fmt == "ply":
        body = "".join(" ".join(f"{c:.9g}" for c in row) + "\n" for row in points)
        text = PLY_HEADER.format(count=len(points)) + body
    elif fmt == "csv":
        text = "x,y,z\n" + "".join(",".join(repr(float(c)) for c in row) + "\n" for row in points)
    else:
        raise InvalidInputError(f"unknown point-cloud format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_pointcloud(path, fmt=None):
    fmt = fmt or os.path.splitext(path)[1].lstrip(".").lower()
    with open(path, encoding="utf-8") as fh:
        if fmt == "csv":
            rows = list(csv.reader(fh))
            if not rows or rows[0] != ["x", "y", "z"]:
                raise ParseError("missing x,y,z header", line=1)
            return np.array([[float(c) for c in r] for r in rows[1:]], dtype=np.float64).reshape(-1, 3)
        lines = fh.read().splitlines()
    if fmt != "ply":
        raise InvalidInputError(f"unknown point-cloud format {fmt!r}")
    if not lines or lines[0] != "ply":
        raise ParseError("not a PLY file", line=1)
    try:
        end = lines.index("end_header")
    except ValueError as exc:
        raise ParseError("missing end_header") from exc
    count = None
    for line in lines[:end]:
        if line.startswith("element vertex"):
            count = int(line.split()[2])
    if count is None:
        raise ParseError("missing vertex count")
    body = lines[end + 1 : end + 1 + count]
    return np.array([[float(c) for c in line.split()] for line in body], dtype=np.float64).reshape(-1, 3)
