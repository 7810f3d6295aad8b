"""Locally low-rank subset loss.

For a subset of keypoints, the batch of sub-shapes ``C`` (B, k, 3) is
centered, a rank-3 batch mean shape is extracted by SVD, its mirror
ambiguity is resolved, every sample is rotated onto it, and the log of the
singular values of the normalized residual is summed.

Gradient convention: the mean shape, per-sample rotations, flip sign and
scale divisor are computed from detached values. Gradients reach ``C`` only
through the centered coordinates inside ``C_centered @ R - mu``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels, linalg
from .errors import (
    DegenerateScaleError,
    InvalidBatchError,
    InvalidInputError,
    InvalidSubsetError,
)

SCALE_MODES = ("orthographic-std", "perspective-mean-depth")
STRATEGIES = ("random", "nearest-neighbor")


@dataclass
class SubsetChoice:
    indices: np.ndarray
    strategy: str

    def __len__(self):
        return len(self.indices)


@dataclass
class SubsetLossConfig:
    """Which subsets to draw per batch and how to score them.

    Every size listed in ``sizes_random`` and ``sizes_nn`` contributes
    ``subsets_per_batch`` subsets; the batch loss is the mean over all of them.
    """

    sizes_random: list = field(default_factory=list)
    sizes_nn: list = field(default_factory=lambda: [32])
    subsets_per_batch: int = 10
    epsilon: float = 1e-8
    scale_mode: str = "orthographic-std"

    def validate(self, keypoints=None):
        if self.subsets_per_batch < 1:
            raise InvalidInputError("subsets_per_batch must be >= 1")
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")
        if self.scale_mode not in SCALE_MODES:
            raise InvalidInputError(f"scale_mode must be one of {SCALE_MODES}")
        sizes = list(self.sizes_random) + list(self.sizes_nn)
        if not sizes:
            raise InvalidInputError("at least one subset size is required")
        for k in sizes:
            if k < 3 or (keypoints is not None and k > keypoints):
                raise InvalidSubsetError(f"subset size {k} outside [3, {keypoints or 'K'}]")
        return self


@dataclass
class AlignmentState:
    """Detached quantities of one alignment; reusable to freeze the alignment."""

    mean_shape: np.ndarray
    rotations: np.ndarray
    flip: float
    scale: float
    degenerate: np.ndarray


# ---------------------------------------------------------------------------
# subset selection
# ---------------------------------------------------------------------------


def select_random(num_keypoints, k, rng):
    """Uniform k-subset without replacement (returned sorted)."""
    if k > num_keypoints or k < 1:
        raise InvalidInputError(f"cannot pick {k} of {num_keypoints} keypoints")
    idx = rng.choice(num_keypoints, size=k, replace=False)
    return SubsetChoice(np.sort(idx), "random")


def select_neighborhood(points, k, rng, seed_index=None):
    """A random keypoint plus its ``k - 1`` nearest neighbours.

    Each keypoint is described by its trajectory over the batch, i.e. the
    ``(K, 3B)`` reshaping of ``points`` (B, K, 3). Ties go to the lower index.
    """
    points = np.asarray(points, dtype=np.float64)
    nb, num_keypoints, _ = points.shape
    if k > num_keypoints or k < 1:
        raise InvalidInputError(f"cannot pick {k} of {num_keypoints} keypoints")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("non-finite predictions")
    traj = points.transpose(1, 0, 2).reshape(num_keypoints, 3 * nb)
    if seed_index is None:
        seed_index = int(rng.integers(num_keypoints))
    diff = traj - traj[seed_index]
    dist = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(dist, kind="stable")
    order = order[order != seed_index]
    idx = np.concatenate([[seed_index], order[: k - 1]]).astype(np.intp)
    return SubsetChoice(idx, "nearest-neighbor")


def draw_subsets(points, cfg, rng):
    """All subsets for one batch, random strategy first, in configuration order."""
    num_keypoints = points.shape[1]
    specs = []
    for k in cfg.sizes_random:
        specs.extend(select_random(num_keypoints, k, rng) for _ in range(cfg.subsets_per_batch))
    for k in cfg.sizes_nn:
        specs.extend(select_neighborhood(points, k, rng) for _ in range(cfg.subsets_per_batch))
    return specs


# ---------------------------------------------------------------------------
# alignment and loss
# ---------------------------------------------------------------------------


def compute_alignment(centered, scale_mode="orthographic-std", depth=None):
    """Mean shape, flip, rotations and scale for centered sub-shapes (B, k, 3).

    ``depth`` (the uncentered z values) is needed for the perspective scale.
    """
    nb, k, _ = centered.shape
    stacked = centered.transpose(0, 2, 1).reshape(3 * nb, k)
    u, sigma, v = linalg.svd(stacked)
    # stacking B copies of a shape multiplies its singular values by sqrt(B)
    mu = v[:, :3] * (sigma[:3] / np.sqrt(nb))
    pseudo_rot = u[:, :3].reshape(nb, 3, 3)
    flip = -1.0 if np.sum(kernels.det3_batch(pseudo_rot)) < 0.0 else 1.0
    mu = flip * mu
    rotations, degenerate = linalg.kabsch_batch(centered, mu)
    if scale_mode == "orthographic-std":
        scale = float(np.std(centered))
    else:
        scale = float(np.mean(depth)) if depth is not None else 0.0
    if not scale > 0.0 or not np.isfinite(scale):
        raise DegenerateScaleError(f"subset scale is {scale!r}")
    return AlignmentState(mu, rotations, flip, scale, degenerate)


def align_and_residual(c, scale_mode="orthographic-std", alignment=None):
    """Scaled rigid-alignment residual ``E`` of shape (B, 3k).

    Returns ``(E, alignment)``. Passing a previous ``alignment`` freezes the
    detached quantities at those values.
    """
    c = ad.as_tensor(c)
    if c.ndim != 3 or c.shape[-1] != 3:
        raise InvalidInputError(f"expected (B, k, 3), got {c.shape}")
    nb, k, _ = c.shape
    if nb < 2:
        raise InvalidBatchError("the subset loss needs a batch of at least 2 samples")
    if k < 3:
        raise InvalidSubsetError("the subset loss needs at least 3 keypoints")
    if not np.all(np.isfinite(c.value)):
        raise InvalidInputError("non-finite coordinates")
    centered = c - ad.mean(c, axis=1, keepdims=True)
    if alignment is None:
        alignment = compute_alignment(centered.value, scale_mode, depth=c.value[..., 2])
    residual = ad.matmul(centered, alignment.rotations) - alignment.mean_shape
    e = ad.reshape(residual * (1.0 / alignment.scale), (nb, 3 * k))
    return e, alignment


def log_singular_value_loss(e, epsilon=1e-8):
    """``sum_i 0.5 * log(sigma_i^2 + epsilon)`` over all singular values of ``e``."""
    sigma = ad.singular_values(e)
    return ad.sum(ad.log(sigma * sigma + epsilon)) * 0.5


def subset_loss(c, cfg=None, alignment=None):
    cfg = cfg or SubsetLossConfig()
    e, _ = align_and_residual(c, cfg.scale_mode, alignment=alignment)
    return log_singular_value_loss(e, cfg.epsilon)


def loss_floor(nb, k, epsilon=1e-8):
    """Value of :func:`subset_loss` for a perfectly rigid batch."""
    return 0.5 * min(nb, 3 * k) * np.log(epsilon)


def batch_subset_loss(x, cfg, rng=None, subsets=None):
    """Mean subset loss over the subsets drawn for this batch.

    ``x`` is the full (B, K, 3) reconstruction. Nearest-neighbour subsets are
    chosen from its detached values. Pass ``subsets`` to reuse a fixed draw.
    """
    x = ad.as_tensor(x)
    if subsets is None:
        if rng is None:
            raise InvalidInputError("need an rng or explicit subsets")
        subsets = draw_subsets(x.value, cfg, rng)
    total = None
    for choice in subsets:
        piece = subset_loss(ad.take(x, choice.indices, axis=1), cfg)
        total = piece if total is None else total + piece
    return total * (1.0 / len(subsets))
