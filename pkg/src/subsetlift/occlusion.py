"""Visibility/depth occlusion loss.

Depth convention: larger ``z`` is farther from the camera, for both camera
models. Visible points should therefore have smaller depth on average and
the centered cosine between visibility and depth should be negative. The
cosine is clamped from below at -0.05 so the loss stops pushing once a weak
negative correlation is reached.
"""
import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError

CLAMP = -0.05
NORM_FLOOR = 1e-12


def occlusion_terms(v, z, clamp=CLAMP):
    """Return ``(loss, unclamped_cosine)``.

    ``v`` is a binary array and ``z`` a tensor of the same number of
    entries (any shape; both are flattened). Degenerate inputs whose centered
    vectors have (near) zero norm give a constant zero loss and cosine 0.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    z = ad.as_tensor(z)
    if z.size != v.size:
        raise InvalidInputError(f"visibility has {v.size} entries, depth has {z.size}")
    if v.size < 2:
        raise InvalidInputError("need at least two points")
    vc = v - v.mean()
    v_norm = float(np.sqrt(vc @ vc))
    zc = ad.reshape(z, (v.size,))
    zc = zc - ad.mean(zc)
    z_norm_value = float(np.sqrt(zc.value @ zc.value))
    if v_norm < NORM_FLOOR or z_norm_value < NORM_FLOOR:
        return ad.Tensor(0.0), 0.0
    z_norm = ad.sqrt(ad.sum(zc * zc))
    cosine = ad.sum(zc * vc) / (z_norm * v_norm)
    unclamped = float(cosine.value)
    if unclamped > 1.0:
        # rounding can overshoot the maximum by an ulp
        cosine = -ad.clamp_min(-cosine, -1.0)
    return ad.clamp_min(cosine, clamp), unclamped


def occlusion_loss(v, z, clamp=CLAMP):
    return occlusion_terms(v, z, clamp)[0]
