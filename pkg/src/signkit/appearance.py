"""Color conversion and intensity normalization/distortion in L*a*b*.

All appearance statistics and distortions act on the lightness channel L of
CIE 1976 L*a*b* under a D65 white point; a and b are carried through
untouched.  Alpha is preserved so warped patches keep their transparency,
and statistics (means, percentiles) are computed only over opaque pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from signkit.errors import SignkitError
from signkit.geometry import ensure_rgba

# sRGB -> XYZ (linear light, D65, 2 degree observer)
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# White point defined as the matrix response to RGB=(1,1,1), computed with
# the same matmul as the conversion itself so that pure white maps to
# exactly L=100, a=b=0.
_WHITE = np.ones(3) @ _RGB_TO_XYZ.T

_DELTA = 6.0 / 29.0
# Pixels with alpha at or above this threshold participate in statistics.
OPAQUE_ALPHA = 0.5

CONTRAST_LOW_TARGET = 5.0
CONTRAST_HIGH_TARGET = 95.0
CONTRAST_SCALE_MAX = 3.0


@dataclass
class LabPatch:
    """Per-pixel (L, a, b) with L in [0, 100], a and b in [-128, 127].

    ``lab`` has shape (H, W, 3) float64; ``alpha`` has shape (H, W) in [0, 1].
    """

    lab: np.ndarray
    alpha: np.ndarray

    def opaque_mask(self) -> np.ndarray:
        return self.alpha >= OPAQUE_ALPHA

    def copy(self) -> "LabPatch":
        return LabPatch(lab=self.lab.copy(), alpha=self.alpha.copy())


def _srgb_linearize(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_delinearize(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3.0 * _DELTA**2) + 4.0 / 29.0)


def _lab_f_inv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t**3, 3.0 * _DELTA**2 * (t - 4.0 / 29.0))


def srgb_to_lab(patch: np.ndarray) -> LabPatch:
    """Convert an 8-bit sRGB(A) patch to L*a*b* (D65).

    Channel ranges are clamped to L in [0, 100] and a, b in [-128, 127];
    every in-gamut color is far from the a/b bounds so the clamp only guards
    float round-off at the extremes.
    """
    rgba = ensure_rgba(patch)
    rgb = rgba[:, :, :3] / 255.0
    linear = _srgb_linearize(rgb)
    xyz = linear @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE)
    lum = 116.0 * f[:, :, 1] - 16.0
    a = 500.0 * (f[:, :, 0] - f[:, :, 1])
    b = 200.0 * (f[:, :, 1] - f[:, :, 2])
    lab = np.dstack([
        np.clip(lum, 0.0, 100.0),
        np.clip(a, -128.0, 127.0),
        np.clip(b, -128.0, 127.0),
    ])
    return LabPatch(lab=lab, alpha=rgba[:, :, 3].copy())


def lab_to_srgb(patch: LabPatch) -> np.ndarray:
    """Convert a LabPatch back to an 8-bit RGBA array.

    Round trip with :func:`srgb_to_lab` is exact to within one 8-bit unit per
    channel for every sRGB color.
    """
    lab = patch.lab
    fy = (lab[:, :, 0] + 16.0) / 116.0
    fx = fy + lab[:, :, 1] / 500.0
    fz = fy - lab[:, :, 2] / 200.0
    xyz = np.dstack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)]) * _WHITE
    linear = xyz @ _XYZ_TO_RGB.T
    rgb = _srgb_delinearize(linear)
    out = np.dstack([
        np.clip(np.rint(rgb * 255.0), 0, 255),
        np.clip(np.rint(patch.alpha * 255.0), 0, 255),
    ])
    return out.astype(np.uint8)


def mean_intensity(patch: LabPatch) -> float:
    """Mean of the L channel over opaque pixels."""
    mask = patch.opaque_mask()
    if not mask.any():
        raise SignkitError("patch has no opaque pixels")
    return float(patch.lab[:, :, 0][mask].mean())


def normalize_contrast(patch: LabPatch) -> tuple[LabPatch, bool]:
    """Stretch L so the 1st/99th percentiles of opaque pixels sit at 5/95.

    Returns (normalized patch, degenerate flag).  The flag is set and the
    patch returned unchanged when the opaque L values have no spread to
    normalize (constant patches, or identical 1st/99th percentiles).
    Idempotent: applying it twice changes nothing beyond float round-off.
    """
    mask = patch.opaque_mask()
    if not mask.any():
        raise SignkitError("patch has no opaque pixels")
    lum = patch.lab[:, :, 0][mask]
    p_low, p_high = np.percentile(lum, [1.0, 99.0])
    if p_high - p_low < 1e-9:
        return patch.copy(), True
    gain = (CONTRAST_HIGH_TARGET - CONTRAST_LOW_TARGET) / (p_high - p_low)
    out = patch.copy()
    out.lab[:, :, 0] = np.clip(
        CONTRAST_LOW_TARGET + (patch.lab[:, :, 0] - p_low) * gain, 0.0, 100.0
    )
    return out, False


def apply_appearance_distortion(
    patch: LabPatch, target_mean: float, contrast_scale: float
) -> LabPatch:
    """Shift and scale L so its opaque-pixel mean lands on ``target_mean``.

    L' = clamp(target_mean + contrast_scale * (L - mean), 0, 100).  A scale
    of 1 is a pure brightness shift; 0 flattens the patch to the target.
    Scales outside [0, 3] are rejected.
    """
    if not (0.0 <= contrast_scale <= CONTRAST_SCALE_MAX):
        raise SignkitError(
            f"contrast_scale {contrast_scale} outside [0, {CONTRAST_SCALE_MAX}]"
        )
    mean = mean_intensity(patch)
    out = patch.copy()
    out.lab[:, :, 0] = np.clip(
        target_mean + contrast_scale * (patch.lab[:, :, 0] - mean), 0.0, 100.0
    )
    return out
