"""Plane homography estimation, perspective warping, rotation decomposition.

Conventions used throughout:

* Points are (x, y) in pixel units; integer coordinates are pixel centers,
  so an ``H x W`` patch covers the continuous region
  ``[-0.5, W - 0.5] x [-0.5, H - 0.5]``.
* A :class:`Homography` maps source coordinates to destination coordinates
  in homogeneous form; warping inverse-maps each output pixel center.
* Euler angles use the ZYX (yaw-pitch-roll) convention:
  ``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.

Rotation decomposition assumes a camera model because a bare plane
homography does not determine rotation angles on its own.  Camera intrinsics
are synthesized (focal = longer image side, principal point = image center)
when no calibration is available; only the shape of the resulting angle
distribution matters downstream, not metrically exact poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from signkit.errors import DegenerateGeometryError, GeometryUnavailableError

# Second-smallest/largest singular value ratio below which the DLT system is
# considered degenerate (collinear or repeated points).
SINGULAR_RATIO_MIN = 1e-8
# Maximum Frobenius distance between the recovered column frame and its
# nearest rotation before decomposition is refused.
ROTATION_FROBENIUS_TOL = 0.2


@dataclass(frozen=True)
class EulerAngles:
    """Rotation about the X, Y and Z axes, radians, each in (-pi, pi]."""

    rx: float
    ry: float
    rz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz], dtype=np.float64)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: focal length (px) and principal point (cx, cy)."""

    focal: float
    principal_point: tuple[float, float]

    def __post_init__(self):
        if self.focal <= 0:
            raise DegenerateGeometryError(f"focal must be positive, got {self.focal}")

    @classmethod
    def default_for(cls, width: float, height: float) -> "Intrinsics":
        """Standard monocular assumption: focal = longer side, pp = center."""
        return cls(focal=float(max(width, height)), principal_point=((width - 1) / 2.0, (height - 1) / 2.0))

    def matrix(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array(
            [[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def inverse_matrix(self) -> np.ndarray:
        cx, cy = self.principal_point
        f = self.focal
        return np.array(
            [[1.0 / f, 0.0, -cx / f], [0.0, 1.0 / f, -cy / f], [0.0, 0.0, 1.0]], dtype=np.float64
        )


@dataclass(eq=False)
class Homography:
    """3x3 projective transform, stored Frobenius-normalized with H[2,2] >= 0."""

    matrix: np.ndarray
    rms: float | None = field(default=None, compare=False)  # reprojection RMS, set by estimation

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise DegenerateGeometryError(f"homography must be 3x3, got {m.shape}")
        norm = np.linalg.norm(m)
        if not np.isfinite(norm) or norm < 1e-30:
            raise DegenerateGeometryError("homography matrix is zero or non-finite")
        m = m / norm
        if m[2, 2] < 0:
            m = -m
        self.matrix = m

    def condition(self) -> float:
        s = np.linalg.svd(self.matrix, compute_uv=False)
        return float(s[-1] / s[0])

    def require_invertible(self, ratio: float = SINGULAR_RATIO_MIN) -> None:
        if self.condition() < ratio:
            raise DegenerateGeometryError("homography is singular or near-singular")

    def inverse(self) -> "Homography":
        self.require_invertible()
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """self after other: (self.compose(other))(x) == self(other(x))."""
        return Homography(self.matrix @ other.matrix)


def transform_points(h: Homography | np.ndarray, points: Sequence[tuple[float, float]]) -> np.ndarray:
    """Apply a homography to an (n, 2) point array."""
    m = h.matrix if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    homog = np.hstack([pts, np.ones((len(pts), 1))])
    mapped = homog @ m.T
    w = mapped[:, 2:3]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateGeometryError("point mapped to infinity")
    return mapped[:, :2] / w


def _hartley_normalization(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity transform moving the centroid to the origin with mean
    distance sqrt(2); returns (normalized points, transform)."""
    centroid = pts.mean(axis=0)
    dists = np.linalg.norm(pts - centroid, axis=1)
    mean_dist = dists.mean()
    scale = math.sqrt(2.0) / mean_dist if mean_dist > 1e-12 else 1.0
    t = np.array(
        [[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]]
    )
    normalized = (pts - centroid) * scale
    return normalized, t


def estimate_homography(
    src: Sequence[tuple[float, float]], dst: Sequence[tuple[float, float]]
) -> Homography:
    """Estimate the homography mapping ``src`` points onto ``dst`` points.

    Normalized DLT: both point sets are Hartley-normalized, each
    correspondence contributes two rows to a 2n x 9 system, and the solution
    is the smallest singular vector.  Degenerate configurations (fewer than
    4 points, 3 collinear points, repeated points) are rejected via the
    ratio of the two smallest singular values.

    The returned homography carries the reprojection RMS over the inputs in
    its ``rms`` field.
    """
    src_pts = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst_pts = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src_pts) != len(dst_pts):
        raise DegenerateGeometryError(
            f"point counts differ: {len(src_pts)} vs {len(dst_pts)}"
        )
    if len(src_pts) < 4:
        raise DegenerateGeometryError(f"need at least 4 correspondences, got {len(src_pts)}")

    src_n, t_src = _hartley_normalization(src_pts)
    dst_n, t_dst = _hartley_normalization(dst_pts)

    rows = []
    for (x, y), (u, v) in zip(src_n, dst_n):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    a = np.asarray(rows)

    _, s, vt = np.linalg.svd(a)
    if s[-2] / s[0] < SINGULAR_RATIO_MIN:
        raise DegenerateGeometryError(
            "degenerate point configuration (collinear or repeated points)"
        )
    h_normalized = vt[-1].reshape(3, 3)
    matrix = np.linalg.inv(t_dst) @ h_normalized @ t_src

    h = Homography(matrix)
    h.require_invertible()
    projected = transform_points(h, src_pts)
    h.rms = float(np.sqrt(np.mean(np.sum((projected - dst_pts) ** 2, axis=1))))
    return h


# ---------------------------------------------------------------------------
# warping


def ensure_rgba(patch: np.ndarray) -> np.ndarray:
    """Promote an (H, W), (H, W, 3) or (H, W, 4) array to float64 RGBA with
    alpha in [0, 1]."""
    arr = np.asarray(patch)
    was_uint8 = arr.dtype == np.uint8
    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    if arr.shape[2] == 3:
        alpha = np.ones(arr.shape[:2], dtype=np.float64)
        arr = np.dstack([arr, alpha])
    elif arr.shape[2] == 4:
        alpha = arr[:, :, 3]
        if was_uint8:
            alpha = alpha / 255.0
        arr = np.dstack([arr[:, :, :3], alpha])
    else:
        raise ValueError(f"expected 1, 3 or 4 channels, got {arr.shape[2]}")
    return arr


def warp_perspective(
    patch: np.ndarray, h: Homography, out_size: tuple[int, int]
) -> np.ndarray:
    """Warp an image patch by ``h`` into an (out_h, out_w, 4) RGBA canvas.

    Each output pixel center is inverse-mapped into the source and sampled
    bilinearly.  Samples falling outside the source are fully transparent,
    and interpolation is carried out on alpha-premultiplied values so edge
    pixels do not bleed the spare color of transparent texels.

    ``out_size`` is (width, height).  uint8 input yields uint8 output.
    """
    h.require_invertible()
    out_w, out_h = int(out_size[0]), int(out_size[1])
    if out_w <= 0 or out_h <= 0:
        raise ValueError(f"output size must be positive, got {out_size}")

    was_uint8 = np.asarray(patch).dtype == np.uint8
    src = ensure_rgba(patch)
    src_h, src_w = src.shape[:2]

    # premultiply so bilinear weights never mix in colors hidden under alpha=0
    pre = src.copy()
    pre[:, :, :3] *= pre[:, :, 3:4]

    hinv = np.linalg.inv(h.matrix)
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    ones = np.ones_like(xs)
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2] * ones
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / denom
        sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / denom
    bad = ~np.isfinite(sx) | ~np.isfinite(sy)
    sx = np.where(bad, -10.0, sx)
    sy = np.where(bad, -10.0, sy)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    out = np.zeros((out_h, out_w, 4), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (xi >= 0) & (xi < src_w) & (yi >= 0) & (yi < src_h)
            xi_c = np.clip(xi, 0, src_w - 1)
            yi_c = np.clip(yi, 0, src_h - 1)
            texel = pre[yi_c, xi_c]
            out += np.where(inside[:, :, None], texel * weight[:, :, None], 0.0)

    alpha = out[:, :, 3]
    rgb = np.zeros_like(out[:, :, :3])
    nz = alpha > 1e-9
    rgb[nz] = out[:, :, :3][nz] / alpha[nz, None]
    result = np.dstack([rgb, alpha])
    if was_uint8:
        result[:, :, :3] = np.clip(np.rint(result[:, :, :3]), 0, 255)
        result[:, :, 3] = np.rint(result[:, :, 3] * 255.0)
        return result.astype(np.uint8)
    return result


def rectify_instance(
    image: np.ndarray,
    polygon: Sequence[tuple[float, float]],
    category,
) -> tuple[np.ndarray, Homography]:
    """Warp one annotated instance onto its category's canonical template.

    ``polygon`` must be in point correspondence with the template points.
    Returns the rectified RGBA patch at the template's canonical size and
    the estimated image-to-template homography.  Categories without a
    geometric template cannot be rectified; callers should fall back to the
    raw patch and skip geometric distortion for them.
    """
    if category.template is None or not category.has_geometry:
        raise GeometryUnavailableError(
            f"category {category.id} ({category.name}) has no geometric template; "
            "skip geometry for this instance"
        )
    template = category.template
    if len(polygon) != len(template.points):
        raise DegenerateGeometryError(
            f"polygon has {len(polygon)} points but template has {len(template.points)}"
        )
    h = estimate_homography(polygon, template.points)
    out_w, out_h = int(round(template.size[0])), int(round(template.size[1]))
    patch = warp_perspective(image, h, (out_w, out_h))
    return patch, h


# ---------------------------------------------------------------------------
# rotation composition / decomposition


def rotation_matrix(angles: EulerAngles) -> np.ndarray:
    """ZYX rotation matrix Rz(rz) @ Ry(ry) @ Rx(rx)."""
    cx, sx = math.cos(angles.rx), math.sin(angles.rx)
    cy, sy = math.cos(angles.ry), math.sin(angles.ry)
    cz, sz = math.cos(angles.rz), math.sin(angles.rz)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rz @ ry @ rx


def euler_from_rotation(r: np.ndarray) -> EulerAngles:
    """Extract ZYX Euler angles from a rotation matrix."""
    sy = -r[2, 0]
    sy = min(1.0, max(-1.0, float(sy)))
    ry = math.asin(sy)
    if abs(sy) > 1.0 - 1e-12:
        # gimbal lock: rz and rx are coupled; conventionally put it all in rx
        rz = 0.0
        rx = math.atan2(-r[0, 1], r[1, 1])
    else:
        rx = math.atan2(r[2, 1], r[2, 2])
        rz = math.atan2(r[1, 0], r[0, 0])
    return EulerAngles(rx=rx, ry=ry, rz=rz)


def compose_rotation_homography(angles: EulerAngles, k: Intrinsics) -> Homography:
    """Homography induced by rotating the camera by ``angles``: K R K^-1."""
    km = k.matrix()
    return Homography(km @ rotation_matrix(angles) @ k.inverse_matrix())


def _nearest_rotation(frame: np.ndarray) -> tuple[np.ndarray, float]:
    u, _, vt = np.linalg.svd(frame)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        rot = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return rot, float(np.linalg.norm(frame - rot))


def decompose_rotation(h: Homography, k: Intrinsics) -> EulerAngles:
    """Recover Euler rotation angles from a plane homography.

    Treats the first two columns of ``K^-1 H`` as scaled rotation columns
    (plane-pose reading): r1 and r2 are normalized by the length of the
    first column, r3 = r1 x r2, and the resulting frame is projected to the
    nearest rotation matrix via SVD.  A homography determines the frame only
    up to sign, so of the two candidate rotations the one closer to the
    identity (larger trace) is kept.  If the chosen frame is further than
    ``ROTATION_FROBENIUS_TOL`` from any rotation, the homography does not
    plausibly describe a rotated plane and an error is raised.
    """
    h.require_invertible()
    candidates = []
    for sign in (1.0, -1.0):
        m = sign * (k.inverse_matrix() @ h.matrix)
        n1 = np.linalg.norm(m[:, 0])
        if n1 < 1e-12:
            raise DegenerateGeometryError("homography collapses the plane x-axis")
        r1 = m[:, 0] / n1
        r2 = m[:, 1] / n1
        frame = np.column_stack([r1, r2, np.cross(r1, r2)])
        rot, dist = _nearest_rotation(frame)
        candidates.append((np.trace(rot), rot, dist))

    _, rot, dist = max(candidates, key=lambda c: c[0])
    if dist > ROTATION_FROBENIUS_TOL:
        raise DegenerateGeometryError(
            "homography is too far from a pure rotated-plane mapping to decompose"
        )
    return euler_from_rotation(rot)
