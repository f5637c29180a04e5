"""Per-instance normalization and the statistics that feed distortion fitting.

For every training instance this module can produce:

* a segmented patch (bbox crop with the polygon interior as alpha),
* its appearance statistics (mean L before any normalization),
* for geometry-capable categories, the rectified patch, the Euler angles of
  the observed plane pose, and the instance size measured in the rectified
  frame.

The rectified size is area-preserving: the template extent scaled by
sqrt(polygon area / template area), i.e. the size the instance would have
after removing perspective but keeping its pixel footprint.  Scale is then
summarized as the geometric mean of rectified width and height.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from signkit.appearance import LabPatch, lab_to_srgb, mean_intensity, normalize_contrast, srgb_to_lab
from signkit.dataset import Category, Dataset, Instance, polygon_signed_area
from signkit.errors import DegenerateGeometryError, GeometryUnavailableError, SignkitError
from signkit.geometry import (
    EulerAngles,
    Intrinsics,
    decompose_rotation,
    estimate_homography,
    rectify_instance,
)
from signkit.images import rasterize_polygon

logger = logging.getLogger(__name__)


def extract_instance_patch(
    image_rgba: np.ndarray, instance: Instance
) -> tuple[np.ndarray, list[tuple[float, float]]]:
    """Crop the instance bbox and mask everything outside its polygon.

    Returns the RGBA patch plus the polygon expressed in patch coordinates.
    """
    x, y, w, h = instance.bbox
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1 = int(math.ceil(x + w))
    y1 = int(math.ceil(y + h))
    x1 = max(x1, x0 + 1)
    y1 = max(y1, y0 + 1)
    patch = image_rgba[y0:y1, x0:x1].copy()
    if patch.size == 0:
        raise SignkitError(f"instance {instance.id}: bbox {instance.bbox} is empty")
    local_polygon = [(px - x0, py - y0) for px, py in instance.polygon]
    mask = rasterize_polygon((patch.shape[1], patch.shape[0]), local_polygon)
    patch[:, :, 3] = np.where(mask > 0, patch[:, :, 3], 0)
    return patch, local_polygon


def rectified_size(instance: Instance, category: Category) -> float:
    """Geometric mean of rectified width and height, pixels."""
    if category.template is None:
        raise GeometryUnavailableError(f"category {category.id} has no template")
    poly_area = abs(polygon_signed_area(instance.polygon))
    tmpl_area = abs(polygon_signed_area(category.template.points))
    if tmpl_area < 1e-9 or poly_area < 1e-9:
        raise DegenerateGeometryError("degenerate polygon or template area")
    scale = math.sqrt(poly_area / tmpl_area)
    tw, th = category.template.size
    return math.sqrt(tw * th) * scale


@dataclass
class InstanceStats:
    instance_id: int
    category_id: int
    mean_l: float
    angles: EulerAngles | None = None
    rectified_size: float | None = None


def instance_stats(
    image_rgba: np.ndarray, instance: Instance, category: Category
) -> InstanceStats:
    """Appearance and (when available) geometry statistics for one instance.

    Angles come from decomposing the template-to-image homography with
    intrinsics synthesized from the full image the instance was observed in.
    """
    patch, _ = extract_instance_patch(image_rgba, instance)
    mean_l = mean_intensity(srgb_to_lab(patch))
    stats = InstanceStats(
        instance_id=instance.id, category_id=instance.category_id, mean_l=mean_l
    )
    if category.has_geometry and category.template is not None:
        img_h, img_w = image_rgba.shape[:2]
        try:
            h = estimate_homography(instance.polygon, category.template.points)
            k = Intrinsics.default_for(img_w, img_h)
            stats.angles = decompose_rotation(h.inverse(), k)
            stats.rectified_size = rectified_size(instance, category)
        except DegenerateGeometryError as exc:
            logger.warning(
                "instance %d: geometry unusable (%s); appearance stats only",
                instance.id,
                exc,
            )
    return stats


@dataclass
class SourcePatch:
    """A normalized instance ready to be distorted into synthetic samples."""

    instance_id: int
    category_id: int
    patch: np.ndarray  # uint8 RGBA, contrast-normalized, rectified when possible
    polygon: list[tuple[float, float]]  # patch coordinates
    has_geometry: bool


def prepare_source_patch(
    image_rgba: np.ndarray, instance: Instance, category: Category
) -> SourcePatch:
    """Segment, geometry-normalize and contrast-normalize one instance.

    Geometry-capable instances are rectified onto their template; others
    keep their raw patch (and will receive no geometric distortion).  The
    lightness channel is percentile-stretched in Lab either way.
    """
    if category.has_geometry and category.template is not None:
        patch, _ = rectify_instance(image_rgba, instance.polygon, category)
        polygon = list(category.template.points)
        has_geometry = True
    else:
        patch, polygon = extract_instance_patch(image_rgba, instance)
        has_geometry = False

    lab = srgb_to_lab(patch)
    normalized, degenerate = normalize_contrast(lab)
    if degenerate:
        logger.debug("instance %d: flat lightness, contrast left unchanged", instance.id)
    patch = lab_to_srgb(normalized)
    return SourcePatch(
        instance_id=instance.id,
        category_id=instance.category_id,
        patch=patch,
        polygon=polygon,
        has_geometry=has_geometry,
    )


@dataclass
class DistortionStats:
    """Pooled per-instance statistics feeding the distortion model fit."""

    angles: np.ndarray | None  # (n, 3) Euler triples
    brightness_by_category: dict[int, list[float]]
    rectified_sizes: list[float]
    skipped: int = 0


def collect_distortion_stats(ds: Dataset, image_loader) -> DistortionStats:
    """Run :func:`instance_stats` over every non-difficult instance.

    ``image_loader(image_record)`` must return the RGBA array for an image;
    images are loaded once each.  Instances whose geometry cannot be
    estimated (degenerate polygons) contribute appearance statistics only
    and are counted in ``skipped``.
    """
    angles: list[list[float]] = []
    brightness: dict[int, list[float]] = {}
    sizes: list[float] = []
    skipped = 0
    by_image: dict[int, list[Instance]] = {}
    for inst in ds.instances:
        if not inst.difficult:
            by_image.setdefault(inst.image_id, []).append(inst)

    for image_id in sorted(by_image):
        image_rgba = image_loader(ds.image(image_id))
        for inst in sorted(by_image[image_id], key=lambda a: a.id):
            category = ds.category(inst.category_id)
            try:
                stats = instance_stats(image_rgba, inst, category)
            except SignkitError as exc:
                logger.warning("instance %d skipped: %s", inst.id, exc)
                skipped += 1
                continue
            brightness.setdefault(inst.category_id, []).append(stats.mean_l)
            if stats.angles is not None:
                angles.append([stats.angles.rx, stats.angles.ry, stats.angles.rz])
                sizes.append(stats.rectified_size)
            elif category.has_geometry and category.template is not None:
                skipped += 1

    return DistortionStats(
        angles=np.asarray(angles) if angles else None,
        brightness_by_category=brightness,
        rectified_sizes=sizes,
        skipped=skipped,
    )
