"""Synthetic training-image generation.

Normalized source instances are distorted with draws from a fitted
:class:`~signkit.distortion.DistortionModel`, then pasted in groups of two
to five onto sign-free background images.  Placement is rejection-sampled:
patches may not overlap each other, leave the image, or enter the exclusion
region at the bottom center of the frame (where normally only road surface
is visible and a floating sign would look absurd).  Generation continues
until every category holds at least ``target_min`` instances.

Everything is deterministic for a fixed seed: distortion draws come from a
master generator, and each composite's placement generator is derived from
(seed, background index, composite index), so per-background work could be
parallelized without changing the output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from signkit.appearance import apply_appearance_distortion, lab_to_srgb, srgb_to_lab
from signkit.dataset import Box, Dataset, ImageRecord, Instance, polygon_bbox
from signkit.distortion import DistortionModel, DistortionSample, sample_distortion
from signkit.errors import PlacementError, RejectedSampleError, SignkitError
from signkit.geometry import (
    Homography,
    Intrinsics,
    compose_rotation_homography,
    transform_points,
    warp_perspective,
)
from signkit.images import load_rgba, save_png
from signkit.normalize import SourcePatch, prepare_source_patch

logger = logging.getLogger(__name__)

MIN_PATCH_SCALE = 15.0
MIN_PLACEMENTS = 2
MAX_PLACEMENTS = 5
MAX_PLACEMENT_ATTEMPTS = 1000
DEFAULT_TARGET_MIN = 200


def _rect_intersection(a: Box, b: Box) -> float:
    iw = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    return iw * ih


def exclusion_region(width: int, height: int) -> Box:
    """Bottom-central exclusion rectangle: middle third x bottom third."""
    return (width / 3.0, 2.0 * height / 3.0, width / 3.0, height / 3.0)


@dataclass
class SynthPatch:
    """A distorted instance patch ready for placement."""

    patch: np.ndarray  # uint8 RGBA
    polygon: list[tuple[float, float]]  # patch coordinates
    category_id: int
    source_instance_id: int

    @property
    def footprint(self) -> tuple[int, int]:
        return self.patch.shape[1], self.patch.shape[0]  # (w, h)

    @property
    def content_bbox(self) -> Box:
        return polygon_bbox(self.polygon)


@dataclass
class Placement:
    patch: SynthPatch
    position: tuple[int, int]  # integer top-left pixel in the background

    @property
    def pixel_rect(self) -> Box:
        w, h = self.patch.footprint
        return (float(self.position[0]), float(self.position[1]), float(w), float(h))

    @property
    def bbox(self) -> Box:
        """Final annotation bbox: placed polygon hull in image coordinates."""
        cx, cy, cw, ch = self.patch.content_bbox
        return (self.position[0] + cx, self.position[1] + cy, cw, ch)

    @property
    def polygon(self) -> list[tuple[float, float]]:
        dx, dy = self.position
        return [(x + dx, y + dy) for x, y in self.patch.polygon]


@dataclass
class CompositeSpec:
    """Layout of one synthetic image."""

    background_id: int
    width: int
    height: int
    placements: list[Placement]
    exclusion: Box

    def validate(self) -> None:
        if not (MIN_PLACEMENTS <= len(self.placements) <= MAX_PLACEMENTS):
            raise PlacementError(
                f"composite must hold {MIN_PLACEMENTS}..{MAX_PLACEMENTS} signs, "
                f"has {len(self.placements)}"
            )
        rects = [p.pixel_rect for p in self.placements]
        for i, rect in enumerate(rects):
            if rect[0] < 0 or rect[1] < 0 or rect[0] + rect[2] > self.width or rect[1] + rect[3] > self.height:
                raise PlacementError(f"placement {i} leaves the image bounds")
            if _rect_intersection(rect, self.exclusion) > 0:
                raise PlacementError(f"placement {i} enters the exclusion region")
            for j in range(i):
                if _rect_intersection(rect, rects[j]) > 0:
                    raise PlacementError(f"placements {j} and {i} overlap")


# ---------------------------------------------------------------------------
# per-instance synthesis


def synthesize_instance(
    source: SourcePatch,
    sample: DistortionSample,
    min_scale: float = MIN_PATCH_SCALE,
    camera_focal: float | None = None,
) -> SynthPatch:
    """Apply one distortion draw to a normalized instance.

    Geometry-capable sources are warped by the rotation homography composed
    from the sampled Euler angles, then rescaled so the longer side of the
    mapped polygon equals the sampled scale.  Sources without geometry are
    only rescaled: their sampled angles are deliberately ignored.
    Brightness/contrast distortion is applied in Lab afterwards.  Draws
    smaller than ``min_scale`` px are rejected; the caller should resample.

    By default the rotation intrinsics treat the patch itself as the whole
    camera frame (focal = longer patch side).  Passing ``camera_focal`` (the
    focal of the image the patch will be pasted into, in final pixels)
    scales the perspective strength to what that camera would observe for a
    sign of the sampled size, keeping synthetic keystone consistent with
    how distortions are measured on real images.
    """
    if sample.scale < min_scale:
        raise RejectedSampleError(
            f"sampled scale {sample.scale:.1f} px below minimum {min_scale} px"
        )
    h, w = source.patch.shape[:2]
    if source.has_geometry:
        if camera_focal is not None:
            hull0 = polygon_bbox(source.polygon)
            side = max(hull0[2], hull0[3])
            focal = max(side * camera_focal / sample.scale, 1.0)
            k = Intrinsics(focal=focal, principal_point=((w - 1) / 2.0, (h - 1) / 2.0))
        else:
            k = Intrinsics.default_for(w, h)
        h_rot = compose_rotation_homography(sample.angles, k)
    else:
        h_rot = Homography(np.eye(3))

    mapped = transform_points(h_rot, source.polygon)
    hull = polygon_bbox([tuple(p) for p in mapped])
    if hull[2] < 1e-6 or hull[3] < 1e-6:
        raise RejectedSampleError("distorted polygon collapsed")
    scale = sample.scale / max(hull[2], hull[3])

    # one combined warp: rotate, scale, then shift the polygon hull to the origin
    s_mat = np.diag([scale, scale, 1.0])
    shift = np.array(
        [[1.0, 0.0, -hull[0] * scale], [0.0, 1.0, -hull[1] * scale], [0.0, 0.0, 1.0]]
    )
    h_total = Homography(shift @ s_mat @ h_rot.matrix)

    out_polygon = [tuple(p) for p in transform_points(h_total, source.polygon)]
    out_hull = polygon_bbox(out_polygon)
    out_w = int(math.ceil(out_hull[0] + out_hull[2] + 0.5))
    out_h = int(math.ceil(out_hull[1] + out_hull[3] + 0.5))
    warped = warp_perspective(source.patch, h_total, (max(out_w, 1), max(out_h, 1)))

    lab = srgb_to_lab(warped)
    distorted = apply_appearance_distortion(lab, sample.brightness_mean, sample.contrast_scale)
    rgba = lab_to_srgb(distorted)
    return SynthPatch(
        patch=rgba,
        polygon=out_polygon,
        category_id=source.category_id,
        source_instance_id=source.instance_id,
    )


# ---------------------------------------------------------------------------
# placement and compositing


def place_instances(
    background: ImageRecord,
    patches: Sequence[SynthPatch],
    rng: np.random.Generator,
    max_attempts: int = MAX_PLACEMENT_ATTEMPTS,
) -> tuple[CompositeSpec, list[SynthPatch]]:
    """Rejection-sample non-overlapping positions for 2..5 patches.

    Patches that find no valid position within ``max_attempts`` tries are
    returned as deferred, to be tried on another background.  Raises when a
    patch cannot fit the background at all, or when fewer than two patches
    could be placed.
    """
    if not (MIN_PLACEMENTS <= len(patches) <= MAX_PLACEMENTS):
        raise PlacementError(
            f"need between {MIN_PLACEMENTS} and {MAX_PLACEMENTS} patches, got {len(patches)}"
        )
    w, h = background.width, background.height
    exclusion = exclusion_region(w, h)
    for patch in patches:
        pw, ph = patch.footprint
        if pw > w or ph > h:
            raise PlacementError(
                f"patch {pw}x{ph} larger than background {w}x{h}"
            )

    placements: list[Placement] = []
    deferred: list[SynthPatch] = []
    for patch in patches:
        pw, ph = patch.footprint
        placed = None
        for _ in range(max_attempts):
            x = int(rng.integers(0, w - pw + 1))
            y = int(rng.integers(0, h - ph + 1))
            rect = (float(x), float(y), float(pw), float(ph))
            if _rect_intersection(rect, exclusion) > 0:
                continue
            if any(_rect_intersection(rect, p.pixel_rect) > 0 for p in placements):
                continue
            placed = Placement(patch=patch, position=(x, y))
            break
        if placed is None:
            deferred.append(patch)
        else:
            placements.append(placed)

    if len(placements) < MIN_PLACEMENTS:
        raise PlacementError(
            f"only {len(placements)} of {len(patches)} patches could be placed"
        )
    spec = CompositeSpec(
        background_id=background.id, width=w, height=h, placements=placements, exclusion=exclusion
    )
    spec.validate()
    return spec, deferred


def _feather_alpha(alpha: np.ndarray) -> np.ndarray:
    """Soften the mask edge over one pixel without growing it: every alpha
    value is capped by its 3x3 neighborhood mean."""
    padded = np.pad(alpha, 1, mode="constant")
    window = sum(
        padded[1 + dy : 1 + dy + alpha.shape[0], 1 + dx : 1 + dx + alpha.shape[1]]
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
    ) / 9.0
    return np.minimum(alpha, window)


def composite(background_rgba: np.ndarray, spec: CompositeSpec) -> np.ndarray:
    """Alpha-blend the placed patches over the background.

    Mask edges are feathered over one pixel; fully opaque interiors copy
    patch pixels exactly.
    """
    spec.validate()
    out = background_rgba.astype(np.float64).copy()
    for placement in spec.placements:
        x, y = placement.position
        patch = placement.patch.patch.astype(np.float64)
        ph, pw = patch.shape[:2]
        alpha = _feather_alpha(patch[:, :, 3] / 255.0)[:, :, None]
        region = out[y : y + ph, x : x + pw, :3]
        out[y : y + ph, x : x + pw, :3] = patch[:, :, :3] * alpha + region * (1.0 - alpha)
    out[:, :, 3] = 255.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# corpus-level augmentation


@dataclass
class AugmentResult:
    delta: Dataset  # new images and instances, categories carried over
    composites: list[CompositeSpec]
    per_category_generated: dict[int, int]


def _chunk_sizes(total: int, rng: np.random.Generator) -> list[int]:
    """Group sizes in [2, 5] covering ``total`` patches with no remainder of 1."""
    sizes = []
    remaining = total
    while remaining > 0:
        take = int(min(remaining, rng.integers(MIN_PLACEMENTS, MAX_PLACEMENTS + 1)))
        if remaining - take == 1:
            take = take + 1 if take < MAX_PLACEMENTS else take - 1
        sizes.append(take)
        remaining -= take
    return sizes


def augment_dataset(
    train: Dataset,
    backgrounds: Sequence[Path],
    model: DistortionModel,
    target_min: int = DEFAULT_TARGET_MIN,
    seed: int = 0,
    image_root: Path | None = None,
    out_dir: Path | None = None,
    max_scale: float | None = None,
    image_loader: Callable[[ImageRecord], np.ndarray] | None = None,
) -> AugmentResult:
    """Generate synthetic instances until every category reaches ``target_min``.

    Source pixels come from the non-difficult training instances of each
    deficient category; ``image_root`` resolves relative image uris (unless
    a custom ``image_loader`` is given).  Synthetic images are written as
    PNGs under ``out_dir``/images when ``out_dir`` is set, and the returned
    delta dataset references them with relative uris.  Deterministic for a
    fixed seed: identical inputs produce identical annotations.
    """
    if not backgrounds:
        raise SignkitError("no background images supplied")
    if image_loader is None:
        root = Path(image_root) if image_root is not None else Path(".")

        def image_loader(record: ImageRecord) -> np.ndarray:
            return load_rgba(root / record.uri)

    bg_paths = [Path(p) for p in backgrounds]
    bg_arrays = [load_rgba(p) for p in bg_paths]
    next_image_id = max((im.id for im in train.images), default=0) + 1
    next_instance_id = max((a.id for a in train.instances), default=0) + 1
    bg_records = [
        ImageRecord(
            id=next_image_id + i,
            width=arr.shape[1],
            height=arr.shape[0],
            uri=str(p),
        )
        for i, (p, arr) in enumerate(zip(bg_paths, bg_arrays))
    ]
    next_image_id += len(bg_records)
    if max_scale is None:
        max_scale = min(min(arr.shape[0], arr.shape[1]) for arr in bg_arrays) / 3.0
    # perspective strength anchored to the background camera frame
    camera_focal = float(max(bg_arrays[0].shape[0], bg_arrays[0].shape[1]))

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5167]))

    counts = {c.id: 0 for c in train.categories}
    for inst in train.instances:
        counts[inst.category_id] += 1
    deficits = {c: target_min - n for c, n in counts.items() if n < target_min}

    sources: dict[int, list[Instance]] = {}
    for cat_id in sorted(deficits):
        pool = sorted(
            (a for a in train.instances if a.category_id == cat_id and not a.difficult),
            key=lambda a: a.id,
        )
        if not pool:
            raise SignkitError(
                f"category {cat_id} needs {deficits[cat_id]} synthetic instances "
                "but has no usable source instances"
            )
        sources[cat_id] = pool

    # generate all distorted patches up front, in deterministic order
    image_cache: dict[int, np.ndarray] = {}
    patch_cache: dict[int, SourcePatch] = {}

    def source_patch(inst: Instance) -> SourcePatch:
        if inst.id not in patch_cache:
            if inst.image_id not in image_cache:
                image_cache[inst.image_id] = image_loader(train.image(inst.image_id))
            patch_cache[inst.id] = prepare_source_patch(
                image_cache[inst.image_id], inst, train.category(inst.category_id)
            )
        return patch_cache[inst.id]

    def make_patch(cat_id: int) -> SynthPatch:
        pool = sources[cat_id]
        inst = pool[int(rng.integers(len(pool)))]
        src = source_patch(inst)
        for _ in range(1000):
            sample = sample_distortion(model, cat_id, rng)
            if not (MIN_PATCH_SCALE <= sample.scale <= max_scale):
                continue
            try:
                return synthesize_instance(src, sample, camera_focal=camera_focal)
            except RejectedSampleError:
                continue
        raise RejectedSampleError(
            f"category {cat_id}: no usable distortion draw in 1000 attempts "
            f"(scale bounds {MIN_PATCH_SCALE}..{max_scale:.0f} px)"
        )

    pending: list[SynthPatch] = []
    if sum(deficits.values()) == 1:
        # a lone patch cannot form a two-sign composite; synthesize a spare
        only = next(iter(deficits))
        deficits[only] += 1

    for cat_id in sorted(deficits):
        for _ in range(deficits[cat_id]):
            pending.append(make_patch(cat_id))

    new_images: list[ImageRecord] = []
    new_instances: list[Instance] = []
    composites: list[CompositeSpec] = []
    composite_index = 0
    rounds = 0
    max_rounds = 50
    while pending:
        rounds += 1
        if rounds > max_rounds:
            raise PlacementError(f"placement did not converge after {max_rounds} rounds")
        if len(pending) == 1:
            # an orphaned deferral cannot form a two-sign composite on its own
            pending.append(make_patch(pending[0].category_id))
        chunks = _chunk_sizes(len(pending), rng)
        queue = pending
        pending = []
        cursor = 0
        for size in chunks:
            group = queue[cursor : cursor + size]
            cursor += size
            spec = None
            for _ in range(20):
                bgi = int(rng.integers(len(bg_records)))
                place_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, bgi, composite_index])
                )
                try:
                    spec, deferred = place_instances(bg_records[bgi], group, place_rng)
                    break
                except PlacementError:
                    continue
            if spec is None:
                raise PlacementError(
                    f"could not place a group of {len(group)} patches on any background"
                )
            pending.extend(deferred)
            image = composite(bg_arrays[bgi], spec)
            record = ImageRecord(
                id=next_image_id,
                width=spec.width,
                height=spec.height,
                uri=f"images/synth_{next_image_id:06d}.png",
            )
            next_image_id += 1
            composite_index += 1
            if out_dir is not None:
                save_png(image, Path(out_dir) / record.uri)
            new_images.append(record)
            for placement in spec.placements:
                new_instances.append(
                    Instance.from_polygon(
                        id=next_instance_id,
                        image_id=record.id,
                        category_id=placement.patch.category_id,
                        polygon=placement.polygon,
                        image_size=(record.width, record.height),
                    )
                )
                next_instance_id += 1
            composites.append(spec)

    delta = Dataset(
        images=new_images,
        categories=list(train.categories),
        instances=new_instances,
    )
    delta.validate()
    actually_generated: dict[int, int] = {}
    for inst in new_instances:
        actually_generated[inst.category_id] = actually_generated.get(inst.category_id, 0) + 1
    return AugmentResult(
        delta=delta, composites=composites, per_category_generated=actually_generated
    )
