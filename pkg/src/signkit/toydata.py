"""Deterministic miniature corpus generator for demos and self-tests.

Builds a small polygon-annotated dataset of synthetic "signs" (flat colored
shapes with texture, warped by mild random plane rotations) on procedural
street-like backgrounds, plus a pool of sign-free backgrounds for
augmentation.  Geotags are drawn around well-separated cluster centers so
the location-clustered split has realistic structure.

Everything is seeded; the same seed always produces byte-identical images
and annotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from signkit.dataset import Category, Dataset, ImageRecord, Instance, Template, save_dataset
from signkit.distortion import DistortionSample
from signkit.errors import PlacementError
from signkit.geometry import EulerAngles
from signkit.images import rasterize_polygon, save_png
from signkit.normalize import SourcePatch
from signkit.synthesize import CompositeSpec, composite, place_instances, synthesize_instance

TEMPLATE_SIZE = 64.0


def _regular_polygon(n: int, rotation: float = 0.0) -> list[tuple[float, float]]:
    c = TEMPLATE_SIZE / 2.0
    r = TEMPLATE_SIZE / 2.0 - 4.0
    return [
        (c + r * math.cos(rotation + 2.0 * math.pi * i / n),
         c + r * math.sin(rotation + 2.0 * math.pi * i / n))
        for i in range(n)
    ]


@dataclass(frozen=True)
class ShapeSpec:
    name: str
    points: list[tuple[float, float]]
    color: tuple[int, int, int]
    base_l: float
    has_geometry: bool


def shape_catalog() -> list[ShapeSpec]:
    arrow = [
        (4.0, 24.0), (36.0, 24.0), (36.0, 12.0), (60.0, 32.0),
        (36.0, 52.0), (36.0, 40.0), (4.0, 40.0),
    ]
    # corner-plus-midpoint annotation so even the triangle offers the four
    # correspondences homography estimation needs
    triangle = [
        (32.0, 6.0), (45.0, 32.0), (58.0, 58.0), (32.0, 58.0), (6.0, 58.0), (19.0, 32.0),
    ]
    return [
        ShapeSpec("octagon", _regular_polygon(8, math.pi / 8), (200, 30, 40), 45.0, True),
        ShapeSpec("square", [(6.0, 6.0), (58.0, 6.0), (58.0, 58.0), (6.0, 58.0)], (30, 60, 200), 40.0, True),
        ShapeSpec("triangle", triangle, (230, 200, 40), 75.0, True),
        ShapeSpec("diamond", [(32.0, 4.0), (60.0, 32.0), (32.0, 60.0), (4.0, 32.0)], (240, 140, 20), 60.0, True),
        ShapeSpec("arrow", arrow, (120, 130, 140), 55.0, False),
    ]


def _template_patch(shape: ShapeSpec, rng: np.random.Generator) -> np.ndarray:
    """Textured RGBA patch of the shape at canonical size."""
    size = int(TEMPLATE_SIZE)
    mask = rasterize_polygon((size, size), shape.points)
    noise = rng.normal(0.0, 8.0, (size, size, 3))
    rgb = np.clip(np.asarray(shape.color, dtype=np.float64) + noise, 0, 255)
    # darker inner glyph so the lightness histogram has real spread
    inner = [(0.55 * (x - TEMPLATE_SIZE / 2) + TEMPLATE_SIZE / 2,
              0.55 * (y - TEMPLATE_SIZE / 2) + TEMPLATE_SIZE / 2) for x, y in shape.points]
    glyph = rasterize_polygon((size, size), inner)
    rgb[glyph > 0] = np.clip(rgb[glyph > 0] * 0.45, 0, 255)
    alpha = (mask * 255).astype(np.uint8)
    return np.dstack([rgb.astype(np.uint8), alpha])


def _background(width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Sky-over-ground gradient with noise and a road wedge, no signs."""
    ys = np.linspace(0.0, 1.0, height)[:, None]
    sky = np.array([140.0, 170.0, 210.0])
    ground = np.array([90.0, 110.0, 80.0])
    base = sky[None, None, :] * (1 - ys[:, :, None]) + ground[None, None, :] * ys[:, :, None]
    base = base + rng.normal(0.0, 6.0, (height, width, 3))
    road = np.zeros((height, width), dtype=bool)
    for y in range(2 * height // 3, height):
        spread = int((y - 2 * height / 3) / (height / 3) * width / 4 + width / 12)
        road[y, max(0, width // 2 - spread) : min(width, width // 2 + spread)] = True
    base[road] = np.array([95.0, 95.0, 100.0]) + rng.normal(0.0, 4.0, (int(road.sum()), 3))
    rgb = np.clip(base, 0, 255).astype(np.uint8)
    alpha = np.full((height, width), 255, dtype=np.uint8)
    return np.dstack([rgb, alpha])


def make_backgrounds(
    root: str | Path, count: int = 50, size: tuple[int, int] = (480, 360), seed: int = 11
) -> list[Path]:
    """Write ``count`` sign-free background PNGs; returns their paths."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB6]))
    paths = []
    for i in range(count):
        path = root / f"background_{i:03d}.png"
        save_png(_background(size[0], size[1], rng), path)
        paths.append(path)
    return paths


def make_toy_dataset(
    root: str | Path,
    instance_counts: tuple[int, ...] = (30, 60, 100, 150, 180),
    image_size: tuple[int, int] = (320, 240),
    seed: int = 7,
    cluster_spacing_m: float = 400.0,
    small_every: int = 13,
) -> Path:
    """Generate a complete toy dataset on disk; returns the JSON path.

    One category per entry of ``instance_counts`` (cycled through the shape
    catalog).  Every ``small_every``-th instance is rendered below 30 px so
    the difficult flag gets exercised.  Images carry geotags clustered well
    apart, with a handful of same-cluster neighbors within 50 m.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70D]))
    shapes = shape_catalog()
    if len(instance_counts) > len(shapes):
        raise ValueError(f"at most {len(shapes)} categories supported")

    categories = []
    source_patches = []
    for idx, count in enumerate(instance_counts):
        shape = shapes[idx]
        categories.append(
            Category(
                id=idx + 1,
                name=shape.name,
                has_geometry=shape.has_geometry,
                template=(
                    Template(points=list(shape.points), size=(TEMPLATE_SIZE, TEMPLATE_SIZE))
                    if shape.has_geometry
                    else None
                ),
            )
        )
        source_patches.append(
            SourcePatch(
                instance_id=0,
                category_id=idx + 1,
                patch=_template_patch(shape, rng),
                polygon=list(shape.points),
                has_geometry=shape.has_geometry,
            )
        )

    def draw_instance(idx: int, small: bool):
        shape = shapes[idx]
        scale = float(rng.uniform(20.0, 28.0) if small else rng.uniform(40.0, 90.0))
        angles = (
            EulerAngles(*(rng.normal(0.0, 0.08, 3))) if shape.has_geometry else EulerAngles(0, 0, 0)
        )
        sample = DistortionSample(
            angles=angles,
            brightness_mean=float(rng.normal(shape.base_l, 6.0)),
            contrast_scale=1.0,
            scale=scale,
        )
        return synthesize_instance(
            source_patches[idx], sample, min_scale=15.0,
            camera_focal=float(max(image_size)),
        )

    # synthesize all instances up front
    pending: list = []
    instance_counter = 0
    for idx, count in enumerate(instance_counts):
        for _ in range(count):
            instance_counter += 1
            pending.append(
                draw_instance(idx, small_every > 0 and instance_counter % small_every == 0)
            )
    order = rng.permutation(len(pending))
    pending = [pending[i] for i in order]

    # geotag cluster centers on a coarse jittered grid, far apart
    n_images_estimate = math.ceil(len(pending) / 2)
    n_clusters = max(2, n_images_estimate // 4)
    side = math.ceil(math.sqrt(n_clusters))
    centers = [
        (
            i * cluster_spacing_m + float(rng.uniform(-30, 30)),
            j * cluster_spacing_m + float(rng.uniform(-30, 30)),
        )
        for i in range(side)
        for j in range(side)
    ][:n_clusters]

    images: list[ImageRecord] = []
    instances: list[Instance] = []
    image_id = 0
    instance_id = 0
    cursor = 0
    budget = 4 * len(pending) + 8
    while cursor < len(pending):
        if image_id > budget:
            raise PlacementError("toy generation failed to converge")
        if len(pending) - cursor == 1:
            # orphaned by a deferral; give it a companion of the same category
            pending.append(draw_instance(pending[cursor].category_id - 1, False))
        take = int(rng.integers(2, 4))
        if len(pending) - cursor - take == 1:
            take += 1
        group = pending[cursor : cursor + min(take, len(pending) - cursor)]
        cursor += len(group)
        image_id += 1
        center = centers[(image_id - 1) % len(centers)]
        record = ImageRecord(
            id=image_id,
            width=image_size[0],
            height=image_size[1],
            uri=f"images/toy_{image_id:06d}.png",
            geotag=(
                center[0] + float(rng.uniform(-15, 15)),
                center[1] + float(rng.uniform(-15, 15)),
            ),
        )
        place_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x91ACE, image_id]))
        spec = None
        for _ in range(10):
            try:
                spec, deferred = place_instances(record, group, place_rng)
                break
            except PlacementError:
                # shrink the group and retry; leftovers go back in the queue
                if len(group) <= 2:
                    raise
                pending.append(group.pop())
        assert spec is not None
        pending.extend(deferred)
        canvas = _background(image_size[0], image_size[1], rng)
        save_png(composite(canvas, spec), root / record.uri)
        images.append(record)
        for placement in spec.placements:
            instance_id += 1
            instances.append(
                Instance.from_polygon(
                    id=instance_id,
                    image_id=record.id,
                    category_id=placement.patch.category_id,
                    polygon=placement.polygon,
                    image_size=(record.width, record.height),
                )
            )

    ds = Dataset(images=images, categories=categories, instances=instances)
    ds.validate()
    path = root / "dataset.json"
    save_dataset(ds, path)
    return path
