import math

import numpy as np
import pytest

from signkit.dataset import Category, Dataset, ImageRecord, Instance, Template, polygon_bbox
from signkit.distortion import DistortionSample
from signkit.errors import PlacementError, RejectedSampleError, SignkitError
from signkit.geometry import EulerAngles
from signkit.images import rasterize_polygon
from signkit.normalize import SourcePatch, extract_instance_patch, prepare_source_patch, rectified_size
from signkit.synthesize import (
    CompositeSpec,
    Placement,
    SynthPatch,
    augment_dataset,
    composite,
    exclusion_region,
    place_instances,
    synthesize_instance,
)


def flat_source(size=40, category=1, has_geometry=True, value=(180, 60, 60)):
    patch = np.zeros((size, size, 4), dtype=np.uint8)
    patch[:, :, :3] = value
    patch[:, :, 3] = 255
    margin = 2.0
    poly = [
        (margin, margin),
        (size - 1 - margin, margin),
        (size - 1 - margin, size - 1 - margin),
        (margin, size - 1 - margin),
    ]
    return SourcePatch(
        instance_id=1, category_id=category, patch=patch, polygon=poly, has_geometry=has_geometry
    )


def sample(angles=(0.0, 0.0, 0.0), brightness=50.0, contrast=1.0, scale=40.0):
    return DistortionSample(
        angles=EulerAngles(*angles),
        brightness_mean=brightness,
        contrast_scale=contrast,
        scale=scale,
    )


class TestSynthesizeInstance:
    def test_zero_angles_is_pure_rescale(self):
        src = flat_source(size=40)
        out = synthesize_instance(src, sample(scale=72.0))
        hull_in = polygon_bbox(src.polygon)
        hull_out = polygon_bbox(out.polygon)
        factor = 72.0 / max(hull_in[2], hull_in[3])
        assert max(hull_out[2], hull_out[3]) == pytest.approx(72.0, abs=1e-9)
        # polygon scales uniformly (up to the hull shift)
        for (xi, yi), (xo, yo) in zip(src.polygon, out.polygon):
            assert xo - hull_out[0] == pytest.approx((xi - hull_in[0]) * factor, abs=1e-9)
            assert yo - hull_out[1] == pytest.approx((yi - hull_in[1]) * factor, abs=1e-9)

    def test_brightness_lands_on_target(self):
        src = flat_source()
        out = synthesize_instance(src, sample(brightness=62.0, scale=50.0))
        from signkit.appearance import mean_intensity, srgb_to_lab

        assert mean_intensity(srgb_to_lab(out.patch)) == pytest.approx(62.0, abs=0.6)

    def test_y_rotation_polygon_matches_direct_point_mapping(self):
        src = flat_source(size=64)
        theta = math.radians(10.0)
        out = synthesize_instance(src, sample(angles=(0.0, theta, 0.0), scale=64.0))

        # scalar re-derivation: K Ry K^-1 applied to each vertex, then the
        # same hull-anchored scaling the synthesizer promises
        f = 64.0
        cx = cy = (64 - 1) / 2.0
        cos_t, sin_t = math.cos(theta), math.sin(theta)

        def map_point(x, y):
            xc, yc = (x - cx) / f, (y - cy) / f
            xr = cos_t * xc + sin_t * 1.0
            yr = yc
            wr = -sin_t * xc + cos_t
            return (f * xr / wr + cx, f * yr / wr + cy)

        mapped = [map_point(x, y) for x, y in src.polygon]
        xs = [p[0] for p in mapped]
        ys = [p[1] for p in mapped]
        hull_w, hull_h = max(xs) - min(xs), max(ys) - min(ys)
        s = 64.0 / max(hull_w, hull_h)
        expected = [((x - min(xs)) * s, (y - min(ys)) * s) for x, y in mapped]
        for (xe, ye), (xa, ya) in zip(expected, out.polygon):
            assert abs(xe - xa) < 0.5 and abs(ye - ya) < 0.5

    def test_polygon_consistent_with_warped_pixels(self):
        src = flat_source(size=64)
        out = synthesize_instance(src, sample(angles=(0.1, 0.15, 0.05), scale=80.0))
        h, w = out.patch.shape[:2]
        poly_mask = rasterize_polygon((w, h), out.polygon) > 0
        alpha_mask = out.patch[:, :, 3] > 127
        inter = np.logical_and(poly_mask, alpha_mask).sum()
        union = np.logical_or(poly_mask, alpha_mask).sum()
        assert inter / union > 0.9

    def test_non_geometry_ignores_angles(self):
        src = flat_source(has_geometry=False)
        wild = sample(angles=(0.5, -0.4, 0.8), scale=50.0)
        tame = sample(angles=(0.0, 0.0, 0.0), scale=50.0)
        out_wild = synthesize_instance(src, wild)
        out_tame = synthesize_instance(src, tame)
        assert out_wild.polygon == out_tame.polygon
        assert np.array_equal(out_wild.patch[:, :, 3], out_tame.patch[:, :, 3])

    def test_small_scale_rejected(self):
        with pytest.raises(RejectedSampleError):
            synthesize_instance(flat_source(), sample(scale=14.0))


def synth_patch(w, h, category=1):
    patch = np.zeros((h, w, 4), dtype=np.uint8)
    patch[:, :, :3] = 128
    patch[:, :, 3] = 255
    poly = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)]
    return SynthPatch(patch=patch, polygon=poly, category_id=category, source_instance_id=1)


def background_record(w=480, h=360, bid=1):
    return ImageRecord(id=bid, width=w, height=h, uri="bg.png")


class TestPlacement:
    def test_single_patch_rejected(self, rng):
        with pytest.raises(PlacementError):
            place_instances(background_record(), [synth_patch(20, 20)], rng)

    def test_six_patches_rejected(self, rng):
        with pytest.raises(PlacementError):
            place_instances(background_record(), [synth_patch(20, 20)] * 6, rng)

    def test_five_small_patches_all_placed_disjoint(self, rng):
        patches = [synth_patch(25, 25) for _ in range(5)]
        spec, deferred = place_instances(background_record(), patches, rng)
        assert not deferred
        assert len(spec.placements) == 5
        rects = [p.pixel_rect for p in spec.placements]
        for i in range(5):
            for j in range(i):
                a, b = rects[i], rects[j]
                ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
                iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
                assert ix * iy == 0.0

    def test_oversized_patch_rejected(self, rng):
        with pytest.raises(PlacementError, match="larger than background"):
            place_instances(
                background_record(100, 100), [synth_patch(120, 40), synth_patch(20, 20)], rng
            )

    def test_placements_avoid_exclusion_region(self, rng):
        bg = background_record(120, 120)
        exclusion = exclusion_region(120, 120)
        for seed in range(20):
            spec, _ = place_instances(
                bg, [synth_patch(30, 30), synth_patch(30, 30)], np.random.default_rng(seed)
            )
            for p in spec.placements:
                r = p.pixel_rect
                ix = max(0.0, min(r[0] + r[2], exclusion[0] + exclusion[2]) - max(r[0], exclusion[0]))
                iy = max(0.0, min(r[1] + r[3], exclusion[1] + exclusion[3]) - max(r[1], exclusion[1]))
                assert ix * iy == 0.0

    def test_undeployable_patches_deferred(self):
        # background so cramped that only one 60x60 patch fits outside the
        # exclusion region's row
        bg = background_record(100, 100)
        patches = [synth_patch(60, 60), synth_patch(60, 60), synth_patch(10, 10)]
        spec, deferred = place_instances(bg, patches, np.random.default_rng(0))
        assert len(spec.placements) >= 2
        assert len(spec.placements) + len(deferred) == 3


class TestComposite:
    def test_blends_and_counts(self, rng):
        bg = np.zeros((360, 480, 4), dtype=np.uint8)
        bg[:, :, 3] = 255
        patches = [synth_patch(30, 30), synth_patch(40, 20)]
        spec, _ = place_instances(background_record(), patches, rng)
        out = composite(bg, spec)
        assert out.shape == bg.shape
        assert len(spec.placements) == 2

    def test_patch_center_pixel_copied_exactly(self, rng):
        bg = np.full((360, 480, 4), 10, dtype=np.uint8)
        bg[:, :, 3] = 255
        patch = synth_patch(31, 31)
        patch.patch[:, :, :3] = 200
        spec, _ = place_instances(background_record(), [patch, synth_patch(20, 20)], rng)
        out = composite(bg, spec)
        placement = spec.placements[0]
        cx = placement.position[0] + 15
        cy = placement.position[1] + 15
        assert tuple(out[cy, cx, :3]) == (200, 200, 200)

    def test_background_untouched_away_from_patches(self, rng):
        bg = np.full((360, 480, 4), 77, dtype=np.uint8)
        patches = [synth_patch(20, 20), synth_patch(20, 20)]
        spec, _ = place_instances(background_record(), patches, rng)
        out = composite(bg, spec)
        mask = np.zeros((360, 480), dtype=bool)
        for p in spec.placements:
            x, y = p.position
            w, h = p.patch.footprint
            mask[y : y + h, x : x + w] = True
        assert np.array_equal(out[~mask][:, :3], bg[~mask][:, :3])

    def test_emitted_bbox_equals_placement_bbox(self, rng):
        patches = [synth_patch(30, 30), synth_patch(25, 25)]
        spec, _ = place_instances(background_record(), patches, rng)
        for placement in spec.placements:
            inst = Instance.from_polygon(
                1, 1, placement.patch.category_id, placement.polygon, (480, 360)
            )
            assert inst.bbox == pytest.approx(placement.bbox)

    def test_spec_validation_rejects_overlap(self):
        a = Placement(patch=synth_patch(30, 30), position=(10, 10))
        b = Placement(patch=synth_patch(30, 30), position=(20, 20))
        spec = CompositeSpec(
            background_id=1, width=480, height=360, placements=[a, b],
            exclusion=exclusion_region(480, 360),
        )
        with pytest.raises(PlacementError, match="overlap"):
            spec.validate()


class TestAugmentDataset:
    def test_deficit_filled_and_surplus_untouched(self, toy_root, toy_dataset, toy_model):
        backgrounds = sorted((toy_root / "backgrounds").glob("*.png"))
        result = augment_dataset(
            toy_dataset,
            backgrounds,
            toy_model,
            target_min=70,
            seed=3,
            image_root=toy_root / "train",
        )
        counts = {c.id: 0 for c in toy_dataset.categories}
        for inst in toy_dataset.instances:
            counts[inst.category_id] += 1
        generated = result.per_category_generated
        # categories below 70 get filled, the rest stay untouched
        assert counts[1] == 30 and generated.get(1, 0) >= 40
        assert counts[3] == 100 and generated.get(3, 0) == 0
        assert all(
            counts[c] + generated.get(c, 0) >= 70 for c in counts
        )

    def test_no_sources_rejected(self, toy_root, toy_dataset, toy_model):
        backgrounds = sorted((toy_root / "backgrounds").glob("*.png"))
        augmented_categories = list(toy_dataset.categories) + [
            Category(id=99, name="ghost", has_geometry=False)
        ]
        ds = Dataset(
            images=toy_dataset.images,
            categories=augmented_categories,
            instances=toy_dataset.instances,
        )
        with pytest.raises(SignkitError, match="no usable source"):
            augment_dataset(
                ds, backgrounds, toy_model, target_min=5, seed=0, image_root=toy_root / "train"
            )


class TestNormalizeHelpers:
    def test_extract_masks_outside_polygon(self):
        image = np.full((50, 50, 4), 200, dtype=np.uint8)
        image[:, :, 3] = 255
        inst = Instance.from_polygon(
            1, 1, 1, [(10.0, 10.0), (30.0, 10.0), (30.0, 30.0), (10.0, 30.0)], (50, 50)
        )
        patch, local_poly = extract_instance_patch(image, inst)
        assert patch.shape[0] >= 20 and patch.shape[1] >= 20
        assert local_poly[0] == (0.0, 0.0)
        assert patch[10, 10, 3] == 255  # interior opaque
        assert patch[0, patch.shape[1] - 1, 3] in (0, 255)  # corner may clip to polygon

    def test_rectified_size_scales_with_polygon_area(self):
        tpl = Template(
            points=[(0.0, 0.0), (64.0, 0.0), (64.0, 64.0), (0.0, 64.0)], size=(64.0, 64.0)
        )
        category = Category(id=1, name="sq", has_geometry=True, template=tpl)
        double = Instance.from_polygon(
            1, 1, 1, [(0.0, 0.0), (128.0, 0.0), (128.0, 128.0), (0.0, 128.0)]
        )
        assert rectified_size(double, category) == pytest.approx(128.0)

    def test_prepare_source_patch_rectifies_to_template_size(self, toy_root, toy_dataset):
        from signkit.images import load_rgba

        inst = next(
            a
            for a in toy_dataset.instances
            if toy_dataset.category(a.category_id).template is not None and not a.difficult
        )
        category = toy_dataset.category(inst.category_id)
        image = load_rgba(toy_root / "train" / toy_dataset.image(inst.image_id).uri)
        source = prepare_source_patch(image, inst, category)
        assert source.has_geometry
        expected = (int(category.template.size[1]), int(category.template.size[0]), 4)
        assert source.patch.shape == expected
        assert source.polygon == category.template.points
