import json
import math

import pytest

from signkit.dataset import (
    Category,
    Dataset,
    ImageRecord,
    Instance,
    Template,
    is_difficult,
    latlon_to_planar,
    load_dataset,
    normalize_winding,
    polygon_bbox,
    polygon_signed_area,
    save_dataset,
    validate_category_criteria,
)
from signkit.errors import IntegrityError, ParseError


def square(x, y, side):
    return [(x, y), (x + side, y), (x + side, y + side), (x, y + side)]


def tiny_dataset(side=40.0):
    images = [ImageRecord(id=1, width=200, height=100, uri="a.png", geotag=(10.0, 20.0)),
              ImageRecord(id=2, width=200, height=100, uri="b.png")]
    categories = [Category(id=1, name="stop", has_geometry=False)]
    instances = [
        Instance.from_polygon(1, 1, 1, square(5, 5, side), (200, 100)),
        Instance.from_polygon(2, 2, 1, square(50, 10, side), (200, 100)),
    ]
    return Dataset(images=images, categories=categories, instances=instances)


class TestRoundTrip:
    def test_two_image_fixture_counts_preserved(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "ds.json"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert len(loaded.images) == 2
        assert len(loaded.instances) == 2
        assert loaded == ds

    def test_empty_dataset_roundtrips(self, tmp_path):
        ds = Dataset()
        path = tmp_path / "empty.json"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_save_is_byte_deterministic(self, tmp_path):
        ds = tiny_dataset()
        save_dataset(ds, tmp_path / "a.json")
        save_dataset(ds, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_template_and_geotag_roundtrip(self, tmp_path):
        tpl = Template(points=[(0.0, 0.0), (64.0, 0.0), (64.0, 64.0), (0.0, 64.0)], size=(64.0, 64.0))
        ds = Dataset(
            images=[ImageRecord(id=1, width=100, height=100, uri="a.png", geotag=(1.5, -2.25))],
            categories=[Category(id=1, name="sq", has_geometry=True, template=tpl)],
            instances=[Instance.from_polygon(1, 1, 1, square(10, 10, 50), (100, 100))],
        )
        path = tmp_path / "t.json"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert loaded.categories[0].template == tpl
        assert loaded.images[0].geotag == (1.5, -2.25)

    def test_invalid_dataset_refused_on_save(self, tmp_path):
        ds = tiny_dataset()
        ds.instances[0].bbox = (0.0, 0.0, 1.0, 1.0)  # no longer the polygon hull
        with pytest.raises(IntegrityError):
            save_dataset(ds, tmp_path / "bad.json")


class TestDifficultRule:
    def test_small_bbox_is_difficult(self):
        assert is_difficult((0, 0, 25, 25))
        inst = Instance.from_polygon(1, 1, 1, square(0, 0, 25))
        assert inst.difficult

    def test_threshold_is_strict(self):
        assert not is_difficult((0, 0, 30, 30))
        assert is_difficult((0, 0, 29.999, 30))

    def test_min_side_governs(self):
        # wide but short boxes count as difficult
        assert is_difficult((0, 0, 200, 29))

    def test_loader_recomputes_difficult_with_warning(self, tmp_path, caplog):
        ds = tiny_dataset(side=25.0)
        path = tmp_path / "d.json"
        save_dataset(ds, path)
        doc = json.loads(path.read_text())
        doc["annotations"][0]["difficult"] = False  # contradicts the 25 px box
        path.write_text(json.dumps(doc))
        with caplog.at_level("WARNING"):
            loaded = load_dataset(path)
        assert loaded.instances[0].difficult
        assert any("difficult" in rec.message for rec in caplog.records)


class TestIntegrity:
    def test_missing_category_reference(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "d.json"
        save_dataset(ds, path)
        doc = json.loads(path.read_text())
        doc["annotations"][0]["category_id"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(IntegrityError):
            load_dataset(path)

    def test_missing_image_reference(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "d.json"
        save_dataset(ds, path)
        doc = json.loads(path.read_text())
        doc["annotations"][0]["image_id"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(IntegrityError):
            load_dataset(path)

    def test_schema_error_carries_locator(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text(json.dumps({
            "images": [{"id": 1, "width": 10, "height": 10, "file_name": "x.png"}],
            "categories": [],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1}],
        }))
        with pytest.raises(ParseError) as exc:
            load_dataset(path)
        assert "annotations[0]" in str(exc.value)

    def test_stored_bbox_must_match_hull(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "d.json"
        save_dataset(ds, path)
        doc = json.loads(path.read_text())
        doc["annotations"][0]["bbox"] = [0, 0, 7, 7]
        path.write_text(json.dumps(doc))
        with pytest.raises(IntegrityError):
            load_dataset(path)

    def test_duplicate_image_ids_rejected(self):
        with pytest.raises(IntegrityError):
            Dataset(
                images=[ImageRecord(1, 10, 10, "a.png"), ImageRecord(1, 10, 10, "b.png")],
                categories=[],
                instances=[],
            ).validate()


class TestPolygons:
    def test_bbox_is_tight_hull(self):
        poly = [(3.0, 4.0), (10.0, 2.0), (8.0, 12.0)]
        assert polygon_bbox(poly) == (3.0, 2.0, 7.0, 10.0)

    def test_bbox_clips_to_image(self):
        poly = [(-5.0, -5.0), (20.0, -5.0), (20.0, 20.0), (-5.0, 20.0)]
        assert polygon_bbox(poly, (15, 12)) == (0.0, 0.0, 15.0, 12.0)

    def test_bbox_recompute_is_idempotent(self):
        inst = Instance.from_polygon(1, 1, 1, [(3.5, 4.25), (10.5, 2.0), (8.0, 12.0)])
        assert polygon_bbox(inst.polygon) == inst.bbox

    def test_winding_normalized_keeps_first_vertex(self):
        cw = [(0.0, 0.0), (0.0, 10.0), (10.0, 10.0), (10.0, 0.0)]
        assert polygon_signed_area(cw) < 0
        ccw = normalize_winding(cw)
        assert polygon_signed_area(ccw) > 0
        assert ccw[0] == (0.0, 0.0)
        assert normalize_winding(ccw) == ccw


class TestCategoryCriteria:
    def build(self, n_big, n_small):
        images = [ImageRecord(id=1, width=5000, height=5000, uri="a.png")]
        categories = [Category(id=1, name="c", has_geometry=False)]
        instances = []
        x = 0.0
        for i in range(n_big):
            instances.append(Instance.from_polygon(i + 1, 1, 1, square(x, 0, 40), (5000, 5000)))
            x += 50
        for i in range(n_small):
            instances.append(
                Instance.from_polygon(n_big + i + 1, 1, 1, square(x, 0, 20), (5000, 5000))
            )
            x += 30
        return Dataset(images=images, categories=categories, instances=instances)

    def test_twenty_compliant_instances_pass(self):
        assert validate_category_criteria(self.build(20, 0)).ok

    def test_nineteen_fail(self):
        report = validate_category_criteria(self.build(19, 0))
        assert not report.ok
        assert report.failing[0].category_id == 1

    def test_small_instances_do_not_count(self):
        # plenty of instances, all under the size bar
        report = validate_category_criteria(self.build(0, 25))
        assert not report.ok
        assert report.per_category[0].total_instances == 25
        assert report.per_category[0].compliant_instances == 0


class TestGeotags:
    def test_latlon_equirectangular(self):
        pts = latlon_to_planar([(46.05, 14.50), (46.05, 14.51)], reference_lat=46.05)
        dx = pts[1][0] - pts[0][0]
        # one longitude-hundredth at 46 degrees north is about 772 m
        expected = 6371000.0 * math.radians(0.01) * math.cos(math.radians(46.05))
        assert abs(dx - expected) < 1e-6
        assert pts[0][1] == pts[1][1]

    def test_northing_independent_of_reference(self):
        a = latlon_to_planar([(46.0, 14.0)], reference_lat=0.0)[0]
        b = latlon_to_planar([(46.0, 14.0)], reference_lat=46.0)[0]
        assert a[1] == b[1]
