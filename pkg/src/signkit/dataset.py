"""Canonical in-memory and on-disk model of polygon-annotated sign datasets.

The on-disk format is a COCO-style JSON document (``images`` /
``annotations`` / ``categories``) extended with per-annotation ``polygon``,
``difficult`` and ``physical_object_id`` fields, per-image planar ``geotag``
coordinates in meters, and per-category geometric templates.  See
``docs/formats.md`` for the field-by-field description.

Annotations whose bounding box is smaller than 30 px on its shorter side are
flagged ``difficult``; such instances are excluded from training and never
penalize a detector during evaluation.  The flag is a pure function of the
box, so it is recomputed on load and any disagreement with the stored value
is reported as a warning.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from signkit.errors import IntegrityError, ParseError

logger = logging.getLogger(__name__)

# Minimum bbox side (px) for an annotation to count as non-difficult.
DIFFICULT_MIN_SIDE = 30.0
# Category quality bar: this many instances at or above DIFFICULT_MIN_SIDE.
MIN_INSTANCES_PER_CATEGORY = 20

Point = tuple[float, float]
Box = tuple[float, float, float, float]

EARTH_RADIUS_M = 6371000.0


# ---------------------------------------------------------------------------
# polygon helpers


def polygon_bbox(polygon: Sequence[Point], image_size: tuple[float, float] | None = None) -> Box:
    """Tight axis-aligned (x, y, w, h) hull of a polygon.

    With ``image_size`` the hull is clipped to ``[0, width] x [0, height]``;
    annotations are allowed to spill over the image edge but their boxes are
    not.
    """
    xs = [p[0] for p in polygon]
    ys = [p[1] for p in polygon]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if image_size is not None:
        w, h = image_size
        x0, x1 = max(x0, 0.0), min(x1, float(w))
        y0, y1 = max(y0, 0.0), min(y1, float(h))
    return (x0, y0, max(x1 - x0, 0.0), max(y1 - y0, 0.0))


def polygon_signed_area(polygon: Sequence[Point]) -> float:
    """Shoelace signed area; positive for counter-clockwise vertex order."""
    area = 0.0
    n = len(polygon)
    for i in range(n):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return 0.5 * area


def normalize_winding(polygon: Sequence[Point]) -> list[Point]:
    """Return the polygon with counter-clockwise orientation.

    The first vertex is kept in place so correspondence with template points
    survives normalization.
    """
    pts = [(float(x), float(y)) for x, y in polygon]
    if polygon_signed_area(pts) < 0.0:
        pts = [pts[0]] + pts[:0:-1]
    return pts


def is_difficult(bbox: Box, min_side: float = DIFFICULT_MIN_SIDE) -> bool:
    """True when the shorter bbox side is below the size threshold."""
    return min(bbox[2], bbox[3]) < min_side


def latlon_to_planar(
    latlons: Sequence[tuple[float, float]], reference_lat: float | None = None
) -> list[Point]:
    """Convert (lat, lon) degrees to planar (easting, northing) meters.

    Equirectangular approximation on a spherical Earth: northing is
    proportional to latitude, easting to longitude scaled by the cosine of a
    reference latitude (the mean input latitude unless given).  Adequate for
    the sub-kilometer distances used by location clustering; not a geodetic
    projection.
    """
    if not latlons:
        return []
    ref = reference_lat if reference_lat is not None else sum(p[0] for p in latlons) / len(latlons)
    cos_ref = math.cos(math.radians(ref))
    out = []
    for lat, lon in latlons:
        easting = EARTH_RADIUS_M * math.radians(lon) * cos_ref
        northing = EARTH_RADIUS_M * math.radians(lat)
        out.append((easting, northing))
    return out


# ---------------------------------------------------------------------------
# domain types


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    uri: str
    geotag: Point | None = None  # planar (easting, northing) meters

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise IntegrityError(f"image {self.id}: non-positive size {self.width}x{self.height}")
        if self.geotag is not None:
            self.geotag = (float(self.geotag[0]), float(self.geotag[1]))


@dataclass
class Template:
    """Canonical rectified shape of a category.

    ``points`` are 2D vertices in the canonical pixel frame, in
    correspondence order with instance polygons; ``size`` is the canonical
    (width, height) in pixels of the rectified patch.
    """

    points: list[Point]
    size: tuple[float, float]

    def __post_init__(self):
        self.points = [(float(x), float(y)) for x, y in self.points]
        self.size = (float(self.size[0]), float(self.size[1]))
        if len(self.points) < 3:
            raise IntegrityError("template needs at least 3 points")
        if abs(polygon_signed_area(self.points)) < 1e-9:
            raise IntegrityError("template points are collinear")


@dataclass
class Category:
    id: int
    name: str
    has_geometry: bool = True
    template: Template | None = None

    def __post_init__(self):
        if self.template is not None and not self.has_geometry:
            raise IntegrityError(f"category {self.id}: template present but has_geometry is false")


@dataclass
class Instance:
    id: int
    image_id: int
    category_id: int
    polygon: list[Point]
    bbox: Box
    difficult: bool = False
    physical_object_id: int | None = None

    def __post_init__(self):
        self.polygon = [(float(x), float(y)) for x, y in self.polygon]
        self.bbox = tuple(float(v) for v in self.bbox)
        if len(self.polygon) < 3:
            raise IntegrityError(f"instance {self.id}: polygon needs at least 3 points")

    @classmethod
    def from_polygon(
        cls,
        id: int,
        image_id: int,
        category_id: int,
        polygon: Sequence[Point],
        image_size: tuple[float, float] | None = None,
        physical_object_id: int | None = None,
    ) -> "Instance":
        """Build an instance with derived bbox, winding and difficult flag."""
        poly = normalize_winding(polygon)
        bbox = polygon_bbox(poly, image_size)
        return cls(
            id=id,
            image_id=image_id,
            category_id=category_id,
            polygon=poly,
            bbox=bbox,
            difficult=is_difficult(bbox),
            physical_object_id=physical_object_id,
        )


@dataclass
class Dataset:
    """Immutable-after-construction collection of images, categories, instances.

    Construction is single-threaded; once built (and validated) the object is
    treated as read-only and is safe to share across threads.
    """

    images: list[ImageRecord] = field(default_factory=list)
    categories: list[Category] = field(default_factory=list)
    instances: list[Instance] = field(default_factory=list)

    def __post_init__(self):
        self._reindex()

    def _reindex(self) -> None:
        self._images_by_id = {im.id: im for im in self.images}
        self._categories_by_id = {c.id: c for c in self.categories}
        self._instances_by_id = {a.id: a for a in self.instances}

    def image(self, image_id: int) -> ImageRecord:
        return self._images_by_id[image_id]

    def category(self, category_id: int) -> Category:
        return self._categories_by_id[category_id]

    def instances_of_category(self, category_id: int) -> list[Instance]:
        return [a for a in self.instances if a.category_id == category_id]

    def instances_of_image(self, image_id: int) -> list[Instance]:
        return [a for a in self.instances if a.image_id == image_id]

    def validate(self) -> None:
        """Raise :class:`IntegrityError` on any violated invariant."""
        if len(self._images_by_id) != len(self.images):
            raise IntegrityError("duplicate image ids")
        if len(self._categories_by_id) != len(self.categories):
            raise IntegrityError("duplicate category ids")
        if len(self._instances_by_id) != len(self.instances):
            raise IntegrityError("duplicate instance ids")
        for inst in self.instances:
            if inst.image_id not in self._images_by_id:
                raise IntegrityError(f"instance {inst.id}: unknown image {inst.image_id}")
            if inst.category_id not in self._categories_by_id:
                raise IntegrityError(f"instance {inst.id}: unknown category {inst.category_id}")
            im = self._images_by_id[inst.image_id]
            expected = polygon_bbox(inst.polygon, (im.width, im.height))
            if tuple(inst.bbox) != expected:
                raise IntegrityError(
                    f"instance {inst.id}: bbox {inst.bbox} does not match polygon hull {expected}"
                )
            if inst.difficult != is_difficult(inst.bbox):
                raise IntegrityError(
                    f"instance {inst.id}: difficult flag inconsistent with "
                    f"{DIFFICULT_MIN_SIDE} px rule"
                )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "images": [
                {
                    "id": im.id,
                    "width": im.width,
                    "height": im.height,
                    "file_name": im.uri,
                    "geotag": list(im.geotag) if im.geotag is not None else None,
                }
                for im in self.images
            ],
            "categories": [
                {
                    "id": c.id,
                    "name": c.name,
                    "has_geometry": c.has_geometry,
                    "template": (
                        {
                            "points": [list(p) for p in c.template.points],
                            "size": list(c.template.size),
                        }
                        if c.template is not None
                        else None
                    ),
                }
                for c in self.categories
            ],
            "annotations": [
                {
                    "id": a.id,
                    "image_id": a.image_id,
                    "category_id": a.category_id,
                    "polygon": [list(p) for p in a.polygon],
                    "bbox": list(a.bbox),
                    "difficult": a.difficult,
                    "physical_object_id": a.physical_object_id,
                }
                for a in self.instances
            ],
        }


# ---------------------------------------------------------------------------
# schema parsing


def _require(record: dict, key: str, kinds: tuple[type, ...], locator: str) -> Any:
    if key not in record:
        raise ParseError(locator, f"missing required field '{key}'")
    value = record[key]
    if not isinstance(value, kinds):
        raise ParseError(f"{locator}.{key}", f"expected {kinds}, got {type(value).__name__}")
    return value


def _parse_point_list(raw: Any, locator: str, minimum: int) -> list[Point]:
    if not isinstance(raw, list) or len(raw) < minimum:
        raise ParseError(locator, f"expected a list of at least {minimum} [x, y] points")
    pts = []
    for i, p in enumerate(raw):
        if not isinstance(p, (list, tuple)) or len(p) != 2:
            raise ParseError(f"{locator}[{i}]", "expected [x, y]")
        pts.append((float(p[0]), float(p[1])))
    return pts


def _parse_image(raw: dict, locator: str) -> ImageRecord:
    geotag = raw.get("geotag")
    if geotag is not None:
        if not isinstance(geotag, (list, tuple)) or len(geotag) != 2:
            raise ParseError(f"{locator}.geotag", "expected [easting, northing] or null")
        geotag = (float(geotag[0]), float(geotag[1]))
    return ImageRecord(
        id=_require(raw, "id", (int,), locator),
        width=_require(raw, "width", (int,), locator),
        height=_require(raw, "height", (int,), locator),
        uri=_require(raw, "file_name", (str,), locator),
        geotag=geotag,
    )


def _parse_category(raw: dict, locator: str) -> Category:
    template = raw.get("template")
    if template is not None:
        points = _parse_point_list(template.get("points"), f"{locator}.template.points", 3)
        size = template.get("size")
        if not isinstance(size, (list, tuple)) or len(size) != 2:
            raise ParseError(f"{locator}.template.size", "expected [width, height]")
        template = Template(points=points, size=(float(size[0]), float(size[1])))
    return Category(
        id=_require(raw, "id", (int,), locator),
        name=_require(raw, "name", (str,), locator),
        has_geometry=bool(raw.get("has_geometry", template is not None)),
        template=template,
    )


def _parse_annotation(raw: dict, locator: str, images: dict[int, ImageRecord]) -> Instance:
    polygon = _parse_point_list(_require(raw, "polygon", (list,), locator), f"{locator}.polygon", 3)
    polygon = normalize_winding(polygon)
    image_id = _require(raw, "image_id", (int,), locator)
    image = images.get(image_id)
    if image is None:
        raise IntegrityError(f"{locator}: unknown image {image_id}")
    bbox = polygon_bbox(polygon, (image.width, image.height))
    if "bbox" in raw and raw["bbox"] is not None:
        stored = tuple(float(v) for v in raw["bbox"])
        if stored != bbox:
            raise IntegrityError(
                f"{locator}: stored bbox {stored} does not match polygon hull {bbox}"
            )
    difficult = is_difficult(bbox)
    if "difficult" in raw and bool(raw["difficult"]) != difficult:
        logger.warning(
            "%s: stored difficult=%s disagrees with %s px rule; using recomputed value %s",
            locator,
            raw["difficult"],
            DIFFICULT_MIN_SIDE,
            difficult,
        )
    poid = raw.get("physical_object_id")
    return Instance(
        id=_require(raw, "id", (int,), locator),
        image_id=image_id,
        category_id=_require(raw, "category_id", (int,), locator),
        polygon=polygon,
        bbox=bbox,
        difficult=difficult,
        physical_object_id=int(poid) if poid is not None else None,
    )


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset JSON file.

    Difficult flags are recomputed from the size rule (stored mismatches are
    logged as warnings), polygon winding is normalized to counter-clockwise,
    and stored bboxes must match the recomputed polygon hull exactly.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(str(path), f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(str(path), "top level must be an object")
    for key in ("images", "categories", "annotations"):
        if not isinstance(doc.get(key), list):
            raise ParseError(str(path), f"missing or non-list '{key}' section")

    images = [_parse_image(raw, f"images[{i}]") for i, raw in enumerate(doc["images"])]
    by_id = {im.id: im for im in images}
    if len(by_id) != len(images):
        raise IntegrityError("duplicate image ids")
    categories = [_parse_category(raw, f"categories[{i}]") for i, raw in enumerate(doc["categories"])]
    instances = [
        _parse_annotation(raw, f"annotations[{i}]", by_id)
        for i, raw in enumerate(doc["annotations"])
    ]
    ds = Dataset(images=images, categories=categories, instances=instances)
    ds.validate()
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset to JSON; refuses datasets violating invariants.

    Output is byte-deterministic (sorted keys, fixed separators), so saving
    the same dataset twice yields identical files.
    """
    ds.validate()
    path = Path(path)
    payload = json.dumps(ds.to_json_dict(), sort_keys=True, indent=1, separators=(",", ": "))
    path.write_text(payload + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# category criteria


@dataclass
class CategoryCriterion:
    category_id: int
    name: str
    total_instances: int
    compliant_instances: int  # bbox min side >= DIFFICULT_MIN_SIDE
    ok: bool


@dataclass
class CriteriaReport:
    per_category: list[CategoryCriterion]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.per_category)

    @property
    def failing(self) -> list[CategoryCriterion]:
        return [c for c in self.per_category if not c.ok]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "categories": [
                {
                    "category_id": c.category_id,
                    "name": c.name,
                    "total_instances": c.total_instances,
                    "compliant_instances": c.compliant_instances,
                    "ok": c.ok,
                }
                for c in self.per_category
            ],
        }


def validate_category_criteria(
    ds: Dataset,
    min_instances: int = MIN_INSTANCES_PER_CATEGORY,
    min_size: float = DIFFICULT_MIN_SIDE,
) -> CriteriaReport:
    """Check that every category has enough usable instances.

    A category passes when at least ``min_instances`` of its instances have a
    bbox of at least ``min_size`` px on the shorter side.  Both clauses
    matter: a category with many tiny instances fails.
    """
    counts: dict[int, int] = {c.id: 0 for c in ds.categories}
    compliant: dict[int, int] = {c.id: 0 for c in ds.categories}
    for inst in ds.instances:
        counts[inst.category_id] += 1
        if not is_difficult(inst.bbox, min_size):
            compliant[inst.category_id] += 1
    rows = [
        CategoryCriterion(
            category_id=c.id,
            name=c.name,
            total_instances=counts[c.id],
            compliant_instances=compliant[c.id],
            ok=compliant[c.id] >= min_instances,
        )
        for c in sorted(ds.categories, key=lambda c: c.id)
    ]
    return CriteriaReport(per_category=rows)
