"""Geo-clustered train/test splitting.

Images taken within 50 m of each other usually show the same physical
signs, so they must land on the same side of the split.  Clustering is
single linkage: two images share a cluster when a chain of pairwise
distances, each at most the radius, connects them.  Whole clusters are then
assigned so that every category places at least the requested fraction of
its instances in the test set.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.spatial import cKDTree

from signkit.dataset import Dataset, ImageRecord
from signkit.errors import InfeasibleSplitError

logger = logging.getLogger(__name__)

CLUSTER_RADIUS_M = 50.0
DEFAULT_TEST_FRACTION = 0.25
DEFAULT_MAX_REPAIR_ITERS = 10000


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def cluster_by_location(
    images: Sequence[ImageRecord], radius: float = CLUSTER_RADIUS_M
) -> list[list[int]]:
    """Single-linkage clusters of image ids within chain distance ``radius``.

    Images without a geotag become singleton clusters (warned once); the
    physical-object guarantee of the split does not cover them.  Clusters
    are returned sorted by their smallest image id, members sorted too.
    """
    tagged = [im for im in images if im.geotag is not None]
    untagged = [im for im in images if im.geotag is None]
    if untagged:
        logger.warning(
            "%d images lack geotags and form singleton clusters; images of the "
            "same physical sign may straddle the split",
            len(untagged),
        )

    clusters: list[list[int]] = [[im.id] for im in untagged]
    if tagged:
        coords = np.array([im.geotag for im in tagged], dtype=np.float64)
        uf = _UnionFind(len(tagged))
        tree = cKDTree(coords)
        for a, b in tree.query_pairs(r=radius):
            uf.union(a, b)
        groups: dict[int, list[int]] = {}
        for i, im in enumerate(tagged):
            groups.setdefault(uf.find(i), []).append(im.id)
        clusters.extend(sorted(ids) for ids in groups.values())
    return sorted(clusters, key=lambda ids: ids[0])


@dataclass
class SplitResult:
    train_image_ids: list[int]
    test_image_ids: list[int]
    cluster_of_image: dict[int, int]
    category_counts: dict[int, tuple[int, int]]  # category -> (train, test) instances
    seed: int
    test_fraction: float

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "train_images": sorted(self.train_image_ids),
            "test_images": sorted(self.test_image_ids),
            "clusters": {str(k): v for k, v in sorted(self.cluster_of_image.items())},
            "category_counts": {
                str(c): {"train": t, "test": s}
                for c, (t, s) in sorted(self.category_counts.items())
            },
            "seed": self.seed,
            "test_fraction": self.test_fraction,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "SplitResult":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            train_image_ids=list(raw["train_images"]),
            test_image_ids=list(raw["test_images"]),
            cluster_of_image={int(k): v for k, v in raw["clusters"].items()},
            category_counts={
                int(c): (v["train"], v["test"]) for c, v in raw["category_counts"].items()
            },
            seed=int(raw["seed"]),
            test_fraction=float(raw["test_fraction"]),
        )


def split_dataset(
    ds: Dataset,
    test_fraction: float = DEFAULT_TEST_FRACTION,
    seed: int = 0,
    max_repair_iters: int = DEFAULT_MAX_REPAIR_ITERS,
    radius: float = CLUSTER_RADIUS_M,
) -> SplitResult:
    """Split a dataset into train/test sets by whole location clusters.

    Clusters are shuffled with the seeded generator and assigned to the test
    side until it holds roughly ``test_fraction`` of the images.  A repair
    loop then moves further train clusters to test, always the cluster that
    most helps the most-deficient category, until every category has at
    least ``ceil(test_fraction * n)`` test instances; categories must also
    keep at least one training instance.  Deterministic for a given seed.
    """
    if not (0.0 < test_fraction < 1.0):
        raise InfeasibleSplitError(f"test_fraction must be in (0, 1), got {test_fraction}")
    clusters = cluster_by_location(ds.images, radius)
    cluster_of_image = {img: ci for ci, ids in enumerate(clusters) for img in ids}

    # per-cluster instance counts by category
    cat_in_cluster: list[dict[int, int]] = [dict() for _ in clusters]
    totals: dict[int, int] = {}
    for inst in ds.instances:
        ci = cluster_of_image[inst.image_id]
        cat_in_cluster[ci][inst.category_id] = cat_in_cluster[ci].get(inst.category_id, 0) + 1
        totals[inst.category_id] = totals.get(inst.category_id, 0) + 1
    required = {c: math.ceil(test_fraction * n) for c, n in totals.items()}

    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(clusters)))

    target_images = test_fraction * len(ds.images)
    in_test = [False] * len(clusters)
    test_images = 0
    for ci in order:
        if test_images >= target_images:
            break
        in_test[ci] = True
        test_images += len(clusters[ci])

    def test_counts() -> dict[int, int]:
        counts = {c: 0 for c in totals}
        for ci, flag in enumerate(in_test):
            if flag:
                for c, n in cat_in_cluster[ci].items():
                    counts[c] += n
        return counts

    # every category must keep at least one training instance
    for c, n in totals.items():
        holders = [ci for ci in range(len(clusters)) if cat_in_cluster[ci].get(c, 0)]
        if len(holders) == 1:
            raise InfeasibleSplitError(
                f"category {c}: all {n} instances sit in one cluster; cannot satisfy "
                "both test share and training availability",
                blocking_categories=[c],
            )

    counts = test_counts()
    for c in sorted(totals):
        if counts[c] == totals[c]:
            # base assignment swallowed the category whole; free its smallest
            # holder cluster for training (deficits this causes are repaired below)
            holders = sorted(
                (ci for ci in range(len(clusters)) if in_test[ci] and cat_in_cluster[ci].get(c, 0)),
                key=lambda ci: (len(clusters[ci]), ci),
            )
            freed = holders[0]
            in_test[freed] = False
            for cc, n in cat_in_cluster[freed].items():
                counts[cc] -= n
    for _ in range(max_repair_iters):
        deficits = {c: required[c] - counts[c] for c in totals if counts[c] < required[c]}
        if not deficits:
            break
        worst = min(deficits, key=lambda c: (-deficits[c], c))
        candidates = [
            ci
            for ci in range(len(clusters))
            if not in_test[ci] and cat_in_cluster[ci].get(worst, 0) > 0
        ]
        # never strand a category without training instances
        def safe(ci: int) -> bool:
            for c, n in cat_in_cluster[ci].items():
                train_left = totals[c] - counts[c] - n
                if train_left < 1:
                    return False
            return True

        candidates = [ci for ci in candidates if safe(ci)]
        if not candidates:
            raise InfeasibleSplitError(
                f"cannot raise test share of category {worst} to {required[worst]} "
                f"instances without stranding another category",
                blocking_categories=[worst],
            )
        best = max(candidates, key=lambda ci: (cat_in_cluster[ci].get(worst, 0), -ci))
        in_test[best] = True
        for c, n in cat_in_cluster[best].items():
            counts[c] += n
    else:
        deficits = sorted(c for c in totals if counts[c] < required[c])
        raise InfeasibleSplitError(
            f"repair budget exhausted with categories still deficient: {deficits}",
            blocking_categories=deficits,
        )

    train_ids = sorted(img for ci, ids in enumerate(clusters) if not in_test[ci] for img in ids)
    test_ids = sorted(img for ci, ids in enumerate(clusters) if in_test[ci] for img in ids)
    category_counts = {
        c: (totals[c] - counts[c], counts[c]) for c in sorted(totals)
    }
    return SplitResult(
        train_image_ids=train_ids,
        test_image_ids=test_ids,
        cluster_of_image=cluster_of_image,
        category_counts=category_counts,
        seed=seed,
        test_fraction=test_fraction,
    )
