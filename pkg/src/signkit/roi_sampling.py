"""Training-ROI selection strategies and detection-stage budgets.

These operate on candidate regions exported by any external detector (for
example over the line-delimited JSON dump documented in docs/formats.md);
nothing here computes losses or gradients.

Strategies:

* hard-example selection: rank candidates by loss, separately for
  foreground and background, and keep the top of each pool;
* per-object balanced selection: give every annotated object the same
  number of ROIs so large objects cannot dominate a training step;
* background down-weighting: constant 0.01 (proposal stage) or 0.1
  (classification stage) weights on background regions, 1.0 on foreground;
* greedy NMS and the detection-stage pass-through budget of 10000 regions
  per pyramid level before NMS with 2000 retained after.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from signkit.errors import SignkitError

DEFAULT_NMS_IOU = 0.7
DEFAULT_ROI_BUDGET = 256
PRE_NMS_TOP_PER_LEVEL = 10000
POST_MERGE_KEEP = 2000
OHEM_POOL_SIZE = 2000

RPN_BACKGROUND_WEIGHT = 0.01
CLASSIFIER_BACKGROUND_WEIGHT = 0.1
FOREGROUND_WEIGHT = 1.0


@dataclass
class RoiCandidate:
    box: tuple[float, float, float, float]  # (x, y, w, h)
    objectness: float | None = None
    loss: float | None = None
    category_id: int | None = None  # None marks a background candidate
    assigned_gt: int | None = None
    level: int = 0
    image_id: int | None = None

    def __post_init__(self):
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise SignkitError(f"candidate box must have positive extent, got {self.box}")
        if self.loss is not None and self.loss < 0:
            raise SignkitError(f"loss must be nonnegative, got {self.loss}")

    @property
    def is_foreground(self) -> bool:
        return self.category_id is not None

    def to_json_dict(self) -> dict:
        return {
            "box": list(self.box),
            "objectness": self.objectness,
            "loss": self.loss,
            "category_id": self.category_id,
            "assigned_gt": self.assigned_gt,
            "level": self.level,
            "image_id": self.image_id,
        }

    @classmethod
    def from_json_dict(cls, raw: Mapping) -> "RoiCandidate":
        return cls(
            box=tuple(float(v) for v in raw["box"]),
            objectness=raw.get("objectness"),
            loss=raw.get("loss"),
            category_id=raw.get("category_id"),
            assigned_gt=raw.get("assigned_gt"),
            level=int(raw.get("level", 0)),
            image_id=raw.get("image_id"),
        )


@dataclass(frozen=True)
class WeightedRoi:
    candidate: RoiCandidate
    weight: float

    def __post_init__(self):
        if self.weight <= 0:
            raise SignkitError("weight must be positive")


def read_candidates_jsonl(path: str | Path) -> list[RoiCandidate]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(RoiCandidate.from_json_dict(json.loads(line)))
    return out


def write_candidates_jsonl(candidates: Iterable[RoiCandidate], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cand in candidates:
            fh.write(json.dumps(cand.to_json_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# selection strategies


def ohem_select(
    candidates: Sequence[RoiCandidate],
    fg_budget: int,
    bg_budget: int,
    min_loss: float | None = None,
) -> list[RoiCandidate]:
    """Keep the hardest candidates: top ``fg_budget`` foreground and top
    ``bg_budget`` background regions by loss.

    Pools are ranked independently so a step always sees both positives and
    negatives.  Ties are broken by input position (earlier wins).  The
    optional ``min_loss`` drops easy candidates even inside the budget.
    """
    if fg_budget < 0 or bg_budget < 0:
        raise SignkitError("budgets must be nonnegative")
    for i, cand in enumerate(candidates):
        if cand.loss is None:
            raise SignkitError(f"candidate {i} has no loss; OHEM requires losses")

    def top_by_loss(pool: list[tuple[int, RoiCandidate]], budget: int) -> list[tuple[int, RoiCandidate]]:
        ranked = sorted(pool, key=lambda item: (-item[1].loss, item[0]))
        if min_loss is not None:
            ranked = [item for item in ranked if item[1].loss >= min_loss]
        return ranked[:budget]

    indexed = list(enumerate(candidates))
    fg = top_by_loss([item for item in indexed if item[1].is_foreground], fg_budget)
    bg = top_by_loss([item for item in indexed if not item[1].is_foreground], bg_budget)
    return [cand for _, cand in fg] + [cand for _, cand in bg]


def balanced_select(
    candidates: Sequence[RoiCandidate],
    total_budget: int,
    rng: np.random.Generator,
) -> list[RoiCandidate]:
    """Select the same number of ROIs for every assigned object.

    The budget is split evenly across the distinct ``assigned_gt`` objects
    (floor quota, remainder round-robin in ascending object id).  Objects
    with fewer ROIs than their quota contribute everything they have and the
    surplus is redistributed, again round-robin, to objects that still have
    spare candidates.  Within one object the choice is uniform at random
    from the supplied generator.
    """
    if total_budget <= 0:
        raise SignkitError("total_budget must be positive")
    groups: dict[int, list[RoiCandidate]] = {}
    for cand in candidates:
        if cand.assigned_gt is not None:
            groups.setdefault(cand.assigned_gt, []).append(cand)
    if not groups:
        raise SignkitError("no candidates carry an assigned object")

    object_ids = sorted(groups)
    budget = min(total_budget, sum(len(g) for g in groups.values()))
    base, remainder = divmod(budget, len(object_ids))
    quota = {oid: base + (1 if i < remainder else 0) for i, oid in enumerate(object_ids)}

    # waterfill: cap quotas at availability, hand surplus to objects with room
    allocated = {oid: min(quota[oid], len(groups[oid])) for oid in object_ids}
    surplus = budget - sum(allocated.values())
    while surplus > 0:
        progressed = False
        for oid in object_ids:
            if surplus == 0:
                break
            if allocated[oid] < len(groups[oid]):
                allocated[oid] += 1
                surplus -= 1
                progressed = True
        if not progressed:
            break

    selected: list[RoiCandidate] = []
    for oid in object_ids:
        take = allocated[oid]
        pool = groups[oid]
        if take >= len(pool):
            selected.extend(pool)
        else:
            idx = rng.choice(len(pool), size=take, replace=False)
            selected.extend(pool[i] for i in sorted(idx))
    return selected


def assign_weights(selected: Sequence[RoiCandidate], stage: str) -> list[WeightedRoi]:
    """Attach loss weights: foreground 1.0, background 0.01 (rpn) / 0.1
    (classifier)."""
    if stage == "rpn":
        bg_weight = RPN_BACKGROUND_WEIGHT
    elif stage == "classifier":
        bg_weight = CLASSIFIER_BACKGROUND_WEIGHT
    else:
        raise SignkitError(f"stage must be 'rpn' or 'classifier', got {stage!r}")
    return [
        WeightedRoi(cand, FOREGROUND_WEIGHT if cand.is_foreground else bg_weight)
        for cand in selected
    ]


# ---------------------------------------------------------------------------
# NMS and detection-stage budgets


def box_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (n, 4) box arrays in (x, y, w, h) form."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0], a[:, 1]
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.maximum(
        0.0, np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    )
    ih = np.maximum(
        0.0, np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    )
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def nms(
    boxes: Sequence[Sequence[float]] | np.ndarray,
    scores: Sequence[float] | np.ndarray,
    iou_threshold: float = DEFAULT_NMS_IOU,
) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices.

    Boxes are visited in descending score order (ties: lower index first);
    each kept box suppresses every remaining box overlapping it strictly
    above ``iou_threshold``.  Output is ordered by score, so it is invariant
    to input permutation for distinct scores and idempotent in general.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise SignkitError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise SignkitError("boxes and scores length mismatch")
    if not np.all(np.isfinite(scores)):
        raise SignkitError("scores must be finite")
    if len(boxes) == 0:
        return []

    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    iou = box_iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    kept: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        suppressed |= iou[i] > iou_threshold
        suppressed[i] = True  # keep self out of future comparisons
    return kept


def _top_by_objectness(candidates: Sequence[RoiCandidate], keep: int) -> list[RoiCandidate]:
    for i, cand in enumerate(candidates):
        if cand.objectness is None:
            raise SignkitError(f"candidate {i} has no objectness score")
    ranked = sorted(enumerate(candidates), key=lambda item: (-item[1].objectness, item[0]))
    return [cand for _, cand in ranked[:keep]]


def _nms_candidates(candidates: list[RoiCandidate], iou_threshold: float) -> list[RoiCandidate]:
    if not candidates:
        return []
    boxes = np.array([c.box for c in candidates])
    scores = np.array([c.objectness for c in candidates])
    return [candidates[i] for i in nms(boxes, scores, iou_threshold)]


def pass_through(
    per_level: Mapping[int, Sequence[RoiCandidate]],
    pre_nms_top: int = PRE_NMS_TOP_PER_LEVEL,
    post_merge: int = POST_MERGE_KEEP,
    iou_threshold: float = DEFAULT_NMS_IOU,
) -> list[RoiCandidate]:
    """Detection-stage budget: per pyramid level keep the ``pre_nms_top``
    highest-objectness candidates, merge all levels, run NMS, and keep the
    ``post_merge`` best survivors."""
    merged: list[RoiCandidate] = []
    for level in sorted(per_level):
        merged.extend(_top_by_objectness(per_level[level], pre_nms_top))
    survivors = _nms_candidates(merged, iou_threshold)
    return survivors[:post_merge]


def ohem_candidate_pool(
    candidates: Sequence[RoiCandidate],
    pool_size: int = OHEM_POOL_SIZE,
    iou_threshold: float = DEFAULT_NMS_IOU,
) -> list[RoiCandidate]:
    """Candidate pool whose losses hard-example selection will rank: the
    top ``pool_size`` regions by objectness, deduplicated by NMS."""
    top = _top_by_objectness(candidates, pool_size)
    return _nms_candidates(top, iou_threshold)
