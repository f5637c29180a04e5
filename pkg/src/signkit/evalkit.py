"""Detection evaluation: IoU matching with ignore rules, AP/mAP, recall.

Ground truths that are flagged difficult or fall below a minimum pixel size
are "ignored": detections matched to them are dropped from both the true-
and false-positive counts, and the ground truths themselves never count as
missed.  This prevents penalizing a detector for finding (or not finding)
signs that annotation policy deems too small.

AP is the area under the monotone precision envelope of the PR curve; mAP
averages it over categories, either at a single IoU threshold (0.50) or over
the 0.50:0.95 range in 0.05 steps.  Both variants default to exact
("all points") envelope integration so that averaging over stricter
thresholds can never exceed the single-threshold value; the 101-point
sampled variant is available as an option.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from signkit.dataset import DIFFICULT_MIN_SIDE, Dataset
from signkit.errors import SignkitError

logger = logging.getLogger(__name__)

Box = tuple[float, float, float, float]

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
MAX_RECALL_SCORE_THRESHOLD = 0.01
# Minimum ground-truth size: 30 px for the dense-annotation protocol, 50 px
# for the sparse-benchmark protocol; both selectable on the CLI.
DEFAULT_MIN_SIZE = DIFFICULT_MIN_SIDE
STSD_MIN_SIZE = 50.0


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise SignkitError(f"score must be in [0, 1], got {self.score}")
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise SignkitError(f"detection box must have positive extent, got {self.box}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    category_id: int
    box: Box
    difficult: bool = False


def dataset_ground_truths(ds: Dataset) -> list[GroundTruth]:
    return [
        GroundTruth(
            image_id=a.image_id, category_id=a.category_id, box=tuple(a.bbox), difficult=a.difficult
        )
        for a in ds.instances
    ]


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                raw = json.loads(line)
                out.append(
                    Detection(
                        image_id=int(raw["image_id"]),
                        category_id=int(raw["category_id"]),
                        box=tuple(float(v) for v in raw["box"]),
                        score=float(raw["score"]),
                    )
                )
    return out


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection-over-union of two (x, y, w, h) boxes."""
    ax0, ay0, aw, ah = box_a
    bx0, by0, bw, bh = box_b
    iw = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    ih = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    """Outcome of matching one (image, category) slice.

    ``det_status`` holds 'tp', 'fp' or 'ignored' per detection in descending
    score order alongside ``det_order`` (indices into the input list);
    ``det_matched_gt`` gives the matched ground-truth index or None.
    """

    det_order: list[int]
    det_status: list[str]
    det_matched_gt: list[int | None]
    tp: int
    fp: int
    fn: int
    ignored_gt: int
    n_positive: int  # non-ignored ground truths


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float,
    min_size: float = DEFAULT_MIN_SIZE,
) -> MatchResult:
    """Greedy one-to-one matching of one image/category slice.

    Detections are visited in descending score order (ties: input order) and
    matched to the unmatched ground truth of highest IoU at or above the
    threshold.  Non-ignored ground truths are preferred; a detection whose
    only match is an ignored ground truth (difficult or smaller than
    ``min_size``) is excluded from the TP/FP counts entirely.  Unmatched
    non-ignored ground truths count as false negatives; unmatched ignored
    ones count nowhere.
    """
    ignore = [g.difficult or min(g.box[2], g.box[3]) < min_size for g in gts]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_taken = [False] * len(gts)

    statuses: list[str] = []
    matched: list[int | None] = []
    for di in order:
        best_real, best_real_iou = None, 0.0
        best_ign, best_ign_iou = None, 0.0
        for gi, gt in enumerate(gts):
            if gt_taken[gi]:
                continue
            overlap = iou(dets[di].box, gt.box)
            if overlap < iou_threshold:
                continue
            if ignore[gi]:
                if overlap > best_ign_iou:
                    best_ign, best_ign_iou = gi, overlap
            else:
                if overlap > best_real_iou:
                    best_real, best_real_iou = gi, overlap
        if best_real is not None:
            gt_taken[best_real] = True
            statuses.append("tp")
            matched.append(best_real)
        elif best_ign is not None:
            gt_taken[best_ign] = True
            statuses.append("ignored")
            matched.append(best_ign)
        else:
            statuses.append("fp")
            matched.append(None)

    n_positive = sum(1 for flag in ignore if not flag)
    tp = statuses.count("tp")
    fp = statuses.count("fp")
    return MatchResult(
        det_order=order,
        det_status=statuses,
        det_matched_gt=matched,
        tp=tp,
        fp=fp,
        fn=n_positive - tp,
        ignored_gt=sum(ignore),
        n_positive=n_positive,
    )


def _scored_flags(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float,
    min_size: float,
) -> tuple[list[tuple[float, bool]], int]:
    """Match per image and pool (score, is_tp) pairs for one category.

    Detections matched to ignored ground truths are dropped.  Returns the
    pooled pairs plus the number of non-ignored ground truths.
    """
    images = sorted({d.image_id for d in dets} | {g.image_id for g in gts})
    pairs: list[tuple[float, bool]] = []
    n_positive = 0
    for image_id in images:
        dslice = [d for d in dets if d.image_id == image_id]
        gslice = [g for g in gts if g.image_id == image_id]
        result = match_detections(dslice, gslice, iou_threshold, min_size)
        n_positive += result.n_positive
        for di, status in zip(result.det_order, result.det_status):
            if status != "ignored":
                pairs.append((dslice[di].score, status == "tp"))
    return pairs, n_positive


# ---------------------------------------------------------------------------
# precision/recall and AP


@dataclass
class PRCurve:
    """Cumulative precision/recall points in descending score order."""

    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.recall) < 0):
            raise SignkitError("recall must be nondecreasing along the curve")


def pr_curve(scored_flags: Sequence[tuple[float, bool]], n_positive: int) -> PRCurve:
    """Build the PR curve from pooled (score, is_tp) pairs."""
    if n_positive <= 0:
        raise SignkitError("PR curve needs at least one non-ignored ground truth")
    ordered = sorted(range(len(scored_flags)), key=lambda i: (-scored_flags[i][0], i))
    tp_cum = 0
    recalls, precisions, scores = [], [], []
    for rank, idx in enumerate(ordered, start=1):
        score, is_tp = scored_flags[idx]
        tp_cum += int(is_tp)
        recalls.append(tp_cum / n_positive)
        precisions.append(tp_cum / rank)
        scores.append(score)
    return PRCurve(
        recall=np.asarray(recalls), precision=np.asarray(precisions), scores=np.asarray(scores)
    )


def average_precision(
    scored_flags: Sequence[tuple[float, bool]],
    n_positive: int,
    interpolation: str = "all_points",
) -> float:
    """Area under the monotone precision envelope, as a fraction in [0, 1].

    ``all_points`` integrates the envelope exactly over every recall step;
    ``coco101`` averages the envelope at the 101 recall samples
    0.00, 0.01, ..., 1.00.
    """
    if n_positive <= 0:
        raise SignkitError("AP undefined without non-ignored ground truths")
    if not scored_flags:
        return 0.0
    curve = pr_curve(scored_flags, n_positive)
    # monotone envelope: best precision at or beyond each recall level
    envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]

    if interpolation == "all_points":
        ap = 0.0
        prev_recall = 0.0
        for r, p in zip(curve.recall, envelope):
            if r > prev_recall:
                ap += (r - prev_recall) * p
                prev_recall = r
        return ap
    if interpolation == "coco101":
        samples = np.linspace(0.0, 1.0, 101)
        # precision at recall >= s, 0 where unreachable
        values = np.zeros_like(samples)
        for i, s in enumerate(samples):
            reachable = curve.recall >= s - 1e-12
            if reachable.any():
                values[i] = envelope[np.argmax(reachable)]
        return float(values.mean())
    raise SignkitError(f"unknown interpolation {interpolation!r}")


# ---------------------------------------------------------------------------
# aggregate metrics


def _split_by_category(
    dets: Sequence[Detection], gts: Sequence[GroundTruth]
) -> dict[int, tuple[list[Detection], list[GroundTruth]]]:
    categories = sorted({d.category_id for d in dets} | {g.category_id for g in gts})
    return {
        c: (
            [d for d in dets if d.category_id == c],
            [g for g in gts if g.category_id == c],
        )
        for c in categories
    }


def map_at(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresholds: Sequence[float],
    min_size: float = DEFAULT_MIN_SIZE,
    interpolation: str = "all_points",
) -> dict[int, dict[float, float]]:
    """AP per category per IoU threshold, as fractions.

    Categories with no non-ignored ground truth have no defined AP; they are
    omitted (and logged) rather than averaged as zero.
    """
    out: dict[int, dict[float, float]] = {}
    for category, (cdets, cgts) in _split_by_category(dets, gts).items():
        per_thr: dict[float, float] = {}
        for thr in iou_thresholds:
            flags, n_positive = _scored_flags(cdets, cgts, thr, min_size)
            if n_positive == 0:
                logger.warning(
                    "category %d has no usable ground truth; AP undefined", category
                )
                per_thr = {}
                break
            per_thr[thr] = average_precision(flags, n_positive, interpolation)
        if per_thr:
            out[category] = per_thr
    return out


def max_recall(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    score_threshold: float = MAX_RECALL_SCORE_THRESHOLD,
    iou_threshold: float = 0.5,
    min_size: float = DEFAULT_MIN_SIZE,
) -> float:
    """Best recall attainable keeping every detection scored at or above
    ``score_threshold``, averaged over categories, as a percentage.

    The complement (100 - max recall) is the pipeline's irreducible miss
    rate: ground truths with no surviving detection at any operating point.
    """
    kept = [d for d in dets if d.score >= score_threshold]
    recalls = []
    for category, (cdets, cgts) in _split_by_category(kept, gts).items():
        total_tp = 0
        total_pos = 0
        for image_id in sorted({g.image_id for g in cgts} | {d.image_id for d in cdets}):
            result = match_detections(
                [d for d in cdets if d.image_id == image_id],
                [g for g in cgts if g.image_id == image_id],
                iou_threshold,
                min_size,
            )
            total_tp += result.tp
            total_pos += result.n_positive
        if total_pos > 0:
            recalls.append(total_tp / total_pos)
    return 100.0 * float(np.mean(recalls)) if recalls else 0.0


def best_f_measure(curve: PRCurve) -> tuple[float, float, float]:
    """Operating point (precision, recall, F) maximizing the harmonic mean.

    Ties are broken toward higher recall.  The false-positive rate at this
    point is 1 - precision and the miss rate is 1 - recall.
    """
    if len(curve.recall) == 0:
        raise SignkitError("empty PR curve")
    best = (0.0, 0.0, 0.0)
    for p, r in zip(curve.precision, curve.recall):
        f = 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0
        if f > best[2] + 1e-12 or (abs(f - best[2]) <= 1e-12 and r > best[1]):
            best = (p, r, f)
    return best


def proposal_recall(
    proposals: Mapping[int, Sequence[tuple[Box, float]]],
    gts: Sequence[GroundTruth],
    top_n_list: Sequence[int],
    iou_list: Sequence[float],
    size_band: tuple[float, float] | None = None,
    weight_by_instances: bool = False,
) -> dict[tuple[int, float], float]:
    """Recall of class-agnostic proposals over a (top-N, IoU) grid.

    ``proposals`` maps image id to (box, objectness) pairs.  For each N the
    top-N proposals per image are kept; a ground truth counts as covered
    when any kept proposal overlaps it at or above the IoU threshold.
    Difficult ground truths are excluded; ``size_band`` further restricts
    the denominator to ground truths whose shorter bbox side lies in
    [low, high).  Recall is computed per category and averaged with equal
    category weight (or weighted by instance count when requested), as a
    percentage.
    """

    def usable(g: GroundTruth) -> bool:
        if g.difficult:
            return False
        if size_band is not None:
            side = min(g.box[2], g.box[3])
            if not (size_band[0] <= side < size_band[1]):
                return False
        return True

    valid = [g for g in gts if usable(g)]
    ranked: dict[int, list[tuple[Box, float]]] = {
        img: sorted(items, key=lambda bs: -bs[1]) for img, items in proposals.items()
    }
    categories = sorted({g.category_id for g in valid})

    grid: dict[tuple[int, float], float] = {}
    for n in top_n_list:
        top: dict[int, list[Box]] = {img: [b for b, _ in items[:n]] for img, items in ranked.items()}
        for thr in iou_list:
            per_cat: list[tuple[int, int]] = []
            for category in categories:
                cgts = [g for g in valid if g.category_id == category]
                covered = 0
                for g in cgts:
                    boxes = top.get(g.image_id, [])
                    if any(iou(b, g.box) >= thr for b in boxes):
                        covered += 1
                per_cat.append((covered, len(cgts)))
            if weight_by_instances:
                total = sum(n_c for _, n_c in per_cat)
                recall = sum(c for c, _ in per_cat) / total if total else 0.0
            else:
                ratios = [c / n_c for c, n_c in per_cat if n_c > 0]
                recall = float(np.mean(ratios)) if ratios else 0.0
            grid[(int(n), float(thr))] = 100.0 * recall
    return grid


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    """Aggregate evaluation results; mAP and recall values are percentages."""

    per_category_ap: dict[int, dict[float, float]]  # fractions, by threshold
    map50: float
    map50_95: float
    max_recall: float
    best_f_precision: float
    best_f_recall: float
    best_f: float
    tp: int
    fp: int
    fn: int
    ignored: int
    iou_thresholds: tuple[float, ...] = COCO_THRESHOLDS
    min_size: float = DEFAULT_MIN_SIZE
    interpolation: str = "all_points"

    def __post_init__(self):
        if not (0.0 <= self.map50 <= 100.0 and 0.0 <= self.map50_95 <= 100.0):
            raise SignkitError("mAP values must lie in [0, 100]")
        if self.map50_95 > self.map50 + 1e-9:
            raise SignkitError("mAP over 0.50:0.95 cannot exceed mAP at 0.50")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "map50": self.map50,
            "map50_95": self.map50_95,
            "max_recall": self.max_recall,
            "miss_rate": 100.0 - self.max_recall,
            "best_f": {
                "precision": self.best_f_precision,
                "recall": self.best_f_recall,
                "f_measure": self.best_f,
                "false_positive_rate": 1.0 - self.best_f_precision,
                "miss_rate": 1.0 - self.best_f_recall,
            },
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "ignored": self.ignored},
            "per_category_ap": {
                str(cat): {f"{thr:.2f}": ap for thr, ap in sorted(aps.items())}
                for cat, aps in sorted(self.per_category_ap.items())
            },
            "settings": {
                "iou_thresholds": list(self.iou_thresholds),
                "min_size": self.min_size,
                "interpolation": self.interpolation,
            },
        }

    def to_text_table(self) -> str:
        lines = [
            f"{'metric':<14}{'value':>8}",
            f"{'mAP50':<14}{self.map50:>8.1f}",
            f"{'mAP50:95':<14}{self.map50_95:>8.1f}",
            f"{'max recall':<14}{self.max_recall:>8.1f}",
            f"{'precision':<14}{100.0 * self.best_f_precision:>8.1f}",
            f"{'recall':<14}{100.0 * self.best_f_recall:>8.1f}",
            f"{'F-measure':<14}{100.0 * self.best_f:>8.1f}",
            f"{'TP/FP/FN':<14}{self.tp:>4}/{self.fp}/{self.fn}",
        ]
        return "\n".join(lines)


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    min_size: float = DEFAULT_MIN_SIZE,
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    interpolation: str = "all_points",
) -> EvalReport:
    """Full evaluation: mAP50, mAP over the threshold range, max recall,
    and the category-averaged best-F operating point at IoU 0.50."""
    if 0.5 not in iou_thresholds:
        raise SignkitError("threshold range must include 0.50")
    ap_table = map_at(dets, gts, iou_thresholds, min_size, interpolation)
    if ap_table:
        map50 = 100.0 * float(np.mean([aps[0.5] for aps in ap_table.values()]))
        map50_95 = 100.0 * float(
            np.mean([np.mean([aps[t] for t in iou_thresholds]) for aps in ap_table.values()])
        )
    else:
        map50 = map50_95 = 0.0

    # best-F point and counts, per category at IoU 0.50
    best_points = []
    tp = fp = fn = ignored = 0
    for category, (cdets, cgts) in _split_by_category(dets, gts).items():
        flags, n_positive = _scored_flags(cdets, cgts, 0.5, min_size)
        for image_id in sorted({g.image_id for g in cgts} | {d.image_id for d in cdets}):
            result = match_detections(
                [d for d in cdets if d.image_id == image_id],
                [g for g in cgts if g.image_id == image_id],
                0.5,
                min_size,
            )
            tp += result.tp
            fp += result.fp
            fn += result.fn
            ignored += result.ignored_gt
        if n_positive > 0 and flags:
            best_points.append(best_f_measure(pr_curve(flags, n_positive)))
        elif n_positive > 0:
            best_points.append((0.0, 0.0, 0.0))

    if best_points:
        precision = float(np.mean([p for p, _, _ in best_points]))
        recall = float(np.mean([r for _, r, _ in best_points]))
        f_measure = float(np.mean([f for _, _, f in best_points]))
    else:
        precision = recall = f_measure = 0.0

    return EvalReport(
        per_category_ap=ap_table,
        map50=map50,
        map50_95=map50_95,
        max_recall=max_recall(dets, gts, MAX_RECALL_SCORE_THRESHOLD, 0.5, min_size),
        best_f_precision=precision,
        best_f_recall=recall,
        best_f=f_measure,
        tp=tp,
        fp=fp,
        fn=fn,
        ignored=ignored,
        iou_thresholds=tuple(iou_thresholds),
        min_size=min_size,
        interpolation=interpolation,
    )
