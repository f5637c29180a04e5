"""Command-line interface orchestrating the full pipeline.

One binary with subcommands: validate, fit, augment, split, eval,
proposals, sample-rois.  Machine-readable JSON reports go to stdout (or the
file given with --out); human-readable tables and logs go to stderr.  Every
report embeds the tool version and the fully resolved configuration, and a
run with identical inputs, configuration and seed produces byte-identical
report JSON.

A JSON config file (--config) supplies defaults for any flag of the chosen
subcommand; explicit flags win.  All randomness derives from the single
--seed via sha256(purpose) so independent stages cannot accidentally share
streams.

Exit codes: 0 success, 1 validation/constraint failure, 2 usage error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

import signkit
from signkit import evalkit, roi_sampling
from signkit.dataset import load_dataset, save_dataset, validate_category_criteria
from signkit.distortion import DistortionModel, fit_distortion_model
from signkit.errors import ParseError, SignkitError
from signkit.evalkit import dataset_ground_truths, evaluate, proposal_recall, read_detections_jsonl
from signkit.images import load_rgba
from signkit.normalize import collect_distortion_stats
from signkit.splitter import SplitResult, split_dataset
from signkit.synthesize import augment_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """Seeded generator for one pipeline stage: SeedSequence(seed, sha256(purpose))."""
    digest = int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, digest]))


def derive_seed(seed: int, purpose: str) -> int:
    digest = int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:8], "little")
    return (seed * 0x9E3779B1 + digest) % (2**63)


def _emit(report: dict[str, Any], args: argparse.Namespace) -> None:
    payload = json.dumps(report, sort_keys=True, indent=1) + "\n"
    if getattr(args, "out", None):
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)


def _base_report(command: str, args: argparse.Namespace, skip: set[str] = frozenset()) -> dict:
    config = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in {"func", "config"} | set(skip) and not k.startswith("_")
    }
    return {"tool": "signkit", "version": signkit.__version__, "command": command, "config": config}


def _parse_float_list(text: str) -> list[float]:
    return [float(tok) for tok in str(text).split(",") if tok.strip()]


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in str(text).split(",") if tok.strip()]


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_validate(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    report_data = validate_category_criteria(ds, args.min_instances, args.min_size)
    report = _base_report("validate", args)
    report["dataset"] = {
        "images": len(ds.images),
        "categories": len(ds.categories),
        "instances": len(ds.instances),
    }
    report["criteria"] = report_data.to_json_dict()
    _emit(report, args)
    for row in report_data.failing:
        print(
            f"FAIL category {row.category_id} ({row.name}): "
            f"{row.compliant_instances} usable instances, need {args.min_instances}",
            file=sys.stderr,
        )
    return EXIT_OK if report_data.ok else EXIT_FAILURE


def cmd_fit(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    root = Path(args.dataset).parent

    stats = collect_distortion_stats(ds, lambda rec: load_rgba(root / rec.uri))
    model = fit_distortion_model(
        stats.angles,
        stats.brightness_by_category,
        stats.rectified_sizes,
        seed=derive_seed(args.seed, "fit"),
    )
    model.save(args.model_out)
    report = _base_report("fit", args)
    report["fit"] = {
        "rotation_samples": 0 if stats.angles is None else int(len(stats.angles)),
        "scale_samples": len(stats.rectified_sizes),
        "categories_with_brightness": len(stats.brightness_by_category),
        "instances_skipped": stats.skipped,
        "model_path": str(args.model_out),
    }
    _emit(report, args)
    return EXIT_OK


def cmd_augment(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    model = DistortionModel.load(args.model)
    backgrounds = sorted(
        p for p in Path(args.backgrounds).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not backgrounds:
        raise SignkitError(f"no background images under {args.backgrounds}")
    result = augment_dataset(
        ds,
        backgrounds,
        model,
        target_min=args.target_min,
        seed=derive_seed(args.seed, "augment"),
        image_root=Path(args.dataset).parent,
        out_dir=Path(args.out_dir),
    )
    delta_path = Path(args.out_dir) / "annotations.json"
    save_dataset(result.delta, delta_path)
    report = _base_report("augment", args)
    report["augment"] = {
        "new_images": len(result.delta.images),
        "new_instances": len(result.delta.instances),
        "per_category": {str(k): v for k, v in sorted(result.per_category_generated.items())},
        "annotations": str(delta_path),
    }
    _emit(report, args)
    print(
        f"generated {len(result.delta.instances)} instances over "
        f"{len(result.delta.images)} images",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    result = split_dataset(
        ds,
        test_fraction=args.test_fraction,
        seed=derive_seed(args.seed, "split"),
        radius=args.radius,
    )
    report = _base_report("split", args)
    report["split"] = result.to_json_dict()
    _emit(report, args)
    print(
        f"train {len(result.train_image_ids)} images / "
        f"test {len(result.test_image_ids)} images",
        file=sys.stderr,
    )
    return EXIT_OK


def _filter_side(ds, dets, split_path: str | None, side: str):
    gts = dataset_ground_truths(ds)
    if split_path is None:
        return dets, gts
    split = SplitResult.load(split_path)
    keep = set(split.test_image_ids if side == "test" else split.train_image_ids)
    return [d for d in dets if d.image_id in keep], [g for g in gts if g.image_id in keep]


def cmd_eval(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    dets = read_detections_jsonl(args.detections)
    dets, gts = _filter_side(ds, dets, args.split, args.side)
    report_obj = evaluate(
        dets,
        gts,
        min_size=args.min_size,
        interpolation=args.interpolation,
    )
    report = _base_report("eval", args)
    report["eval"] = report_obj.to_json_dict()
    if args.iou != 0.5:
        extra = evalkit.map_at(dets, gts, [args.iou], args.min_size, args.interpolation)
        report["eval"]["ap_at_requested_iou"] = {
            str(c): aps[args.iou] for c, aps in sorted(extra.items())
        }
    if args.pr_csv:
        _write_pr_csv(dets, gts, args)
    _emit(report, args)
    print(report_obj.to_text_table(), file=sys.stderr)
    return EXIT_OK


def _write_pr_csv(dets, gts, args) -> None:
    lines = ["category,score,recall,precision"]
    for category, (cdets, cgts) in sorted(evalkit._split_by_category(dets, gts).items()):
        flags, n_positive = evalkit._scored_flags(cdets, cgts, args.iou, args.min_size)
        if n_positive == 0 or not flags:
            continue
        curve = evalkit.pr_curve(flags, n_positive)
        for s, r, p in zip(curve.scores, curve.recall, curve.precision):
            lines.append(f"{category},{s:.6f},{r:.6f},{p:.6f}")
    Path(args.pr_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_proposals(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    gts = dataset_ground_truths(ds)
    proposals: dict[int, list[tuple[tuple[float, float, float, float], float]]] = {}
    with open(args.proposals, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            proposals.setdefault(int(raw["image_id"]), []).append(
                (tuple(float(v) for v in raw["box"]), float(raw["objectness"]))
            )
    band = tuple(_parse_float_list(args.size_band)) if args.size_band else None
    if band is not None and len(band) != 2:
        raise SignkitError("--size-band needs exactly two values: MIN,MAX")
    grid = proposal_recall(
        proposals,
        gts,
        top_n_list=_parse_int_list(args.top_n),
        iou_list=_parse_float_list(args.iou),
        size_band=band,
        weight_by_instances=args.weight_by_instances,
    )
    report = _base_report("proposals", args)
    report["proposal_recall"] = [
        {"top_n": n, "iou": thr, "recall": recall, "miss_rate": 100.0 - recall}
        for (n, thr), recall in sorted(grid.items())
    ]
    _emit(report, args)
    for row in report["proposal_recall"]:
        print(
            f"top {row['top_n']:>6} @ IoU {row['iou']:.2f}: recall {row['recall']:6.2f} %",
            file=sys.stderr,
        )
    return EXIT_OK


def cmd_sample_rois(args: argparse.Namespace) -> int:
    candidates = roi_sampling.read_candidates_jsonl(args.candidates)
    groups: dict[Any, list] = {}
    for cand in candidates:
        groups.setdefault(cand.image_id, []).append(cand)

    selected_dump = []
    rng = derive_rng(args.seed, "sample-rois")
    for image_id in sorted(groups, key=lambda k: (k is None, k)):
        group = groups[image_id]
        if args.strategy == "ohem":
            pool = roi_sampling.ohem_candidate_pool(group, args.pool_size, args.iou)
            chosen = roi_sampling.ohem_select(pool, args.fg_budget, args.bg_budget)
        elif args.strategy == "balanced":
            chosen = roi_sampling.balanced_select(group, args.budget, rng)
        elif args.strategy == "pass-through":
            by_level: dict[int, list] = {}
            for cand in group:
                by_level.setdefault(cand.level, []).append(cand)
            chosen = roi_sampling.pass_through(
                by_level, args.pre_nms_top, args.post_merge, args.iou
            )
        else:
            raise SignkitError(f"unknown strategy {args.strategy!r}")
        if args.stage:
            weighted = roi_sampling.assign_weights(chosen, args.stage)
            selected_dump.extend(
                {**w.candidate.to_json_dict(), "weight": w.weight} for w in weighted
            )
        else:
            selected_dump.extend(c.to_json_dict() for c in chosen)

    report = _base_report("sample-rois", args)
    report["selection"] = {"input": len(candidates), "selected": len(selected_dump)}
    report["candidates"] = selected_dump
    _emit(report, args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="signkit", description="Traffic-sign dataset tooling and detection evaluation."
    )
    parser.add_argument("--config", help="JSON file with default values for the chosen subcommand")
    parser.add_argument(
        "--threads",
        type=int,
        default=0,
        help="worker cap for parallel stages (0 = auto); results are identical for any value",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check dataset integrity and category criteria")
    p.add_argument("--dataset", required=True)
    p.add_argument("--min-instances", type=int, default=20)
    p.add_argument("--min-size", type=float, default=30.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fit", help="fit the distortion model from a training dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("augment", help="generate synthetic training images")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backgrounds", required=True, help="directory of sign-free images")
    p.add_argument("--model", required=True)
    p.add_argument("--target-min", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", help="geo-clustered train/test split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--radius", type=float, default=50.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("eval", help="evaluate detections against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--detections", required=True, help="line-delimited JSON detections")
    p.add_argument("--split", help="split.json restricting evaluation to one side")
    p.add_argument("--side", choices=["train", "test"], default="test")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--min-size", type=float, default=30.0)
    p.add_argument(
        "--interpolation", choices=["all_points", "coco101"], default="all_points"
    )
    p.add_argument("--pr-csv", help="write per-category PR curves to this CSV")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("proposals", help="region-proposal recall analysis")
    p.add_argument("--dataset", required=True)
    p.add_argument("--proposals", required=True, help="line-delimited JSON proposals")
    p.add_argument("--top-n", default="10,100,1000,5000")
    p.add_argument("--iou", default="0.5")
    p.add_argument("--size-band", help="MIN,MAX pixel band filtering ground truths")
    p.add_argument("--weight-by-instances", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_proposals)

    p = sub.add_parser("sample-rois", help="apply a training ROI selection strategy")
    p.add_argument("--candidates", required=True, help="line-delimited JSON candidates")
    p.add_argument("--strategy", choices=["ohem", "balanced", "pass-through"], required=True)
    p.add_argument("--fg-budget", type=int, default=64)
    p.add_argument("--bg-budget", type=int, default=192)
    p.add_argument("--budget", type=int, default=256)
    p.add_argument("--pool-size", type=int, default=2000)
    p.add_argument("--pre-nms-top", type=int, default=10000)
    p.add_argument("--post-merge", type=int, default=2000)
    p.add_argument("--iou", type=float, default=0.7)
    p.add_argument("--stage", choices=["rpn", "classifier"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_rois)

    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Inject config-file values as defaults; explicit flags still win."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    try:
        config_path = argv[idx + 1]
    except IndexError:
        return argv  # let argparse produce the usage error
    with open(config_path, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise ParseError(config_path, "config must be a JSON object")
    for action in parser._subparsers._group_actions:
        if hasattr(action, "choices") and action.choices:
            for sub in action.choices.values():
                sub.set_defaults(
                    **{k.replace("-", "_"): v for k, v in config.items()}
                )
    return argv


def run(argv: Sequence[str] | None = None) -> int:
    """Entry point returning an exit code instead of raising SystemExit."""
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SignkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
