"""Command-line front end.

Every subcommand writes machine-readable reports (JSON and CSV, floats at 6
decimals) plus a run manifest carrying input digests, the resolved
configuration, the seed, and wall time. Reports embed the manifest id, which
hashes only the stable fields, so a rerun with identical inputs is
byte-identical. Exit codes: 0 success, 1 validation/computation error
(structured JSON on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, boxmap, transforms, upperbound
from .datamodel import (
    dataset_to_dict,
    detections_to_list,
    load_classifications,
    load_detections,
    load_ground_truth,
    parse_ground_truth,
    validate,
)
from .diagnosis import DiagnosisConfig, diagnose
from .errors import DetboundError
from .evaluator import EvalConfig, EvalSummary, evaluate
from .geometry import SamplerMode, SamplerSpec
from .masks import decode_mask, encode_rle, mask_to_box, box_to_mask, rle_to_coco
from .parallel import resolve_threads
from .runmeta import RunManifest, file_digest, manifest_path_for, write_json_report


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detbound",
        description="Detector evaluation, upper-bound AP, error diagnosis, and dataset variants",
    )
    parser.add_argument("--version", action="version", version=f"detbound {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, gt=True, out=True, threads=True, seed=False):
        if gt:
            p.add_argument("--gt", required=True, help="COCO ground-truth JSON")
        if out:
            p.add_argument("--out", required=True, help="output path")
        if threads:
            p.add_argument("--threads", type=int, default=None, help="worker threads (env DETBOUND_THREADS)")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="COCO-style evaluation of a detection file")
    common(p)
    p.add_argument("--dets", required=True, help="detections JSON array")
    p.add_argument("--iou", type=_float_list, default=None, help="comma list overriding the IOU sweep")
    p.add_argument("--max-dets", type=_int_list, default=None, help="comma list of per-image caps")
    p.add_argument("--kernel", choices=["box", "mask"], default="box")

    p = sub.add_parser("upperbound", help="upper-bound AP from classification predictions")
    common(p)
    p.add_argument("--cls", required=True, help="classification predictions JSONL")
    p.add_argument("--strategy", type=int, choices=[1, 2], default=1)
    p.add_argument("--mode", choices=["confident", "frequent"], default="confident")
    p.add_argument("--manifest", default=None, help="sample manifest CSV (strategy 2)")
    p.add_argument("--confidence-override", type=float, default=None)
    p.add_argument("--dets-out", default=None, help="also write the built detection set")

    p = sub.add_parser("sample-boxes", help="sample boxes around every target at a fixed IOU")
    common(p, seed=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--sampler-mode", choices=["boundary", "interior"], default="boundary")

    p = sub.add_parser("diagnose", help="four-stage error-fix analysis")
    common(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--area-range", choices=["all", "small", "medium", "large"], default="all")

    p = sub.add_parser("transform", help="generate an invariance-analysis dataset variant")
    common(p, seed=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--kind", choices=list(transforms.KINDS), required=True)
    p.add_argument("--kernel-size", type=int, default=11, help="blur kernel")
    p.add_argument("--min-dim", type=int, default=300, help="crop_resized target")
    p.add_argument("--manifest", default=None, help="paste list JSON (incongruent)")
    p.add_argument("--backgrounds-dir", default=None, help="backgrounds root (incongruent)")

    p = sub.add_parser("export-crops", help="export per-object context crops")
    common(p)
    p.add_argument("--images-dir", required=True)
    p.add_argument(
        "--crop-spec",
        action="append",
        default=None,
        help="mode:factor (repeatable), e.g. object_only:1 object_context:1.6",
    )

    p = sub.add_parser("boxmap", help="box-distribution grid map (CSV + optional heatmap)")
    common(p)
    p.add_argument("--dets", default=None, help="when given, emit the prediction-vs-GT difference map")
    p.add_argument("--grid", type=int, default=256)
    p.add_argument("--scale", choices=["linear", "log"], default="linear")
    p.add_argument("--png", default=None, help="also render a heatmap PNG")

    p = sub.add_parser("mask-convert", help="swap detection masks and boxes")
    common(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--direction", choices=["mask-to-box", "box-to-mask"], required=True)

    p = sub.add_parser("validate", help="validate a ground-truth file and report per-rule counts")
    common(p, out=False, threads=False)
    p.add_argument("--out", default=None, help="optional report JSON")

    return parser


def _manifest(args, subcommand: str, config: dict, input_flags: dict[str, str | None]) -> RunManifest:
    inputs = {name: file_digest(path) for name, path in input_flags.items() if path}
    return RunManifest(
        subcommand=subcommand,
        config=config,
        inputs=inputs,
        seed=getattr(args, "seed", 0) or 0,
        version=__version__,
    )


def _finish(manifest: RunManifest, out: str | Path, started: float) -> None:
    manifest.wall_time_s = time.monotonic() - started
    manifest.write(manifest_path_for(out))


def _write_per_class_csv(summary: EvalSummary, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["category_id", "name", "ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"])
        for row in summary.per_class:
            writer.writerow(
                [row["category_id"], row["name"]]
                + [f"{row[k]:.6f}" for k in ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l")]
            )


def _write_pr_csv(summary: EvalSummary, path: Path) -> None:
    curves = summary.mean_pr_curves()
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "recall", "precision"])
        for t, thr in enumerate(summary.config.iou_thresholds):
            for r, rec in enumerate(summary.config.recall_points):
                writer.writerow([f"{thr:.6f}", f"{rec:.6f}", f"{curves[t, r]:.6f}"])


def _eval_config(args) -> EvalConfig:
    kwargs = {}
    if getattr(args, "iou", None):
        kwargs["iou_thresholds"] = args.iou
    if getattr(args, "max_dets", None):
        kwargs["max_dets"] = args.max_dets
    if getattr(args, "kernel", None):
        kwargs["kernel"] = args.kernel
    return EvalConfig(**kwargs)


def _summary_report(summary: EvalSummary, manifest: RunManifest, extra: dict | None = None) -> dict:
    report = {
        "manifest_id": manifest.manifest_id,
        "metrics": summary.metrics,
        "per_class": summary.per_class,
        "config": {
            "iou_thresholds": list(summary.config.iou_thresholds),
            "max_dets": list(summary.config.max_dets),
            "area_ranges": [list(r) for r in summary.config.area_ranges],
            "kernel": summary.config.kernel,
        },
    }
    if extra:
        report.update(extra)
    return report


def cmd_eval(args) -> int:
    started = time.monotonic()
    threads = resolve_threads(args.threads)
    cfg = _eval_config(args)
    ds = load_ground_truth(args.gt)
    dets = load_detections(args.dets, ds)
    summary = evaluate(ds, dets, cfg, threads=threads)
    manifest = _manifest(
        args,
        "eval",
        {"kernel": cfg.kernel, "iou_thresholds": list(cfg.iou_thresholds), "max_dets": list(cfg.max_dets)},
        {"gt": args.gt, "dets": args.dets},
    )
    manifest.extra = {"threads": threads}
    out = Path(args.out)
    write_json_report(_summary_report(summary, manifest), out)
    _write_per_class_csv(summary, out.with_suffix(".per_class.csv"))
    _write_pr_csv(summary, out.with_suffix(".pr_curves.csv"))
    _finish(manifest, out, started)
    return 0


def cmd_upperbound(args) -> int:
    started = time.monotonic()
    threads = resolve_threads(args.threads)
    ds = load_ground_truth(args.gt)
    cls = load_classifications(args.cls, ds)
    if args.strategy == 1:
        dets = upperbound.build_uap_detections(ds, cls, confidence_override=args.confidence_override)
    else:
        manifest_rows = (
            upperbound.read_sample_manifest(args.manifest) if args.manifest else None
        )
        mode = (
            upperbound.Strategy2Mode.MOST_CONFIDENT_BOX
            if args.mode == "confident"
            else upperbound.Strategy2Mode.MOST_FREQUENT_LABEL
        )
        dets = upperbound.strategy2_aggregate(ds, cls, mode, manifest=manifest_rows)
    summary = evaluate(ds, dets, EvalConfig(), threads=threads)

    extra: dict = {"detections": len(dets)}
    try:
        acc = upperbound.top1_accuracy(cls, ds)
        extra["accuracy"] = {
            "overall": acc.overall,
            "per_class": {str(k): v for k, v in acc.per_class.items()},
        }
        uap_per_class = {row["category_id"]: row["ap"] for row in summary.per_class}
        corr = upperbound.accuracy_uap_correlation(acc.per_class, uap_per_class)
        extra["correlation"] = corr.to_dict()
    except DetboundError as e:
        extra.setdefault("accuracy", None)
        extra["correlation"] = None
        extra["correlation_note"] = str(e)

    manifest = _manifest(
        args,
        "upperbound",
        {
            "strategy": args.strategy,
            "mode": args.mode,
            "confidence_override": args.confidence_override,
        },
        {"gt": args.gt, "cls": args.cls, "manifest": args.manifest},
    )
    manifest.extra = {"threads": threads}
    out = Path(args.out)
    write_json_report(_summary_report(summary, manifest, extra), out)
    _write_per_class_csv(summary, out.with_suffix(".per_class.csv"))
    if args.dets_out:
        Path(args.dets_out).write_text(json.dumps(detections_to_list(dets)), encoding="utf-8")
    _finish(manifest, out, started)
    return 0


def cmd_sample_boxes(args) -> int:
    started = time.monotonic()
    ds = load_ground_truth(args.gt)
    spec = SamplerSpec(
        gamma=args.gamma, k=args.k, mode=SamplerMode(args.sampler_mode), seed=args.seed
    )
    rows = upperbound.build_sample_manifest(ds, spec)
    upperbound.write_sample_manifest(rows, args.out)
    manifest = _manifest(
        args,
        "sample-boxes",
        {"gamma": args.gamma, "k": args.k, "sampler_mode": args.sampler_mode},
        {"gt": args.gt},
    )
    _finish(manifest, args.out, started)
    return 0


def cmd_diagnose(args) -> int:
    started = time.monotonic()
    threads = resolve_threads(args.threads)
    ds = load_ground_truth(args.gt)
    dets = load_detections(args.dets, ds)
    cfg = DiagnosisConfig(area_range=None if args.area_range == "all" else args.area_range)
    report = diagnose(ds, dets, cfg, model=Path(args.dets).stem, threads=threads)
    manifest = _manifest(
        args,
        "diagnose",
        {"area_range": args.area_range, "base_iou": cfg.base_iou, "background_iou": cfg.background_iou},
        {"gt": args.gt, "dets": args.dets},
    )
    manifest.extra = {"threads": threads}
    out = Path(args.out)
    payload = report.to_dict()
    payload["manifest_id"] = manifest.manifest_id
    write_json_report(payload, out)
    with open(out.with_suffix(".stages.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "map", "map50", "added", "removed", "moved"])
        for s in report.stages:
            writer.writerow(
                [s.name, f"{s.map:.6f}", f"{s.map50:.6f}", s.detections_added, s.detections_removed, s.detections_moved]
            )
    _finish(manifest, out, started)
    return 0


def cmd_transform(args) -> int:
    started = time.monotonic()
    threads = resolve_threads(args.threads)
    ds = load_ground_truth(args.gt)
    pastes: tuple[transforms.PasteSpec, ...] = ()
    if args.kind == "incongruent":
        if not args.manifest:
            raise DetboundError("incongruent transform needs --manifest with a paste list")
        raw = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        pastes = tuple(
            transforms.PasteSpec(
                annotation_id=int(rec["annotation_id"]),
                background=str(rec["background"]),
                x=rec.get("x"),
                y=rec.get("y"),
                scale=float(rec.get("scale", 1.0)),
            )
            for rec in raw
        )
    spec = transforms.TransformSpec(
        kind=args.kind, min_dim=args.min_dim, kernel=args.kernel_size, seed=args.seed, pastes=pastes
    )
    out = Path(args.out)
    images_out = out / "images"
    result = transforms.transform_dataset(
        ds,
        transforms.ImageSource(args.images_dir),
        spec,
        images_out,
        threads=threads,
        backgrounds=transforms.ImageSource(args.backgrounds_dir) if args.backgrounds_dir else None,
    )
    ann_path = out / "annotations.json"
    ann_path.write_text(json.dumps(dataset_to_dict(result.dataset)), encoding="utf-8")
    manifest = _manifest(
        args,
        "transform",
        {"kind": args.kind, **result.metadata},
        {"gt": args.gt, "manifest": args.manifest},
    )
    manifest.extra = {
        "threads": threads,
        "images_written": result.written,
        "errors": result.errors,
        "bbox_fallbacks": result.bbox_fallbacks,
        "annotations": len(result.dataset.annotations),
    }
    _finish(manifest, out, started)
    if result.errors:
        print(f"{len(result.errors)} image(s) failed; see manifest", file=sys.stderr)
    return 0


def cmd_export_crops(args) -> int:
    started = time.monotonic()
    threads = resolve_threads(args.threads)
    ds = load_ground_truth(args.gt)
    specs = []
    for text in args.crop_spec or ["object_only:1"]:
        parts = text.split(":")
        if len(parts) != 2:
            raise DetboundError(f"--crop-spec expects mode:factor, got {text!r}")
        specs.append(transforms.CropSpec(mode=parts[0], factor=float(parts[1])))
    out = Path(args.out)
    rows, errors = transforms.export_context_crops(
        ds, transforms.ImageSource(args.images_dir), specs, out / "crops", threads=threads
    )
    transforms.write_crop_manifest(rows, out / "manifest.csv")
    manifest = _manifest(
        args,
        "export-crops",
        {"crop_specs": [f"{s.mode}:{s.factor:g}" for s in specs]},
        {"gt": args.gt},
    )
    manifest.extra = {"threads": threads, "crops_written": len(rows), "errors": errors}
    _finish(manifest, out, started)
    return 0


def cmd_boxmap(args) -> int:
    started = time.monotonic()
    ds = load_ground_truth(args.gt)
    gt_map = boxmap.box_distribution_map(boxmap.annotation_boxes(ds), resolution=args.grid)
    if args.dets:
        dets = load_detections(args.dets, ds)
        pred_map = boxmap.box_distribution_map(boxmap.detection_boxes(dets, ds), resolution=args.grid)
        grid = boxmap.diff_map(pred_map, gt_map, scale=args.scale)
    else:
        grid = gt_map
        if args.scale == "log":
            grid = boxmap.GridMap(cells=np.log1p(gt_map.cells), scale="log", box_count=gt_map.box_count)
    boxmap.grid_to_csv(grid, args.out)
    if args.png:
        boxmap.render_heatmap(grid, args.png)
    manifest = _manifest(
        args,
        "boxmap",
        {"grid": args.grid, "scale": args.scale, "diff": bool(args.dets)},
        {"gt": args.gt, "dets": args.dets},
    )
    manifest.extra = {"boxes": grid.box_count}
    _finish(manifest, args.out, started)
    return 0


def cmd_mask_convert(args) -> int:
    started = time.monotonic()
    ds = load_ground_truth(args.gt)
    dets = load_detections(args.dets, ds)
    out_records = []
    dropped = 0
    for det in dets.detections:
        img = ds.image(det.image_id)
        rec = {
            "image_id": det.image_id,
            "category_id": det.category_id,
            "score": det.score,
        }
        if args.direction == "mask-to-box":
            if det.segmentation is None:
                raise DetboundError("mask-to-box needs segmentation on every detection")
            mask = decode_mask(det.segmentation, img.width, img.height)
            if mask.count() == 0:
                dropped += 1
                continue
            rec["bbox"] = mask_to_box(mask).as_list()
            rec["segmentation"] = det.segmentation
        else:
            rec["bbox"] = det.bbox.as_list()
            rec["segmentation"] = rle_to_coco(
                encode_rle(box_to_mask(det.bbox, img.width, img.height))
            )
        out_records.append(rec)
    Path(args.out).write_text(json.dumps(out_records), encoding="utf-8")
    manifest = _manifest(
        args, "mask-convert", {"direction": args.direction}, {"gt": args.gt, "dets": args.dets}
    )
    manifest.extra = {"written": len(out_records), "dropped_empty_masks": dropped}
    _finish(manifest, args.out, started)
    return 0


def cmd_validate(args) -> int:
    ds = parse_ground_truth(args.gt)
    report = validate(ds)
    payload = {
        "counts": {
            "images": len(ds.images),
            "annotations": len(ds.annotations),
            "categories": len(ds.categories),
        },
        **report.to_dict(),
    }
    if args.out:
        write_json_report(payload, args.out)
    else:
        print(json.dumps(payload, indent=2))
    return 0 if report.ok else 1


HANDLERS = {
    "eval": cmd_eval,
    "upperbound": cmd_upperbound,
    "sample-boxes": cmd_sample_boxes,
    "diagnose": cmd_diagnose,
    "transform": cmd_transform,
    "export-crops": cmd_export_crops,
    "boxmap": cmd_boxmap,
    "mask-convert": cmd_mask_convert,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except DetboundError as e:
        error = {"error": type(e).__name__, "message": str(e)}
        details = getattr(e, "details", None)
        if details:
            error["details"] = [{"rule": r, "message": m} for r, m in details[:50]]
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
