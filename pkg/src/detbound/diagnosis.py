"""Four-stage error-fix protocol: quantify what each error type costs.

Stages run per (category, image) against same-class non-crowd targets and
the full evaluation re-runs after each one:

  1. drop detections whose best IOU with any target is <= 0.1 (background
     confusion),
  2. snap detections with best IOU strictly between 0.1 and the matching
     threshold onto their best target, keeping score and label (this can
     create duplicates on purpose),
  3. drop unassigned detections lying (IOU >= threshold) on an already
     assigned target (duplicates),
  4. snap every assigned detection exactly onto its target and append a
     score-1 detection for every target still unmatched (misses).

After stage 4 every target is covered exactly once at IOU 1, so the final
mAP is 1 at every threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from .datamodel import Annotation, Dataset, Detection, DetectionSet
from .errors import ConfigurationError
from .evaluator import SENTINEL, EvalConfig, EvalSummary, evaluate, match_greedy
from .geometry import iou_box


@dataclass(frozen=True)
class DiagnosisConfig:
    base_iou: float = 0.5
    background_iou: float = 0.1
    area_range: str | None = None  # report mAP over one size range only
    eval_config: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not self.background_iou < self.base_iou:
            raise ConfigurationError(
                f"background threshold {self.background_iou} must be below base {self.base_iou}"
            )
        if self.area_range is not None and self.area_range not in self.eval_config.area_names():
            raise ConfigurationError(f"unknown area range {self.area_range!r}")


@dataclass
class StageReport:
    name: str
    map: float
    map50: float
    detections_added: int = 0
    detections_removed: int = 0
    detections_moved: int = 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "map": self.map,
            "map50": self.map50,
            "detections_added": self.detections_added,
            "detections_removed": self.detections_removed,
            "detections_moved": self.detections_moved,
        }


@dataclass
class DiagnosisReport:
    model: str
    stages: list[StageReport]

    def to_dict(self) -> dict:
        return {"model": self.model, "stages": [s.to_dict() for s in self.stages]}

    def map_sequence(self) -> list[float]:
        return [s.map for s in self.stages]


def _targets(ds: Dataset, image_id: int, category_id: int) -> list[Annotation]:
    return [a for a in ds.annotations_for(image_id, category_id) if not a.iscrowd]


def _max_iou_target(det: Detection, targets: list[Annotation]) -> tuple[float, Annotation | None]:
    best = 0.0
    who = None
    for t in targets:
        v = iou_box(det.bbox, t.bbox)
        if v > best:
            best = v
            who = t
    return best, who


def _transform_per_group(
    dets: DetectionSet,
    ds: Dataset,
    fn: Callable[[list[Detection], list[Annotation]], Iterable[Detection]],
) -> DetectionSet:
    """Apply ``fn`` to every (image, category) group; output keeps each
    group's result in the group's input order, groups ordered by (image,
    category) id so the result is independent of input shuffling."""
    out: list[Detection] = []
    for img_id in ds.image_ids():
        for cat_id in ds.category_ids():
            group = list(dets.for_image_category(img_id, cat_id))
            targets = _targets(ds, img_id, cat_id)
            if group or targets:
                out.extend(fn(group, targets))
    return DetectionSet.build(out)


def stage1_remove_background(dets: DetectionSet, ds: Dataset, cfg: DiagnosisConfig) -> DetectionSet:
    """Drop detections with best IOU <= the background threshold."""

    def fn(group, targets):
        return [d for d in group if _max_iou_target(d, targets)[0] > cfg.background_iou]

    return _transform_per_group(dets, ds, fn)


def stage2_fix_localization(dets: DetectionSet, ds: Dataset, cfg: DiagnosisConfig) -> DetectionSet:
    """Move mislocalized detections onto their best target, keeping scores."""

    def fn(group, targets):
        out = []
        for d in group:
            best, who = _max_iou_target(d, targets)
            if who is not None and cfg.background_iou < best < cfg.base_iou:
                d = replace(d, bbox=who.bbox)
            out.append(d)
        return out

    return _transform_per_group(dets, ds, fn)


def stage3_remove_duplicates(dets: DetectionSet, ds: Dataset, cfg: DiagnosisConfig) -> DetectionSet:
    """Greedy-assign by score at the base threshold; drop unassigned
    detections that sit on an assigned target."""

    def fn(group, targets):
        res = match_greedy(group, targets, cfg.base_iou)
        assigned_targets = [t for t in targets if res.target_matched_by[t.id] is not None]
        keep = []
        for pos, orig_idx in enumerate(res.order):
            d = group[orig_idx]
            if res.matched_target[pos] is None:
                best, _ = _max_iou_target(d, assigned_targets)
                if best >= cfg.base_iou:
                    continue
            keep.append(orig_idx)
        return [group[i] for i in sorted(keep)]

    return _transform_per_group(dets, ds, fn)


def stage4_add_misses(dets: DetectionSet, ds: Dataset, cfg: DiagnosisConfig) -> DetectionSet:
    """Snap assigned detections exactly onto their targets, then append a
    score-1 detection for every target with no assignment."""

    def fn(group, targets):
        res = match_greedy(group, targets, cfg.base_iou)
        by_id = {t.id: t for t in targets}
        out = list(group)
        for pos, orig_idx in enumerate(res.order):
            tid = res.matched_target[pos]
            if tid is not None:
                out[orig_idx] = replace(out[orig_idx], bbox=by_id[tid].bbox)
        for t in targets:
            if res.target_matched_by[t.id] is None:
                out.append(
                    Detection(image_id=t.image_id, category_id=t.category_id, bbox=t.bbox, score=1.0)
                )
        return out

    return _transform_per_group(dets, ds, fn)


STAGES = (
    ("- background", stage1_remove_background),
    ("+ localization", stage2_fix_localization),
    ("- duplicates", stage3_remove_duplicates),
    ("+ misses", stage4_add_misses),
)


def _report_maps(summary: EvalSummary, cfg: DiagnosisConfig) -> tuple[float, float]:
    area_names = summary.config.area_names()
    a_idx = area_names.index(cfg.area_range) if cfg.area_range else 0
    lattice = summary.precision[:, :, :, a_idx, -1]
    vals = lattice[lattice > SENTINEL]
    full = float(vals.mean()) if vals.size else SENTINEL
    t50 = summary.config.threshold_index(0.5)
    if t50 is None:
        return full, SENTINEL
    at50 = lattice[t50][lattice[t50] > SENTINEL]
    return full, float(at50.mean()) if at50.size else SENTINEL


def _stage_deltas(before: DetectionSet, after: DetectionSet, ds: Dataset) -> tuple[int, int, int]:
    """(added, removed, moved) counted per group. Stages either remove, move
    in place, or append at the group tail, so the group prefix aligns
    whenever nothing was removed."""
    added = removed = moved = 0
    for img_id in ds.image_ids():
        for cat_id in ds.category_ids():
            b = before.for_image_category(img_id, cat_id)
            a = after.for_image_category(img_id, cat_id)
            if len(a) > len(b):
                added += len(a) - len(b)
            elif len(b) > len(a):
                removed += len(b) - len(a)
            if len(a) >= len(b):
                moved += sum(x.bbox != y.bbox for x, y in zip(b, a))
    return added, removed, moved


def diagnose(
    ds: Dataset, dets: DetectionSet, cfg: DiagnosisConfig | None = None, model: str = "", threads: int = 1
) -> DiagnosisReport:
    """Run the four stages in order, re-evaluating mAP after each."""
    cfg = cfg or DiagnosisConfig()
    full, at50 = _report_maps(evaluate(ds, dets, cfg.eval_config, threads=threads), cfg)
    stages = [StageReport(name="original", map=full, map50=at50)]
    current = dets
    for name, fn in STAGES:
        before = current
        current = fn(current, ds, cfg)
        added, removed, moved = _stage_deltas(before, current, ds)
        full, at50 = _report_maps(evaluate(ds, current, cfg.eval_config, threads=threads), cfg)
        stages.append(
            StageReport(
                name=name,
                map=full,
                map50=at50,
                detections_added=added,
                detections_removed=removed,
                detections_moved=moved,
            )
        )
    return DiagnosisReport(model=model, stages=stages)
