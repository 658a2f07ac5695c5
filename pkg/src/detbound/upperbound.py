"""Upper-bound detection sets built from classifier predictions.

Strategy 1 labels every ground-truth box with its whole-target prediction;
strategy 2 aggregates predictions over boxes sampled around each target,
either by the single most confident sample or by the most frequent label.
Either way the emitted detection keeps the ground-truth coordinates, so the
resulting AP is the same at every IOU threshold.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .datamodel import Annotation, Box, ClassificationSet, Dataset, Detection, DetectionSet
from .errors import DetboundError, ValidationError
from .geometry import SamplerSpec, annotation_rng, sample_boxes


class Strategy2Mode(enum.Enum):
    MOST_CONFIDENT_BOX = "confident"
    MOST_FREQUENT_LABEL = "frequent"


def _classifiable(ds: Dataset) -> list[Annotation]:
    # crowd regions are ignore zones, not classification targets
    return [a for a in ds.annotations if not a.iscrowd]


def build_uap_detections(
    ds: Dataset, cls: ClassificationSet, confidence_override: float | None = None
) -> DetectionSet:
    """One detection per annotation: ground-truth box, predicted label,
    prediction confidence (or a constant override)."""
    if confidence_override is not None and not 0.0 <= confidence_override <= 1.0:
        raise DetboundError(f"confidence override must be in [0, 1], got {confidence_override}")
    missing = []
    dets = []
    for ann in _classifiable(ds):
        rec = cls.for_annotation(ann.id).get(None)
        if rec is None:
            missing.append(ann.id)
            continue
        dets.append(
            Detection(
                image_id=ann.image_id,
                category_id=rec.label,
                bbox=ann.bbox,
                score=confidence_override if confidence_override is not None else rec.score,
            )
        )
    if missing:
        raise ValidationError(
            "annotations without a whole-target prediction",
            [("missing_prediction", str(i)) for i in missing],
        )
    return DetectionSet.build(dets)


def strategy2_aggregate(
    ds: Dataset,
    preds: ClassificationSet,
    mode: Strategy2Mode,
    manifest: Sequence["SampleRow"] | None = None,
) -> DetectionSet:
    """Aggregate per-sample predictions into one detection per target box.

    MOST_CONFIDENT_BOX takes the label and score of the highest-scoring
    sample. MOST_FREQUENT_LABEL takes the modal label, scored by the best
    sample carrying it; frequency ties break toward the higher best score,
    then toward the lower category id.
    """
    if manifest is not None:
        have = {(r.annotation_id, r.sample_index) for r in manifest}
        missing = [
            key
            for key in sorted(have)
            if preds.for_annotation(key[0]).get(key[1]) is None
        ]
        if missing:
            raise ValidationError(
                "manifest samples without predictions",
                [("missing_prediction", f"annotation {a} sample {s}") for a, s in missing],
            )
    empty = []
    dets = []
    for ann in _classifiable(ds):
        samples = sorted(
            (r for idx, r in preds.for_annotation(ann.id).items() if idx is not None),
            key=lambda r: r.sample_index,
        )
        if not samples:
            empty.append(ann.id)
            continue
        if mode is Strategy2Mode.MOST_CONFIDENT_BOX:
            best = max(samples, key=lambda r: (r.score, -r.sample_index))
            label, score = best.label, best.score
        else:
            by_label: dict[int, list[float]] = {}
            for r in samples:
                by_label.setdefault(r.label, []).append(r.score)
            label = max(by_label, key=lambda lab: (len(by_label[lab]), max(by_label[lab]), -lab))
            score = max(by_label[label])
        dets.append(Detection(image_id=ann.image_id, category_id=label, bbox=ann.bbox, score=score))
    if empty:
        raise ValidationError(
            "annotations without sampled predictions",
            [("missing_samples", str(i)) for i in empty],
        )
    return DetectionSet.build(dets)


# ---------------------------------------------------------------------------
# Classifier accuracy and its relation to the upper bound


@dataclass
class AccuracyReport:
    overall: float
    per_class: dict[int, float]
    total: int
    correct: int


def top1_accuracy(cls: ClassificationSet, ds: Dataset) -> AccuracyReport:
    """Fraction of targets whose predicted label equals the true label."""
    totals: dict[int, int] = {}
    correct: dict[int, int] = {}
    missing = []
    for ann in _classifiable(ds):
        rec = cls.for_annotation(ann.id).get(None)
        if rec is None:
            missing.append(ann.id)
            continue
        totals[ann.category_id] = totals.get(ann.category_id, 0) + 1
        if rec.label == ann.category_id:
            correct[ann.category_id] = correct.get(ann.category_id, 0) + 1
    if missing:
        raise ValidationError(
            "annotations without a whole-target prediction",
            [("missing_prediction", str(i)) for i in missing],
        )
    total = sum(totals.values())
    hits = sum(correct.values())
    per_class = {c: correct.get(c, 0) / n for c, n in sorted(totals.items())}
    return AccuracyReport(
        overall=hits / total if total else 0.0, per_class=per_class, total=total, correct=hits
    )


@dataclass
class CorrelationReport:
    slope: float
    intercept: float
    r_squared: float
    points: list[tuple[int, float, float]]  # (category id, accuracy, uap)

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "points": [
                {"category_id": c, "accuracy": a, "uap": u} for c, a, u in self.points
            ],
        }


def accuracy_uap_correlation(
    acc: Mapping[int, float], uap: Mapping[int, float]
) -> CorrelationReport:
    """Ordinary least squares of per-class upper-bound AP on classifier
    accuracy; r_squared is the squared Pearson correlation. Classes carrying
    the -1 sentinel are excluded."""
    points = [
        (c, acc[c], uap[c]) for c in sorted(acc) if c in uap and uap[c] > -1.0
    ]
    if len(points) < 2:
        raise DetboundError(f"correlation needs >= 2 classes with defined values, got {len(points)}")
    xs = [p[1] for p in points]
    ys = [p[2] for p in points]
    n = len(points)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    if sxx == 0.0:
        raise DetboundError("accuracy values are constant; the fit is degenerate")
    slope = sxy / sxx
    intercept = my - slope * mx
    r_squared = 0.0 if syy == 0.0 else (sxy * sxy) / (sxx * syy)
    return CorrelationReport(slope=slope, intercept=intercept, r_squared=r_squared, points=points)


# ---------------------------------------------------------------------------
# Sample manifest (the strategy-2 handoff to the external classifier)


@dataclass(frozen=True)
class SampleRow:
    annotation_id: int
    sample_index: int
    box: Box
    crop_path: str = ""


def build_sample_manifest(ds: Dataset, spec: SamplerSpec) -> list[SampleRow]:
    """Sample ``spec.k`` boxes around every non-crowd target. Each target
    draws from its own (seed, annotation id) stream, so any evaluation order
    produces the same manifest. Boxes are not clamped here; the crop
    exporter clamps when pixels are actually cut."""
    rows = []
    for ann in _classifiable(ds):
        rng = annotation_rng(spec.seed, ann.id)
        for idx, box in enumerate(sample_boxes(ann.bbox, spec, rng=rng)):
            rows.append(SampleRow(annotation_id=ann.id, sample_index=idx, box=box))
    return rows


MANIFEST_FIELDS = ["annotation_id", "sample_index", "x", "y", "w", "h", "crop_path"]


def write_sample_manifest(rows: Sequence[SampleRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow(
                [r.annotation_id, r.sample_index, repr(r.box.x), repr(r.box.y), repr(r.box.w), repr(r.box.h), r.crop_path]
            )


def read_sample_manifest(path: str | Path) -> list[SampleRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ValidationError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.append(
                    SampleRow(
                        annotation_id=int(rec["annotation_id"]),
                        sample_index=int(rec["sample_index"]),
                        box=Box(float(rec["x"]), float(rec["y"]), float(rec["w"]), float(rec["h"])),
                        crop_path=rec["crop_path"],
                    )
                )
            except (TypeError, ValueError) as e:
                raise ValidationError(f"{path}: bad manifest row at line {lineno}: {e}") from e
    return rows
