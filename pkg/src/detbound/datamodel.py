"""COCO-format ground truth, detection results, and classification predictions.

Ground truth is the standard COCO JSON layout (``images`` / ``annotations`` /
``categories``), detections are the COCO results array, and classification
predictions are JSON Lines with one record per (annotation, sample) pair.
Loaded collections are immutable and indexed by image id and by
(image id, category id); iteration order is deterministic (sorted by id for
ground truth, input order for detections).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

# Raw COCO segmentation: list of polygons (flat [x1,y1,...] floats) or an
# RLE dict {"size": [h, w], "counts": list | str}.
Segmentation = Any


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, (x, y) = top-left corner."""

    x: float
    y: float
    w: float
    h: float

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: Box
    area: float
    iscrowd: bool = False
    segmentation: Segmentation | None = None


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    bbox: Box
    score: float
    segmentation: Segmentation | None = None


@dataclass(frozen=True)
class ClassificationRecord:
    annotation_id: int
    label: int
    score: float
    sample_index: int | None = None


def _index_by_image(items: Sequence) -> dict[int, tuple]:
    out: dict[int, list] = {}
    for it in items:
        out.setdefault(it.image_id, []).append(it)
    return {k: tuple(v) for k, v in out.items()}


def _index_by_image_cat(items: Sequence) -> dict[tuple[int, int], tuple]:
    out: dict[tuple[int, int], list] = {}
    for it in items:
        out.setdefault((it.image_id, it.category_id), []).append(it)
    return {k: tuple(v) for k, v in out.items()}


@dataclass(frozen=True)
class Dataset:
    """Immutable ground-truth collection with id-sorted iteration order."""

    images: tuple[ImageRecord, ...]
    annotations: tuple[Annotation, ...]
    categories: tuple[Category, ...]
    _img_by_id: Mapping[int, ImageRecord] = field(compare=False, repr=False, default_factory=dict)
    _cat_by_id: Mapping[int, Category] = field(compare=False, repr=False, default_factory=dict)
    _ann_by_id: Mapping[int, Annotation] = field(compare=False, repr=False, default_factory=dict)
    _by_image: Mapping[int, tuple[Annotation, ...]] = field(compare=False, repr=False, default_factory=dict)
    _by_image_cat: Mapping[tuple[int, int], tuple[Annotation, ...]] = field(
        compare=False, repr=False, default_factory=dict
    )

    @staticmethod
    def build(
        images: Iterable[ImageRecord],
        annotations: Iterable[Annotation],
        categories: Iterable[Category],
    ) -> "Dataset":
        imgs = tuple(sorted(images, key=lambda r: r.id))
        anns = tuple(sorted(annotations, key=lambda a: a.id))
        cats = tuple(sorted(categories, key=lambda c: c.id))
        return Dataset(
            images=imgs,
            annotations=anns,
            categories=cats,
            _img_by_id={r.id: r for r in imgs},
            _cat_by_id={c.id: c for c in cats},
            _ann_by_id={a.id: a for a in anns},
            _by_image=_index_by_image(anns),
            _by_image_cat=_index_by_image_cat(anns),
        )

    def image(self, image_id: int) -> ImageRecord:
        return self._img_by_id[image_id]

    def category(self, category_id: int) -> Category:
        return self._cat_by_id[category_id]

    def annotation(self, annotation_id: int) -> Annotation:
        return self._ann_by_id[annotation_id]

    def has_image(self, image_id: int) -> bool:
        return image_id in self._img_by_id

    def has_category(self, category_id: int) -> bool:
        return category_id in self._cat_by_id

    def has_annotation(self, annotation_id: int) -> bool:
        return annotation_id in self._ann_by_id

    def annotations_for(self, image_id: int, category_id: int | None = None) -> tuple[Annotation, ...]:
        if category_id is None:
            return self._by_image.get(image_id, ())
        return self._by_image_cat.get((image_id, category_id), ())

    def image_ids(self) -> list[int]:
        return [r.id for r in self.images]

    def category_ids(self) -> list[int]:
        return [c.id for c in self.categories]


@dataclass(frozen=True)
class DetectionSet:
    """Detections in input order (order is the score tie-breaker downstream)."""

    detections: tuple[Detection, ...]
    _by_image: Mapping[int, tuple[Detection, ...]] = field(compare=False, repr=False, default_factory=dict)
    _by_image_cat: Mapping[tuple[int, int], tuple[Detection, ...]] = field(
        compare=False, repr=False, default_factory=dict
    )

    @staticmethod
    def build(detections: Iterable[Detection]) -> "DetectionSet":
        dets = tuple(detections)
        return DetectionSet(
            detections=dets,
            _by_image=_index_by_image(dets),
            _by_image_cat=_index_by_image_cat(dets),
        )

    def __len__(self) -> int:
        return len(self.detections)

    def for_image(self, image_id: int) -> tuple[Detection, ...]:
        return self._by_image.get(image_id, ())

    def for_image_category(self, image_id: int, category_id: int) -> tuple[Detection, ...]:
        return self._by_image_cat.get((image_id, category_id), ())


@dataclass(frozen=True)
class ClassificationSet:
    """Classifier predictions keyed by (annotation id, sample index)."""

    records: tuple[ClassificationRecord, ...]
    _by_annotation: Mapping[int, Mapping[int | None, ClassificationRecord]] = field(
        compare=False, repr=False, default_factory=dict
    )

    @staticmethod
    def build(records: Iterable[ClassificationRecord]) -> "ClassificationSet":
        recs = tuple(records)
        by_ann: dict[int, dict[int | None, ClassificationRecord]] = {}
        for r in recs:
            by_ann.setdefault(r.annotation_id, {})[r.sample_index] = r
        return ClassificationSet(records=recs, _by_annotation=by_ann)

    def __len__(self) -> int:
        return len(self.records)

    def for_annotation(self, annotation_id: int) -> Mapping[int | None, ClassificationRecord]:
        return self._by_annotation.get(annotation_id, {})


# ---------------------------------------------------------------------------
# Validation


@dataclass
class ValidationReport:
    """Per-rule violation and warning counts; report-only, never raises."""

    violations: dict[str, int] = field(default_factory=dict)
    warnings: dict[str, int] = field(default_factory=dict)
    details: list[tuple[str, str]] = field(default_factory=list)

    def add(self, rule: str, message: str, *, warning: bool = False) -> None:
        bucket = self.warnings if warning else self.violations
        bucket[rule] = bucket.get(rule, 0) + 1
        self.details.append((rule, message))

    @property
    def ok(self) -> bool:
        return not self.violations

    def violation_count(self) -> int:
        return sum(self.violations.values())

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": dict(sorted(self.violations.items())),
            "warnings": dict(sorted(self.warnings.items())),
            "details": [{"rule": r, "message": m} for r, m in self.details],
        }


def _inside(box: Box, width: int, height: int) -> bool:
    return box.x >= 0 and box.y >= 0 and box.x2 <= width and box.y2 <= height


def _clamp_box(box: Box, width: int, height: int) -> Box:
    if _inside(box, width, height):
        return box
    x0 = min(max(box.x, 0.0), float(width))
    y0 = min(max(box.y, 0.0), float(height))
    x1 = min(max(box.x2, 0.0), float(width))
    y1 = min(max(box.y2, 0.0), float(height))
    return Box(x0, y0, x1 - x0, y1 - y0)


def validate(ds: Dataset) -> ValidationReport:
    """Check every dataset invariant; zero violations means every other
    operation accepts the dataset as-is. Out-of-bounds boxes are warnings
    (the loader clamps them), everything else is a violation."""
    report = ValidationReport()
    seen_img: set[int] = set()
    for rec in ds.images:
        if rec.id in seen_img:
            report.add("duplicate_image_id", f"image id {rec.id} appears more than once")
        seen_img.add(rec.id)
        if rec.width < 1 or rec.height < 1:
            report.add("bad_image_dims", f"image {rec.id} has dims {rec.width}x{rec.height}")
    seen_cat: set[int] = set()
    for cat in ds.categories:
        if cat.id in seen_cat:
            report.add("duplicate_category_id", f"category id {cat.id} appears more than once")
        seen_cat.add(cat.id)
        if not cat.name:
            report.add("empty_category_name", f"category {cat.id} has an empty name")
    seen_ann: set[int] = set()
    for ann in ds.annotations:
        if ann.id in seen_ann:
            report.add("duplicate_annotation_id", f"annotation id {ann.id} appears more than once")
        seen_ann.add(ann.id)
        if ann.image_id not in seen_img:
            report.add("missing_image_ref", f"annotation {ann.id} references unknown image {ann.image_id}")
            continue
        if ann.category_id not in seen_cat:
            report.add(
                "missing_category_ref", f"annotation {ann.id} references unknown category {ann.category_id}"
            )
        if ann.bbox.w <= 0 or ann.bbox.h <= 0:
            report.add("nonpositive_box", f"annotation {ann.id} has bbox {ann.bbox.as_list()}")
            continue
        if ann.area <= 0:
            report.add("nonpositive_area", f"annotation {ann.id} has area {ann.area}")
        img = ds.image(ann.image_id)
        clamped = _clamp_box(ann.bbox, img.width, img.height)
        if clamped != ann.bbox:
            if clamped.w <= 0 or clamped.h <= 0:
                report.add("box_outside_image", f"annotation {ann.id} lies entirely outside image {img.id}")
            else:
                report.add(
                    "bbox_out_of_bounds",
                    f"annotation {ann.id} bbox exceeds image {img.id} bounds (clamped)",
                    warning=True,
                )
    return report


# ---------------------------------------------------------------------------
# Parsing helpers


def _read_json(path: str | Path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path=str(path), offset=e.pos) from e


def _as_int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{what} must be an integer, got {value!r}")
    return value


def _as_number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{what} must be a number, got {value!r}")
    return float(value)


def _parse_bbox(raw, what: str) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValidationError(f"{what} bbox must be [x,y,w,h], got {raw!r}")
    x, y, w, h = (_as_number(v, f"{what} bbox component") for v in raw)
    return Box(x, y, w, h)


# ---------------------------------------------------------------------------
# Loaders


def parse_ground_truth(path: str | Path) -> Dataset:
    """Parse a COCO annotation file without validating invariants."""
    raw = _read_json(path)
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: expected a JSON object with images/annotations/categories")
    for key in ("images", "annotations", "categories"):
        if not isinstance(raw.get(key), list):
            raise ValidationError(f"{path}: missing or non-array '{key}' field")

    images = [
        ImageRecord(
            id=_as_int(rec.get("id"), f"images[{i}].id"),
            file_name=str(rec.get("file_name", "")),
            width=_as_int(rec.get("width"), f"images[{i}].width"),
            height=_as_int(rec.get("height"), f"images[{i}].height"),
        )
        for i, rec in enumerate(raw["images"])
    ]
    categories = [
        Category(id=_as_int(rec.get("id"), f"categories[{i}].id"), name=str(rec.get("name", "")))
        for i, rec in enumerate(raw["categories"])
    ]
    annotations = []
    for i, rec in enumerate(raw["annotations"]):
        bbox = _parse_bbox(rec.get("bbox"), f"annotations[{i}]")
        area = rec.get("area")
        annotations.append(
            Annotation(
                id=_as_int(rec.get("id"), f"annotations[{i}].id"),
                image_id=_as_int(rec.get("image_id"), f"annotations[{i}].image_id"),
                category_id=_as_int(rec.get("category_id"), f"annotations[{i}].category_id"),
                bbox=bbox,
                area=_as_number(area, f"annotations[{i}].area") if area is not None else bbox.area(),
                iscrowd=bool(rec.get("iscrowd", 0)),
                segmentation=rec.get("segmentation"),
            )
        )

    return Dataset.build(images, annotations, categories)


def load_ground_truth(path: str | Path) -> Dataset:
    """Parse and validate a COCO annotation file.

    Boxes marginally outside their image are clamped with a warning; every
    hard violation (dangling reference, duplicate id, non-positive box)
    raises ValidationError listing the offending records. Missing ``area``
    fields default to bbox w*h.
    """
    ds = parse_ground_truth(path)
    report = validate(ds)
    if not report.ok:
        raise ValidationError(f"{path}: ground truth failed validation", report.details)
    clamp_count = report.warnings.get("bbox_out_of_bounds", 0)
    if clamp_count:
        img_dims = {r.id: (r.width, r.height) for r in ds.images}
        fixed = []
        for ann in ds.annotations:
            w, h = img_dims[ann.image_id]
            clamped = _clamp_box(ann.bbox, w, h)
            if clamped != ann.bbox:
                log.warning("clamping annotation %d bbox to image %d bounds", ann.id, ann.image_id)
                recompute = ann.area == ann.bbox.area()
                ann = replace(ann, bbox=clamped, area=clamped.area() if recompute else ann.area)
            fixed.append(ann)
        ds = Dataset.build(ds.images, fixed, ds.categories)
    log.info(
        "loaded %s: %d images, %d annotations, %d categories (%d boxes clamped)",
        path, len(ds.images), len(ds.annotations), len(ds.categories), clamp_count,
    )
    return ds


def load_detections(path: str | Path, ds: Dataset) -> DetectionSet:
    """Parse a COCO results array and validate every record against ``ds``."""
    raw = _read_json(path)
    if not isinstance(raw, list):
        raise ValidationError(f"{path}: expected a JSON array of detection records")
    problems: list[tuple[str, str]] = []
    detections = []
    for i, rec in enumerate(raw):
        bbox = _parse_bbox(rec.get("bbox"), f"detections[{i}]")
        image_id = _as_int(rec.get("image_id"), f"detections[{i}].image_id")
        category_id = _as_int(rec.get("category_id"), f"detections[{i}].category_id")
        score = _as_number(rec.get("score"), f"detections[{i}].score")
        if not ds.has_image(image_id):
            problems.append(("missing_image_ref", f"detections[{i}] references unknown image {image_id}"))
        if not ds.has_category(category_id):
            problems.append(
                ("missing_category_ref", f"detections[{i}] references unknown category {category_id}")
            )
        if not 0.0 <= score <= 1.0:
            problems.append(("score_out_of_range", f"detections[{i}] has score {score}"))
        if bbox.w <= 0 or bbox.h <= 0:
            problems.append(("nonpositive_box", f"detections[{i}] has bbox {bbox.as_list()}"))
        detections.append(
            Detection(
                image_id=image_id,
                category_id=category_id,
                bbox=bbox,
                score=score,
                segmentation=rec.get("segmentation"),
            )
        )
    if problems:
        raise ValidationError(f"{path}: detections failed validation", problems)
    log.info("loaded %s: %d detections", path, len(detections))
    return DetectionSet.build(detections)


def load_classifications(path: str | Path, ds: Dataset) -> ClassificationSet:
    """Parse a JSON-Lines classification-prediction file against ``ds``.

    One record per (annotation_id, sample_index); sample_index is absent for
    whole-target predictions. Duplicate keys and unknown ids are errors.
    """
    problems: list[tuple[str, str]] = []
    records = []
    seen: set[tuple[int, int | None]] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"line {lineno}: {e.msg}", path=str(path), offset=e.pos) from e
        ann_id = _as_int(rec.get("annotation_id"), f"line {lineno} annotation_id")
        label = _as_int(rec.get("label"), f"line {lineno} label")
        score = _as_number(rec.get("score"), f"line {lineno} score")
        sample_index = rec.get("sample_index")
        if sample_index is not None:
            sample_index = _as_int(sample_index, f"line {lineno} sample_index")
        key = (ann_id, sample_index)
        if key in seen:
            problems.append(("duplicate_key", f"line {lineno}: duplicate record for {key}"))
        seen.add(key)
        if not ds.has_annotation(ann_id):
            problems.append(("missing_annotation_ref", f"line {lineno}: unknown annotation_id {ann_id}"))
        if not ds.has_category(label):
            problems.append(("missing_category_ref", f"line {lineno}: unknown label {label}"))
        if not 0.0 <= score <= 1.0:
            problems.append(("score_out_of_range", f"line {lineno}: score {score}"))
        records.append(ClassificationRecord(annotation_id=ann_id, label=label, score=score, sample_index=sample_index))
    if problems:
        raise ValidationError(f"{path}: classifications failed validation", problems)
    log.info("loaded %s: %d classification records", path, len(records))
    return ClassificationSet.build(records)


# ---------------------------------------------------------------------------
# Serialization (round-trips with the loaders)


def dataset_to_dict(ds: Dataset) -> dict:
    images = [
        {"id": r.id, "file_name": r.file_name, "width": r.width, "height": r.height} for r in ds.images
    ]
    annotations = []
    for a in ds.annotations:
        rec: dict = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": a.bbox.as_list(),
            "area": a.area,
            "iscrowd": int(a.iscrowd),
        }
        if a.segmentation is not None:
            rec["segmentation"] = a.segmentation
        annotations.append(rec)
    categories = [{"id": c.id, "name": c.name} for c in ds.categories]
    return {"images": images, "annotations": annotations, "categories": categories}


def save_ground_truth(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(ds)), encoding="utf-8")


def detections_to_list(dets: DetectionSet) -> list[dict]:
    out = []
    for d in dets.detections:
        rec: dict = {
            "image_id": d.image_id,
            "category_id": d.category_id,
            "bbox": d.bbox.as_list(),
            "score": d.score,
        }
        if d.segmentation is not None:
            rec["segmentation"] = d.segmentation
        out.append(rec)
    return out


def save_detections(dets: DetectionSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(detections_to_list(dets)), encoding="utf-8")


def save_classifications(cls: ClassificationSet, path: str | Path) -> None:
    lines = []
    for r in cls.records:
        rec: dict = {"annotation_id": r.annotation_id, "label": r.label, "score": r.score}
        if r.sample_index is not None:
            rec["sample_index"] = r.sample_index
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
