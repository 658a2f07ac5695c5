from __future__ import annotations

import json
from pathlib import Path

import pytest

from detbound.datamodel import (
    Annotation,
    Box,
    Category,
    Dataset,
    Detection,
    DetectionSet,
)

FIXTURES = Path(__file__).parent / "fixtures"


def make_dataset(images, annotations, categories=None) -> Dataset:
    """images: (id, w, h); annotations: (id, image_id, category_id, bbox[, kwargs])."""
    imgs = [ImageRecordCompat(*rec) for rec in images]
    anns = []
    for rec in annotations:
        ann_id, image_id, category_id, bbox = rec[:4]
        kwargs = rec[4] if len(rec) > 4 else {}
        box = Box(*bbox)
        anns.append(
            Annotation(
                id=ann_id,
                image_id=image_id,
                category_id=category_id,
                bbox=box,
                area=kwargs.get("area", box.area()),
                iscrowd=kwargs.get("iscrowd", False),
                segmentation=kwargs.get("segmentation"),
            )
        )
    if categories is None:
        categories = sorted({a.category_id for a in anns}) or [1]
        categories = [(c, f"class{c}") for c in categories]
    cats = [Category(id=c, name=n) for c, n in categories]
    return Dataset.build(imgs, anns, cats)


def ImageRecordCompat(img_id, w, h, file_name=None):
    from detbound.datamodel import ImageRecord

    return ImageRecord(id=img_id, file_name=file_name or f"{img_id:06d}.png", width=w, height=h)


def make_detections(records) -> DetectionSet:
    """records: (image_id, category_id, bbox, score[, segmentation])."""
    dets = []
    for rec in records:
        image_id, category_id, bbox, score = rec[:4]
        seg = rec[4] if len(rec) > 4 else None
        dets.append(
            Detection(
                image_id=image_id,
                category_id=category_id,
                bbox=Box(*bbox),
                score=score,
                segmentation=seg,
            )
        )
    return DetectionSet.build(dets)


@pytest.fixture
def reference_fixture():
    base = FIXTURES / "reference"
    return {
        "gt_path": base / "gt.json",
        "dets_path": base / "dets.json",
        "expected": json.loads((base / "expected_metrics.json").read_text()),
    }


@pytest.fixture
def rle_string_fixture():
    return json.loads((FIXTURES / "reference" / "rle_strings.json").read_text())
