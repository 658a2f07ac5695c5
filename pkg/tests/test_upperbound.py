from __future__ import annotations

import numpy as np
import pytest

from conftest import make_dataset
from oracle_eval import oracle_evaluate

from detbound.datamodel import ClassificationRecord, ClassificationSet
from detbound.errors import DetboundError, ValidationError
from detbound.evaluator import EvalConfig, evaluate
from detbound.geometry import SamplerSpec
from detbound.upperbound import (
    Strategy2Mode,
    accuracy_uap_correlation,
    build_sample_manifest,
    build_uap_detections,
    read_sample_manifest,
    strategy2_aggregate,
    top1_accuracy,
    write_sample_manifest,
)


def cls_set(records) -> ClassificationSet:
    return ClassificationSet.build(
        [
            ClassificationRecord(
                annotation_id=r[0],
                label=r[1],
                score=r[2],
                sample_index=r[3] if len(r) > 3 else None,
            )
            for r in records
        ]
    )


def two_class_dataset():
    return make_dataset(
        [(1, 640, 640)],
        [
            (1, 1, 1, (10, 10, 40, 40)),
            (2, 1, 2, (100, 100, 60, 60)),
            (3, 1, 1, (300, 300, 150, 150)),
        ],
        categories=[(1, "a"), (2, "b")],
    )


class TestBuildUapDetections:
    def test_perfect_classifier_hits_ap_one_at_every_threshold(self):
        ds = two_class_dataset()
        cls = cls_set([(1, 1, 1.0), (2, 2, 1.0), (3, 1, 1.0)])
        summary = evaluate(ds, build_uap_detections(ds, cls))
        assert summary.metrics["ap"] == pytest.approx(1.0, abs=1e-12)
        per_thr = summary.precision[:, :, :, 0, -1].mean(axis=(1, 2))
        assert np.all(per_thr == per_thr[0])

    def test_any_predictions_are_iou_invariant(self):
        ds = two_class_dataset()
        cls = cls_set([(1, 2, 0.4), (2, 2, 0.7), (3, 1, 0.2)])  # partly wrong
        summary = evaluate(ds, build_uap_detections(ds, cls))
        m = summary.metrics
        assert m["ap50"] == m["ap75"] == m["ap"]

    def test_missing_prediction_lists_annotation_ids(self):
        ds = two_class_dataset()
        cls = cls_set([(1, 1, 1.0)])
        with pytest.raises(ValidationError) as exc:
            build_uap_detections(ds, cls)
        assert "2" in str(exc.value) and "3" in str(exc.value)

    def test_crowd_annotations_are_skipped(self):
        ds = make_dataset(
            [(1, 640, 640)],
            [(1, 1, 1, (10, 10, 40, 40)), (2, 1, 1, (5, 5, 200, 200), {"iscrowd": True})],
        )
        dets = build_uap_detections(ds, cls_set([(1, 1, 0.9)]))
        assert len(dets) == 1

    def test_confidence_override_can_only_hurt_on_rank_inversion(self):
        # ann 1 (true class 2) gets a wrong low-confidence label 1; ann 2
        # (true class 1) a correct high-confidence one. Forcing scores to 1
        # promotes the wrong detection to the front of the class-1 list.
        ds = make_dataset(
            [(1, 640, 640)],
            [(1, 1, 2, (10, 10, 40, 40)), (2, 1, 1, (100, 100, 60, 60))],
            categories=[(1, "a"), (2, "b")],
        )
        cls = cls_set([(1, 1, 0.3), (2, 1, 0.9)])
        cfg = EvalConfig()
        kwargs = {
            "iou_thresholds": list(cfg.iou_thresholds),
            "recall_points": list(cfg.recall_points),
            "area_ranges": {n: (lo, hi) for n, lo, hi in cfg.area_ranges},
            "max_dets": list(cfg.max_dets),
        }
        plain = evaluate(ds, build_uap_detections(ds, cls), cfg).metrics["ap"]
        forced = evaluate(ds, build_uap_detections(ds, cls, confidence_override=1.0), cfg).metrics["ap"]
        assert forced < plain
        # pin both numbers with the brute-force oracle
        assert plain == pytest.approx(
            oracle_evaluate(ds, build_uap_detections(ds, cls), **kwargs)["ap"], abs=1e-9
        )
        assert forced == pytest.approx(
            oracle_evaluate(ds, build_uap_detections(ds, cls, confidence_override=1.0), **kwargs)["ap"],
            abs=1e-9,
        )

    def test_bad_override_rejected(self):
        ds = two_class_dataset()
        with pytest.raises(DetboundError):
            build_uap_detections(ds, cls_set([(1, 1, 1.0)]), confidence_override=1.5)

    def test_file_order_permutation_is_invisible(self):
        ds = two_class_dataset()
        records = [(1, 1, 0.5), (2, 2, 0.6), (3, 1, 0.7)]
        a = build_uap_detections(ds, cls_set(records))
        b = build_uap_detections(ds, cls_set(records[::-1]))
        assert a == b


class TestStrategy2:
    def one_ann_dataset(self):
        return make_dataset([(1, 640, 640)], [(1, 1, 1, (10, 10, 40, 40))], categories=[(1, "a"), (2, "b")])

    def test_unanimous_samples(self):
        ds = self.one_ann_dataset()
        preds = cls_set([(1, 1, s, i) for i, s in enumerate([0.6, 0.7, 0.8, 0.9])])
        for mode in Strategy2Mode:
            det = strategy2_aggregate(ds, preds, mode).detections[0]
            assert (det.category_id, det.score) == (1, 0.9)

    def test_modes_disagree_when_confidence_and_frequency_split(self):
        ds = self.one_ann_dataset()
        preds = cls_set([(1, 1, 0.9, 0), (1, 2, 0.6, 1), (1, 2, 0.7, 2), (1, 2, 0.8, 3)])
        confident = strategy2_aggregate(ds, preds, Strategy2Mode.MOST_CONFIDENT_BOX).detections[0]
        frequent = strategy2_aggregate(ds, preds, Strategy2Mode.MOST_FREQUENT_LABEL).detections[0]
        assert (confident.category_id, confident.score) == (1, 0.9)
        assert (frequent.category_id, frequent.score) == (2, 0.8)

    def test_frequency_tie_breaks_on_best_score_then_lower_id(self):
        ds = self.one_ann_dataset()
        preds = cls_set([(1, 1, 0.5, 0), (1, 1, 0.6, 1), (1, 2, 0.7, 2), (1, 2, 0.4, 3)])
        det = strategy2_aggregate(ds, preds, Strategy2Mode.MOST_FREQUENT_LABEL).detections[0]
        assert (det.category_id, det.score) == (2, 0.7)  # same count, higher best score
        preds = cls_set([(1, 2, 0.7, 0), (1, 2, 0.4, 1), (1, 1, 0.7, 2), (1, 1, 0.4, 3)])
        det = strategy2_aggregate(ds, preds, Strategy2Mode.MOST_FREQUENT_LABEL).detections[0]
        assert det.category_id == 1  # full tie falls to the lower category id

    def test_detections_always_sit_on_target_boxes(self):
        ds = two_class_dataset()
        preds = cls_set([(a, 2, 0.5 + a / 100, i) for a in (1, 2, 3) for i in range(2)])
        dets = strategy2_aggregate(ds, preds, Strategy2Mode.MOST_CONFIDENT_BOX)
        assert [d.bbox for d in dets.detections] == [a.bbox for a in ds.annotations]
        summary = evaluate(ds, dets)
        assert summary.metrics["ap50"] == summary.metrics["ap75"] == summary.metrics["ap"]

    def test_perfect_sampled_classifier_reaches_one(self):
        ds = two_class_dataset()
        preds = cls_set(
            [(a.id, a.category_id, 0.5 + i / 10, i) for a in ds.annotations for i in range(4)]
        )
        for mode in Strategy2Mode:
            summary = evaluate(ds, strategy2_aggregate(ds, preds, mode))
            assert summary.metrics["ap"] == pytest.approx(1.0, abs=1e-12)

    def test_zero_samples_is_an_error(self):
        ds = self.one_ann_dataset()
        with pytest.raises(ValidationError):
            strategy2_aggregate(ds, cls_set([(1, 1, 0.9)]), Strategy2Mode.MOST_CONFIDENT_BOX)

    def test_manifest_coverage_enforced(self):
        ds = self.one_ann_dataset()
        manifest = build_sample_manifest(ds, SamplerSpec(gamma=0.5, k=4, seed=0))
        preds = cls_set([(1, 1, 0.9, 0), (1, 1, 0.8, 1)])  # two of four samples
        with pytest.raises(ValidationError):
            strategy2_aggregate(ds, preds, Strategy2Mode.MOST_CONFIDENT_BOX, manifest=manifest)


class TestAccuracy:
    def test_all_correct(self):
        ds = two_class_dataset()
        rep = top1_accuracy(cls_set([(1, 1, 0.9), (2, 2, 0.9), (3, 1, 0.9)]), ds)
        assert rep.overall == 1.0
        assert rep.per_class == {1: 1.0, 2: 1.0}

    def test_none_correct(self):
        ds = two_class_dataset()
        rep = top1_accuracy(cls_set([(1, 2, 0.9), (2, 1, 0.9), (3, 2, 0.9)]), ds)
        assert rep.overall == 0.0

    def test_per_class_split(self):
        ds = two_class_dataset()
        rep = top1_accuracy(cls_set([(1, 1, 0.9), (2, 1, 0.9), (3, 2, 0.9)]), ds)
        assert rep.per_class == {1: 0.5, 2: 0.0}
        assert rep.overall == pytest.approx(1 / 3)


class TestCorrelation:
    def test_identity_line(self):
        acc = {1: 0.3, 2: 0.5, 3: 0.9}
        rep = accuracy_uap_correlation(acc, dict(acc))
        assert rep.slope == pytest.approx(1.0)
        assert rep.intercept == pytest.approx(0.0, abs=1e-12)
        assert rep.r_squared == pytest.approx(1.0)

    def test_constant_uap_gives_zero_r_squared(self):
        rep = accuracy_uap_correlation({1: 0.3, 2: 0.5}, {1: 0.7, 2: 0.7})
        assert rep.r_squared == 0.0
        assert rep.slope == 0.0

    def test_five_point_fit_matches_closed_form(self):
        acc = {1: 0.2, 2: 0.4, 3: 0.5, 4: 0.7, 5: 0.9}
        uap = {1: 0.25, 2: 0.35, 3: 0.6, 4: 0.65, 5: 0.8}
        rep = accuracy_uap_correlation(acc, uap)
        slope, intercept = np.polyfit(list(acc.values()), list(uap.values()), 1)
        r = np.corrcoef(list(acc.values()), list(uap.values()))[0, 1]
        assert rep.slope == pytest.approx(slope, abs=1e-12)
        assert rep.intercept == pytest.approx(intercept, abs=1e-12)
        assert rep.r_squared == pytest.approx(r * r, abs=1e-12)

    def test_sentinel_classes_excluded(self):
        rep = accuracy_uap_correlation({1: 0.2, 2: 0.5, 3: 0.9}, {1: 0.2, 2: -1.0, 3: 0.9})
        assert len(rep.points) == 2

    def test_too_few_points_rejected(self):
        with pytest.raises(DetboundError):
            accuracy_uap_correlation({1: 0.5}, {1: 0.5})


class TestSampleManifest:
    def test_deterministic_and_ordered(self):
        ds = two_class_dataset()
        spec = SamplerSpec(gamma=0.5, k=4, seed=9)
        a = build_sample_manifest(ds, spec)
        b = build_sample_manifest(ds, spec)
        assert a == b
        assert [r.annotation_id for r in a] == [1] * 4 + [2] * 4 + [3] * 4
        assert [r.sample_index for r in a[:4]] == [0, 1, 2, 3]

    def test_round_trips_through_csv(self, tmp_path):
        ds = two_class_dataset()
        rows = build_sample_manifest(ds, SamplerSpec(gamma=0.5, k=2, seed=1))
        p = tmp_path / "manifest.csv"
        write_sample_manifest(rows, p)
        assert read_sample_manifest(p) == rows
