"""COCO-style detector evaluation: AP/AR over an IOU sweep, size ranges, and
per-image detection caps.

Matching is greedy in confidence order: each detection takes the
highest-IOU target at or above the threshold that is still unassigned
(crowd regions may absorb any number of detections and mark them ignored).
Per-class precision is interpolated (running max from high recall down) and
sampled at 101 evenly spaced recall points; classes without ground truth in
a range carry the -1 sentinel and drop out of every mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry, masks
from .datamodel import Annotation, Box, Dataset, Detection, DetectionSet
from .errors import ConfigurationError, DetboundError
from .parallel import parallel_map

SENTINEL = -1.0

DEFAULT_IOU_THRESHOLDS = tuple(np.linspace(0.5, 0.95, 10).tolist())
DEFAULT_RECALL_POINTS = tuple(np.linspace(0.0, 1.0, 101).tolist())
DEFAULT_AREA_RANGES = (
    ("all", 0.0, 1e10),
    ("small", 0.0, 32.0**2),
    ("medium", 32.0**2, 96.0**2),
    ("large", 96.0**2, 1e10),
)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    recall_points: tuple[float, ...] = DEFAULT_RECALL_POINTS
    area_ranges: tuple[tuple[str, float, float], ...] = DEFAULT_AREA_RANGES
    max_dets: tuple[int, ...] = (1, 10, 100)
    kernel: str = "box"

    def __post_init__(self):
        ts = self.iou_thresholds
        if not ts or any(not 0.0 < t <= 1.0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigurationError(f"iou thresholds must be strictly increasing in (0, 1]: {ts}")
        if not self.max_dets or any(m < 1 for m in self.max_dets) or list(self.max_dets) != sorted(
            self.max_dets
        ):
            raise ConfigurationError(f"max_dets must be ascending positive integers: {self.max_dets}")
        if self.kernel not in ("box", "mask"):
            raise ConfigurationError(f"kernel must be 'box' or 'mask', got {self.kernel!r}")

    def area_names(self) -> list[str]:
        return [name for name, _, _ in self.area_ranges]

    def threshold_index(self, value: float) -> int | None:
        for i, t in enumerate(self.iou_thresholds):
            if abs(t - value) < 1e-9:
                return i
        return None


@dataclass
class MatchResult:
    """Greedy matching of one (image, class) group at one threshold.

    All per-detection lists follow ``order`` (indices into the input list,
    score-descending, ties by input position)."""

    order: list[int]
    matched_target: list[int | None]  # annotation id or None
    iou: list[float]
    ignored: list[bool]
    target_matched_by: dict[int, int | None]  # annotation id -> position in ``order``


@dataclass
class PRCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    interpolated: np.ndarray
    gt_count: int


def average_precision(curve: PRCurve) -> float:
    """Mean interpolated precision over the sampled recall points; classes
    with no ground truth return the -1 sentinel."""
    if curve.gt_count == 0:
        return SENTINEL
    return float(curve.interpolated.mean())


@dataclass
class EvalSummary:
    """The 12 standard metrics plus the full precision/recall lattice."""

    metrics: dict[str, float]
    per_class: list[dict]
    precision: np.ndarray  # [T, R, K, A, M]
    recall: np.ndarray  # [T, K, A, M]
    config: EvalConfig = field(repr=False, default_factory=EvalConfig)
    category_ids: list[int] = field(default_factory=list)

    def mean_pr_curves(self) -> np.ndarray:
        """Class-averaged interpolated precision [T, R] (area=all, top cap)."""
        lattice = self.precision[:, :, :, 0, -1]
        out = np.full(lattice.shape[:2], SENTINEL)
        for t in range(lattice.shape[0]):
            for r in range(lattice.shape[1]):
                vals = lattice[t, r, :]
                vals = vals[vals > SENTINEL]
                if vals.size:
                    out[t, r] = vals.mean()
        return out


# ---------------------------------------------------------------------------
# Matching


def _greedy_single(
    ious: np.ndarray, gt_ignore: np.ndarray, gt_crowd: np.ndarray, thresh: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One threshold of greedy matching over a detection x target IOU matrix.

    Targets are scanned non-ignored first; a detection settles on the
    highest-IOU target still available, never trading a non-ignored match
    for an ignored one. Returns (det->target index or -1, det ignored flag,
    target->det index or -1)."""
    n_det, n_gt = ious.shape
    gt_order = np.argsort(gt_ignore, kind="stable")
    dtm = np.full(n_det, -1, dtype=np.int64)
    dt_ig = np.zeros(n_det, dtype=bool)
    gtm = np.full(n_gt, -1, dtype=np.int64)
    floor = min(thresh, 1.0 - 1e-10)
    for d in range(n_det):
        best = floor
        m = -1
        for g in gt_order:
            if gtm[g] >= 0 and not gt_crowd[g]:
                continue
            if m >= 0 and not gt_ignore[m] and gt_ignore[g]:
                break
            v = ious[d, g]
            if v < best:
                continue
            best = v
            m = g
        if m >= 0:
            dtm[d] = m
            dt_ig[d] = bool(gt_ignore[m])
            if gtm[m] < 0:
                gtm[m] = d
    return dtm, dt_ig, gtm


def _sorted_det_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def _box_iou_matrix(dets: Sequence[Detection], gts: Sequence[Annotation]) -> np.ndarray:
    return geometry.iou_matrix(
        [d.bbox for d in dets], [g.bbox for g in gts], [g.iscrowd for g in gts]
    )


def _to_rles(objs: Sequence, kind: str, width: int, height: int) -> list[masks.RleMask]:
    out = []
    for obj in objs:
        if obj.segmentation is None:
            raise ConfigurationError(f"mask kernel requested but a {kind} record lacks segmentation")
        out.append(masks.segmentation_to_rle(obj.segmentation, width, height))
    return out


def _rle_iou_matrix(
    det_rles: Sequence[masks.RleMask], gt_rles: Sequence[masks.RleMask], gt_crowd: Sequence[bool]
) -> np.ndarray:
    out = np.zeros((len(det_rles), len(gt_rles)), dtype=np.float64)
    for j, (g, crowd) in enumerate(zip(gt_rles, gt_crowd)):
        for i, d in enumerate(det_rles):
            out[i, j] = masks.iof_mask(d, g) if crowd else masks.iou_mask(d, g)
    return out


def _mask_iou_matrix(
    dets: Sequence[Detection], gts: Sequence[Annotation], width: int, height: int
) -> np.ndarray:
    return _rle_iou_matrix(
        _to_rles(dets, "detection", width, height),
        _to_rles(gts, "ground-truth", width, height),
        [g.iscrowd for g in gts],
    )


def match_greedy(
    dets: Sequence[Detection],
    targets: Sequence[Annotation],
    thresh: float,
    kernel: str = "box",
    image_size: tuple[int, int] | None = None,
) -> MatchResult:
    """Match one (image, class) group of detections against targets."""
    order = _sorted_det_order(dets)
    dets_sorted = [dets[i] for i in order]
    if kernel == "mask":
        if image_size is None:
            raise ConfigurationError("mask kernel needs image_size=(width, height)")
        ious = _mask_iou_matrix(dets_sorted, targets, *image_size)
    else:
        ious = _box_iou_matrix(dets_sorted, targets)
    crowd = np.array([t.iscrowd for t in targets], dtype=bool)
    dtm, dt_ig, gtm = _greedy_single(ious, crowd.copy(), crowd, thresh)
    return MatchResult(
        order=order,
        matched_target=[targets[m].id if m >= 0 else None for m in dtm],
        iou=[float(ious[d, m]) if m >= 0 else 0.0 for d, m in enumerate(dtm)],
        ignored=dt_ig.tolist(),
        target_matched_by={t.id: (int(gtm[g]) if gtm[g] >= 0 else None) for g, t in enumerate(targets)},
    )


# ---------------------------------------------------------------------------
# Per-class evaluation


@dataclass
class _ImageEval:
    scores: np.ndarray  # [D] sorted descending
    dtm: np.ndarray  # [T, D] matched gt index or -1
    dt_ig: np.ndarray  # [T, D]
    n_pos: int  # non-ignored gt count in range


def _evaluate_category(ds: Dataset, dets: DetectionSet, cfg: EvalConfig, cat_id: int):
    thresholds = cfg.iou_thresholds
    n_t = len(thresholds)
    n_r = len(cfg.recall_points)
    n_a = len(cfg.area_ranges)
    n_m = len(cfg.max_dets)
    cap = max(cfg.max_dets)
    recall_points = np.asarray(cfg.recall_points)

    per_range: list[list[_ImageEval]] = [[] for _ in range(n_a)]
    for img_id in ds.image_ids():
        gts = ds.annotations_for(img_id, cat_id)
        dts = dets.for_image_category(img_id, cat_id)
        if not gts and not dts:
            continue
        order = _sorted_det_order(dts)[:cap]
        dts_sorted = [dts[i] for i in order]
        if cfg.kernel == "mask":
            img = ds.image(img_id)
            det_rles = _to_rles(dts_sorted, "detection", img.width, img.height)
            gt_rles = _to_rles(gts, "ground-truth", img.width, img.height)
            ious = _rle_iou_matrix(det_rles, gt_rles, [g.iscrowd for g in gts])
            dt_areas = np.array([r.area() for r in det_rles], dtype=np.float64)
        else:
            ious = _box_iou_matrix(dts_sorted, gts)
            dt_areas = np.array([d.bbox.area() for d in dts_sorted], dtype=np.float64)
        scores = np.array([d.score for d in dts_sorted], dtype=np.float64)
        gt_areas = np.array([g.area for g in gts], dtype=np.float64)
        gt_crowd = np.array([g.iscrowd for g in gts], dtype=bool)
        n_det = len(dts_sorted)

        for a_idx, (_, lo, hi) in enumerate(cfg.area_ranges):
            gt_ig = gt_crowd | (gt_areas < lo) | (gt_areas > hi)
            dt_out = (dt_areas < lo) | (dt_areas > hi)
            dtm = np.full((n_t, n_det), -1, dtype=np.int64)
            dt_ig = np.zeros((n_t, n_det), dtype=bool)
            for t_idx, t in enumerate(thresholds):
                m, ig, _ = _greedy_single(ious, gt_ig, gt_crowd, t)
                dtm[t_idx] = m
                # unmatched detections outside the size range do not count as FPs
                dt_ig[t_idx] = ig | ((m < 0) & dt_out)
            per_range[a_idx].append(
                _ImageEval(scores=scores, dtm=dtm, dt_ig=dt_ig, n_pos=int((~gt_ig).sum()))
            )

    precision = np.full((n_t, n_r, n_a, n_m), SENTINEL)
    recall = np.full((n_t, n_a, n_m), SENTINEL)
    for a_idx in range(n_a):
        results = per_range[a_idx]
        n_pos = sum(r.n_pos for r in results)
        if n_pos == 0:
            continue
        for m_idx, maxdet in enumerate(cfg.max_dets):
            if results:
                scores = np.concatenate([r.scores[:maxdet] for r in results])
                dtm = np.concatenate([r.dtm[:, :maxdet] for r in results], axis=1)
                dt_ig = np.concatenate([r.dt_ig[:, :maxdet] for r in results], axis=1)
            else:
                scores = np.zeros(0)
                dtm = np.full((n_t, 0), -1, dtype=np.int64)
                dt_ig = np.zeros((n_t, 0), dtype=bool)
            sort = np.argsort(-scores, kind="stable")
            dtm = dtm[:, sort]
            dt_ig = dt_ig[:, sort]
            tp_cum = np.cumsum((dtm >= 0) & ~dt_ig, axis=1, dtype=np.float64)
            fp_cum = np.cumsum((dtm < 0) & ~dt_ig, axis=1, dtype=np.float64)
            for t_idx in range(n_t):
                tp = tp_cum[t_idx]
                fp = fp_cum[t_idx]
                rc = tp / n_pos
                pr = tp / (fp + tp + np.spacing(1))
                recall[t_idx, a_idx, m_idx] = rc[-1] if rc.size else 0.0
                pr = np.maximum.accumulate(pr[::-1])[::-1]
                q = np.zeros(n_r)
                inds = np.searchsorted(rc, recall_points, side="left")
                valid = inds < pr.size
                q[valid] = pr[inds[valid]]
                precision[t_idx, :, a_idx, m_idx] = q
    return precision, recall


def _mean_valid(values: np.ndarray) -> float:
    v = values[values > SENTINEL]
    return float(v.mean()) if v.size else SENTINEL


def evaluate(ds: Dataset, dets: DetectionSet, cfg: EvalConfig | None = None, threads: int = 1) -> EvalSummary:
    """Run the full evaluation and aggregate the 12 standard metrics."""
    cfg = cfg or EvalConfig()
    if cfg.kernel == "mask":
        missing = [d for d in dets.detections if d.segmentation is None]
        if missing:
            raise ConfigurationError(f"mask kernel requested but {len(missing)} detections lack segmentation")
    cat_ids = ds.category_ids()
    if not cat_ids:
        raise DetboundError("dataset has no categories")
    per_cat = parallel_map(lambda c: _evaluate_category(ds, dets, cfg, c), cat_ids, threads)
    precision = np.stack([p for p, _ in per_cat], axis=2)  # [T, R, K, A, M]
    recall = np.stack([r for _, r in per_cat], axis=1)  # [T, K, A, M]

    t50 = cfg.threshold_index(0.50)
    t75 = cfg.threshold_index(0.75)
    area_idx = {name: i for i, name in enumerate(cfg.area_names())}
    md_idx = {m: i for i, m in enumerate(cfg.max_dets)}
    a_all = area_idx.get("all", 0)
    m_top = len(cfg.max_dets) - 1

    def ap_slice(t_idx=None, a=a_all, m=m_top):
        block = precision[:, :, :, a, m] if t_idx is None else precision[t_idx : t_idx + 1, :, :, a, m]
        return _mean_valid(block)

    def ar_slice(a=a_all, m=m_top):
        return _mean_valid(recall[:, :, a, m])

    metrics = {
        "ap": ap_slice(),
        "ap50": ap_slice(t_idx=t50) if t50 is not None else SENTINEL,
        "ap75": ap_slice(t_idx=t75) if t75 is not None else SENTINEL,
        "ap_small": ap_slice(a=area_idx["small"]) if "small" in area_idx else SENTINEL,
        "ap_medium": ap_slice(a=area_idx["medium"]) if "medium" in area_idx else SENTINEL,
        "ap_large": ap_slice(a=area_idx["large"]) if "large" in area_idx else SENTINEL,
        "ar_1": ar_slice(m=md_idx[1]) if 1 in md_idx else SENTINEL,
        "ar_10": ar_slice(m=md_idx[10]) if 10 in md_idx else SENTINEL,
        "ar_100": ar_slice(m=md_idx[100]) if 100 in md_idx else SENTINEL,
        "ar_small": ar_slice(a=area_idx["small"]) if "small" in area_idx else SENTINEL,
        "ar_medium": ar_slice(a=area_idx["medium"]) if "medium" in area_idx else SENTINEL,
        "ar_large": ar_slice(a=area_idx["large"]) if "large" in area_idx else SENTINEL,
    }

    per_class = []
    for k, cat_id in enumerate(cat_ids):
        cat = ds.category(cat_id)
        row = {
            "category_id": cat_id,
            "name": cat.name,
            "ap": _mean_valid(precision[:, :, k, a_all, m_top]),
            "ap50": _mean_valid(precision[t50, :, k, a_all, m_top]) if t50 is not None else SENTINEL,
            "ap75": _mean_valid(precision[t75, :, k, a_all, m_top]) if t75 is not None else SENTINEL,
            "ap_s": _mean_valid(precision[:, :, k, area_idx["small"], m_top]) if "small" in area_idx else SENTINEL,
            "ap_m": _mean_valid(precision[:, :, k, area_idx["medium"], m_top]) if "medium" in area_idx else SENTINEL,
            "ap_l": _mean_valid(precision[:, :, k, area_idx["large"], m_top]) if "large" in area_idx else SENTINEL,
        }
        per_class.append(row)

    return EvalSummary(
        metrics=metrics,
        per_class=per_class,
        precision=precision,
        recall=recall,
        config=cfg,
        category_ids=list(cat_ids),
    )


def average_recall(summary: EvalSummary, max_dets: int = 100, area: str = "all") -> float:
    """Mean recall over the IOU sweep for one (cap, size range) cell."""
    area_idx = {name: i for i, name in enumerate(summary.config.area_names())}
    md_idx = {m: i for i, m in enumerate(summary.config.max_dets)}
    if area not in area_idx or max_dets not in md_idx:
        raise DetboundError(f"no recall cell for area={area!r}, max_dets={max_dets}")
    return _mean_valid(summary.recall[:, :, area_idx[area], md_idx[max_dets]])


def build_pr_curve(
    tp_flags: Sequence[bool], gt_count: int, recall_points: Sequence[float] = DEFAULT_RECALL_POINTS
) -> PRCurve:
    """PR curve from true/false flags of a score-sorted detection list."""
    flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(flags, dtype=np.float64)
    fp = np.cumsum(~flags, dtype=np.float64)
    if gt_count > 0:
        rc = tp / gt_count
    else:
        rc = np.zeros_like(tp)
    pr = tp / np.maximum(tp + fp, 1.0)
    pts = np.asarray(recall_points)
    interp_src = np.maximum.accumulate(pr[::-1])[::-1] if pr.size else pr
    q = np.zeros(pts.size)
    inds = np.searchsorted(rc, pts, side="left")
    valid = inds < interp_src.size
    q[valid] = interp_src[inds[valid]]
    return PRCurve(recalls=rc, precisions=pr, interpolated=q, gt_count=gt_count)
