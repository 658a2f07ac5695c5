"""Box geometry: IOU kernels and the IOU-constrained box sampler.

The sampler generates boxes with the same width/height as a target box whose
IOU with the target is at least (boundary mode: exactly) a chosen threshold
``gamma``. With overlap fractions ``alpha`` (width) and ``beta`` (height),
two equal-size boxes overlap with IOU = alpha*beta / (2 - alpha*beta), so the
IOU == gamma contour is alpha*beta == 2*gamma/(1+gamma). A sampled box is
placed on one of the four corner curves (one per corner of the target the
sample overlaps) by offsetting the target's top-left corner.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .datamodel import Box
from .errors import DetboundError


def iou_box(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; symmetric, 1 iff equal."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def iof_box(det: Box, crowd: Box) -> float:
    """Intersection over the detection's own area (crowd-region matching)."""
    iw = min(det.x2, crowd.x2) - max(det.x, crowd.x)
    ih = min(det.y2, crowd.y2) - max(det.y, crowd.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / det.area()


def iou_matrix(dets: list[Box], gts: list[Box], crowd: list[bool]) -> np.ndarray:
    """Pairwise IOU of detections x targets, IOF where the target is a crowd."""
    out = np.zeros((len(dets), len(gts)), dtype=np.float64)
    for j, (g, cr) in enumerate(zip(gts, crowd)):
        for i, d in enumerate(dets):
            out[i, j] = iof_box(d, g) if cr else iou_box(d, g)
    return out


class CornerBranch(enum.Enum):
    """The four corner curves a sample can be drawn from, named by which
    corner of the target the sampled box overlaps."""

    TOP_LEFT = 0
    TOP_RIGHT = 1
    BOTTOM_RIGHT = 2
    BOTTOM_LEFT = 3


class SamplerMode(enum.Enum):
    BOUNDARY = "boundary"  # IOU exactly gamma
    INTERIOR = "interior"  # IOU anywhere in [gamma, 1]


@dataclass(frozen=True)
class SamplerSpec:
    gamma: float
    k: int = 4
    mode: SamplerMode = SamplerMode.BOUNDARY
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise DetboundError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.k < 1:
            raise DetboundError(f"sample count must be >= 1, got {self.k}")


@dataclass(frozen=True)
class SampleParams:
    """One point on a corner curve: overlap fractions plus the target frame."""

    alpha: float
    beta: float
    branch: CornerBranch
    target: Box


def constraint_threshold(gamma: float) -> float:
    """Minimum alpha*beta product for IOU >= gamma: 2*gamma/(1+gamma)."""
    if not 0.0 < gamma <= 1.0:
        raise DetboundError(f"gamma must be in (0, 1], got {gamma}")
    return 2.0 * gamma / (1.0 + gamma)


# Top-left offsets of the sampled box, in units of (U, V), per branch.
_BRANCH_OFFSETS = {
    CornerBranch.TOP_LEFT: (lambda a: a - 1.0, lambda b: b - 1.0),
    CornerBranch.TOP_RIGHT: (lambda a: 1.0 - a, lambda b: b - 1.0),
    CornerBranch.BOTTOM_RIGHT: (lambda a: 1.0 - a, lambda b: 1.0 - b),
    CornerBranch.BOTTOM_LEFT: (lambda a: a - 1.0, lambda b: 1.0 - b),
}


def corner_box(params: SampleParams, *, min_product: float | None = None) -> Box:
    """Box of the target's size whose top-left sits on the given corner curve.

    The result overlaps the target with IOU = alpha*beta / (2 - alpha*beta).
    When ``min_product`` is given, alpha*beta below it is rejected.
    """
    a, b = params.alpha, params.beta
    if not (0.0 < a <= 1.0 and 0.0 < b <= 1.0):
        raise DetboundError(f"overlap fractions must be in (0, 1], got alpha={a}, beta={b}")
    if min_product is not None and a * b < min_product - 1e-12:
        raise DetboundError(f"alpha*beta = {a * b} below required product {min_product}")
    fx, fy = _BRANCH_OFFSETS[params.branch]
    t = params.target
    return Box(fx(a) * t.w + t.x, fy(b) * t.h + t.y, t.w, t.h)


def sample_boxes(target: Box, spec: SamplerSpec, rng: np.random.Generator | None = None) -> list[Box]:
    """Draw ``spec.k`` boxes with IOU >= gamma around the target.

    The branch is uniform over the four corner curves; alpha is uniform over
    [2*gamma/(1+gamma), 1]; beta sits on the boundary curve (boundary mode)
    or is uniform in [threshold/alpha, 1] (interior mode). Deterministic for
    a given (target, spec); pass ``rng`` to share or derive a stream.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    thr = constraint_threshold(spec.gamma)
    k = spec.k
    branch = rng.integers(0, 4, size=k)
    alpha = rng.uniform(thr, 1.0, size=k)
    beta_floor = np.minimum(thr / alpha, 1.0)
    if spec.mode is SamplerMode.BOUNDARY:
        beta = beta_floor
    else:
        beta = rng.uniform(beta_floor, 1.0)
    # top-left offsets per branch: left/top corners use (frac - 1), right/bottom (1 - frac)
    fx = np.where((branch == 0) | (branch == 3), alpha - 1.0, 1.0 - alpha)
    fy = np.where(branch <= 1, beta - 1.0, 1.0 - beta)
    xs = fx * target.w + target.x
    ys = fy * target.h + target.y
    return [Box(float(x), float(y), target.w, target.h) for x, y in zip(xs, ys)]


def annotation_rng(seed: int, annotation_id: int) -> np.random.Generator:
    """Per-annotation RNG stream so parallel sampling stays deterministic."""
    mask = (1 << 63) - 1
    return np.random.default_rng(np.random.SeedSequence([seed & mask, annotation_id & mask]))
