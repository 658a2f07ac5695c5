"""Dataset variants for invariance analysis, plus context-crop export.

Every transform rewrites pixels into an output directory and emits a
self-consistent annotation set. Whole-image kinds (vflip, blur,
objects_only) keep image ids and count; per-object kinds (white_bg,
noise_bg, crop, crop_resized) emit one image per annotation, reusing the
annotation id as the new image id; incongruent pastes emit one image per
paste entry. Seeded kinds derive each output image's stream from
(master seed, output image id), so any processing order is bit-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .datamodel import Annotation, Box, Dataset, ImageRecord
from .errors import ConfigurationError, DetboundError
from .geometry import annotation_rng
from .masks import Bitmask, box_to_mask, decode_mask, encode_rle, rle_to_coco
from .parallel import parallel_map

log = logging.getLogger(__name__)

KINDS = (
    "white_bg",
    "noise_bg",
    "objects_only",
    "crop",
    "crop_resized",
    "blur",
    "vflip",
    "incongruent",
)

# matches the dominant image-library default for an 11-tap kernel
def default_sigma(kernel: int) -> float:
    return 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8


@dataclass(frozen=True)
class PasteSpec:
    annotation_id: int
    background: str  # file name resolved through the background source
    x: float | None = None  # None: seeded uniform placement
    y: float | None = None
    scale: float = 1.0


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    min_dim: int = 300
    kernel: int = 11
    sigma: float | None = None
    seed: int = 0
    pastes: tuple[PasteSpec, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown transform kind {self.kind!r} (expected one of {KINDS})")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ConfigurationError(f"blur kernel must be odd and positive, got {self.kernel}")
        if self.min_dim < 1:
            raise ConfigurationError(f"min_dim must be >= 1, got {self.min_dim}")
        if self.kind == "incongruent" and not self.pastes:
            raise ConfigurationError("incongruent transform needs a paste list")

    @property
    def blur_sigma(self) -> float:
        return self.sigma if self.sigma is not None else default_sigma(self.kernel)


class ImageSource:
    """Resolves annotation file names to RGB pixel arrays."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def load(self, file_name: str) -> np.ndarray:
        path = self.root / file_name
        if not path.is_file():
            raise DetboundError(f"cannot resolve image {file_name!r} under {self.root}")
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str | Path, arr: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _png_name(file_name: str) -> str:
    p = Path(file_name)
    return p.name if p.suffix.lower() == ".png" else p.stem + ".png"


def _annotation_mask(ann: Annotation, width: int, height: int) -> tuple[Bitmask, bool]:
    """Decoded segmentation, or the bbox rectangle when none exists."""
    if ann.segmentation is not None:
        return decode_mask(ann.segmentation, width, height), False
    return box_to_mask(ann.bbox, width, height), True


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2
    xs = np.arange(size) - half
    k = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur_pixels(arr: np.ndarray, kernel: int, sigma: float) -> np.ndarray:
    k = _gaussian_kernel(kernel, sigma)
    out = arr.astype(np.float64)
    out = correlate1d(out, k, axis=0, mode="mirror")
    out = correlate1d(out, k, axis=1, mode="mirror")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _flip_segmentation(ann: Annotation, width: int, height: int):
    if ann.segmentation is None:
        return None
    if isinstance(ann.segmentation, dict):
        flipped = np.flipud(decode_mask(ann.segmentation, width, height).array)
        return rle_to_coco(encode_rle(Bitmask(np.ascontiguousarray(flipped))))
    out = []
    for poly in ann.segmentation:
        flat = list(poly)
        flat[1::2] = [height - y for y in flat[1::2]]
        out.append(flat)
    return out


def _integer_rect(box: Box, width: int, height: int) -> tuple[int, int, int, int]:
    x0 = max(0, int(np.floor(box.x)))
    y0 = max(0, int(np.floor(box.y)))
    x1 = min(width, int(np.ceil(box.x2)))
    y1 = min(height, int(np.ceil(box.y2)))
    return x0, y0, x1, y1


@dataclass
class TransformResult:
    dataset: Dataset
    written: int
    errors: list[str]
    bbox_fallbacks: int
    metadata: dict


def transform_dataset(
    ds: Dataset,
    images: ImageSource,
    spec: TransformSpec,
    out_dir: str | Path,
    threads: int = 1,
    backgrounds: ImageSource | None = None,
) -> TransformResult:
    """Write the transformed images under ``out_dir`` and return the matching
    annotation set. Unresolvable images are reported and skipped; the run
    continues. Mask-based kinds fall back to the bbox with a warning when an
    annotation has no segmentation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = {
        "vflip": _vflip_image,
        "blur": _blur_image,
        "objects_only": _objects_only_image,
    }
    if spec.kind in handler:
        units = list(ds.images)
        worker = lambda rec: _guard(handler[spec.kind], ds, images, spec, out_dir, rec)
    elif spec.kind in ("white_bg", "noise_bg"):
        units = [a for a in ds.annotations]
        worker = lambda ann: _guard(_single_object_image, ds, images, spec, out_dir, ann)
    elif spec.kind in ("crop", "crop_resized"):
        units = [a for a in ds.annotations]
        worker = lambda ann: _guard(_crop_image, ds, images, spec, out_dir, ann)
    else:  # incongruent
        units = list(enumerate(spec.pastes, start=1))
        bg = backgrounds or images
        worker = lambda item: _guard(_paste_image, ds, images, spec, out_dir, item, bg)

    results = parallel_map(worker, units, threads)
    new_images: list[ImageRecord] = []
    new_anns: list[Annotation] = []
    errors: list[str] = []
    fallbacks = 0
    written = 0
    for res in results:
        if isinstance(res, str):
            errors.append(res)
            continue
        rec, anns, nfall = res
        new_images.append(rec)
        new_anns.extend(anns)
        fallbacks += nfall
        written += 1
    metadata = {"kind": spec.kind, "seed": spec.seed}
    if spec.kind == "blur":
        metadata.update({"kernel": spec.kernel, "sigma": spec.blur_sigma})
    if spec.kind == "crop_resized":
        metadata["min_dim"] = spec.min_dim
    return TransformResult(
        dataset=Dataset.build(new_images, new_anns, ds.categories),
        written=written,
        errors=errors,
        bbox_fallbacks=fallbacks,
        metadata=metadata,
    )


def _guard(fn, ds, images, spec, out_dir, unit, *extra):
    try:
        return fn(ds, images, spec, out_dir, unit, *extra)
    except DetboundError as e:
        log.error("%s: %s", spec.kind, e)
        return str(e)


def _vflip_image(ds, images, spec, out_dir, rec: ImageRecord):
    arr = images.load(rec.file_name)
    name = _png_name(rec.file_name)
    write_image(out_dir / name, np.ascontiguousarray(np.flipud(arr)))
    anns = []
    for ann in ds.annotations_for(rec.id):
        b = ann.bbox
        flipped = Box(b.x, rec.height - b.y - b.h, b.w, b.h)
        anns.append(
            replace(ann, bbox=flipped, segmentation=_flip_segmentation(ann, rec.width, rec.height))
        )
    return replace(rec, file_name=name), anns, 0


def _blur_image(ds, images, spec, out_dir, rec: ImageRecord):
    arr = images.load(rec.file_name)
    name = _png_name(rec.file_name)
    write_image(out_dir / name, blur_pixels(arr, spec.kernel, spec.blur_sigma))
    return replace(rec, file_name=name), list(ds.annotations_for(rec.id)), 0


def _objects_only_image(ds, images, spec, out_dir, rec: ImageRecord):
    arr = images.load(rec.file_name)
    canvas = np.full_like(arr, 255)
    fallbacks = 0
    for ann in ds.annotations_for(rec.id):
        mask, fell_back = _annotation_mask(ann, rec.width, rec.height)
        if fell_back:
            fallbacks += 1
            log.warning("objects_only: annotation %d has no mask, using its bbox", ann.id)
        canvas[mask.array] = arr[mask.array]
    name = _png_name(rec.file_name)
    write_image(out_dir / name, canvas)
    return replace(rec, file_name=name), list(ds.annotations_for(rec.id)), fallbacks


def _single_object_image(ds, images, spec, out_dir, ann: Annotation):
    rec = ds.image(ann.image_id)
    arr = images.load(rec.file_name)
    if spec.kind == "noise_bg":
        rng = annotation_rng(spec.seed, ann.id)
        canvas = rng.integers(0, 256, size=arr.shape, dtype=np.uint8)
    else:
        canvas = np.full_like(arr, 255)
    mask, fell_back = _annotation_mask(ann, rec.width, rec.height)
    if fell_back:
        log.warning("%s: annotation %d has no mask, using its bbox", spec.kind, ann.id)
    canvas[mask.array] = arr[mask.array]
    name = f"{spec.kind}_{ann.id:012d}.png"
    write_image(out_dir / name, canvas)
    new_rec = ImageRecord(id=ann.id, file_name=name, width=rec.width, height=rec.height)
    new_ann = replace(ann, id=ann.id, image_id=ann.id)
    return new_rec, [new_ann], int(fell_back)


def _resize_pixels(arr: np.ndarray, nw: int, nh: int) -> np.ndarray:
    return np.asarray(
        Image.fromarray(arr, mode="RGB").resize((nw, nh), resample=Image.BILINEAR), dtype=np.uint8
    )


def _resize_mask(mask: np.ndarray, nw: int, nh: int) -> np.ndarray:
    rows = (np.arange(nh) * (mask.shape[0] / nh)).astype(np.int64)
    cols = (np.arange(nw) * (mask.shape[1] / nw)).astype(np.int64)
    return mask[rows][:, cols]


def _crop_image(ds, images, spec, out_dir, ann: Annotation):
    rec = ds.image(ann.image_id)
    arr = images.load(rec.file_name)
    x0, y0, x1, y1 = _integer_rect(ann.bbox, rec.width, rec.height)
    if x1 <= x0 or y1 <= y0:
        raise DetboundError(f"annotation {ann.id} crops to an empty region")
    patch = arr[y0:y1, x0:x1]
    ch, cw = patch.shape[:2]
    bbox = Box(ann.bbox.x - x0, ann.bbox.y - y0, min(ann.bbox.w, cw), min(ann.bbox.h, ch))
    seg = _shift_segmentation(ann.segmentation, -x0, -y0, cw, ch, rec.width, rec.height)
    sx = sy = 1.0
    if spec.kind == "crop_resized":
        scale = spec.min_dim / min(cw, ch)
        if cw <= ch:
            nw, nh = spec.min_dim, int(round(ch * scale))
        else:
            nw, nh = int(round(cw * scale)), spec.min_dim
        sx, sy = nw / cw, nh / ch
        patch = _resize_pixels(patch, nw, nh)
        bbox = Box(bbox.x * sx, bbox.y * sy, bbox.w * sx, bbox.h * sy)
        seg = _scale_segmentation(seg, sx, sy, nw, nh, cw, ch)
        cw, ch = nw, nh
    name = f"{spec.kind}_{ann.id:012d}.png"
    write_image(out_dir / name, patch)
    new_rec = ImageRecord(id=ann.id, file_name=name, width=cw, height=ch)
    new_ann = replace(
        ann, id=ann.id, image_id=ann.id, bbox=bbox, area=ann.area * sx * sy, segmentation=seg
    )
    return new_rec, [new_ann], 0


def _shift_segmentation(seg, dx, dy, new_w, new_h, old_w, old_h):
    if seg is None:
        return None
    if isinstance(seg, dict):
        full = decode_mask(seg, old_w, old_h).array
        window = full[-dy : -dy + new_h, -dx : -dx + new_w]
        return rle_to_coco(encode_rle(Bitmask(np.ascontiguousarray(window))))
    out = []
    for poly in seg:
        flat = list(poly)
        flat[0::2] = [x + dx for x in flat[0::2]]
        flat[1::2] = [y + dy for y in flat[1::2]]
        out.append(flat)
    return out


def _scale_segmentation(seg, sx, sy, new_w, new_h, old_w, old_h):
    if seg is None:
        return None
    if isinstance(seg, dict):
        mask = decode_mask(seg, old_w, old_h).array
        return rle_to_coco(encode_rle(Bitmask(np.ascontiguousarray(_resize_mask(mask, new_w, new_h)))))
    out = []
    for poly in seg:
        flat = list(poly)
        flat[0::2] = [x * sx for x in flat[0::2]]
        flat[1::2] = [y * sy for y in flat[1::2]]
        out.append(flat)
    return out


def _paste_image(ds, images, spec, out_dir, item, backgrounds: ImageSource):
    index, paste = item
    if not ds.has_annotation(paste.annotation_id):
        raise DetboundError(f"paste entry {index} references unknown annotation {paste.annotation_id}")
    ann = ds.annotation(paste.annotation_id)
    src_rec = ds.image(ann.image_id)
    src = images.load(src_rec.file_name)
    bg = backgrounds.load(paste.background).copy()
    bh, bw = bg.shape[:2]

    x0, y0, x1, y1 = _integer_rect(ann.bbox, src_rec.width, src_rec.height)
    patch = src[y0:y1, x0:x1]
    mask, _ = _annotation_mask(ann, src_rec.width, src_rec.height)
    patch_mask = mask.array[y0:y1, x0:x1]
    ph, pw = patch.shape[:2]
    if paste.scale != 1.0:
        pw, ph = max(1, int(round(pw * paste.scale))), max(1, int(round(ph * paste.scale)))
        patch = _resize_pixels(patch, pw, ph)
        patch_mask = _resize_mask(patch_mask, pw, ph)
    if pw > bw or ph > bh:
        raise DetboundError(f"paste entry {index}: object {pw}x{ph} exceeds background {bw}x{bh}")
    if paste.x is not None and paste.y is not None:
        px, py = int(round(paste.x)), int(round(paste.y))
        if px < 0 or py < 0 or px + pw > bw or py + ph > bh:
            raise DetboundError(f"paste entry {index}: placement exceeds background bounds")
    else:
        rng = annotation_rng(spec.seed, index)
        px = int(rng.integers(0, bw - pw + 1))
        py = int(rng.integers(0, bh - ph + 1))

    region = bg[py : py + ph, px : px + pw]
    region[patch_mask] = patch[patch_mask]
    placed = np.zeros((bh, bw), dtype=bool)
    placed[py : py + ph, px : px + pw] = patch_mask
    name = f"incongruent_{index:06d}.png"
    write_image(out_dir / name, bg)
    new_rec = ImageRecord(id=index, file_name=name, width=bw, height=bh)
    new_ann = Annotation(
        id=index,
        image_id=index,
        category_id=ann.category_id,
        bbox=Box(float(px), float(py), float(pw), float(ph)),
        area=float(placed.sum()) if placed.any() else float(pw * ph),
        iscrowd=False,
        segmentation=rle_to_coco(encode_rle(Bitmask(placed))),
    )
    return new_rec, [new_ann], 0


# ---------------------------------------------------------------------------
# Context crops


@dataclass(frozen=True)
class CropSpec:
    mode: str  # object_only | object_context | context_only | whole_image
    factor: float = 1.0
    fill: tuple[int, int, int] = (128, 128, 128)

    def __post_init__(self):
        if self.mode not in ("object_only", "object_context", "context_only", "whole_image"):
            raise ConfigurationError(f"unknown crop mode {self.mode!r}")
        if self.factor <= 0:
            raise ConfigurationError(f"crop factor must be positive, got {self.factor}")
        if self.mode == "object_only" and self.factor > 1:
            raise ConfigurationError("object_only crops use factor <= 1")
        if self.mode == "object_context" and self.factor <= 1:
            raise ConfigurationError("object_context crops use factor > 1")


@dataclass(frozen=True)
class CropRow:
    crop_path: str
    annotation_id: int
    category_id: int
    mode: str
    factor: float


CROP_MANIFEST_FIELDS = ["crop_path", "annotation_id", "category_id", "mode", "factor"]


def scaled_box(box: Box, factor: float) -> Box:
    cx, cy = box.x + box.w / 2, box.y + box.h / 2
    nw, nh = box.w * factor, box.h * factor
    return Box(cx - nw / 2, cy - nh / 2, nw, nh)


def export_context_crops(
    ds: Dataset,
    images: ImageSource,
    specs: Sequence[CropSpec],
    out_dir: str | Path,
    threads: int = 1,
) -> tuple[list[CropRow], list[str]]:
    """Cut one crop per (annotation, spec); context_only first paints the
    object's own box with the fill color. Returns manifest rows plus
    per-image error strings (degenerate crops are skipped with a warning)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [a for a in ds.annotations if not a.iscrowd]

    def work(ann: Annotation):
        rec = ds.image(ann.image_id)
        try:
            arr = images.load(rec.file_name)
        except DetboundError as e:
            log.error("export-crops: %s", e)
            return str(e)
        rows = []
        for spec in specs:
            if spec.mode == "whole_image":
                region = Box(0.0, 0.0, float(rec.width), float(rec.height))
            else:
                region = scaled_box(ann.bbox, spec.factor)
            x0, y0, x1, y1 = _integer_rect(region, rec.width, rec.height)
            if x1 <= x0 or y1 <= y0:
                log.warning(
                    "export-crops: annotation %d %s crop is degenerate, skipped", ann.id, spec.mode
                )
                continue
            pixels = arr
            if spec.mode == "context_only":
                pixels = arr.copy()
                ox0, oy0, ox1, oy1 = _integer_rect(ann.bbox, rec.width, rec.height)
                pixels[oy0:oy1, ox0:ox1] = np.array(spec.fill, dtype=np.uint8)
            name = f"{ann.id:012d}_{spec.mode}_{spec.factor:g}.png"
            write_image(out_dir / name, pixels[y0:y1, x0:x1])
            rows.append(
                CropRow(
                    crop_path=name,
                    annotation_id=ann.id,
                    category_id=ann.category_id,
                    mode=spec.mode,
                    factor=spec.factor,
                )
            )
        return rows

    results = parallel_map(work, targets, threads)
    rows: list[CropRow] = []
    errors: list[str] = []
    for res in results:
        if isinstance(res, str):
            errors.append(res)
        else:
            rows.extend(res)
    return rows, errors


def write_crop_manifest(rows: Sequence[CropRow], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CROP_MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([r.crop_path, r.annotation_id, r.category_id, r.mode, repr(r.factor)])


def count_detections(dets) -> int:
    """Record count, reported alongside the ground-truth count."""
    return len(dets)
