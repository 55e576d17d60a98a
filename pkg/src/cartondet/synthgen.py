"""Procedural stacked-carton scenes with automatically derived labels.

Scenes are grids of axis-aligned textured rectangles ("cartons") filled
bottom-up, optionally truncated by the image frame and topped with occluder
cartons drawn later in z-order.  Because every carton is a frontal rectangle
with a single visible face, the taxonomy rules reduce to exact geometry:

``inner``  every contour cell is in contact with another carton or connected
           to the image edge;
``all``    the carton's one face is complete: the rectangle lies fully inside
           the image and no later-drawn rectangle covers any of its cells.

Contact and edge rules are evaluated on the integer pixel grid.  A contour
cell is *contacted* when another carton occupies a cell within Chebyshev
distance 1 (flush neighbours touch; a gap of 2 px or more does not), and
*edge-connected* when it lies on the outermost pixel ring of the image or
beyond it.  All carton coordinates are integers, so these rules are exact
and the derived labels can be checked cell-for-cell against a brute-force
rasterizing oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .annotations import ImageRecord, InstanceAnnotation, export_dataset

# carton browns; per-scene palettes draw from this list
_PALETTE = np.array(
    [
        [181, 137, 91],
        [168, 124, 80],
        [194, 152, 106],
        [157, 114, 74],
        [203, 164, 121],
        [146, 105, 66],
    ],
    dtype=np.uint8,
)
_BACKGROUND = np.array([211, 208, 203], dtype=np.uint8)
_GLYPH_TONE = np.array([236, 233, 228], dtype=np.uint8)


class GenerationError(RuntimeError):
    """A scene layout cannot satisfy its configuration."""


@dataclass(frozen=True)
class SceneConfig:
    """Layout and texture parameters for one family of scenes.

    ``tight_probability`` picks between flush stacks (cartons touch) and
    loose rows with >= 2 px horizontal gaps; rows always rest flush on each
    other.  ``truncate_probability`` occasionally shifts the stack so that it
    pokes out of the frame, and ``jitter`` is the max horizontal wobble per
    carton in loose scenes.
    """

    image_size: tuple[int, int] = (256, 256)  # (height, width)
    count_range: tuple[int, int] = (1, 36)
    size_range: tuple[float, float] = (0.08, 0.3)  # carton edge / image edge
    rows_range: tuple[int, int] = (1, 6)
    cols_range: tuple[int, int] = (1, 6)
    occluder_probability: float = 0.25
    palette_seed: int = 7
    seed: int = 0
    tight_probability: float = 0.7
    truncate_probability: float = 0.25
    jitter: int = 2

    def __post_init__(self):
        if self.image_size[0] < 16 or self.image_size[1] < 16:
            raise ValueError(f"image_size too small: {self.image_size}")
        if not (1 <= self.count_range[0] <= self.count_range[1]):
            raise ValueError(f"bad count_range {self.count_range}")
        if not (0.0 < self.size_range[0] <= self.size_range[1] <= 1.0):
            raise ValueError(f"size fractions must lie in (0, 1]: {self.size_range}")
        for name in ("rows_range", "cols_range"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise ValueError(f"bad {name} {(lo, hi)}")
        for name in ("occluder_probability", "tight_probability", "truncate_probability"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValueError(f"{name} must be a probability")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        coerced = {
            k: tuple(v) if isinstance(v, list) else v for k, v in data.items()
        }
        return cls(**coerced)


@dataclass(frozen=True)
class ContourSide:
    """One side of a carton rectangle, partitioned into flagged segments.

    ``span`` is the half-open cell range along the side; each segment is
    ``(start, end, kind)`` with kind one of ``carton`` (contacted by another
    carton), ``edge`` (on or beyond the image border ring) or ``free``.
    """

    name: str  # top | bottom | left | right
    span: tuple[int, int]
    segments: tuple[tuple[int, int, str], ...]


@dataclass(eq=False)
class SceneInstanceTruth:
    """Ground truth for one generated carton."""

    rect: tuple[int, int, int, int]  # full unoccluded extent, may leave the image
    z: int  # draw order; later rectangles occlude earlier ones
    visible_mask: np.ndarray  # (H, W) bool, in-image visible cells
    sides: tuple[ContourSide, ...]
    truncated: bool
    occluded: bool
    face_complete: bool


def rect_raster(rect: Sequence[int], image_size: tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) raster of an integer rectangle clipped to the image."""
    height, width = image_size
    out = np.zeros((height, width), dtype=bool)
    x1, y1, x2, y2 = rect
    out[max(y1, 0) : max(min(y2, height), 0), max(x1, 0) : max(min(x2, width), 0)] = True
    return out


def _merge_intervals(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for s, e in sorted(intervals):
        if s >= e:
            continue
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def _side_segments(span, edge_ivs, carton_ivs):
    """Partition a side span into (start, end, kind) pieces."""
    lo, hi = span
    edge_ivs = _merge_intervals([(max(s, lo), min(e, hi)) for s, e in edge_ivs])
    carton_ivs = _merge_intervals([(max(s, lo), min(e, hi)) for s, e in carton_ivs])
    cuts = sorted({lo, hi, *(v for iv in edge_ivs + carton_ivs for v in iv)})
    cuts = [c for c in cuts if lo <= c <= hi]
    segments = []
    for s, e in zip(cuts, cuts[1:]):
        mid = s  # intervals have integer ends, so the left end classifies the piece
        if any(a <= mid < b for a, b in carton_ivs):
            kind = "carton"
        elif any(a <= mid < b for a, b in edge_ivs):
            kind = "edge"
        else:
            kind = "free"
        if segments and segments[-1][2] == kind:
            segments[-1] = (segments[-1][0], e, kind)
        else:
            segments.append((s, e, kind))
    return tuple(segments)


def build_truths(
    rects: Sequence[tuple[int, int, int, int]], image_size: tuple[int, int]
) -> list[SceneInstanceTruth]:
    """Compute per-carton contact flags, face state, and visible masks.

    Works purely in interval arithmetic on the rectangle coordinates; the
    test suite checks it against an independent per-pixel rasterization.
    """
    height, width = image_size
    rects = [tuple(int(v) for v in r) for r in rects]
    truths: list[SceneInstanceTruth] = []
    later_union = np.zeros((height, width), dtype=bool)
    visible: list[np.ndarray] = []
    for rect in reversed(rects):
        raster = rect_raster(rect, image_size)
        visible.append(raster & ~later_union)
        later_union |= raster
    visible.reverse()

    for i, (x1, y1, x2, y2) in enumerate(rects):
        sides = []
        for name in ("top", "bottom", "left", "right"):
            horizontal = name in ("top", "bottom")
            if horizontal:
                fixed = y1 if name == "top" else y2 - 1
                span = (x1, x2)
                on_ring = fixed <= 0 or fixed >= height - 1
                ring_lo, ring_hi = 1, width - 1  # cells < 1 or >= W-1 touch the frame
            else:
                fixed = x1 if name == "left" else x2 - 1
                span = (y1, y2)
                on_ring = fixed <= 0 or fixed >= width - 1
                ring_lo, ring_hi = 1, height - 1
            edge_ivs = []
            if on_ring:
                edge_ivs.append(span)
            else:
                edge_ivs.append((span[0], ring_lo))
                edge_ivs.append((ring_hi, span[1]))
            carton_ivs = []
            for j, (ox1, oy1, ox2, oy2) in enumerate(rects):
                if j == i:
                    continue
                if horizontal:
                    if oy1 - 1 <= fixed <= oy2:
                        carton_ivs.append((ox1 - 1, ox2 + 1))
                else:
                    if ox1 - 1 <= fixed <= ox2:
                        carton_ivs.append((oy1 - 1, oy2 + 1))
            sides.append(
                ContourSide(name=name, span=span, segments=_side_segments(span, edge_ivs, carton_ivs))
            )
        truncated = x1 < 0 or y1 < 0 or x2 > width or y2 > height
        occluded = any(
            max(x1, ox1) < min(x2, ox2) and max(y1, oy1) < min(y2, oy2)
            for ox1, oy1, ox2, oy2 in rects[i + 1 :]
        )
        truths.append(
            SceneInstanceTruth(
                rect=(x1, y1, x2, y2),
                z=i,
                visible_mask=visible[i],
                sides=tuple(sides),
                truncated=truncated,
                occluded=occluded,
                face_complete=not truncated and not occluded,
            )
        )
    return truths


def derive_labels(truths: Sequence[SceneInstanceTruth]) -> list[str]:
    """Map contact/face truth onto the four-label taxonomy."""
    labels = []
    for t in truths:
        free = any(
            seg[2] == "free" and seg[1] > seg[0] for side in t.sides for seg in side.segments
        )
        part = "inner" if not free else "outer"
        state = "all" if t.face_complete else "occlusion"
        labels.append(f"Carton-{part}-{state}")
    return labels


def _plan_layout(config: SceneConfig, rng: np.random.Generator):
    height, width = config.image_size
    lo, hi = config.count_range
    n_target = int(rng.integers(lo, hi + 1))
    tight = bool(rng.random() < config.tight_probability)
    n_occluders = int(rng.binomial(2, config.occluder_probability))
    n_occluders = min(n_occluders, max(n_target - 1, 0))
    n_stack = n_target - n_occluders

    rows_lo, rows_hi = config.rows_range
    cols_lo, cols_hi = config.cols_range
    need_cols = max(cols_lo, math.ceil(n_stack / rows_hi))
    if need_cols > cols_hi:
        cols = cols_hi
    else:
        cols = int(rng.integers(need_cols, cols_hi + 1))
    rows = min(max(rows_lo, math.ceil(n_stack / cols)), rows_hi)
    if rows * cols < n_stack:
        n_stack = rows * cols
        if n_stack + n_occluders < lo:
            raise GenerationError(
                f"stack grid capacity {rows}x{cols} cannot hold the configured "
                f"minimum of {lo} cartons"
            )

    jitter = 0 if tight else config.jitter
    # 3x jitter headroom keeps gaps >= 2 px even after wobble + frame clamping
    gap = 0 if tight else int(rng.integers(2 + 3 * jitter, 7 + 3 * jitter))

    min_w = max(4, round(width * config.size_range[0]))
    max_w = max(min_w, round(width * config.size_range[1]))
    avail_w = (width - (cols - 1) * gap) // cols
    if min_w > avail_w:
        raise GenerationError(
            f"{cols} columns of cartons at least {min_w} px wide do not fit the "
            f"{width} px image width"
        )
    w = int(rng.integers(min_w, min(max_w, avail_w) + 1))

    min_h = max(4, round(height * config.size_range[0]))
    max_h = max(min_h, round(height * config.size_range[1]))
    avail_h = height // rows
    if min_h > avail_h:
        raise GenerationError(
            f"{rows} rows of cartons at least {min_h} px tall do not fit the "
            f"{height} px image height"
        )
    h = int(rng.integers(min_h, min(max_h, avail_h) + 1))

    total_w = cols * w + (cols - 1) * gap
    total_h = rows * h
    origin_x = int(rng.integers(0, width - total_w + 1))
    origin_y = int(rng.integers(0, height - total_h + 1))
    truncate = rng.random() < config.truncate_probability
    if truncate:
        shift = int(rng.integers(2, max(3, w // 2 + 1)))
        side = int(rng.integers(0, 3))
        if side == 0:
            origin_x = -shift
        elif side == 1:
            origin_x = width - total_w + shift
        else:
            origin_y = height - total_h + int(rng.integers(2, max(3, h // 2 + 1)))

    rects: list[tuple[int, int, int, int]] = []
    placed = 0
    for r in range(rows - 1, -1, -1):  # fill bottom row first, like gravity
        for c in range(cols):
            if placed == n_stack:
                break
            dx = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
            x1 = origin_x + c * (w + gap) + dx
            if not truncate:
                x1 = min(max(x1, 0), width - w)
            y1 = origin_y + r * h
            rects.append((x1, y1, x1 + w, y1 + h))
            placed += 1

    for _ in range(n_occluders):
        tx1, ty1, _, _ = rects[int(rng.integers(0, len(rects)))]
        dx = int(rng.integers(-(w // 2), w // 2 + 1))
        dy = int(rng.integers(-(h // 2), h // 2 + 1))
        rects.append((tx1 + dx, ty1 + dy, tx1 + dx + w, ty1 + dy + h))
    return rects


def _render(rects, config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    height, width = config.image_size
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = _BACKGROUND
    palette_rng = np.random.default_rng(config.palette_seed)
    palette = _PALETTE[palette_rng.permutation(len(_PALETTE))]
    # two tones per scene, reused across neighbours -> repetitive texture
    tone_a, tone_b = rng.integers(0, len(palette), 2)
    for rect in rects:
        face = palette[tone_a if rng.random() < 0.8 else tone_b].astype(np.int16)
        trim = (face * 0.72).astype(np.uint8)
        ridge_period = int(rng.integers(5, 9))
        glyph_dx = int(rng.integers(2, 6))
        glyph_dy = int(rng.integers(2, 6))
        x1, y1, x2, y2 = rect
        cw, ch = x2 - x1, y2 - y1
        cx1, cy1 = max(x1, 0), max(y1, 0)
        cx2, cy2 = min(x2, width), min(y2, height)
        if cx1 >= cx2 or cy1 >= cy2:
            continue
        img[cy1:cy2, cx1:cx2] = face.astype(np.uint8)
        # horizontal ridge lines, phase-locked to the carton
        for py in range(cy1, cy2):
            if (py - y1) % ridge_period == ridge_period - 1:
                img[py, cx1:cx2] = trim
        # 1 px outline where the true border is visible
        if 0 <= y1 < height:
            img[y1, cx1:cx2] = trim
        if 0 <= y2 - 1 < height:
            img[y2 - 1, cx1:cx2] = trim
        if 0 <= x1 < width:
            img[cy1:cy2, x1] = trim
        if 0 <= x2 - 1 < width:
            img[cy1:cy2, x2 - 1] = trim
        # label glyph block
        gx1, gy1 = x1 + glyph_dx, y1 + glyph_dy
        gx2, gy2 = min(gx1 + max(3, cw // 4), x2 - 2), min(gy1 + max(2, ch // 5), y2 - 2)
        gx1, gy1 = max(gx1, 0), max(gy1, 0)
        gx2, gy2 = min(gx2, width), min(gy2, height)
        if gx1 < gx2 and gy1 < gy2:
            img[gy1:gy2, gx1:gx2] = _GLYPH_TONE
    return img


def generate_scene(
    config: SceneConfig, seed: int
) -> tuple[np.ndarray, list[SceneInstanceTruth]]:
    """Deterministically generate one scene: (H, W, 3) uint8 image + truths."""
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    rects = _plan_layout(config, rng)
    truths = build_truths(rects, config.image_size)
    image = _render(rects, config, rng)
    return image, truths


def scene_seed(base_seed: int, index: int) -> int:
    """Per-image 64-bit seed derived from (base_seed, image index)."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


def generate_dataset(
    config: SceneConfig,
    n_images: int,
    base_seed: int | None = None,
    out_dir=None,
    start_image_id: int = 1,
) -> list[ImageRecord]:
    """Generate a dataset of scenes; optionally write PNGs + COCO annotations.

    Occluded instances are annotated with the bounding rectangle of their
    visible region; unoccluded ones keep their full (image-clipped)
    rectangle.  Cartons left without any visible pixel are dropped from the
    annotations.  With ``out_dir`` set, images land in ``out_dir/images/``
    and annotations in ``out_dir/annotations.json``.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if base_seed is None:
        base_seed = config.seed
    height, width = config.image_size
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        (out_path / "images").mkdir(parents=True, exist_ok=True)
    records = []
    next_instance_id = 1
    for i in range(n_images):
        image, truths = generate_scene(config, scene_seed(base_seed, i))
        labels = derive_labels(truths)
        instances = []
        for truth, label in zip(truths, labels):
            visible = truth.visible_mask
            if not visible.any():
                continue
            full = rect_raster(truth.rect, config.image_size)
            if visible.sum() < full.sum():
                ys, xs = np.nonzero(visible)
                bx1, bx2 = int(xs.min()), int(xs.max()) + 1
                by1, by2 = int(ys.min()), int(ys.max()) + 1
            else:
                bx1, by1 = max(truth.rect[0], 0), max(truth.rect[1], 0)
                bx2, by2 = min(truth.rect[2], width), min(truth.rect[3], height)
            instances.append(
                InstanceAnnotation.from_polygon(
                    next_instance_id,
                    label,
                    [(bx1, by1), (bx2, by1), (bx2, by2), (bx1, by2)],
                )
            )
            next_instance_id += 1
        image_id = start_image_id + i
        file_name = f"{image_id:06d}.png"
        if out_path is not None:
            Image.fromarray(image).save(out_path / "images" / file_name)
        records.append(
            ImageRecord(
                image_id=image_id,
                width=width,
                height=height,
                file_name=file_name,
                source="synthetic",
                instances=tuple(instances),
            )
        )
    if out_path is not None:
        export_dataset(records, "coco_json", out_path / "annotations.json")
    return records


def dataset_images(config: SceneConfig, n_images: int, base_seed: int | None = None) -> list[np.ndarray]:
    """Regenerate the images of ``generate_dataset`` (same seeds) in memory."""
    if base_seed is None:
        base_seed = config.seed
    return [generate_scene(config, scene_seed(base_seed, i))[0] for i in range(n_images)]


def split_records(
    records: Sequence[ImageRecord], test_fraction: float | None = None
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Deterministic train/test split: index parity, or an evenly spaced ratio."""
    records = list(records)
    if test_fraction is None:
        return records[0::2], records[1::2]
    if not (0.0 < test_fraction < 1.0):
        raise ValueError("test_fraction must lie in (0, 1)")
    stride = max(2, round(1.0 / test_fraction))
    test = records[stride - 1 :: stride]
    test_ids = {r.image_id for r in test}
    train = [r for r in records if r.image_id not in test_ids]
    return train, test
