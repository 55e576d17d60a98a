"""Box algebra, anchor tiling, delta coding, NMS, and boundary rasterization.

All box-valued functions accept ``Box`` instances, sequences of ``Box``,
``(N, 4)`` numpy arrays, or ``(N, 4)`` torch tensors in
``(x_min, y_min, x_max, y_max)`` order, and return torch tensors.  Torch
inputs keep their dtype and autograd graph (the IoU-gap loss differentiates
through :func:`decode_deltas` and :func:`iou_pairs`); everything else is
promoted to float64.

Coordinates are real-valued pixels, origin at the top-left corner of the
image, so box area is simply ``(x_max - x_min) * (y_max - y_min)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

DEFAULT_STRIDES = (8, 16, 32, 64, 128)
DEFAULT_SCALES = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
# base anchor edge = 4x the level stride
DEFAULT_BASE_FACTOR = 4.0
# upper clamp for decoded log-size deltas
MAX_WH_DELTA = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with real-valued pixel corners."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"invalid box extents: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


@dataclass
class Detection:
    """One scored detection: box, class, and the three score channels."""

    box: Box
    class_id: int
    p_cls: float
    p_loc: float
    score: float  # fused ranking score fed to NMS


def as_box_tensor(boxes) -> torch.Tensor:
    """Coerce any supported box representation to an ``(N, 4)`` tensor."""
    if isinstance(boxes, torch.Tensor):
        t = boxes
    elif isinstance(boxes, Box):
        t = torch.tensor([boxes.as_tuple()], dtype=torch.float64)
    elif isinstance(boxes, np.ndarray):
        t = torch.as_tensor(boxes, dtype=torch.float64)
    else:
        seq = list(boxes)
        if seq and isinstance(seq[0], Box):
            t = torch.tensor([b.as_tuple() for b in seq], dtype=torch.float64)
        else:
            t = torch.as_tensor(np.asarray(seq, dtype=np.float64))
    if t.numel() == 0:
        return t.reshape(0, 4)
    return t.reshape(-1, 4)


def _safe_div(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    # clamp keeps zero-area unions at 0 without producing NaN gradients
    tiny = torch.finfo(den.dtype).tiny
    return num / den.clamp(min=tiny)


def iou_matrix(boxes_a, boxes_b) -> torch.Tensor:
    """Pairwise IoU, shape ``(len(a), len(b))``; zero-area pairs give 0."""
    a = as_box_tensor(boxes_a)
    b = as_box_tensor(boxes_b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return _safe_div(inter, union)


def iou_pairs(boxes_a, boxes_b) -> torch.Tensor:
    """Aligned IoU of ``a[i]`` vs ``b[i]``, shape ``(N,)``."""
    a = as_box_tensor(boxes_a)
    b = as_box_tensor(boxes_b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    return _safe_div(inter, union)


def giou_pairs(boxes_a, boxes_b) -> torch.Tensor:
    """Aligned generalized IoU: ``IoU - (|C| - |A U B|) / |C|``.

    ``C`` is the smallest enclosing box.  Two zero-area boxes give 0.
    """
    a = as_box_tensor(boxes_a)
    b = as_box_tensor(boxes_b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    iou = _safe_div(inter, union)
    lt_c = torch.minimum(a[:, :2], b[:, :2])
    rb_c = torch.maximum(a[:, 2:], b[:, 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclose = wh_c[:, 0] * wh_c[:, 1]
    return iou - _safe_div(enclose - union, enclose)


def giou(box_a: Box, box_b: Box) -> float:
    """Scalar GIoU of two boxes."""
    return float(giou_pairs(box_a, box_b)[0])


@dataclass(frozen=True, eq=False)
class AnchorLevel:
    """Anchors of one pyramid level, tiled row-major over the feature grid."""

    stride: int
    grid_h: int
    grid_w: int
    boxes: torch.Tensor  # (grid_h * grid_w * A, 4)


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """Dense multi-level anchor tiling with A anchors per location."""

    levels: tuple[AnchorLevel, ...]
    anchors_per_location: int

    @property
    def boxes(self) -> torch.Tensor:
        """All anchors concatenated in level order, shape (N, 4)."""
        return torch.cat([lv.boxes for lv in self.levels], dim=0)

    def __len__(self) -> int:
        return sum(lv.boxes.shape[0] for lv in self.levels)


def default_anchor_levels(
    strides: Sequence[int] = DEFAULT_STRIDES,
    base_factor: float = DEFAULT_BASE_FACTOR,
) -> list[tuple[int, float]]:
    """(stride, base_size) pairs with base_size = base_factor * stride."""
    return [(int(s), base_factor * s) for s in strides]


def generate_anchors(
    levels: Sequence[tuple[int, float]],
    scales: Sequence[float],
    ratios: Sequence[float],
    image_size: tuple[int, int],
) -> AnchorGrid:
    """Tile anchors over every pyramid level for an ``(H, W)`` image.

    Per location ``(i, j)`` of a level with stride ``s`` the anchors are
    centered at ``((j + 0.5) * s, (i + 0.5) * s)`` with area
    ``(base_size * scale)**2`` and width/height ratio ``r`` (width =
    side * sqrt(r)).  Anchor order within a location is scale-major, i.e.
    ``for scale: for ratio``.  Grid dims are ``ceil(H/s) x ceil(W/s)``.
    """
    height, width = image_size
    if height <= 0 or width <= 0:
        raise ValueError(f"image size must be positive, got {image_size}")
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")
    strides = [s for s, _ in levels]
    if any(b <= a for a, b in zip(strides, strides[1:])):
        raise ValueError(f"strides must be strictly increasing, got {strides}")

    templates = []
    out_levels = []
    for stride, base_size in levels:
        half = []
        for scale in scales:
            side = base_size * scale
            for ratio in ratios:
                w = side * math.sqrt(ratio)
                h = side / math.sqrt(ratio)
                half.append((0.5 * w, 0.5 * h))
        templates = torch.tensor(half, dtype=torch.float64)  # (A, 2)

        grid_h = math.ceil(height / stride)
        grid_w = math.ceil(width / stride)
        cx = (torch.arange(grid_w, dtype=torch.float64) + 0.5) * stride
        cy = (torch.arange(grid_h, dtype=torch.float64) + 0.5) * stride
        yy, xx = torch.meshgrid(cy, cx, indexing="ij")
        centers = torch.stack([xx, yy], dim=-1).reshape(-1, 1, 2)  # (hw, 1, 2)
        mins = centers - templates[None, :, :]
        maxs = centers + templates[None, :, :]
        boxes = torch.cat([mins, maxs], dim=-1).reshape(-1, 4)
        out_levels.append(
            AnchorLevel(stride=int(stride), grid_h=grid_h, grid_w=grid_w, boxes=boxes)
        )
    return AnchorGrid(levels=tuple(out_levels), anchors_per_location=len(scales) * len(ratios))


def encode_deltas(anchors, targets) -> torch.Tensor:
    """Encode target boxes as (dx, dy, dw, dh) relative to anchors.

    ``dx = (cx_t - cx_a) / w_a``, ``dw = ln(w_t / w_a)`` and likewise for y/h.
    Raises on non-positive target sizes (log is undefined there).
    """
    a = as_box_tensor(anchors)
    t = as_box_tensor(targets)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    if bool((tw <= 0).any()) or bool((th <= 0).any()):
        raise ValueError("encode_deltas requires positive target width/height")
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    tcx = t[:, 0] + 0.5 * tw
    tcy = t[:, 1] + 0.5 * th
    dx = (tcx - acx) / aw
    dy = (tcy - acy) / ah
    dw = torch.log(tw / aw)
    dh = torch.log(th / ah)
    return torch.stack([dx, dy, dw, dh], dim=1)


def decode_deltas(anchors, deltas, max_wh_delta: float = MAX_WH_DELTA) -> torch.Tensor:
    """Invert :func:`encode_deltas`; dw/dh are clamped at ``max_wh_delta``."""
    a = as_box_tensor(anchors)
    d = deltas if isinstance(deltas, torch.Tensor) else as_box_tensor(deltas)
    d = d.reshape(-1, 4)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    dw = d[:, 2].clamp(max=max_wh_delta)
    dh = d[:, 3].clamp(max=max_wh_delta)
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def nms(
    detections: Sequence[Detection],
    iou_threshold: float = 0.5,
    ranking: Optional[Callable[[Detection], float]] = None,
) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Repeatedly keeps the highest-ranked remaining detection and discards
    same-class detections whose IoU with it exceeds ``iou_threshold``.
    ``ranking`` selects the score (default: the fused score); ties break on
    the lower input index, so the result is stable under any strictly
    increasing transform of the ranking scores.
    """
    if not detections:
        return []
    key = ranking if ranking is not None else (lambda d: d.score)
    scores = [float(key(d)) for d in detections]
    if any(not math.isfinite(s) for s in scores):
        raise ValueError("nms requires finite ranking scores")
    order = sorted(range(len(detections)), key=lambda i: (-scores[i], i))
    ious = iou_matrix([d.box for d in detections], [d.box for d in detections]).numpy()
    suppressed = [False] * len(detections)
    kept: list[Detection] = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(detections[i])
        for j in order[pos + 1 :]:
            if suppressed[j] or detections[j].class_id != detections[i].class_id:
                continue
            if ious[i, j] > iou_threshold:
                suppressed[j] = True
    return kept


@dataclass(eq=False)
class BoundaryMap:
    """Binary boundary-supervision target at 1/stride input resolution."""

    grid: np.ndarray  # (ceil(H/s), ceil(W/s)) uint8 in {0, 1}
    stride: int
    thickness: float

    def to_pgm(self, path) -> None:
        """Debug dump as binary PGM (P5, maxval 255, values 0/255)."""
        h, w = self.grid.shape
        payload = (self.grid.astype(np.uint8) * 255).tobytes()
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(payload)


def rasterize_boundary(
    polygons: Iterable[Sequence[tuple[float, float]]],
    image_size: tuple[int, int],
    thickness: float,
    stride: int,
) -> BoundaryMap:
    """Rasterize instance contours into a downsampled binary band.

    A full-resolution pixel belongs to the band iff its center ``(x + 0.5,
    y + 0.5)`` lies within Euclidean distance ``thickness / 2`` of any
    polygon edge of any instance; the output cell ``(i, j)`` is 1 iff any
    band pixel falls inside its ``stride x stride`` block (max-pool
    downsample).  ``thickness`` must be at least ``stride``, otherwise the
    band can vanish entirely under downsampling.
    """
    height, width = int(image_size[0]), int(image_size[1])
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if thickness < stride:
        raise ValueError(
            f"boundary thickness {thickness} is below stride {stride}; "
            "the band could disappear after downsampling"
        )
    band = np.zeros((height, width), dtype=bool)
    radius = thickness / 2.0
    r2 = radius * radius
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        n = pts.shape[0]
        for k in range(n):
            ax, ay = pts[k]
            bx, by = pts[(k + 1) % n]
            x_lo = max(0, int(math.floor(min(ax, bx) - radius - 1.0)))
            x_hi = min(width, int(math.ceil(max(ax, bx) + radius + 1.0)))
            y_lo = max(0, int(math.floor(min(ay, by) - radius - 1.0)))
            y_hi = min(height, int(math.ceil(max(ay, by) + radius + 1.0)))
            if x_lo >= x_hi or y_lo >= y_hi:
                continue
            px = np.arange(x_lo, x_hi, dtype=np.float64) + 0.5
            py = np.arange(y_lo, y_hi, dtype=np.float64) + 0.5
            gx, gy = np.meshgrid(px, py)
            ex = bx - ax
            ey = by - ay
            ee = ex * ex + ey * ey
            if ee == 0.0:
                dx = gx - ax
                dy = gy - ay
            else:
                t = np.clip(((gx - ax) * ex + (gy - ay) * ey) / ee, 0.0, 1.0)
                dx = gx - (ax + t * ex)
                dy = gy - (ay + t * ey)
            d2 = dx * dx + dy * dy
            band[y_lo:y_hi, x_lo:x_hi] |= d2 <= r2
    grid_h = math.ceil(height / stride)
    grid_w = math.ceil(width / stride)
    padded = np.zeros((grid_h * stride, grid_w * stride), dtype=bool)
    padded[:height, :width] = band
    pooled = padded.reshape(grid_h, stride, grid_w, stride).any(axis=(1, 3))
    return BoundaryMap(grid=pooled.astype(np.uint8), stride=int(stride), thickness=float(thickness))
