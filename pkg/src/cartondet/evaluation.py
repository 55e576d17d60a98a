"""COCO-style detection evaluation: greedy matching + interpolated AP.

Protocol summary:

* Detections are matched per image and class in descending score order;
  each detection takes the unmatched ground truth with the highest IoU,
  provided that IoU reaches the threshold.  One match per ground truth.
* AP for one class/threshold pools matches over all images and uses the
  101-point interpolated precision envelope over recall [0, 1].
* The headline number averages first over classes with at least one ground
  truth, then over the ten IoU thresholds 0.50:0.05:0.95.
* Size-bucket APs restrict the ground truths to an area range (small
  < 32^2, medium 32^2..96^2, large > 96^2).  Out-of-range ground truths
  become "ignore": detections matched to them count neither way, and
  unmatched detections whose own area is out of range are discarded rather
  than counted as false positives.  A bucket with no ground truths at all
  reports a "no instances" sentinel (None / "-").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .annotations import ImageRecord, LabelTaxonomy, infer_taxonomy
from .geometry import Box, Detection, iou_matrix

IOU_THRESHOLDS = tuple(t / 100 for t in range(50, 100, 5))
SMALL_AREA = 32.0**2
LARGE_AREA = 96.0**2


@dataclass(frozen=True)
class APTable:
    """Evaluation summary; ``None`` entries mean "no instances to score"."""

    mean_ap: Optional[float]
    per_threshold: dict  # {0.5: ap, 0.55: ap, ...}
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    per_class: dict = field(default_factory=dict)  # {label: ap or None}
    n_images: int = 0
    n_ground_truths: int = 0

    def to_json(self) -> str:
        payload = {
            "mAP": self.mean_ap,
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "AP_S": self.ap_small,
            "AP_M": self.ap_medium,
            "AP_L": self.ap_large,
            "per_class": self.per_class,
            "n_images": self.n_images,
            "n_ground_truths": self.n_ground_truths,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    def to_text(self) -> str:
        columns = ["mAP", "AP50", "AP60", "AP70", "AP75", "AP80", "AP90", "AP_S", "AP_M", "AP_L"]
        values = [
            self.mean_ap,
            self.per_threshold.get(0.50),
            self.per_threshold.get(0.60),
            self.per_threshold.get(0.70),
            self.per_threshold.get(0.75),
            self.per_threshold.get(0.80),
            self.per_threshold.get(0.90),
            self.ap_small,
            self.ap_medium,
            self.ap_large,
        ]
        cells = ["-" if v is None else f"{v:.4f}" for v in values]
        width = max(len(s) for s in columns + cells)
        header = " ".join(c.rjust(width) for c in columns)
        row = " ".join(c.rjust(width) for c in cells)
        return header + "\n" + row


def match_detections(
    detections: Sequence[Detection],
    gt_boxes: Sequence[Box],
    iou_threshold: float,
) -> tuple[list[bool], list[int]]:
    """Greedy one-to-one matching for a single image and class.

    Detections are visited in descending score order (ties keep input
    order); each takes the unmatched ground truth with the highest IoU if
    that IoU is at least ``iou_threshold``.  Returns per-detection hit
    flags and matched gt indices (-1 for misses), both in input order.
    """
    tp = [False] * len(detections)
    matched_gt = [-1] * len(detections)
    if not detections or not gt_boxes:
        return tp, matched_gt
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    ious = iou_matrix([d.box for d in detections], gt_boxes).numpy()
    taken = [False] * len(gt_boxes)
    for i in order:
        best_j = -1
        for j in range(len(gt_boxes)):
            if taken[j] or ious[i, j] < iou_threshold or ious[i, j] <= 0:
                continue
            if best_j < 0 or ious[i, j] > ious[i, best_j]:
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
            matched_gt[i] = best_j
    return tp, matched_gt


def average_precision(
    scores: Sequence[float], tp_flags: Sequence[bool], n_gt: int
) -> Optional[float]:
    """101-point interpolated AP from pooled detections of one class.

    Returns ``None`` when there is nothing to score (``n_gt == 0``).
    """
    if n_gt == 0:
        return None
    if len(scores) != len(tp_flags):
        raise ValueError("scores and tp_flags must have equal length")
    if len(scores) == 0:
        return 0.0
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))
    tp = np.asarray(tp_flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # precision envelope: best precision achievable at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    sample_points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, sample_points, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _in_bucket(area: float, bucket: Optional[str]) -> bool:
    if bucket is None:
        return True
    if bucket == "small":
        return area < SMALL_AREA
    if bucket == "medium":
        return SMALL_AREA <= area <= LARGE_AREA
    if bucket == "large":
        return area > LARGE_AREA
    raise ValueError(f"unknown size bucket {bucket!r}")


def _match_with_ignore(
    order: list[int],
    scores_in: list[float],
    det_areas: list[float],
    ious: np.ndarray,
    gt_ignore: list[bool],
    iou_threshold: float,
    bucket: Optional[str],
) -> tuple[list[float], list[bool]]:
    """Scores + hit flags for one image/class honoring ignore rules.

    Detections (visited in the precomputed descending-score ``order``) first
    try real (non-ignored) ground truths, best IoU wins; failing that, a
    detection overlapping any ignored ground truth at the threshold is
    dropped from scoring, as is any unmatched detection whose own area
    falls outside the bucket.
    """
    n_gt = ious.shape[1]
    taken = [False] * n_gt
    scores: list[float] = []
    flags: list[bool] = []
    for i in order:
        best_j = -1
        for j in range(n_gt):
            if taken[j] or gt_ignore[j]:
                continue
            if ious[i, j] >= iou_threshold and ious[i, j] > 0:
                if best_j < 0 or ious[i, j] > ious[i, best_j]:
                    best_j = j
        if best_j >= 0:
            taken[best_j] = True
            scores.append(scores_in[i])
            flags.append(True)
            continue
        hits_ignored = any(
            gt_ignore[j] and ious[i, j] >= iou_threshold and ious[i, j] > 0
            for j in range(n_gt)
        )
        if hits_ignored:
            continue  # neither TP nor FP
        if not _in_bucket(det_areas[i], bucket):
            continue  # out-of-range leftover detection is not penalized
        scores.append(scores_in[i])
        flags.append(False)
    return scores, flags


def evaluate(
    detections_by_image: dict,
    records: Sequence[ImageRecord],
    taxonomy: Optional[LabelTaxonomy] = None,
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> APTable:
    """Score ``{image_id: [Detection, ...]}`` against annotated records.

    Detection ``class_id`` indexes ``taxonomy.labels`` (inferred from the
    records when omitted).  Classes with no ground truths anywhere are
    skipped; detection image ids must exist among the records.
    """
    if taxonomy is None:
        taxonomy = infer_taxonomy(records)
    record_ids = {rec.image_id for rec in records}
    unknown = set(detections_by_image) - record_ids
    if unknown:
        raise ValueError(f"detections reference unknown image ids: {sorted(unknown)[:5]}")
    thresholds = tuple(iou_thresholds)
    labels = taxonomy.labels
    n_classes = len(labels)

    # per image and class: detection scores/areas (input order), visit
    # order, gt areas, and the IoU matrix shared by all thresholds/buckets
    per_image: list[list[dict]] = []
    n_gts_total = 0
    for rec in records:
        dets = list(detections_by_image.get(rec.image_id, ()))
        by_class: list[dict] = [
            {"dets": [], "scores": [], "areas": [], "gts": []} for _ in range(n_classes)
        ]
        for det in dets:
            if not 0 <= det.class_id < n_classes:
                raise ValueError(f"detection class_id {det.class_id} outside taxonomy")
            cell = by_class[det.class_id]
            cell["dets"].append(det.box)
            cell["scores"].append(det.score)
            cell["areas"].append(det.box.area)
        for inst in rec.instances:
            by_class[taxonomy.index_of(inst.label)]["gts"].append(inst.bbox)
            n_gts_total += 1
        for cell in by_class:
            scores = cell["scores"]
            cell["order"] = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
            cell["gt_areas"] = [b.area for b in cell["gts"]]
            cell["ious"] = (
                iou_matrix(cell["dets"], cell["gts"]).numpy()
                if cell["dets"] and cell["gts"]
                else np.zeros((len(cell["dets"]), len(cell["gts"])))
            )
        per_image.append(by_class)

    def class_ap(class_idx: int, threshold: float, bucket: Optional[str]) -> Optional[float]:
        scores: list[float] = []
        flags: list[bool] = []
        n_gt = 0
        for by_class in per_image:
            cell = by_class[class_idx]
            ignore = [not _in_bucket(a, bucket) for a in cell["gt_areas"]]
            n_gt += sum(1 for ig in ignore if not ig)
            s, f = _match_with_ignore(
                cell["order"], cell["scores"], cell["areas"], cell["ious"],
                ignore, threshold, bucket,
            )
            scores.extend(s)
            flags.extend(f)
        return average_precision(scores, flags, n_gt)

    def averaged(values: list[Optional[float]]) -> Optional[float]:
        present = [v for v in values if v is not None]
        return sum(present) / len(present) if present else None

    overall = {
        (c, t): class_ap(c, t, None) for c in range(n_classes) for t in thresholds
    }
    per_threshold = {
        t: averaged([overall[c, t] for c in range(n_classes)]) for t in thresholds
    }
    mean_ap = averaged(list(per_threshold.values()))
    per_class = {
        label: averaged([overall[c, t] for t in thresholds])
        for c, label in enumerate(labels)
    }

    def bucket_ap(bucket: str) -> Optional[float]:
        values = [
            averaged([class_ap(c, t, bucket) for c in range(n_classes)])
            for t in thresholds
        ]
        return averaged(values)

    return APTable(
        mean_ap=mean_ap,
        per_threshold=per_threshold,
        ap_small=bucket_ap("small"),
        ap_medium=bucket_ap("medium"),
        ap_large=bucket_ap("large"),
        per_class=per_class,
        n_images=len(records),
        n_ground_truths=n_gts_total,
    )
