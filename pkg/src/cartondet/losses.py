"""Training objectives and target assignment.

The score-gap pieces work together like this: the classifier emits a logit
``C_cls`` per anchor/class, and a small side head emits a per-anchor gap
logit ``C_gap``.  Their sum is the localization logit, ``C_loc = C_cls +
C_gap``, trained with :func:`opcl_gap_loss` so that ``sigmoid(C_loc)``
estimates the IoU of the decoded box against its matched ground truth.  At
inference :func:`fuse_score` blends the two probabilities,
``S = P_loc^alpha * P_cls^(1-alpha)``, so ranking can lean on localization
quality instead of raw classification confidence.

``iou_grad`` selects whether the gap loss also differentiates *through* the
IoU computation into the box regressor (the starred variant).  The loss
value is identical either way; only gradients change.

The boundary head is trained by :func:`bgs_loss` on a binary boundary map
(see :func:`cartondet.geometry.rasterize_boundary`), normalized by the count
of boundary pixels, with focal / plain BCE / Dice variants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .geometry import AnchorGrid, as_box_tensor, decode_deltas, encode_deltas, giou_pairs, iou_matrix, iou_pairs

NEGATIVE = -1
IGNORE = -2

_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha_balance: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not (0.0 < self.alpha_balance < 1.0):
            raise ValueError(f"alpha_balance must lie in (0, 1), got {self.alpha_balance}")


# classification default vs the softer boundary-map default
CLS_FOCAL = FocalConfig(gamma=2.0, alpha_balance=0.25)
BGS_FOCAL = FocalConfig(gamma=0.5, alpha_balance=0.5)


@dataclass(frozen=True)
class OPCLConfig:
    attach_head: str = "classification"  # classification | regression | combined
    alpha: float = 0.7
    iou_grad: bool = True

    def __post_init__(self):
        if self.attach_head not in ("classification", "regression", "combined"):
            raise ValueError(f"unknown attach_head {self.attach_head!r}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class LossWeights:
    loc: float = 5.0
    gap: float = 1.0
    bgs: float = 1.0


@dataclass(eq=False)
class AssignmentResult:
    """Per-anchor assignment: class index >= 0, NEGATIVE, or IGNORE."""

    labels: torch.Tensor  # (N,) long
    matched_gt: torch.Tensor  # (N,) long, -1 unless positive

    @property
    def positive_mask(self) -> torch.Tensor:
        return self.labels >= 0

    @property
    def negative_mask(self) -> torch.Tensor:
        return self.labels == NEGATIVE

    @property
    def ignore_mask(self) -> torch.Tensor:
        return self.labels == IGNORE

    @property
    def n_pos(self) -> int:
        return int(self.positive_mask.sum())


def assign_targets(
    anchors,
    gt_boxes,
    gt_classes: Sequence[int],
    pos_threshold: float = 0.5,
    neg_threshold: float = 0.4,
) -> AssignmentResult:
    """Max-IoU assignment with the usual low-quality-match rescue.

    An anchor is positive for its argmax ground truth when its best IoU is
    at least ``pos_threshold``, negative below ``neg_threshold``, and
    ignored in between.  Afterwards every ground truth with any overlap
    claims its single best anchor, whatever that anchor's IoU was.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorGrid) else as_box_tensor(anchors)
    n = boxes.shape[0]
    labels = torch.full((n,), NEGATIVE, dtype=torch.long)
    matched = torch.full((n,), -1, dtype=torch.long)
    gt = as_box_tensor(gt_boxes)
    if gt.shape[0] == 0:
        return AssignmentResult(labels=labels, matched_gt=matched)
    classes = torch.as_tensor(list(gt_classes), dtype=torch.long)
    if classes.shape[0] != gt.shape[0]:
        raise ValueError("gt_boxes and gt_classes must have equal length")

    iou = iou_matrix(boxes, gt)  # (N, M)
    best_iou, best_gt = iou.max(dim=1)
    labels[(best_iou >= neg_threshold) & (best_iou < pos_threshold)] = IGNORE
    pos = best_iou >= pos_threshold
    labels[pos] = classes[best_gt[pos]]
    matched[pos] = best_gt[pos]
    # rescue: each gt claims its best anchor even below the threshold
    gt_best_iou, gt_best_anchor = iou.max(dim=0)
    for j in range(gt.shape[0]):
        if gt_best_iou[j] > 0:
            i = int(gt_best_anchor[j])
            labels[i] = classes[j]
            matched[i] = j
    return AssignmentResult(labels=labels, matched_gt=matched)


def focal_loss_elements(logits, targets, cfg: FocalConfig = CLS_FOCAL) -> torch.Tensor:
    """Per-element ``-alpha_t * (1 - p_t)^gamma * log(p_t)``."""
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets, dtype=logits.dtype)
    p = torch.sigmoid(logits)
    p_t = torch.where(targets > 0.5, p, 1.0 - p)
    alpha_t = torch.where(
        targets > 0.5,
        torch.full_like(p, cfg.alpha_balance),
        torch.full_like(p, 1.0 - cfg.alpha_balance),
    )
    # clamp the pow base: for gamma < 1 its derivative diverges as p_t -> 1
    # (saturated correct predictions), which would poison the whole backward
    # pass with inf * 0; the clamp is value-neutral since log(p_t) -> 0 there
    focal_weight = (1.0 - p_t).clamp(min=_LOG_FLOOR) ** cfg.gamma
    return -alpha_t * focal_weight * torch.log(p_t.clamp(min=_LOG_FLOOR))


def focal_loss(logits, targets, cfg: FocalConfig = CLS_FOCAL, n_pos: int = 1) -> torch.Tensor:
    """Summed focal loss normalized by the caller's positive count."""
    return focal_loss_elements(logits, targets, cfg).sum() / max(n_pos, 1)


def smooth_l1_elements(pred, target, beta: float = 1.0 / 9.0) -> torch.Tensor:
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    diff = torch.abs(torch.as_tensor(pred) - torch.as_tensor(target))
    return torch.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)


def smooth_l1_loss(pred_deltas, target_deltas, beta: float = 1.0 / 9.0) -> torch.Tensor:
    """Per-anchor sum of coordinate losses, averaged over anchors."""
    pred = torch.as_tensor(pred_deltas)
    if pred.numel() == 0:
        return pred.new_zeros(())
    elements = smooth_l1_elements(pred, target_deltas, beta)
    return elements.reshape(elements.shape[0], -1).sum(dim=1).mean()


def giou_loss(pred_boxes, target_boxes) -> torch.Tensor:
    """Mean ``1 - GIoU`` over box pairs."""
    pred = as_box_tensor(pred_boxes)
    if pred.shape[0] == 0:
        return pred.new_zeros(())
    return (1.0 - giou_pairs(pred, target_boxes)).mean()


def opcl_gap_loss(cls_logits, gap_logits, ious, iou_grad: bool = True) -> torch.Tensor:
    """BCE between ``sigmoid(C_cls + C_gap)`` and per-positive IoU.

    Inputs are restricted to positive anchors.  With ``iou_grad`` false the
    IoU targets are detached, so no gradient reaches the box regressor
    through them; the loss value itself is unchanged.
    """
    cls_logits = torch.as_tensor(cls_logits)
    gap_logits = torch.as_tensor(gap_logits)
    if cls_logits.numel() == 0:
        return cls_logits.new_zeros(())
    ious = torch.as_tensor(ious)
    target = ious if iou_grad else ious.detach()
    z = cls_logits + gap_logits
    # BCE(sigmoid(z), t) = softplus(z) - t*z, stable and differentiable in t
    return (F.softplus(z) - target * z).mean()


def fuse_score(cls_logit, gap_logit, alpha: float):
    """Geometric score fusion: ``(P_cls, P_loc, P_loc^alpha * P_cls^(1-alpha))``.

    ``alpha = 0`` returns the plain classification probability (baseline
    ranking); ``alpha = 1`` ranks purely by predicted localization quality.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    cls_logit = torch.as_tensor(cls_logit)
    gap_logit = torch.as_tensor(gap_logit)
    p_cls = torch.sigmoid(cls_logit)
    p_loc = torch.sigmoid(cls_logit + gap_logit)
    s_det = p_loc**alpha * p_cls ** (1.0 - alpha)
    return p_cls, p_loc, s_det


def bgs_loss(
    pred_map,
    target_map,
    variant: str = "focal",
    cfg: FocalConfig = BGS_FOCAL,
    eps: float = 1.0,
) -> torch.Tensor:
    """Boundary-map loss over probabilities in (0, 1) vs binary targets.

    ``focal`` and ``bce`` sum over *all* pixels and divide by the number of
    boundary pixels; ``dice`` is ``1 - (2*intersection + eps) / (sum + eps)``.
    """
    pred = torch.as_tensor(pred_map)
    target = torch.as_tensor(target_map, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if variant not in ("focal", "bce", "dice"):
        raise ValueError(f"unknown bgs_loss variant {variant!r}")
    if variant == "dice":
        inter = (pred * target).sum()
        return 1.0 - (2.0 * inter + eps) / (pred.sum() + target.sum() + eps)
    n_pos = float(target.sum())
    if n_pos == 0:
        return pred.new_zeros(())
    p_t = torch.where(target > 0.5, pred, 1.0 - pred)
    log_p_t = torch.log(p_t.clamp(min=_LOG_FLOOR))
    if variant == "bce":
        return -log_p_t.sum() / n_pos
    alpha_t = torch.where(
        target > 0.5,
        torch.full_like(pred, cfg.alpha_balance),
        torch.full_like(pred, 1.0 - cfg.alpha_balance),
    )
    # same pow-base clamp as focal_loss_elements (gamma < 1 singularity)
    focal_weight = (1.0 - p_t).clamp(min=_LOG_FLOOR) ** cfg.gamma
    return (-alpha_t * focal_weight * log_p_t).sum() / n_pos


def _check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value):
        raise RuntimeError(f"loss term {name!r} is not finite: {float(value.detach())}")
    return value


def total_loss(
    cls_logits: torch.Tensor,  # (N, C)
    gap_logits: Optional[torch.Tensor],  # (N,)
    reg_deltas: torch.Tensor,  # (N, 4)
    anchors,  # (N, 4) or AnchorGrid
    assignment: AssignmentResult,
    gt_boxes,  # (M, 4)
    bgs_map: Optional[torch.Tensor] = None,  # (h, w) probabilities
    boundary_target: Optional[torch.Tensor] = None,  # (h, w) binary
    cls_cfg: FocalConfig = CLS_FOCAL,
    opcl_cfg: Optional[OPCLConfig] = None,
    bgs_cfg: FocalConfig = BGS_FOCAL,
    bgs_variant: str = "focal",
    weights: LossWeights = LossWeights(),
    loc_loss: str = "giou",
    smooth_l1_beta: float = 1.0 / 9.0,
) -> tuple[torch.Tensor, dict]:
    """Compose the full objective; returns ``(total, per-term breakdown)``.

    ``L = L_cls + w.loc * L_loc + w.gap * L_gap + w.bgs * L_bgs`` where the
    gap term exists only when ``opcl_cfg`` and ``gap_logits`` are given and
    the boundary term only when both boundary tensors are given.  Every term
    is checked for NaN/inf and reported by name.
    """
    anchor_boxes = anchors.boxes if isinstance(anchors, AnchorGrid) else as_box_tensor(anchors)
    anchor_boxes = anchor_boxes.to(cls_logits.dtype)
    n_pos = assignment.n_pos
    pos = assignment.positive_mask
    keep = ~assignment.ignore_mask

    cls_targets = torch.zeros_like(cls_logits)
    if n_pos:
        cls_targets[pos, assignment.labels[pos]] = 1.0
    term_cls = _check_finite(
        "cls", focal_loss(cls_logits[keep], cls_targets[keep], cls_cfg, n_pos)
    )

    if n_pos:
        gt = as_box_tensor(gt_boxes).to(cls_logits.dtype)
        matched = gt[assignment.matched_gt[pos]]
        pos_anchors = anchor_boxes[pos]
        decoded = decode_deltas(pos_anchors, reg_deltas[pos])
        if loc_loss == "giou":
            term_loc = giou_loss(decoded, matched)
        elif loc_loss == "smooth_l1":
            term_loc = smooth_l1_loss(
                reg_deltas[pos], encode_deltas(pos_anchors, matched), smooth_l1_beta
            )
        else:
            raise ValueError(f"unknown loc_loss {loc_loss!r}")
        term_loc = _check_finite("loc", term_loc)
        if opcl_cfg is not None and gap_logits is not None:
            pos_cls_logit = cls_logits[pos, assignment.labels[pos]]
            ious = iou_pairs(decoded, matched).clamp(0.0, 1.0)
            term_gap = _check_finite(
                "gap", opcl_gap_loss(pos_cls_logit, gap_logits[pos], ious, opcl_cfg.iou_grad)
            )
        else:
            term_gap = cls_logits.new_zeros(())
    else:
        term_loc = cls_logits.new_zeros(())
        term_gap = cls_logits.new_zeros(())

    if bgs_map is not None and boundary_target is not None:
        term_bgs = _check_finite(
            "bgs", bgs_loss(bgs_map, boundary_target, bgs_variant, bgs_cfg)
        )
    else:
        term_bgs = cls_logits.new_zeros(())

    total = (
        term_cls
        + weights.loc * term_loc
        + weights.gap * term_gap
        + weights.bgs * term_bgs
    )
    breakdown = {
        "total": float(total.detach()),
        "cls": float(term_cls.detach()),
        "loc": float(term_loc.detach()),
        "gap": float(term_gap.detach()),
        "bgs": float(term_bgs.detach()),
        "n_pos": n_pos,
    }
    return total, breakdown
