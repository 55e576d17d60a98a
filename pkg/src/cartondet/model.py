"""Miniature single-stage anchor detector with gap and boundary heads.

Architecture: a small strided convolutional backbone feeds a 5-level feature
pyramid (strides 8..128).  Two shared towers (4 stacked 3x3 convs + ReLU by
default) produce classification logits (A*K per location) and box deltas
(A*4).  A single extra 3x3 conv with A filters — attached to the
classification tower, the regression tower, or their concatenation — emits
the per-anchor gap logit used for score fusion.  A boundary head (4 stacked
3x3 convs + a 1-channel 3x3 conv) sits on the stride-8 level only and is
evaluated exclusively in training mode, so it adds zero inference cost; an
instrumentation counter proves that.

Training uses plain SGD with momentum, linear warmup, and step decay; the
learning rate scales linearly with batch size.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .annotations import ImageRecord, LabelTaxonomy
from .geometry import (
    AnchorGrid,
    Box,
    DEFAULT_RATIOS,
    DEFAULT_SCALES,
    DEFAULT_STRIDES,
    Detection,
    decode_deltas,
    default_anchor_levels,
    generate_anchors,
    nms,
    rasterize_boundary,
)
from .losses import (
    BGS_FOCAL,
    CLS_FOCAL,
    AssignmentResult,
    FocalConfig,
    LossWeights,
    OPCLConfig,
    assign_targets,
    fuse_score,
    total_loss,
)

_PIXEL_MEAN = 0.45
_PIXEL_STD = 0.225
_MAX_STRIDE = 128


@dataclass(frozen=True)
class ModelConfig:
    backbone_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    fpn_channels: int = 64  # C, tower width
    tower_depth: int = 4
    num_classes: int = 4  # K
    strides: tuple[int, ...] = DEFAULT_STRIDES
    anchor_scales: tuple[float, ...] = DEFAULT_SCALES
    anchor_ratios: tuple[float, ...] = DEFAULT_RATIOS
    opcl: Optional[OPCLConfig] = OPCLConfig()
    bgs_enabled: bool = True
    bgs_thickness: float = 40.0
    bgs_variant: str = "focal"
    bgs_focal: FocalConfig = BGS_FOCAL
    cls_focal: FocalConfig = CLS_FOCAL
    loc_loss: str = "giou"
    loss_weights: LossWeights = LossWeights()
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100

    def __post_init__(self):
        if self.tower_depth < 1:
            raise ValueError("tower_depth must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.backbone_channels) != 4:
            raise ValueError("backbone_channels must have 4 stages")
        if tuple(self.strides) != DEFAULT_STRIDES:
            raise ValueError(f"strides must be {DEFAULT_STRIDES}, got {self.strides}")
        if self.bgs_enabled and self.bgs_thickness < self.strides[0]:
            raise ValueError(
                f"bgs_thickness {self.bgs_thickness} is below the stride-"
                f"{self.strides[0]} map resolution"
            )
        if self.bgs_variant not in ("focal", "bce", "dice"):
            raise ValueError(f"unknown bgs_variant {self.bgs_variant!r}")
        if self.loc_loss not in ("giou", "smooth_l1"):
            raise ValueError(f"unknown loc_loss {self.loc_loss!r}")

    @property
    def anchors_per_location(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("backbone_channels", "strides", "anchor_scales", "anchor_ratios"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("opcl") is not None and not isinstance(kwargs["opcl"], OPCLConfig):
            kwargs["opcl"] = OPCLConfig(**kwargs["opcl"])
        for key, ctor in (("bgs_focal", FocalConfig), ("cls_focal", FocalConfig)):
            if key in kwargs and isinstance(kwargs[key], dict):
                kwargs[key] = ctor(**kwargs[key])
        if "loss_weights" in kwargs and isinstance(kwargs["loss_weights"], dict):
            kwargs["loss_weights"] = LossWeights(**kwargs["loss_weights"])
        return cls(**kwargs)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    reference_batch_size: int = 8  # base_lr scales linearly from here
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_steps: int = 500
    decay_steps: tuple[int, ...] = ()
    decay_factor: float = 0.1
    max_grad_norm: float = 10.0  # 0 disables clipping

    def learning_rate(self, step: int, batch_size: int) -> float:
        lr = self.base_lr * batch_size / self.reference_batch_size
        if self.warmup_steps > 0 and step < self.warmup_steps:
            lr *= (step + 1) / self.warmup_steps
        for milestone in self.decay_steps:
            if step >= milestone:
                lr *= self.decay_factor
        return lr

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "decay_steps" in kwargs:
            kwargs["decay_steps"] = tuple(kwargs["decay_steps"])
        return cls(**kwargs)


@dataclass(eq=False)
class HeadOutputs:
    """Per-level raw head tensors plus the optional boundary logits."""

    cls_logits: list[torch.Tensor]  # each (B, A*K, h_l, w_l)
    box_deltas: list[torch.Tensor]  # each (B, A*4, h_l, w_l)
    gap_logits: Optional[list[torch.Tensor]]  # each (B, A, h_l, w_l)
    boundary_logits: Optional[torch.Tensor]  # (B, 1, h_3, w_3), training only


def _conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


class Backbone(nn.Module):
    """Five strided stages; returns the stride-8/16/32 feature maps."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stage1 = nn.Sequential(_conv3(3, c1, 2), nn.ReLU(inplace=True))
        self.stage2 = nn.Sequential(
            _conv3(c1, c2, 2), nn.ReLU(inplace=True), _conv3(c2, c2), nn.ReLU(inplace=True)
        )
        self.stage3 = nn.Sequential(
            _conv3(c2, c3, 2), nn.ReLU(inplace=True), _conv3(c3, c3), nn.ReLU(inplace=True)
        )
        self.stage4 = nn.Sequential(
            _conv3(c3, c4, 2), nn.ReLU(inplace=True), _conv3(c4, c4), nn.ReLU(inplace=True)
        )
        self.stage5 = nn.Sequential(
            _conv3(c4, c4, 2), nn.ReLU(inplace=True), _conv3(c4, c4), nn.ReLU(inplace=True)
        )

    def forward(self, x):
        x = self.stage1(x)
        x = self.stage2(x)
        c3 = self.stage3(x)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c3, c4, c5


class FeaturePyramid(nn.Module):
    """1x1 laterals + top-down upsampling, plus stride-64/128 extras."""

    def __init__(self, in_channels: Sequence[int], out_channels: int):
        super().__init__()
        c3, c4, c5 = in_channels
        self.lateral3 = nn.Conv2d(c3, out_channels, 1)
        self.lateral4 = nn.Conv2d(c4, out_channels, 1)
        self.lateral5 = nn.Conv2d(c5, out_channels, 1)
        self.smooth3 = _conv3(out_channels, out_channels)
        self.smooth4 = _conv3(out_channels, out_channels)
        self.p6 = _conv3(c5, out_channels, 2)
        self.p7 = _conv3(out_channels, out_channels, 2)

    def forward(self, c3, c4, c5):
        p5 = self.lateral5(c5)
        p4 = self.lateral4(c4) + nn.functional.interpolate(p5, scale_factor=2, mode="nearest")
        p3 = self.lateral3(c3) + nn.functional.interpolate(p4, scale_factor=2, mode="nearest")
        p3 = self.smooth3(p3)
        p4 = self.smooth4(p4)
        p6 = self.p6(c5)
        p7 = self.p7(nn.functional.relu(p6))
        return [p3, p4, p5, p6, p7]


class Tower(nn.Module):
    def __init__(self, channels: int, depth: int):
        super().__init__()
        layers = []
        for _ in range(depth):
            layers += [_conv3(channels, channels), nn.ReLU(inplace=True)]
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class BoundaryHead(nn.Module):
    """Stride-8 boundary predictor: 4 stacked 3x3 convs + 1-channel output."""

    def __init__(self, channels: int, depth: int = 4):
        super().__init__()
        layers = []
        for _ in range(depth):
            layers += [_conv3(channels, channels), nn.ReLU(inplace=True)]
        self.layers = nn.Sequential(*layers)
        self.out = _conv3(channels, 1)

    def forward(self, x):
        return self.out(self.layers(x))


class CartonDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        a = cfg.anchors_per_location
        c = cfg.fpn_channels
        self.backbone = Backbone(cfg.backbone_channels)
        self.fpn = FeaturePyramid(
            (cfg.backbone_channels[2], cfg.backbone_channels[3], cfg.backbone_channels[3]), c
        )
        self.cls_tower = Tower(c, cfg.tower_depth)
        self.reg_tower = Tower(c, cfg.tower_depth)
        self.cls_head = _conv3(c, a * cfg.num_classes)
        self.reg_head = _conv3(c, a * 4)
        if cfg.opcl is not None:
            gap_in = 2 * c if cfg.opcl.attach_head == "combined" else c
            self.gap_head = _conv3(gap_in, a)
        else:
            self.gap_head = None
        self.bgs_head = BoundaryHead(c) if cfg.bgs_enabled else None
        self.bgs_evaluations = 0  # instrumentation: how often the head ran

    def forward(self, images: torch.Tensor) -> HeadOutputs:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        height, width = int(images.shape[2]), int(images.shape[3])
        if height <= 0 or width <= 0:
            raise ValueError("image dims must be positive")
        pad_h = (-height) % _MAX_STRIDE
        pad_w = (-width) % _MAX_STRIDE
        if pad_h or pad_w:
            images = nn.functional.pad(images, (0, pad_w, 0, pad_h))
        feats = self.fpn(*self.backbone(images))
        cls_out, reg_out, gap_out = [], [], []
        for level, feat in zip(self.cfg.strides, feats):
            grid_h = -(-height // level)  # ceil: crop away the padding's cells
            grid_w = -(-width // level)
            cls_feat = self.cls_tower(feat)
            reg_feat = self.reg_tower(feat)
            cls_out.append(self.cls_head(cls_feat)[:, :, :grid_h, :grid_w])
            reg_out.append(self.reg_head(reg_feat)[:, :, :grid_h, :grid_w])
            if self.gap_head is not None:
                attach = self.cfg.opcl.attach_head
                if attach == "classification":
                    gap_in = cls_feat
                elif attach == "regression":
                    gap_in = reg_feat
                else:
                    gap_in = torch.cat([cls_feat, reg_feat], dim=1)
                gap_out.append(self.gap_head(gap_in)[:, :, :grid_h, :grid_w])
        boundary = None
        if self.bgs_head is not None and self.training:
            grid_h = -(-height // self.cfg.strides[0])
            grid_w = -(-width // self.cfg.strides[0])
            boundary = self.bgs_head(feats[0])[:, :, :grid_h, :grid_w]
            self.bgs_evaluations += 1
        return HeadOutputs(
            cls_logits=cls_out,
            box_deltas=reg_out,
            gap_logits=gap_out if self.gap_head is not None else None,
            boundary_logits=boundary,
        )


def build_model(cfg: ModelConfig, seed: int = 0) -> CartonDetector:
    """Construct and deterministically initialize a detector."""
    model = CartonDetector(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    head_weights = {
        id(m.weight)
        for m in (model.cls_head, model.reg_head, model.gap_head)
        if m is not None
    }
    if model.bgs_head is not None:
        head_weights.add(id(model.bgs_head.out.weight))
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.dim() <= 1:
                param.zero_()
            elif id(param) in head_weights:
                param.normal_(0.0, 0.01, generator=gen)
            else:
                # fan-in scaled so deep features are alive from scratch
                fan_in = param.shape[1] * param.shape[2] * param.shape[3]
                param.normal_(0.0, float(np.sqrt(2.0 / fan_in)), generator=gen)
        # low foreground prior so early training is not swamped by negatives
        prior = 0.01
        model.cls_head.bias.fill_(-float(np.log((1.0 - prior) / prior)))
    return model


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over all parameters in name order (bit-stable determinism probe)."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().numpy().tobytes())
    return digest.hexdigest()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def images_to_tensor(images) -> torch.Tensor:
    """(H, W, 3) uint8 arrays (or a list of them) -> normalized (B, 3, H, W)."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    batch = np.stack([np.asarray(im, dtype=np.float32) / 255.0 for im in images])
    batch = (batch - _PIXEL_MEAN) / _PIXEL_STD
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


def flatten_head_outputs(outputs: HeadOutputs, image_index: int = 0):
    """Concatenate levels into per-anchor rows matching anchor-grid order."""
    cls_rows, delta_rows, gap_rows = [], [], []
    n_levels = len(outputs.cls_logits)
    for lv in range(n_levels):
        cls = outputs.cls_logits[lv][image_index]  # (A*K, h, w)
        ak, h, w = cls.shape
        deltas = outputs.box_deltas[lv][image_index]
        a4 = deltas.shape[0]
        a = a4 // 4
        k = ak // a
        cls_rows.append(cls.reshape(a, k, h, w).permute(2, 3, 0, 1).reshape(-1, k))
        delta_rows.append(deltas.reshape(a, 4, h, w).permute(2, 3, 0, 1).reshape(-1, 4))
        if outputs.gap_logits is not None:
            gap = outputs.gap_logits[lv][image_index]
            gap_rows.append(gap.permute(1, 2, 0).reshape(-1))
    cls_flat = torch.cat(cls_rows, dim=0)
    deltas_flat = torch.cat(delta_rows, dim=0)
    gap_flat = torch.cat(gap_rows, dim=0) if gap_rows else None
    return cls_flat, deltas_flat, gap_flat


def anchor_grid_for(cfg: ModelConfig, image_size: tuple[int, int]) -> AnchorGrid:
    return generate_anchors(
        default_anchor_levels(cfg.strides),
        cfg.anchor_scales,
        cfg.anchor_ratios,
        image_size,
    )


def _record_targets(record: ImageRecord, taxonomy: LabelTaxonomy):
    boxes = [inst.bbox.as_tuple() for inst in record.instances]
    classes = [taxonomy.index_of(inst.label) for inst in record.instances]
    return boxes, classes


def train_step(
    model: CartonDetector,
    images,  # list of (H, W, 3) uint8 arrays
    records: Sequence[ImageRecord],
    taxonomy: LabelTaxonomy,
    optimizer: torch.optim.Optimizer,
    step: int,
    train_cfg: TrainConfig,
) -> dict:
    """One SGD step over a batch; returns the loss breakdown (JSON-friendly)."""
    if len(images) == 0 or len(images) != len(records):
        raise ValueError("batch must be non-empty with one record per image")
    cfg = model.cfg
    model.train()
    lr = train_cfg.learning_rate(step, len(images))
    for group in optimizer.param_groups:
        group["lr"] = lr

    batch = images_to_tensor(images)
    outputs = model(batch)
    height, width = batch.shape[2], batch.shape[3]
    grid = anchor_grid_for(cfg, (int(height), int(width)))
    anchor_boxes = grid.boxes.to(torch.float32)

    cls_all, deltas_all, gaps_all, labels_all, matched_all, gt_all = [], [], [], [], [], []
    gt_offset = 0
    for b, record in enumerate(records):
        cls_flat, deltas_flat, gap_flat = flatten_head_outputs(outputs, b)
        boxes, classes = _record_targets(record, taxonomy)
        assignment = assign_targets(anchor_boxes, boxes, classes)
        cls_all.append(cls_flat)
        deltas_all.append(deltas_flat)
        if gap_flat is not None:
            gaps_all.append(gap_flat)
        labels = assignment.labels.clone()
        matched = assignment.matched_gt.clone()
        matched[matched >= 0] += gt_offset
        labels_all.append(labels)
        matched_all.append(matched)
        if boxes:
            gt_all.append(torch.tensor(boxes, dtype=torch.float32))
            gt_offset += len(boxes)

    assignment = AssignmentResult(
        labels=torch.cat(labels_all), matched_gt=torch.cat(matched_all)
    )
    gt_boxes = torch.cat(gt_all) if gt_all else torch.zeros(0, 4)
    anchors_rep = anchor_boxes.repeat(len(records), 1)

    bgs_map = None
    boundary_target = None
    if outputs.boundary_logits is not None:
        stride = cfg.strides[0]
        targets = [
            rasterize_boundary(
                [inst.polygon for inst in record.instances],
                (int(height), int(width)),
                cfg.bgs_thickness,
                stride,
            ).grid
            for record in records
        ]
        boundary_target = torch.from_numpy(np.stack(targets)).to(torch.float32)
        bgs_map = torch.sigmoid(outputs.boundary_logits[:, 0])

    total, breakdown = total_loss(
        torch.cat(cls_all),
        torch.cat(gaps_all) if gaps_all else None,
        torch.cat(deltas_all),
        anchors_rep,
        assignment,
        gt_boxes,
        bgs_map=bgs_map,
        boundary_target=boundary_target,
        cls_cfg=cfg.cls_focal,
        opcl_cfg=cfg.opcl,
        bgs_cfg=cfg.bgs_focal,
        bgs_variant=cfg.bgs_variant,
        weights=cfg.loss_weights,
        loc_loss=cfg.loc_loss,
    )
    optimizer.zero_grad()
    total.backward()
    if train_cfg.max_grad_norm:
        nn.utils.clip_grad_norm_(model.parameters(), train_cfg.max_grad_norm)
    optimizer.step()
    breakdown["step"] = step
    breakdown["lr"] = lr
    return breakdown


def make_optimizer(model: nn.Module, train_cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        model.parameters(),
        lr=train_cfg.base_lr,
        momentum=train_cfg.momentum,
        weight_decay=train_cfg.weight_decay,
    )


def predict(
    model: CartonDetector,
    image,
    alpha: Optional[float] = None,
    score_thresh: Optional[float] = None,
    nms_iou: Optional[float] = None,
    max_detections: Optional[int] = None,
) -> list[Detection]:
    """Decode, fuse scores, threshold, and run per-class NMS on one image.

    The boundary head is never evaluated here.  ``alpha`` defaults to the
    model's OPCL setting (0 when OPCL is disabled, i.e. rank by P_cls).
    """
    cfg = model.cfg
    if alpha is None:
        alpha = cfg.opcl.alpha if cfg.opcl is not None else 0.0
    if score_thresh is None:
        score_thresh = cfg.score_thresh
    if nms_iou is None:
        nms_iou = cfg.nms_iou
    if max_detections is None:
        max_detections = cfg.max_detections

    image = np.asarray(image)
    height, width = image.shape[:2]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            outputs = model(images_to_tensor(image))
            cls_flat, deltas_flat, gap_flat = flatten_head_outputs(outputs, 0)
    finally:
        if was_training:
            model.train()
    assert outputs.boundary_logits is None

    grid = anchor_grid_for(cfg, (height, width))
    anchor_boxes = grid.boxes.to(torch.float32)
    if gap_flat is None:
        gap_flat = torch.zeros_like(cls_flat[:, 0])
    p_cls, p_loc, s_det = fuse_score(cls_flat, gap_flat[:, None], alpha)

    keep = s_det >= score_thresh
    anchor_idx, class_idx = keep.nonzero(as_tuple=True)
    if anchor_idx.numel() == 0:
        return []
    # cap the NMS workload at the strongest few hundred candidates
    order = torch.argsort(s_det[anchor_idx, class_idx], descending=True)[:1000]
    anchor_idx = anchor_idx[order]
    class_idx = class_idx[order]
    boxes = decode_deltas(anchor_boxes[anchor_idx], deltas_flat[anchor_idx])
    boxes[:, 0::2] = boxes[:, 0::2].clamp(0, width)
    boxes[:, 1::2] = boxes[:, 1::2].clamp(0, height)
    detections = []
    for row in range(anchor_idx.shape[0]):
        a = int(anchor_idx[row])
        k = int(class_idx[row])
        x1, y1, x2, y2 = (float(v) for v in boxes[row])
        if x2 <= x1 or y2 <= y1:
            continue
        detections.append(
            Detection(
                box=Box(x1, y1, x2, y2),
                class_id=k,
                p_cls=float(p_cls[a, k]),
                p_loc=float(p_loc[a, k]),
                score=float(s_det[a, k]),
            )
        )
    kept = nms(detections, iou_threshold=nms_iou)
    return kept[:max_detections]


def save_checkpoint(model: CartonDetector, path, extra: Optional[dict] = None) -> None:
    """Self-describing checkpoint: config JSON + parameter tensors."""
    payload = {
        "config": json.dumps(model.cfg.to_dict()),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[CartonDetector, dict]:
    payload = torch.load(path, weights_only=False)
    cfg = ModelConfig.from_dict(json.loads(payload["config"]))
    model = CartonDetector(cfg)
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
