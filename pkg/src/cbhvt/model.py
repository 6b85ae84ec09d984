"""End-to-end detector: generators → exploitation → merging → RPN → ROI heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backend import ConfigurationError, check_finite
from .exploitation import ChannelExploiter, align_and_concat
from .generators import STRIDES, AttentionRefine, GeneratorEnsemble, SpatialReductionAttention, combo
from .heads import (Detection, DetectionHead, LossBreakdown, SegmentationHead, loss_bce, loss_cross_entropy,
                    loss_l1, postprocess, total_loss)
from .merging import ChannelMerger, merger_preset
from .region import (POSITIVE, RPNHead, assign_targets, decode_boxes, encode_boxes, generate_anchors,
                     multilevel_roi_align, roi_mask_target, select_proposals, subsample)

PIXEL_MEAN = torch.tensor([0.80, 0.65, 0.70])
PIXEL_STD = torch.tensor([0.15, 0.18, 0.15])


@dataclass
class ModelConfig:
    combo: str = "Channel Generator-1"
    merger: str = "Channel Merger-1"
    c_fpn: int = 16
    profile: str = "desk"
    num_classes: int = 1
    anchor_scales: tuple[float, ...] = (8.0, 16.0, 32.0)
    anchor_ratios: tuple[float, ...] = (1.0,)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 32
    rpn_pos_fraction: float = 0.5
    rpn_nms: float = 0.7
    rpn_pre_nms_train: int = 1000
    rpn_post_nms_train: int = 200
    rpn_pre_nms_test: int = 1000
    rpn_post_nms_test: int = 100
    roi_pos_iou: float = 0.5
    roi_neg_iou: float = 0.5
    roi_batch: int = 64
    roi_pos_fraction: float = 0.25
    box_roi_size: int = 7
    mask_roi_size: int = 14
    sampling_ratio: int = 2
    head_width: int = 128
    score_threshold: float = 0.5
    mask_threshold: float = 0.5
    final_nms: float = 0.5
    max_detections: int = 100
    rpn_loss_weight: float = 1.0
    exploit_reduction: int = 4
    pretrained: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _pad32(x):
    h, w = x.shape[-2:]
    return F.pad(x, (0, (-w) % 32, 0, (-h) % 32))


def to_tensor(images) -> torch.Tensor:
    """H×W×3 uint8 arrays (or a batch) → normalised B×3×H×W float tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
    return (t - PIXEL_MEAN[:, None, None]) / PIXEL_STD[:, None, None]


class CBHVTNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, **kw):
        super().__init__()
        self.config = config = config or ModelConfig(**kw)
        if config.c_fpn < 1:
            raise ConfigurationError("c_fpn must be positive")
        self.generators = GeneratorEnsemble(combo(config.combo, config.profile, config.pretrained))
        spec = merger_preset(config.merger)
        boosted = [sum(g.out_channels[i] for g in self.generators.members.values()) for i in range(4)]
        self.boosted_channels = boosted
        self.exploiter = ChannelExploiter(boosted, config.exploit_reduction)
        self.merger = ChannelMerger(boosted, spec, config.c_fpn)
        self.anchor_per_cell = len(config.anchor_scales) * len(config.anchor_ratios)
        self.rpn = RPNHead(config.c_fpn, self.anchor_per_cell)
        self.box_head = DetectionHead(config.c_fpn, config.num_classes, config.box_roi_size, config.head_width)
        self.mask_head = SegmentationHead(config.c_fpn, config.num_classes)
        self._anchor_cache = {}

    # -- pieces -----------------------------------------------------------
    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = _pad32(x)
        pyramids = self.generators(x)
        boosted = align_and_concat(pyramids, self.generators.names)
        exploited = self.exploiter(boosted)
        merged = self.merger(exploited.levels)
        return [check_finite(merged[k].tensor, f"FPN level {k}") for k in sorted(merged)]

    def anchors(self, feats):
        shapes = tuple(tuple(f.shape[-2:]) for f in feats)
        if shapes not in self._anchor_cache:
            self._anchor_cache[shapes] = generate_anchors(shapes, STRIDES, self.config.anchor_scales,
                                                          self.config.anchor_ratios).all()
        return self._anchor_cache[shapes]

    def proposals(self, anchors, logits, deltas, image_size, training):
        cfg = self.config
        boxes = decode_boxes(anchors, deltas.detach(), image_size)
        pre = cfg.rpn_pre_nms_train if training else cfg.rpn_pre_nms_test
        post = cfg.rpn_post_nms_train if training else cfg.rpn_post_nms_test
        return select_proposals(boxes, torch.sigmoid(logits.detach()), pre, post, cfg.rpn_nms, min_size=1.0)

    # -- training -----------------------------------------------------------
    def loss(self, images: torch.Tensor, targets: list[dict], generator: torch.Generator | None = None
             ) -> LossBreakdown:
        """Per-image losses averaged over the batch.

        ``targets[i]`` holds ``boxes`` (N×4), ``labels`` (N) and ``masks`` (N×H×W).
        """
        cfg = self.config
        image_size = tuple(images.shape[-2:])
        feats = self.features(images)
        anchors = self.anchors(feats)
        logits, deltas = self.rpn(feats)
        l_c, l_l, l_b = [], [], []
        for i, tgt in enumerate(targets):
            gt = torch.as_tensor(tgt["boxes"], dtype=torch.float32).reshape(-1, 4)
            gl = torch.as_tensor(tgt["labels"], dtype=torch.long).reshape(-1)
            gm = torch.as_tensor(np.asarray(tgt["masks"]), dtype=torch.float32)
            # RPN
            a = assign_targets(anchors, gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
            pos, neg = subsample(a.labels, cfg.rpn_batch, cfg.rpn_pos_fraction, generator)
            idx = torch.cat([pos, neg])
            obj = torch.sigmoid(logits[i, idx])
            rpn_ce = loss_cross_entropy(torch.stack([1 - obj, obj], dim=1), (a.labels[idx] == POSITIVE).long())
            rpn_l1 = loss_l1(deltas[i, pos], a.targets[pos])
            # second stage
            props = self.proposals(anchors, logits[i], deltas[i], image_size, True).boxes
            rois = torch.cat([props, gt]) if len(gt) else props
            r = assign_targets(rois, gt, cfg.roi_pos_iou, cfg.roi_neg_iou, allow_low_quality=False)
            rpos, rneg = subsample(r.labels, cfg.roi_batch, cfg.roi_pos_fraction, generator)
            ridx = torch.cat([rpos, rneg])
            levels = [f[i] for f in feats]
            roi_feats = multilevel_roi_align(levels, list(STRIDES), rois[ridx], (cfg.box_roi_size,) * 2,
                                             cfg.sampling_ratio)
            probs, _, box_deltas = self.box_head(roi_feats)
            cls_t = torch.zeros(len(ridx), dtype=torch.long)
            if len(gt):
                cls_t[: len(rpos)] = gl[r.matched_gt[rpos]]
            roi_ce = loss_cross_entropy(probs, cls_t)
            npos = len(rpos)
            if npos:
                sel = box_deltas[torch.arange(npos), cls_t[:npos]]
                roi_l1 = loss_l1(sel, r.targets[rpos])
                mfeats = multilevel_roi_align(levels, list(STRIDES), rois[rpos], (cfg.mask_roi_size,) * 2,
                                              cfg.sampling_ratio)
                mlog = self.mask_head(mfeats)[torch.arange(npos), cls_t[:npos] - 1]
                mt = roi_mask_target(gm[r.matched_gt[rpos]], rois[rpos], mlog.shape[-1])
                mask_l = loss_bce(torch.sigmoid(mlog), mt)
            else:
                roi_l1 = box_deltas.sum() * 0.0
                mask_l = box_deltas.sum() * 0.0
            w = cfg.rpn_loss_weight
            l_c.append(w * rpn_ce + roi_ce)
            l_l.append(w * rpn_l1 + roi_l1)
            l_b.append(mask_l)
        mean = lambda xs: torch.stack(xs).mean()
        return total_loss(mean(l_c), mean(l_l), mean(l_b))

    # -- inference ----------------------------------------------------------
    @torch.no_grad()
    def predict(self, images: torch.Tensor, score_threshold: float | None = None) -> list[list[Detection]]:
        cfg = self.config
        thr = cfg.score_threshold if score_threshold is None else score_threshold
        image_size = tuple(images.shape[-2:])
        feats = self.features(images)
        anchors = self.anchors(feats)
        logits, deltas = self.rpn(feats)
        out = []
        for i in range(len(images)):
            props = self.proposals(anchors, logits[i], deltas[i], image_size, False).boxes
            levels = [f[i] for f in feats]
            roi_feats = multilevel_roi_align(levels, list(STRIDES), props, (cfg.box_roi_size,) * 2,
                                             cfg.sampling_ratio)
            probs, _, box_deltas = self.box_head(roi_feats)
            mfeats = multilevel_roi_align(levels, list(STRIDES), props, (cfg.mask_roi_size,) * 2,
                                          cfg.sampling_ratio)
            mask_logits = self.mask_head(mfeats) if len(props) else None
            out.append(postprocess(props, probs, box_deltas, mask_logits, image_size, thr, cfg.mask_threshold,
                                   cfg.final_nms, cfg.max_detections))
        return out

    # -- introspection ------------------------------------------------------
    def gate_values(self) -> list[torch.Tensor]:
        """Attention gates and attention/softmax rows from the most recent forward."""
        gates = []
        for m in self.modules():
            if isinstance(m, AttentionRefine) and m.last_gates is not None:
                gates.extend(m.last_gates)
        return gates

    def attention_rows(self) -> list[torch.Tensor]:
        return [m.last_weights for m in self.modules()
                if isinstance(m, SpatialReductionAttention) and m.last_weights is not None]

    def trainable_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {}
        for name, p in self.named_parameters():
            if p.requires_grad:
                key = ".".join(name.split(".")[:3]) if name.startswith("generators") else name.split(".")[0]
                groups.setdefault(key, []).append(p)
        return groups
