"""Region-aware machinery: anchors, box coding, NMS, target assignment, ROI Align.

Boxes are ``(x1, y1, x2, y2)`` rows in input-image pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backend import ConfigurationError, InvalidInputError, sample_points

DELTA_CLAMP = 4.0
POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

@dataclass
class AnchorSet:
    levels: list[torch.Tensor]
    shapes: list[tuple[int, int]]
    strides: list[int]
    scales: tuple[float, ...]
    ratios: tuple[float, ...]

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    @property
    def counts(self) -> list[int]:
        return [len(a) for a in self.levels]

    def all(self) -> torch.Tensor:
        return torch.cat(self.levels, dim=0)


def cell_anchor_sizes(scales, ratios) -> list[tuple[float, float]]:
    out = []
    for s in scales:
        for r in ratios:
            out.append((s * math.sqrt(r), s / math.sqrt(r)))
    return out


def generate_anchors(pyramid_shapes, strides, scales=(8.0, 16.0, 32.0), ratios=(1.0,),
                     dtype=torch.float32) -> AnchorSet:
    """One anchor per (cell, scale, ratio), cell-major then scale then ratio."""
    if not scales or not ratios:
        raise ConfigurationError("need at least one scale and one ratio")
    if min(scales) <= 0 or min(ratios) <= 0:
        raise ConfigurationError("scales and ratios must be positive")
    sizes = torch.tensor(cell_anchor_sizes(scales, ratios), dtype=torch.float64)
    half = torch.cat([-sizes / 2, sizes / 2], dim=1)  # A×4
    levels = []
    for (h, w), s in zip(pyramid_shapes, strides):
        ys = (torch.arange(h, dtype=torch.float64) + 0.5) * s
        xs = (torch.arange(w, dtype=torch.float64) + 0.5) * s
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        centers = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
        levels.append((centers + half[None]).reshape(-1, 4).to(dtype))
    return AnchorSet(levels, [tuple(x) for x in pyramid_shapes], list(strides), tuple(scales), tuple(ratios))


# ---------------------------------------------------------------------------
# box utilities
# ---------------------------------------------------------------------------

def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp(min=0).prod(dim=-1)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def clip_boxes(boxes: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    h, w = image_size
    x = boxes[:, 0::2].clamp(0, w)
    y = boxes[:, 1::2].clamp(0, h)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def _centers(b):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`decode_boxes` (without clamping or clipping)."""
    ax, ay, aw, ah = _centers(anchors)
    gx, gy, gw, gh = _centers(gt)
    return torch.stack([(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], dim=1)


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor,
                 image_size: tuple[int, int] | None = None) -> torch.Tensor:
    if len(anchors) != len(deltas):
        raise InvalidInputError("anchors and deltas differ in length")
    ax, ay, aw, ah = _centers(anchors)
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(max=DELTA_CLAMP)
    dh = deltas[:, 3].clamp(max=DELTA_CLAMP)
    cx = ax + dx * aw
    cy = ay + dy * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    boxes = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)
    return clip_boxes(boxes, image_size) if image_size is not None else boxes


# ---------------------------------------------------------------------------
# NMS and proposal selection
# ---------------------------------------------------------------------------

def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy suppression in descending score order; ties keep the lower index."""
    if len(boxes) != len(scores):
        raise InvalidInputError("boxes and scores differ in length")
    if len(boxes) == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.sort(-scores.detach(), stable=True).indices
    b = boxes.detach()[order]
    iou = box_iou(b, b)
    alive = torch.ones(len(b), dtype=torch.bool)
    keep = []
    for i in range(len(b)):
        if not alive[i]:
            continue
        keep.append(i)
        alive &= ~(iou[i] > iou_threshold)
        alive[i] = False
    return order[torch.tensor(keep, dtype=torch.long)]


@dataclass
class Proposals:
    boxes: torch.Tensor
    objectness: torch.Tensor

    def __len__(self):
        return len(self.boxes)


def select_proposals(decoded: torch.Tensor, objectness: torch.Tensor, pre_nms_k: int, post_nms_k: int,
                     iou_threshold: float, min_size: float = 0.0) -> Proposals:
    """Top-k by objectness, NMS, then keep the best ``post_nms_k`` survivors.

    ``objectness`` holds probabilities in [0, 1].
    """
    if pre_nms_k < 1 or post_nms_k < 1:
        raise ConfigurationError("k values must be positive")
    decoded = decoded.detach()
    objectness = objectness.detach()
    if min_size > 0:
        ok = ((decoded[:, 2] - decoded[:, 0]) >= min_size) & ((decoded[:, 3] - decoded[:, 1]) >= min_size)
        idx = torch.nonzero(ok).flatten()
        decoded, objectness = decoded[idx], objectness[idx]
    order = torch.sort(-objectness, stable=True).indices[:pre_nms_k]
    boxes, scores = decoded[order], objectness[order]
    keep = nms(boxes, scores, iou_threshold)[:post_nms_k]
    return Proposals(boxes[keep], scores[keep])


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    labels: torch.Tensor        # per anchor: 1 positive, 0 negative, -1 ignore
    matched_gt: torch.Tensor    # index of best gt per anchor (-1 without gts)
    targets: torch.Tensor       # encoded regression targets (valid where positive)
    max_iou: torch.Tensor = field(repr=False)


def assign_targets(anchors: torch.Tensor, gt_boxes: torch.Tensor, pos_iou: float = 0.7,
                   neg_iou: float = 0.3, allow_low_quality: bool = True) -> Assignment:
    if pos_iou < neg_iou:
        raise ConfigurationError("pos_iou must not be below neg_iou")
    n = len(anchors)
    if len(gt_boxes) == 0:
        return Assignment(torch.zeros(n, dtype=torch.long), torch.full((n,), -1, dtype=torch.long),
                          torch.zeros(n, 4, dtype=anchors.dtype), torch.zeros(n, dtype=anchors.dtype))
    iou = box_iou(anchors, gt_boxes.to(anchors.dtype))          # N×G
    max_iou, matched = iou.max(dim=1)
    labels = torch.full((n,), IGNORE, dtype=torch.long)
    labels[max_iou < neg_iou] = NEGATIVE
    labels[max_iou >= pos_iou] = POSITIVE
    if allow_low_quality:
        best_per_gt = iou.max(dim=0).values                      # G
        hits = (iou == best_per_gt[None]) & (best_per_gt[None] > 0)
        labels[hits.any(dim=1)] = POSITIVE
    targets = encode_boxes(anchors, gt_boxes.to(anchors.dtype)[matched])
    return Assignment(labels, matched, targets, max_iou)


def subsample(labels: torch.Tensor, batch_size: int, positive_fraction: float,
              generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Random positive/negative index subsets for a loss mini-batch."""
    pos = torch.nonzero(labels == POSITIVE).flatten()
    neg = torch.nonzero(labels == NEGATIVE).flatten()
    n_pos = min(len(pos), int(batch_size * positive_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    pos = pos[torch.randperm(len(pos), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(len(neg), generator=generator)[:n_neg]]
    return pos, neg


# ---------------------------------------------------------------------------
# ROI Align
# ---------------------------------------------------------------------------

def roi_align(feature: torch.Tensor, boxes: torch.Tensor, stride: float, output_size=(7, 7),
              sampling_ratio: int = 2) -> torch.Tensor:
    """Average ``sampling_ratio²`` bilinear samples per output bin.

    ``feature`` is C×H×W, ``boxes`` K×4 (or a single length-4 box) in image
    pixels; returns K×C×h×w (C×h×w for a single box).
    """
    single = boxes.dim() == 1
    if single:
        boxes = boxes[None]
    oh, ow = output_size
    c = feature.shape[0]
    if len(boxes) == 0:
        return feature.new_zeros(0, c, oh, ow)
    b = boxes.detach().to(torch.float64) / stride
    x1, y1, x2, y2 = b.unbind(1)
    bw, bh = (x2 - x1) / ow, (y2 - y1) / oh
    degenerate = ((x2 - x1) < 1e-6) | ((y2 - y1) < 1e-6)
    sr = sampling_ratio
    offs = (torch.arange(sr, dtype=torch.float64) + 0.5) / sr
    # bin index + sub-bin offset, flattened per axis: (oh*sr,) and (ow*sr,)
    gy = (torch.arange(oh, dtype=torch.float64)[:, None] + offs[None]).reshape(-1)
    gx = (torch.arange(ow, dtype=torch.float64)[:, None] + offs[None]).reshape(-1)
    ys = y1[:, None] + gy[None] * bh[:, None]   # K × oh*sr
    xs = x1[:, None] + gx[None] * bw[:, None]   # K × ow*sr
    ys = torch.where(degenerate[:, None], y1[:, None].expand_as(ys), ys)
    xs = torch.where(degenerate[:, None], x1[:, None].expand_as(xs), xs)
    k = len(boxes)
    yy = ys[:, :, None].expand(k, oh * sr, ow * sr)
    xx = xs[:, None, :].expand(k, oh * sr, ow * sr)
    vals = sample_points(feature, xx, yy)                 # C×K×(oh*sr)×(ow*sr)
    vals = vals.reshape(c, k, oh, sr, ow, sr).mean(dim=(3, 5)).permute(1, 0, 2, 3)
    return vals[0] if single else vals


def roi_mask_target(masks: torch.Tensor, boxes: torch.Tensor, size: int) -> torch.Tensor:
    """Binary size×size crops of full-image instance masks inside ``boxes``.

    Mask pixel ``j`` spans ``[j, j+1)`` in box coordinates, hence the half-pixel shift.
    """
    out = [roi_align(m[None].float(), b - 0.5, 1.0, (size, size), 2)[0] for m, b in zip(masks, boxes)]
    if not out:
        return masks.new_zeros(0, size, size)
    return (torch.stack(out) >= 0.5).to(masks.dtype)


def map_levels(boxes: torch.Tensor, num_levels: int = 4, canonical: float = 56.0,
               canonical_level: int = 4, min_level: int = 2) -> torch.Tensor:
    """FPN level index (0-based) for each box: floor(log2(sqrt(area)/56) + 4)."""
    scale = torch.sqrt(box_area(boxes.detach()).clamp(min=1e-12))
    k = torch.floor(canonical_level + torch.log2(scale / canonical + 1e-8))
    k = k.clamp(min_level, min_level + num_levels - 1)
    return (k - min_level).long()


def multilevel_roi_align(levels: list[torch.Tensor], strides: list[int], boxes: torch.Tensor,
                         output_size=(7, 7), sampling_ratio: int = 2) -> torch.Tensor:
    """ROI Align from the FPN level chosen per box; ``levels`` are C×H×W."""
    c = levels[0].shape[0]
    out = levels[0].new_zeros(len(boxes), c, *output_size)
    if len(boxes) == 0:
        return out
    idx = map_levels(boxes, len(levels))
    parts = []
    for lvl in range(len(levels)):
        sel = torch.nonzero(idx == lvl).flatten()
        if len(sel):
            parts.append((sel, roi_align(levels[lvl], boxes[sel], strides[lvl], output_size, sampling_ratio)))
    order = torch.cat([s for s, _ in parts])
    feats = torch.cat([f for _, f in parts])
    return feats[torch.argsort(order)]


# ---------------------------------------------------------------------------
# RPN head
# ---------------------------------------------------------------------------

class RPNHead(nn.Module):
    """Shared 3×3 conv + ReLU, sibling 1×1 convs for objectness and deltas."""

    def __init__(self, channels: int, anchors_per_cell: int):
        super().__init__()
        self.a = anchors_per_cell
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls = nn.Conv2d(channels, anchors_per_cell, 1)
        self.reg = nn.Conv2d(channels, 4 * anchors_per_cell, 1)
        for m in (self.conv, self.cls, self.reg):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, feats: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Return per-anchor logits B×N and deltas B×N×4 in anchor order."""
        logits, deltas = [], []
        for f in feats:
            t = torch.relu(self.conv(f))
            b, _, h, w = t.shape
            logits.append(self.cls(t).permute(0, 2, 3, 1).reshape(b, -1))
            deltas.append(self.reg(t).reshape(b, self.a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(b, -1, 4))
        return torch.cat(logits, dim=1), torch.cat(deltas, dim=1)


def rpn_forward(head: RPNHead, feats: list[torch.Tensor], anchors: AnchorSet):
    shapes = [tuple(f.shape[-2:]) for f in feats]
    if shapes != list(anchors.shapes) or head.a != anchors.per_cell:
        raise InvalidInputError(f"feature shapes {shapes} do not match anchor set {anchors.shapes}")
    return head(feats)
