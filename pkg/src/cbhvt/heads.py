"""Detection and segmentation heads, losses, and post-processing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backend import InvalidInputError, NumericError
from .region import decode_boxes, nms

CLAMP = 1e-12


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    label: int
    score: float
    mask: np.ndarray  # uint8 grid covering floor(x1)..ceil(x2), floor(y1)..ceil(y2)

    def to_dict(self) -> dict:
        from .data import rle_encode
        return {"box": [float(v) for v in self.box], "label": int(self.label), "score": float(self.score),
                "mask_shape": list(self.mask.shape), "mask_rle": rle_encode(self.mask)}


class DetectionHead(nn.Module):
    def __init__(self, channels: int, num_classes: int = 1, roi_size: int = 7, width: int = 128):
        super().__init__()
        self.num_classes = num_classes
        self.fc1 = nn.Linear(channels * roi_size * roi_size, width)
        self.fc2 = nn.Linear(width, width)
        self.cls = nn.Linear(width, num_classes + 1)
        self.box = nn.Linear(width, 4 * (num_classes + 1))
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.box.weight, std=0.001)
        for m in (self.cls, self.box):
            nn.init.zeros_(m.bias)

    def forward(self, roi_feats):
        """Return (class probabilities, class logits, per-class deltas K×(C+1)×4)."""
        x = torch.relu(self.fc1(roi_feats.flatten(1)))
        x = torch.relu(self.fc2(x))
        logits = self.cls(x)
        deltas = self.box(x).reshape(len(x), self.num_classes + 1, 4)
        return torch.softmax(logits, dim=-1), logits, deltas


class SegmentationHead(nn.Module):
    def __init__(self, channels: int, num_classes: int = 1, width: int | None = None):
        super().__init__()
        width = width or channels
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.up = nn.ConvTranspose2d(width, width, 2, 2)
        self.logits = nn.Conv2d(width, num_classes, 1)
        for m in (self.conv1, self.conv2, self.up, self.logits):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)

    def forward(self, roi_feats):
        x = torch.relu(self.conv1(roi_feats))
        x = torch.relu(self.conv2(x))
        x = torch.relu(self.up(x))
        return self.logits(x)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_cross_entropy(p: torch.Tensor, y) -> torch.Tensor:
    """Mean of ``-log p[y]`` over rows; ``p`` is a distribution or a batch of them."""
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=torch.long)
    if p.dim() == 1:
        p, y = p[None], y.reshape(1)
    if len(y) == 0:
        return p.sum() * 0.0
    if (y < 0).any() or (y >= p.shape[-1]).any():
        raise InvalidInputError(f"class index out of range for {p.shape[-1]} classes")
    picked = p.gather(1, y[:, None]).squeeze(1)
    return -torch.log(picked.clamp(min=CLAMP)).mean()


def loss_l1(t: torch.Tensor, t_star: torch.Tensor) -> torch.Tensor:
    """Summed absolute coordinate error divided by the number of anchors (rows)."""
    t = torch.as_tensor(t)
    t_star = torch.as_tensor(t_star, dtype=t.dtype)
    if t.shape != t_star.shape:
        raise InvalidInputError(f"shape mismatch {tuple(t.shape)} vs {tuple(t_star.shape)}")
    if t.dim() == 1:
        t, t_star = t[None], t_star[None]
    n = len(t)
    if n == 0:
        return t.sum() * 0.0
    return (t - t_star).abs().sum() / n


def loss_bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=p.dtype)
    if p.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    if p.numel() == 0:
        return p.sum() * 0.0
    log_p = torch.log(p.clamp(min=CLAMP))
    log_q = torch.log((1 - p).clamp(min=CLAMP))
    return -(y * log_p + (1 - y) * log_q).mean()


@dataclass
class LossBreakdown:
    l_c: torch.Tensor
    l_l: torch.Tensor
    l_b: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        l_c, l_l, l_b = (float(v.detach()) for v in (self.l_c, self.l_l, self.l_b))
        return {"l_c": l_c, "l_l": l_l, "l_b": l_b, "total": float(self.total.detach())}


def total_loss(l_c, l_l, l_b) -> LossBreakdown:
    """Sum the three components in float64 so the logged total is exact."""
    parts = {}
    for name, v in (("l_c", l_c), ("l_l", l_l), ("l_b", l_b)):
        v = torch.as_tensor(v)
        if not torch.isfinite(v).all():
            raise NumericError(f"loss component {name} is not finite")
        if float(v.detach()) < 0:
            raise InvalidInputError(f"loss component {name} is negative")
        parts[name] = v
    total = parts["l_c"].double() + parts["l_l"].double() + parts["l_b"].double()
    return LossBreakdown(parts["l_c"], parts["l_l"], parts["l_b"], total)


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------

def mask_to_box_grid(prob: np.ndarray, box, source_box=None) -> np.ndarray:
    """Resample an M×M probability map onto the pixel grid covering ``box``.

    The map spans ``source_box`` (defaults to ``box``).
    """
    x1, y1, x2, y2 = box
    c0, c1 = int(math.floor(x1)), max(int(math.ceil(x2)), int(math.floor(x1)) + 1)
    r0, r1 = int(math.floor(y1)), max(int(math.ceil(y2)), int(math.floor(y1)) + 1)
    if source_box is not None:
        x1, y1, x2, y2 = source_box
    m = prob.shape[0]
    px = np.arange(c0, c1) + 0.5
    py = np.arange(r0, r1) + 0.5
    u = np.clip((px - x1) / max(x2 - x1, 1e-6) * m - 0.5, 0, m - 1)
    v = np.clip((py - y1) / max(y2 - y1, 1e-6) * m - 0.5, 0, m - 1)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, m - 1)
    v1 = np.minimum(v0 + 1, m - 1)
    lu, lv = u - u0, v - v0
    top = prob[v0][:, u0] * (1 - lu) + prob[v0][:, u1] * lu
    bot = prob[v1][:, u0] * (1 - lu) + prob[v1][:, u1] * lu
    return top * (1 - lv[:, None]) + bot * lv[:, None]


def paste_mask(det: Detection, image_hw: tuple[int, int]) -> np.ndarray:
    h, w = image_hw
    out = np.zeros((h, w), dtype=np.uint8)
    c0, r0 = int(math.floor(det.box[0])), int(math.floor(det.box[1]))
    mh, mw = det.mask.shape
    rs, cs = max(r0, 0), max(c0, 0)
    re, ce = min(r0 + mh, h), min(c0 + mw, w)
    if re > rs and ce > cs:
        out[rs:re, cs:ce] = det.mask[rs - r0:re - r0, cs - c0:ce - c0]
    return out


def postprocess(proposals: torch.Tensor, class_probs: torch.Tensor, deltas: torch.Tensor,
                mask_logits: torch.Tensor | None, image_size: tuple[int, int],
                score_threshold: float = 0.5, mask_threshold: float = 0.5,
                nms_threshold: float = 0.5, max_detections: int = 100) -> list[Detection]:
    """Decode, filter, per-class NMS, and binarize masks for one image."""
    if not (0 < score_threshold < 1 and 0 < mask_threshold < 1):
        raise InvalidInputError("thresholds must lie in (0, 1)")
    proposals = proposals.detach()
    class_probs = class_probs.detach()
    deltas = deltas.detach()
    dets = []
    for cls in range(1, class_probs.shape[1]):
        scores = class_probs[:, cls]
        keep = torch.nonzero(scores > score_threshold).flatten()
        if len(keep) == 0:
            continue
        boxes = decode_boxes(proposals[keep], deltas[keep, cls], image_size)
        ok = ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0)
        keep, boxes = keep[ok], boxes[ok]
        survivors = nms(boxes, scores[keep], nms_threshold)
        for i in survivors.tolist():
            k = int(keep[i])
            box = tuple(float(v) for v in boxes[i])
            if mask_logits is not None:
                prob = torch.sigmoid(mask_logits[k, cls - 1].detach().double()).numpy()
                src = tuple(float(v) for v in proposals[k])
                mask = (mask_to_box_grid(prob, box, src) >= mask_threshold).astype(np.uint8)
            else:
                mask = np.zeros((1, 1), dtype=np.uint8)
            dets.append(Detection(box, cls, float(scores[k]), mask))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_detections]
