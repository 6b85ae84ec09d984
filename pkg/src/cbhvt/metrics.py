"""Detection matching, recall and F-score."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backend import ConfigurationError, InvalidInputError


@dataclass(frozen=True)
class MatchCriterion:
    """Either ``iou`` (match when IoU ≥ threshold) or ``center`` (distance ≤ threshold px)."""

    mode: str = "iou"
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode == "iou":
            if not 0 < self.threshold <= 1:
                raise ConfigurationError("IoU threshold must be in (0, 1]")
        elif self.mode == "center":
            if self.threshold <= 0:
                raise ConfigurationError("center distance must be positive")
        else:
            raise ConfigurationError(f"unknown criterion {self.mode!r}")

    @classmethod
    def center(cls, distance: float = 12.0) -> "MatchCriterion":
        return cls("center", distance)

    def describe(self) -> str:
        return f"IoU >= {self.threshold}" if self.mode == "iou" else f"center distance <= {self.threshold} px"


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(-1)
    area = lambda x: (x[:, 2] - x[:, 0]) * (x[:, 3] - x[:, 1])
    union = area(a)[:, None] + area(b)[None] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def affinity(preds: np.ndarray, gts: np.ndarray, criterion: MatchCriterion) -> tuple[np.ndarray, np.ndarray]:
    """(quality, admissible) matrices, preds × gts; higher quality is better."""
    if criterion.mode == "iou":
        q = _iou_matrix(preds, gts)
        return q, q >= criterion.threshold
    pc = (preds[:, None, :2] + preds[:, None, 2:]) / 2
    gc = (gts[None, :, :2] + gts[None, :, 2:]) / 2
    d = np.sqrt(((pc - gc) ** 2).sum(-1))
    return -d, d <= criterion.threshold


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]]


def match_detections(pred_boxes, pred_scores, gt_boxes, criterion: MatchCriterion = MatchCriterion()) -> MatchResult:
    """Greedy matching in descending score; each gt is used at most once."""
    pb = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gb = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(pb):
        raise InvalidInputError("pred boxes and scores differ in length")
    if len(pb) == 0 or len(gb) == 0:
        return MatchResult(0, len(pb), len(gb), [])
    quality, ok = affinity(pb, gb, criterion)
    used = np.zeros(len(gb), dtype=bool)
    pairs = []
    for i in np.argsort(-scores, kind="stable"):
        cand = np.where(ok[i] & ~used)[0]
        if len(cand) == 0:
            continue
        j = int(cand[np.argmax(quality[i, cand])])
        used[j] = True
        pairs.append((int(i), j))
    tp = len(pairs)
    return MatchResult(tp, len(pb) - tp, len(gb) - tp, pairs)


def recall(tp: int, fn: int) -> float:
    if tp < 0 or fn < 0:
        raise InvalidInputError("counts must be non-negative")
    return tp / (tp + fn) if tp + fn else 0.0


def precision(tp: int, fp: int) -> float:
    if tp < 0 or fp < 0:
        raise InvalidInputError("counts must be non-negative")
    return tp / (tp + fp) if tp + fp else 0.0


def f_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_score: float
    criterion: str = ""
    config_hash: str = ""
    per_image: dict[str, dict[str, int]] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, tp, fp, fn, **kw) -> "MetricsReport":
        p, r = precision(tp, fp), recall(tp, fn)
        return cls(tp, fp, fn, p, r, f_score(p, r), **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate_dataset(detections: dict, annotations: dict, criterion: MatchCriterion = MatchCriterion(),
                     config: dict | None = None) -> MetricsReport:
    """Pool per-image matches into one report.

    ``detections`` maps image id to ``(boxes, scores)`` or a list of objects
    with ``box``/``score`` attributes; ``annotations`` maps id to gt boxes.
    """
    missing_pred = sorted(set(annotations) - set(detections))
    missing_gt = sorted(set(detections) - set(annotations))
    if missing_pred or missing_gt:
        raise InvalidInputError(f"image ids misaligned: no detections for {missing_pred}, "
                                f"no annotations for {missing_gt}")
    tp = fp = fn = 0
    per_image = {}
    for image_id in sorted(annotations):
        boxes, scores = _unpack(detections[image_id])
        m = match_detections(boxes, scores, annotations[image_id], criterion)
        per_image[image_id] = {"tp": m.tp, "fp": m.fp, "fn": m.fn}
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return MetricsReport.from_counts(tp, fp, fn, criterion=criterion.describe(),
                                     config_hash=config_hash(config or {}), per_image=per_image)


def _unpack(dets):
    if isinstance(dets, tuple) and len(dets) == 2:
        return dets
    boxes = [d.box for d in dets]
    scores = [d.score for d in dets]
    return boxes, scores
