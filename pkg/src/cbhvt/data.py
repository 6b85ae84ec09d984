"""Synthetic lymphocyte-style images and the on-disk dataset format.

Layout on disk::

    root/images/<id>.png
    root/annotations.json   # {"format_version", "format", "images": [...]}

Each image record carries ``id``, ``file``, ``width``, ``height``, ``group``,
``boxes`` as ``[x1, y1, x2, y2]`` pixel-edge coordinates, ``labels`` and
``masks``.  Masks are run-length encoded row-major as ``[value, start,
length]`` triples.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .backend import ConfigurationError, InvalidInputError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CANONICAL_SIZE = 256
DECLARED_SIZES = {"lysto": 267, "nuclick": 256, "synthetic": None, "lyon_roi": None}
SOURCES = tuple(DECLARED_SIZES)


class DataError(InvalidInputError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class ImageSample:
    id: str
    image: np.ndarray                       # H×W×3 uint8
    boxes: np.ndarray                       # N×4 float
    masks: np.ndarray                       # N×H×W uint8
    labels: np.ndarray                      # N int
    source: str = "synthetic"
    group: str = ""
    labeled: bool = True

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        h, w = self.image.shape[:2]
        self.masks = np.asarray(self.masks, dtype=np.uint8).reshape(-1, h, w)
        if not self.group:
            self.group = self.id

    def __len__(self):
        return len(self.boxes)

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def validate(self, tolerance: float = 0.0) -> None:
        if not (len(self.boxes) == len(self.masks) == len(self.labels)):
            raise DataError(f"{self.id}: boxes/masks/labels lengths differ")
        if self.image.dtype != np.uint8 or self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.id}: image must be H×W×3 uint8")
        for k, (box, mask) in enumerate(zip(self.boxes, self.masks)):
            if not np.isfinite(box).all() or box[2] <= box[0] or box[3] <= box[1]:
                raise DataError(f"{self.id}: box {k} is degenerate: {box}")
            tight = mask_to_box(mask)
            if tight is None:
                raise DataError(f"{self.id}: mask {k} is empty")
            if np.abs(np.asarray(tight) - box).max() > tolerance + 1e-9:
                raise DataError(f"{self.id}: box {k} {box} does not bound its mask {tight}")


def mask_to_box(mask: np.ndarray):
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return None
    r0, r1 = np.where(rows)[0][[0, -1]]
    c0, c1 = np.where(cols)[0][[0, -1]]
    return (float(c0), float(r0), float(c1 + 1), float(r1 + 1))


# ---------------------------------------------------------------------------
# RLE
# ---------------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[list[int]]:
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return [[int(flat[s]), int(s), int(n)] for s, n in zip(starts, lengths)]


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=np.uint8)
    for value, start, length in runs:
        flat[start:start + length] = value
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_images: int = 16
    image_size: int = 256
    blobs_per_image: tuple[int, int] = (4, 10)
    radius_px: tuple[float, float] = (7.0, 11.0)
    cluster_probability: float = 0.25
    artifact_probability: float = 0.5
    max_artifacts: int = 4
    foreground: tuple[tuple[int, int, int], tuple[int, int, int]] = ((95, 50, 25), (145, 90, 55))
    background: tuple[tuple[int, int, int], tuple[int, int, int]] = ((215, 170, 185), (240, 205, 215))
    artifact_color: tuple[tuple[int, int, int], tuple[int, int, int]] = ((80, 80, 140), (130, 120, 190))
    noise_std: float = 6.0
    seed: int = 0
    group_size: int = 1
    id_prefix: str = "syn"

    def __post_init__(self):
        for name in ("blobs_per_image", "radius_px"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigurationError(f"{name}: need 0 <= min <= max, got {(lo, hi)}")
        for name in ("cluster_probability", "artifact_probability"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigurationError(f"{name} must be a probability, got {v}")
        if self.n_images < 0 or self.image_size < 8 or self.group_size < 1:
            raise ConfigurationError("invalid n_images/image_size/group_size")
        if self.radius_px[0] <= 0:
            raise ConfigurationError("radius must be positive")


def ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    """Pixels whose centers ``(j + 0.5, i + 0.5)`` lie inside the ellipse."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return (u * u + v * v <= 1.0)


def _uniform_color(rng, lo_hi):
    lo, hi = np.asarray(lo_hi[0], float), np.asarray(lo_hi[1], float)
    return lo + rng.random(3) * (hi - lo)


def _background(rng, cfg: SynthConfig) -> np.ndarray:
    n = cfg.image_size
    base = _uniform_color(rng, cfg.background)
    img = np.broadcast_to(base, (n, n, 3)).astype(np.float64).copy()
    if cfg.noise_std > 0:
        low = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=n / 10, mode="wrap")
        low /= max(np.abs(low).max(), 1e-9)
        img += low[..., None] * np.array([10.0, 14.0, 10.0])
    return img


def _place(rng, cfg, placed, r, clustered):
    n = cfg.image_size
    for _ in range(200):
        if clustered and placed:
            px, py, pr = placed[rng.integers(len(placed))]
            ang = rng.uniform(0, 2 * math.pi)
            dist = rng.uniform(0.75, 1.0) * (pr + r)
            cx, cy = px + dist * math.cos(ang), py + dist * math.sin(ang)
            if not (r + 1 <= cx <= n - r - 1 and r + 1 <= cy <= n - r - 1):
                continue
            if all(math.hypot(cx - x, cy - y) >= 0.75 * (r + rr) for x, y, rr in placed):
                return cx, cy
        else:
            cx, cy = rng.uniform(r + 1, n - r - 1, size=2)
            if all(math.hypot(cx - x, cy - y) >= r + rr + 2 for x, y, rr in placed):
                return cx, cy
    return None


def _render_one(rng, cfg: SynthConfig, idx: int) -> ImageSample:
    n = cfg.image_size
    img = _background(rng, cfg)

    n_art = int(rng.binomial(cfg.max_artifacts, cfg.artifact_probability)) if cfg.max_artifacts else 0
    for _ in range(n_art):
        color = _uniform_color(rng, cfg.artifact_color)
        if rng.random() < 0.5:
            # elongated counterstained nucleus
            a = rng.uniform(cfg.radius_px[1] * 0.9, cfg.radius_px[1] * 1.6)
            b = a * rng.uniform(0.35, 0.7)
        else:
            # thin streak
            a = rng.uniform(15, 40)
            b = rng.uniform(1.0, 2.5)
        cx, cy = rng.uniform(0, n, size=2)
        m = ellipse_mask(n, cx, cy, a, b, rng.uniform(0, math.pi))
        img[m] = color

    target = int(rng.integers(cfg.blobs_per_image[0], cfg.blobs_per_image[1] + 1))
    placed, full_masks = [], []
    for _ in range(target):
        r = rng.uniform(*cfg.radius_px)
        clustered = rng.random() < cfg.cluster_probability
        pos = _place(rng, cfg, placed, r, clustered)
        if pos is None:
            raise GenerationError(f"could not place {target} blobs of radius <= {cfg.radius_px[1]} "
                                  f"in a {n}px image")
        cx, cy = pos
        # r is the equivalent radius: area stays pi r^2 for any aspect
        k = rng.uniform(0.8, 1.0)
        a, b = r / math.sqrt(k), r * math.sqrt(k)
        m = ellipse_mask(n, cx, cy, a, b, rng.uniform(0, math.pi))
        placed.append((cx, cy, r))
        full_masks.append(m)

    # later blobs occlude earlier ones
    visible = [m.copy() for m in full_masks]
    for k in range(len(visible)):
        for later in full_masks[k + 1:]:
            visible[k] &= ~later
    for (cx, cy, r), m in zip(placed, full_masks):
        color = _uniform_color(rng, cfg.foreground)
        ys, xs = np.nonzero(m)
        d = np.hypot(xs + 0.5 - cx, ys + 0.5 - cy) / r
        shade = 1.0 - 0.25 * (1 - np.clip(d, 0, 1))   # darker core
        img[ys, xs] = color[None] * shade[:, None]

    if cfg.noise_std > 0:
        img += rng.normal(0, cfg.noise_std, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    keep = [k for k, v in enumerate(visible) if v.any()]
    masks = np.stack([visible[k] for k in keep]).astype(np.uint8) if keep else np.zeros((0, n, n), np.uint8)
    boxes = np.array([mask_to_box(m) for m in masks], dtype=np.float64).reshape(-1, 4)
    sid = f"{cfg.id_prefix}_{cfg.seed}_{idx:05d}"
    group = f"{cfg.id_prefix}_{cfg.seed}_g{idx // cfg.group_size:05d}"
    return ImageSample(sid, image, boxes, masks, np.ones(len(masks), np.int64), "synthetic", group)


def synth_generate(config: SynthConfig) -> list[ImageSample]:
    rng = np.random.default_rng(config.seed)
    samples = [_render_one(rng, config, i) for i in range(config.n_images)]
    for s in samples:
        s.validate()
    return samples


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def save_dataset(samples: list[ImageSample], root, format: str = "synthetic") -> Path:
    if format not in SOURCES:
        raise ConfigurationError(f"unknown format {format!r}; valid: {SOURCES}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        fname = f"{s.id}.png"
        Image.fromarray(s.image).save(root / "images" / fname)
        rec = {"id": s.id, "file": fname, "height": int(s.hw[0]), "width": int(s.hw[1]), "group": s.group}
        if s.labeled:
            rec["boxes"] = [[float(v) for v in b] for b in s.boxes]
            rec["labels"] = [int(v) for v in s.labels]
            rec["masks"] = [rle_encode(m) for m in s.masks]
        records.append(rec)
    doc = {"format_version": FORMAT_VERSION, "format": format, "images": records}
    (root / "annotations.json").write_text(json.dumps(doc, indent=1))
    return root


def _field(rec, name, fname, kind=None):
    if name not in rec:
        raise DataError(f"{fname}: record {rec.get('id', '?')!r} missing field {name!r}")
    v = rec[name]
    if kind is not None and not isinstance(v, kind):
        raise DataError(f"{fname}: record {rec.get('id', '?')!r} field {name!r} has wrong type")
    return v


def resize_sample(s: ImageSample, size: int) -> ImageSample:
    h, w = s.hw
    if (h, w) == (size, size):
        return s
    sx, sy = size / w, size / h
    image = np.asarray(Image.fromarray(s.image).resize((size, size), Image.BILINEAR))
    masks, boxes, labels = [], [], []
    for m, b, lab in zip(s.masks, s.boxes, s.labels):
        rm = np.asarray(Image.fromarray(m * 255).resize((size, size), Image.NEAREST)) > 127
        if not rm.any():
            log.warning("%s: instance vanished after resize, dropped", s.id)
            continue
        masks.append(rm.astype(np.uint8))
        boxes.append([b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy])
        labels.append(lab)
    masks = np.stack(masks) if masks else np.zeros((0, size, size), np.uint8)
    return ImageSample(s.id, image, np.array(boxes).reshape(-1, 4), masks, np.array(labels, np.int64),
                       s.source, s.group, s.labeled)


def load_dataset(root, format: str = "synthetic", resize: int | None = CANONICAL_SIZE) -> list[ImageSample]:
    """Parse ``root/annotations.json`` and images; resize to the canonical size.

    ``lyon_roi`` loads images without labels and keeps their native size.
    """
    if format not in SOURCES:
        raise ConfigurationError(f"unknown format {format!r}; valid: {SOURCES}")
    root = Path(root)
    ann = root / "annotations.json"
    if not ann.exists():
        raise DataError(f"{ann} not found")
    try:
        doc = json.loads(ann.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{ann}: invalid JSON ({exc})") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{ann}: unsupported format_version {doc.get('format_version')!r}")
    images = _field(doc, "images", ann.name, list)
    labeled = format != "lyon_roi"
    declared = DECLARED_SIZES[format]
    out = []
    for rec in images:
        sid = str(_field(rec, "id", ann.name))
        path = root / "images" / _field(rec, "file", ann.name, str)
        if not path.exists():
            raise DataError(f"{ann.name}: record {sid!r} image file {path.name!r} missing")
        image = np.asarray(Image.open(path).convert("RGB"))
        h, w = image.shape[:2]
        if labeled:
            boxes = np.asarray(_field(rec, "boxes", ann.name, list), dtype=np.float64).reshape(-1, 4)
            labels = np.asarray(rec.get("labels", [1] * len(boxes)), dtype=np.int64)
            rles = _field(rec, "masks", ann.name, list)
            if not (len(boxes) == len(labels) == len(rles)):
                raise DataError(f"{ann.name}: record {sid!r} boxes/labels/masks lengths differ")
            try:
                masks = np.stack([rle_decode(r, (h, w)) for r in rles]) if rles else np.zeros((0, h, w), np.uint8)
            except (ValueError, TypeError) as exc:
                raise DataError(f"{ann.name}: record {sid!r} field 'masks' malformed ({exc})") from exc
        else:
            boxes, labels, masks = np.zeros((0, 4)), np.zeros(0, np.int64), np.zeros((0, h, w), np.uint8)
        s = ImageSample(sid, image, boxes, masks, labels, format, str(rec.get("group", sid)), labeled)
        if declared is not None and (h, w) != (declared, declared):
            log.warning("%s: image is %dx%d, %s format declares %dx%d; resizing", sid, w, h, format,
                        declared, declared)
        if resize is not None and labeled:
            s = resize_sample(s, resize)
        if labeled:
            s.validate(tolerance=0.0 if (h, w) == s.hw else 1.0)
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def allocate(n_groups: int, fractions) -> list[int]:
    """Largest-remainder allocation of groups to splits; ties go to the earlier split."""
    quotas = [f * n_groups for f in fractions]
    counts = [int(math.floor(q + 1e-9)) for q in quotas]
    rest = n_groups - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def split_dataset(samples: list[ImageSample], fractions=(0.6, 0.2, 0.2), seed: int = 0):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigurationError(f"fractions must be 3 non-negative values summing to 1, got {fractions}")
    groups = sorted({s.group for s in samples})
    needed = sum(1 for f in fractions if f > 0)
    if len(groups) < needed:
        raise DataError(f"{len(groups)} groups cannot fill {needed} splits")
    perm = np.random.default_rng(seed).permutation(len(groups))
    counts = allocate(len(groups), fractions)
    bounds = np.cumsum([0] + counts)
    assign = {}
    for k in range(3):
        for gi in perm[bounds[k]:bounds[k + 1]]:
            assign[groups[gi]] = k
    parts = ([], [], [])
    for s in samples:
        parts[assign[s.group]].append(s)
    return parts
