"""Training loop, evaluation, ablation sweeps and the gradient-check suite."""

from __future__ import annotations

import json
import logging
import math
import random
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .backend import ConfigurationError, GradCheckReport, NumericError, gradcheck_module
from .checkpoint import load_state, save_state
from .data import ImageSample
from .generators import COMBO_MEMBERS
from .heads import Detection
from .merging import merger_presets
from .metrics import MatchCriterion, MetricsReport, config_hash, evaluate_dataset
from .model import CBHVTNet, ModelConfig, to_tensor

log = logging.getLogger(__name__)

# scale settings layered on top of ModelConfig; "paper" records the published
# backbone depths and is not expected to run on a laptop
PROFILES = {
    "desk": {"c_fpn": 16, "head_width": 128},
    "paper": {"c_fpn": 256, "head_width": 1024},
}


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.0025
    weight_decay: float = 0.0001
    momentum: float = 0.9
    optimizer: str = "sgd"
    batch_size: int = 4
    seed: int = 0
    generator_combo: str = "Channel Generator-1"
    merger_preset: str = "Channel Merger-1"
    c_fpn: int = 16
    profile: str = "desk"
    deterministic: bool = True
    max_iterations: int | None = None
    grad_clip: float = 10.0
    hflip: bool = False
    output_dir: str | None = None
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.optimizer != "sgd":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if self.profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {self.profile!r}; valid: {sorted(PROFILES)}")
        if self.generator_combo not in COMBO_MEMBERS:
            raise ConfigurationError(f"unknown combo {self.generator_combo!r}; valid: {sorted(COMBO_MEMBERS)}")
        if self.merger_preset not in merger_presets():
            raise ConfigurationError(f"unknown merger {self.merger_preset!r}; valid: {sorted(merger_presets())}")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigurationError("batch_size, epochs and learning_rate must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def model_config(self) -> ModelConfig:
        kw = dict(PROFILES[self.profile])
        kw["c_fpn"] = self.c_fpn
        kw.update(self.model)
        return ModelConfig(combo=self.generator_combo, merger=self.merger_preset, profile=self.profile, **kw)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return config_hash(d)


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    losses: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    metrics: dict[str, MetricsReport] = field(default_factory=dict)
    model: CBHVTNet | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"config": self.config, "config_hash": self.config_hash, "losses": self.losses,
                "checkpoints": self.checkpoints, "metrics": {k: v.to_dict() for k, v in self.metrics.items()}}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def build_pipeline(combo_name: str, merger_name: str, c_fpn: int = 16, profile: str = "desk", **kw) -> CBHVTNet:
    if combo_name not in COMBO_MEMBERS:
        raise ConfigurationError(f"unknown combo {combo_name!r}; valid: {sorted(COMBO_MEMBERS)}")
    if merger_name not in merger_presets():
        raise ConfigurationError(f"unknown merger {merger_name!r}; valid: {sorted(merger_presets())}")
    cfg = dict(PROFILES[profile])
    cfg["c_fpn"] = c_fpn
    cfg.update(kw)
    return CBHVTNet(ModelConfig(combo=combo_name, merger=merger_name, profile=profile, **cfg))


def _targets(batch: list[ImageSample], flips: list[bool]):
    images, targets = [], []
    for s, flip in zip(batch, flips):
        img, boxes, masks = s.image, s.boxes.copy(), s.masks
        if flip:
            w = img.shape[1]
            img = img[:, ::-1]
            masks = masks[:, :, ::-1]
            boxes[:, [0, 2]] = w - boxes[:, [2, 0]]
        images.append(np.ascontiguousarray(img))
        targets.append({"boxes": boxes, "labels": s.labels, "masks": np.ascontiguousarray(masks)})
    return to_tensor(np.stack(images)), targets


def save_model(model: CBHVTNet, path, extra: dict | None = None) -> Path:
    manifest = {"artifact": "cbhvtnet", "kind": "cbhvtnet", "config": model.config.to_dict()}
    manifest.update(extra or {})
    return save_state(path, model.state_dict(), manifest)


def load_model(path) -> CBHVTNet:
    state, manifest = load_state(path)
    if manifest.get("artifact") != "cbhvtnet":
        raise ConfigurationError(f"{path} is not a detector checkpoint")
    cfg = manifest["config"]
    for key in ("anchor_scales", "anchor_ratios"):
        cfg[key] = tuple(cfg[key])
    cfg["pretrained"] = {}
    model = CBHVTNet(ModelConfig(**cfg))
    model.load_state_dict(state)
    model.eval()
    return model


def train(config: TrainConfig, dataset: list[ImageSample], eval_sets: dict[str, list[ImageSample]] | None = None,
          criterion: MatchCriterion = MatchCriterion(), log_every: int = 10,
          on_step: Callable[[int, CBHVTNet], None] | None = None) -> RunRecord:
    """SGD with momentum and weight decay on the summed three-part loss.

    ``on_step(iteration, model)`` runs after every update; it may evaluate the
    model as long as it leaves it in training mode.
    """
    if not dataset:
        raise ConfigurationError("dataset is empty")
    if config.batch_size > len(dataset):
        raise ConfigurationError(f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")
    seed_everything(config.seed, config.deterministic)
    model = CBHVTNet(config.model_config())
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    record = RunRecord(config.to_dict(), config.hash())
    out_dir = Path(config.output_dir) if config.output_dir else None
    gen = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)
    last_good = None
    it = 0
    max_it = config.max_iterations
    model.train()
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(dataset))
        for start in range(0, len(perm), config.batch_size):
            if max_it is not None and it >= max_it:
                break
            batch = [dataset[i] for i in perm[start:start + config.batch_size]]
            flips = [bool(order_rng.random() < 0.5) and config.hflip for _ in batch]
            images, targets = _targets(batch, flips)
            try:
                losses = model.loss(images, targets, gen)
            except NumericError as exc:
                _abort(model, last_good, out_dir, record, exc)
            opt.zero_grad()
            losses.total.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            it += 1
            row = {"iteration": it, "epoch": epoch, **losses.as_floats()}
            record.losses.append(row)
            if log_every and it % log_every == 0:
                log.info("it %d epoch %d loss %.4f (c %.4f l %.4f b %.4f)", it, epoch, row["total"], row["l_c"],
                         row["l_l"], row["l_b"])
            if on_step is not None:
                on_step(it, model)
                model.train()
        if out_dir is not None:
            path = save_model(model, out_dir / f"epoch_{epoch:03d}.ckpt", {"train_config": config.to_dict()})
            record.checkpoints.append(str(path))
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if max_it is not None and it >= max_it:
            break
    model.eval()
    record.model = model
    splits = {"train": dataset, **(eval_sets or {})}
    for name, samples in splits.items():
        record.metrics[name] = evaluate(model, samples, criterion, config=config.to_dict())
    if out_dir is not None:
        final = save_model(model, out_dir / "final.ckpt", {"train_config": config.to_dict()})
        record.checkpoints.append(str(final))
        record.save(out_dir / "run.json")
    return record


def _abort(model, last_good, out_dir, record, exc):
    if last_good is not None:
        model.load_state_dict(last_good)
        if out_dir is not None:
            path = save_model(model, out_dir / "last_good.ckpt")
            record.checkpoints.append(str(path))
    raise NumericError(f"training aborted: {exc}") from exc


def infer(model: CBHVTNet, samples: list[ImageSample], batch_size: int = 4,
          score_threshold: float | None = None) -> dict[str, list[Detection]]:
    model.eval()
    out = {}
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        # images of different sizes run one at a time
        if len({s.hw for s in batch}) > 1:
            for s in batch:
                out[s.id] = model.predict(to_tensor(s.image), score_threshold)[0]
            continue
        dets = model.predict(to_tensor(np.stack([s.image for s in batch])), score_threshold)
        for s, d in zip(batch, dets):
            out[s.id] = d
    return out


def evaluate(model, samples: list[ImageSample], criterion: MatchCriterion = MatchCriterion(),
             config: dict | None = None, score_threshold: float | None = None) -> MetricsReport:
    if isinstance(model, (str, Path)):
        model = load_model(model)
    if any(not s.labeled for s in samples):
        raise ConfigurationError("dataset is unlabeled; use inference-only mode (infer)")
    dets = infer(model, samples, score_threshold=score_threshold)
    annotations = {s.id: s.boxes for s in samples}
    return evaluate_dataset(dets, annotations, criterion, config or model.config.to_dict())


def write_detections(dets: dict[str, list[Detection]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format_version": 1, "images": {k: [d.to_dict() for d in v] for k, v in sorted(dets.items())}}
    path.write_text(json.dumps(doc))
    return path


def comparison_pairs() -> list[tuple[str, str]]:
    return [(f"Channel Generator-{k}", f"Channel Merger-{k}") for k in range(1, 7)]


def ablate(combo_list: list[str], merger_list: list[str], base_config: TrainConfig, dataset: list[ImageSample],
           eval_sets: dict[str, list[ImageSample]] | None = None,
           criterion: MatchCriterion = MatchCriterion(), names: list[str] | None = None) -> list[dict]:
    """Train and score each (combo, merger) pairing with a shared seed and data.

    Rows are labeled ``Comparison Model-k`` by position unless ``names`` is given.
    """
    if not combo_list or not merger_list:
        raise ConfigurationError("combo and merger lists must be non-empty")
    if len(combo_list) != len(merger_list):
        raise ConfigurationError("combo and merger lists must pair up")
    names = names or [f"Comparison Model-{k}" for k in range(1, len(combo_list) + 1)]
    if len(names) != len(combo_list):
        raise ConfigurationError("one name per pairing")
    rows = []
    for name, c, m in zip(names, combo_list, merger_list):
        row = {"name": name, "combo": c, "merger": m}
        try:
            cfg = TrainConfig.from_dict({**base_config.to_dict(), "generator_combo": c, "merger_preset": m,
                                         "output_dir": None})
            rec = train(cfg, dataset, eval_sets, criterion, log_every=0)
            for split, rep in rec.metrics.items():
                row[f"{split}_f_score"] = rep.f_score
                row[f"{split}_recall"] = rep.recall
            row["final_loss"] = rec.losses[-1]["total"] if rec.losses else math.nan
            row["status"] = "ok"
        except Exception as exc:  # one failed row must not abort the sweep
            log.exception("ablation row %s failed", row["name"])
            row["status"] = f"error: {exc}"
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    cols = [c for c in rows[0] if c.endswith("_f_score") or c.endswith("_recall")] if rows else []
    lines = ["| Backbone | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for r in rows:
        label = f"{r['name']} ({r['combo']} + {r['merger']})"
        vals = [f"{100 * r[c]:.2f}" if isinstance(r.get(c), float) else str(r.get(c, r.get("status"))) for c in cols]
        lines.append(f"| {label} | " + " | ".join(vals) + " |")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------

GRADCHECK_EPSILON = 1e-5
# float64 central differences carry ~1e-9 absolute roundoff; gradient entries
# smaller than this floor are compared on absolute rather than relative error
GRADCHECK_FLOOR = 1e-5


def gradcheck_suite(seeds=(0, 1, 2, 3, 4), tolerance: float = 1e-4) -> list[GradCheckReport]:
    """Finite-difference checks of every trainable block at toy widths, in float64."""
    check = lambda *a, **k: gradcheck_module(*a, epsilon=GRADCHECK_EPSILON, floor=GRADCHECK_FLOOR, **k)
    from .exploitation import ChannelExploiter, align_and_concat
    from .generators import AttentionRefine, FeatureMap, FeaturePyramid, ResidualBlock, TransformerBlock
    from .heads import DetectionHead, SegmentationHead, loss_bce, loss_cross_entropy, loss_l1
    from .merging import FPN, FusionBlock, FusionSpec
    from .region import RPNHead, roi_align

    reports = []
    for seed in seeds:
        torch.manual_seed(seed)
        g = torch.Generator().manual_seed(seed)
        rnd = lambda *s: torch.rand(*s, generator=g, dtype=torch.float64) * 2 - 1
        checks = [
            ("residual_block", ResidualBlock(3, 4, stride=2), [rnd(2, 3, 6, 6)], None),
            ("attention_refine", AttentionRefine(4, 2), [rnd(2, 4, 5, 5)], None),
            ("transformer_stage", TransformerBlock(4, 1, 2), [rnd(2, 16, 4)], lambda m, x: m(x, (4, 4))),
            ("fusion_block", FusionBlock(6, FusionSpec((5, 3, 1)), 2), [rnd(2, 6, 5, 5)], None),
            ("fpn", FPN([3, 4], 3), [rnd(1, 3, 4, 4), rnd(1, 4, 2, 2)], lambda m, a, b: m([a, b])),
            ("rpn_head", RPNHead(3, 2), [rnd(1, 3, 4, 4), rnd(1, 3, 2, 2)], lambda m, a, b: m([a, b])),
            ("detection_head", DetectionHead(2, 1, 7, 8), [rnd(3, 2, 7, 7)], lambda m, x: m(x)[::2]),
            ("segmentation_head", SegmentationHead(2, 1), [rnd(2, 2, 6, 6)], None),
            ("exploitation", ChannelExploiter([6, 6], 2), [rnd(1, 2, 4, 4), rnd(1, 2, 2, 2), rnd(1, 4, 4, 4),
                                                           rnd(1, 4, 2, 2)], _exploit_fn),
        ]
        for name, module, inputs, fwd in checks:
            # zero-initialised biases put ReLU inputs exactly on the kink
            with torch.no_grad():
                for p in module.parameters():
                    p.copy_(torch.rand(p.shape, generator=g, dtype=torch.float64) - 0.5)
            module.train()
            reports += check(f"{name}[seed {seed}]", module, inputs, fwd, tolerance=tolerance,
                                        seed=seed)
        # ROI Align w.r.t. the feature map
        boxes = torch.tensor([[1.3, 2.2, 9.7, 11.1], [0.0, 0.0, 15.0, 6.0]], dtype=torch.float64)
        reports += check(f"roi_align[seed {seed}]", _Fn(lambda f: roi_align(f, boxes, 2.0, (3, 3), 2)),
                                    [rnd(2, 8, 8)], tolerance=tolerance, seed=seed)
        # losses w.r.t. their prediction inputs
        logits = rnd(5, 3)
        y = torch.tensor([0, 2, 1, 1, 0])
        reports += check(f"loss_cross_entropy[seed {seed}]",
                                    _Fn(lambda z: loss_cross_entropy(torch.softmax(z, -1), y)), [logits],
                                    tolerance=tolerance, seed=seed)
        t_star = rnd(4, 4)
        reports += check(f"loss_l1[seed {seed}]", _Fn(lambda t: loss_l1(t, t_star)), [rnd(4, 4)],
                                    tolerance=tolerance, seed=seed)
        yb = (rnd(6) > 0).double()
        reports += check(f"loss_bce[seed {seed}]", _Fn(lambda z: loss_bce(torch.sigmoid(z), yb)),
                                    [rnd(6)], tolerance=tolerance, seed=seed)
    return reports


def _exploit_fn(m, a0, a1, b0, b1):
    from .exploitation import align_and_concat
    from .generators import FeatureMap, FeaturePyramid
    pa = FeaturePyramid({0: FeatureMap(a0, 4), 1: FeatureMap(a1, 8)})
    pb = FeaturePyramid({0: FeatureMap(b0, 4), 1: FeatureMap(b1, 8)})
    out = m(align_and_concat([pa, pb]))
    return [out.levels[0].tensor, out.levels[1].tensor]


class _Fn(torch.nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, *xs):
        return self.fn(*xs)
