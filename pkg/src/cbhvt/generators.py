"""Channel generators: heterogeneous backbones that each emit a 4-level pyramid.

Four families are available: a residual network, a residual network with
channel/spatial attention after each stage, a pyramid vision transformer with
spatial-reduction attention, and a convolutional autoencoder whose encoder
stages form the pyramid.  All tensors carry a leading batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backend import ConfigurationError, InvalidInputError
from .checkpoint import load_state, save_state

STRIDES = (4, 8, 16, 32)
KINDS = ("residual", "residual_attention", "pyramid_transformer", "conv_autoencoder")


class ShapeError(InvalidInputError):
    pass


# ---------------------------------------------------------------------------
# pyramid containers
# ---------------------------------------------------------------------------

@dataclass
class FeatureMap:
    tensor: torch.Tensor
    stride: int

    @property
    def channels(self) -> int:
        return self.tensor.shape[-3]

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.tensor.shape[-2:])


@dataclass
class FeaturePyramid:
    levels: dict[int, FeatureMap]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> FeatureMap:
        return self.levels[i]

    @property
    def channels(self) -> list[int]:
        return [self.levels[i].channels for i in sorted(self.levels)]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [self.levels[i].hw for i in sorted(self.levels)]

    def validate(self, input_hw: tuple[int, int] | None = None) -> None:
        strides = [self.levels[i].stride for i in sorted(self.levels)]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ShapeError(f"strides not increasing: {strides}")
        for i in sorted(self.levels):
            fm = self.levels[i]
            if fm.stride != 4 * 2 ** i:
                raise ShapeError(f"level {i} has stride {fm.stride}, expected {4 * 2 ** i}")
            if input_hw is not None:
                want = tuple(math.ceil(s / fm.stride) for s in input_hw)
                if fm.hw != want:
                    raise ShapeError(f"level {i} size {fm.hw}, expected {want}")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x[None], True
    return x, False


class ResidualBlock(nn.Module):
    """``relu(shortcut(x) + F(x))`` with ``F = conv-BN-ReLU-conv-BN``.

    A 1×1 conv + BN projection is inserted on the shortcut whenever the
    channel count or stride changes.  With ``use_bn=False`` the convolutions
    carry biases and the BN layers become identities.
    """

    def __init__(self, cin: int, cout: int, stride: int = 1, use_bn: bool = True,
                 projection: bool | None = None):
        super().__init__()
        needs_proj = cin != cout or stride != 1
        if projection is None:
            projection = needs_proj
        if needs_proj and not projection:
            raise ShapeError(f"shortcut {cin}->{cout} stride {stride} requires a projection")
        bias = not use_bn
        norm = (lambda c: nn.BatchNorm2d(c)) if use_bn else (lambda c: nn.Identity())
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=bias)
        self.bn1 = norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=bias)
        self.bn2 = norm(cout)
        if projection:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=bias), norm(cout))
        else:
            self.shortcut = nn.Identity()

    def residual(self, x):
        return self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))

    def forward(self, x):
        x, squeeze = _batched(x)
        out = F.relu(self.shortcut(x) + self.residual(x))
        return out[0] if squeeze else out


class AttentionRefine(nn.Module):
    """Sequential channel then spatial gating.

    ``F' = M_c(F) * F`` and ``F'' = M_s(F') * F'`` where ``M_c`` is a
    sigmoid over a shared two-layer MLP applied to the average- and
    max-pooled descriptors, and ``M_s`` a sigmoid over a 7×7 conv of the
    channel-wise mean and max maps.
    """

    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        if reduction < 1 or reduction > channels:
            raise ConfigurationError(f"reduction ratio {reduction} invalid for {channels} channels")
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)
        self.last_gates: tuple[torch.Tensor, torch.Tensor] | None = None

    def channel_gate(self, x):
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))[:, :, None, None]

    def spatial_gate(self, x):
        desc = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial(desc))

    def forward(self, x):
        x, squeeze = _batched(x)
        mc = self.channel_gate(x)
        refined = mc * x
        ms = self.spatial_gate(refined)
        out = ms * refined
        self.last_gates = (mc.detach(), ms.detach())
        return out[0] if squeeze else out


class SpatialReductionAttention(nn.Module):
    """Multi-head attention whose keys/values come from a strided token grid."""

    def __init__(self, dim: int, num_heads: int = 1, reduction: int = 1):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.reduction = reduction
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        if reduction > 1:
            self.sr = nn.Conv2d(dim, dim, reduction, reduction)
            self.sr_norm = nn.LayerNorm(dim)
        self.last_weights: torch.Tensor | None = None

    def attend(self, x, hw):
        """Return (context before output projection, attention weights)."""
        b, n, d = x.shape
        h, w = hw
        if h * w != n:
            raise ShapeError(f"{n} tokens do not form a {h}x{w} grid")
        r = self.reduction
        if h % r or w % r:
            raise ConfigurationError(f"reduction {r} does not divide grid {h}x{w}")
        nh, hd = self.num_heads, d // self.num_heads
        q = self.q(x).reshape(b, n, nh, hd).transpose(1, 2)
        src = x
        if r > 1:
            grid = x.transpose(1, 2).reshape(b, d, h, w).contiguous()
            src = self.sr_norm(self.sr(grid).flatten(2).transpose(1, 2))
        k, v = self.kv(src).reshape(b, -1, 2, nh, hd).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return ctx, attn

    def forward(self, x, hw):
        ctx, attn = self.attend(x, hw)
        self.last_weights = attn.detach()
        return self.proj(ctx)


class TransformerBlock(nn.Module):
    """Pre-norm transformer layer built on :class:`SpatialReductionAttention`."""

    def __init__(self, dim: int, num_heads: int = 1, reduction: int = 1, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, num_heads, reduction)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, hw):
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        x = x + self.attn(self.norm1(x), hw)
        x = x + self.mlp(self.norm2(x))
        return x[0] if squeeze else x


def spatial_reduction_attention(x: torch.Tensor, hw: tuple[int, int], block: TransformerBlock):
    """Apply one transformer stage layer to an N×d (or B×N×d) token grid."""
    return block(x, hw)


def _pad_to_multiple(x, m):
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


class PatchEmbed(nn.Module):
    def __init__(self, cin, cout, patch):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(cin, cout, patch, patch)
        self.norm = nn.LayerNorm(cout)

    def forward(self, x):
        x = self.proj(_pad_to_multiple(x, self.patch))
        hw = tuple(x.shape[-2:])
        return self.norm(x.flatten(2).transpose(1, 2)), hw


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    kind: str
    depth_per_stage: Sequence[int] = (1, 1, 1, 1)
    channels_per_stage: Sequence[int] = (8, 16, 32, 64)
    pretrained_weights_path: str | None = None
    attention_reduction_ratio: int = 4
    frozen: bool | None = None
    name: str = ""
    num_heads: Sequence[int] = (1, 1, 1, 1)
    sr_ratios: Sequence[int] = (8, 4, 2, 1)
    mlp_ratio: float = 2.0
    patch_size: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown generator kind {self.kind!r}; valid: {KINDS}")
        self.depth_per_stage = tuple(int(d) for d in self.depth_per_stage)
        self.channels_per_stage = tuple(int(c) for c in self.channels_per_stage)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.sr_ratios = tuple(int(r) for r in self.sr_ratios)
        if len(self.depth_per_stage) != 4 or len(self.channels_per_stage) != 4:
            raise ConfigurationError("generators have exactly 4 stages")
        if min(self.depth_per_stage) < 1 or min(self.channels_per_stage) < 1:
            raise ConfigurationError("depths and channels must be positive")
        c = self.channels_per_stage
        if any(b < a for a, b in zip(c, c[1:])):
            raise ConfigurationError(f"channels must be non-decreasing, got {c}")
        if self.attention_reduction_ratio < 1:
            raise ConfigurationError("attention_reduction_ratio must be positive")
        if not self.name:
            self.name = self.kind

    @property
    def is_frozen(self) -> bool:
        if self.frozen is None:
            return self.pretrained_weights_path is not None
        return self.frozen

    def to_dict(self) -> dict:
        return asdict(self)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config

    @property
    def out_channels(self) -> tuple[int, ...]:
        return self.config.channels_per_stage

    def stages(self, x) -> list[torch.Tensor]:
        raise NotImplementedError

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        x, _ = _batched(image)
        # channels-last inputs crash the CPU conv backward
        feats = self.stages(x.contiguous())
        return FeaturePyramid({i: FeatureMap(f, STRIDES[i]) for i, f in enumerate(feats)})


class ResidualGenerator(Generator):
    def __init__(self, config: GeneratorConfig):
        super().__init__(config)
        c = config.channels_per_stage
        self.stem = nn.Sequential(nn.Conv2d(3, c[0], 3, 2, 1, bias=False), nn.BatchNorm2d(c[0]),
                                  nn.ReLU(), nn.MaxPool2d(3, 2, 1))
        layers = []
        cin = c[0]
        for i, (depth, cout) in enumerate(zip(config.depth_per_stage, c)):
            blocks = [ResidualBlock(cin if j == 0 else cout, cout, 2 if (i > 0 and j == 0) else 1)
                      for j in range(depth)]
            layers.append(nn.Sequential(*blocks))
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.attention = None
        if config.kind == "residual_attention":
            self.attention = nn.ModuleList(AttentionRefine(ch, config.attention_reduction_ratio)
                                           for ch in c)

    def stages(self, x):
        x = self.stem(x)
        out = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if self.attention is not None:
                x = self.attention[i](x)
            out.append(x)
        return out


class PyramidTransformerGenerator(Generator):
    def __init__(self, config: GeneratorConfig):
        super().__init__(config)
        c = config.channels_per_stage
        self.embeds = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.norms = nn.ModuleList()
        cin = 3
        for i in range(4):
            patch = config.patch_size if i == 0 else 2
            self.embeds.append(PatchEmbed(cin, c[i], patch))
            self.blocks.append(nn.ModuleList(
                TransformerBlock(c[i], config.num_heads[i], config.sr_ratios[i], config.mlp_ratio)
                for _ in range(config.depth_per_stage[i])))
            self.norms.append(nn.LayerNorm(c[i]))
            cin = c[i]

    def stages(self, x):
        out = []
        b = x.shape[0]
        for embed, blocks, norm in zip(self.embeds, self.blocks, self.norms):
            tokens, hw = embed(x)
            for blk in blocks:
                tokens = blk(tokens, hw)
            x = norm(tokens).transpose(1, 2).reshape(b, -1, *hw).contiguous()
            out.append(x)
        return out


def _conv_bn_relu(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


class ConvAutoencoderGenerator(Generator):
    """Encoder stages form the pyramid; the decoder only serves reconstruction."""

    def __init__(self, config: GeneratorConfig):
        super().__init__(config)
        c = config.channels_per_stage
        enc = []
        cin = 3
        for i, (depth, cout) in enumerate(zip(config.depth_per_stage, c)):
            # stage 0 reaches stride 4 with two stride-2 convs
            layers = [_conv_bn_relu(cin, cout, 2)]
            if i == 0:
                layers.append(_conv_bn_relu(cout, cout, 2))
            layers += [_conv_bn_relu(cout, cout, 1) for _ in range(depth - 1)]
            enc.append(nn.Sequential(*layers))
            cin = cout
        self.encoder = nn.ModuleList(enc)
        dec = []
        for i in range(3, 0, -1):
            dec.append(nn.Sequential(nn.ConvTranspose2d(c[i], c[i - 1], 2, 2), nn.BatchNorm2d(c[i - 1]),
                                     nn.ReLU()))
        dec.append(nn.ConvTranspose2d(c[0], 3, 4, 4))
        self.decoder = nn.ModuleList(dec)

    def stages(self, x):
        out = []
        for stage in self.encoder:
            x = stage(x)
            out.append(x)
        return out

    def reconstruct(self, image):
        x, squeeze = _batched(image)
        z = self.stages(x)[-1]
        for layer in self.decoder:
            z = layer(z)
        z = z[..., : x.shape[-2], : x.shape[-1]]
        return z[0] if squeeze else z


_BUILDERS = {
    "residual": ResidualGenerator,
    "residual_attention": ResidualGenerator,
    "pyramid_transformer": PyramidTransformerGenerator,
    "conv_autoencoder": ConvAutoencoderGenerator,
}


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=m.in_features ** -0.5)
            nn.init.zeros_(m.bias)
    # gate logits start near zero; max-pooled descriptors are large enough
    # that unit-scale weights saturate a float32 sigmoid at exactly 0 or 1
    for m in module.modules():
        if isinstance(m, AttentionRefine):
            nn.init.normal_(m.mlp[2].weight, std=0.01)
            nn.init.normal_(m.spatial.weight, std=0.01)


def build_generator(config: GeneratorConfig) -> Generator:
    if config.kind not in _BUILDERS:
        raise ConfigurationError(f"unknown generator kind {config.kind!r}")
    gen = _BUILDERS[config.kind](config)
    _init_weights(gen)
    if config.pretrained_weights_path:
        load_generator_weights(gen, config.pretrained_weights_path)
    if config.is_frozen:
        freeze(gen)
    return gen


def freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


def save_generator(gen: Generator, path) -> None:
    cfg = gen.config.to_dict()
    cfg["pretrained_weights_path"] = None
    save_state(path, gen.state_dict(), {"artifact": "generator", "kind": gen.config.kind, "config": cfg})


def load_generator_weights(gen: Generator, path) -> None:
    state, manifest = load_state(path)
    if manifest.get("kind") != gen.config.kind:
        raise ConfigurationError(f"checkpoint holds a {manifest.get('kind')!r} generator, "
                                 f"expected {gen.config.kind!r}")
    gen.load_state_dict(state)


# ---------------------------------------------------------------------------
# combos
# ---------------------------------------------------------------------------

@dataclass
class GeneratorCombo:
    name: str
    members: list[GeneratorConfig] = field(default_factory=list)

    def __post_init__(self):
        if not 2 <= len(self.members) <= 4:
            raise ConfigurationError("a combo holds 2-4 generators")
        names = [m.name for m in self.members]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate member names in {self.name}: {names}")


def member_config(member: str, profile: str = "desk", **overrides) -> GeneratorConfig:
    """Configuration for a named backbone family under a scale profile."""
    table = MEMBER_PROFILES[profile]
    if member not in table:
        raise ConfigurationError(f"unknown member {member!r}; valid: {sorted(table)}")
    kw = dict(table[member])
    kw.update(overrides)
    return GeneratorConfig(name=member, **kw)


MEMBER_PROFILES = {
    "desk": {
        "resnet50": dict(kind="residual", depth_per_stage=(1, 1, 1, 1), channels_per_stage=(8, 16, 32, 64)),
        "resnet_cbam": dict(kind="residual_attention", depth_per_stage=(1, 1, 1, 1),
                            channels_per_stage=(8, 16, 32, 64)),
        "pvt": dict(kind="pyramid_transformer", depth_per_stage=(1, 1, 1, 1), channels_per_stage=(8, 16, 32, 64)),
        "conv_autoencoder": dict(kind="conv_autoencoder", depth_per_stage=(1, 1, 1, 1),
                                 channels_per_stage=(8, 16, 32, 64)),
        "resnet101": dict(kind="residual", depth_per_stage=(1, 1, 2, 1), channels_per_stage=(8, 16, 32, 64)),
        "resnext": dict(kind="residual", depth_per_stage=(1, 1, 1, 1), channels_per_stage=(12, 24, 48, 96)),
    },
    "paper": {
        "resnet50": dict(kind="residual", depth_per_stage=(3, 4, 6, 3), channels_per_stage=(256, 512, 1024, 2048)),
        "resnet_cbam": dict(kind="residual_attention", depth_per_stage=(3, 4, 6, 3),
                            channels_per_stage=(256, 512, 1024, 2048), attention_reduction_ratio=16),
        "pvt": dict(kind="pyramid_transformer", depth_per_stage=(3, 4, 6, 3), channels_per_stage=(64, 128, 320, 512),
                    num_heads=(1, 2, 5, 8), mlp_ratio=8.0),
        "conv_autoencoder": dict(kind="conv_autoencoder", depth_per_stage=(2, 2, 2, 2),
                                 channels_per_stage=(64, 128, 256, 512)),
        "resnet101": dict(kind="residual", depth_per_stage=(3, 4, 23, 3), channels_per_stage=(256, 512, 1024, 2048)),
        "resnext": dict(kind="residual", depth_per_stage=(3, 4, 6, 3), channels_per_stage=(256, 512, 1024, 2048)),
    },
}

COMBO_MEMBERS = {
    "Channel Generator-1": ("resnet50", "pvt"),
    "Channel Generator-2": ("resnet50", "resnet_cbam", "pvt", "conv_autoencoder"),
    "Channel Generator-3": ("resnet50", "resnet_cbam", "conv_autoencoder"),
    "Channel Generator-4": ("resnet50", "resnet_cbam", "pvt", "resnet101"),
    "Channel Generator-5": ("resnet50", "resnet_cbam", "resnext", "resnet101"),
    "Channel Generator-6": ("resnet_cbam", "resnext"),
}


def combo(name: str, profile: str = "desk", pretrained: dict[str, str] | None = None) -> GeneratorCombo:
    if name not in COMBO_MEMBERS:
        raise ConfigurationError(f"unknown combo {name!r}; valid: {sorted(COMBO_MEMBERS)}")
    pretrained = pretrained or {}
    members = [member_config(m, profile, pretrained_weights_path=pretrained.get(m)) for m in COMBO_MEMBERS[name]]
    return GeneratorCombo(name, members)


class GeneratorEnsemble(nn.Module):
    """Built members of a combo, evaluated on a shared image."""

    def __init__(self, combo: GeneratorCombo):
        super().__init__()
        self.combo = combo
        self.members = nn.ModuleDict({m.name: build_generator(m) for m in combo.members})

    @property
    def names(self) -> list[str]:
        return list(self.members)

    def train(self, mode: bool = True):
        super().train(mode)
        for name, gen in self.members.items():
            if gen.config.is_frozen:
                gen.eval()
        return self

    def forward(self, image) -> list[FeaturePyramid]:
        out = []
        for name, gen in self.members.items():
            try:
                if gen.config.is_frozen:
                    with torch.no_grad():
                        out.append(gen(image))
                else:
                    out.append(gen(image))
            except Exception as exc:
                raise RuntimeError(f"generator {name!r} failed: {exc}") from exc
        return out


def run_combo(ensemble: GeneratorEnsemble, image: torch.Tensor) -> list[FeaturePyramid]:
    return ensemble(image)
