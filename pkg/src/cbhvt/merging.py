"""Channel merging: bottleneck fusion blocks per stage followed by an FPN."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backend import ConfigurationError, InvalidInputError
from .generators import STRIDES, FeatureMap


@dataclass(frozen=True)
class FusionSpec:
    kernels: tuple[int, ...]
    out_channels: tuple[int, ...] | None = None
    terminal_pooling: str = "max3x3_stride1"

    def __post_init__(self):
        if not self.kernels:
            raise ConfigurationError("fusion spec needs at least one layer")
        if any(k not in (1, 3, 5, 7) for k in self.kernels):
            raise ConfigurationError(f"kernel sizes must be in {{1,3,5,7}}, got {self.kernels}")
        if self.terminal_pooling not in ("max3x3_stride1", "none"):
            raise ConfigurationError(f"unknown terminal pooling {self.terminal_pooling!r}")
        if self.out_channels is not None:
            if len(self.out_channels) != len(self.kernels):
                raise ConfigurationError("one out_channels entry per layer")
            oc = self.out_channels
            if min(oc) < 1 or any(b > a for a, b in zip(oc, oc[1:])):
                raise ConfigurationError(f"out_channels must be positive and non-increasing: {oc}")

    def resolve(self, in_channels: int, c_out: int) -> "FusionSpec":
        """Fill in widths: halve per layer, never below ``c_out``, end at ``c_out``."""
        if self.out_channels is not None:
            return self
        n = len(self.kernels)
        widths = [max(in_channels // 2 ** (i + 1), c_out) for i in range(n - 1)] + [c_out]
        return FusionSpec(self.kernels, tuple(widths), self.terminal_pooling)


_ROWS = {
    "Channel Merger-1": (5, 3, 1),
    "Channel Merger-2": (5, 3, 1),
    "Channel Merger-3": (5, 3, 1),
    "Channel Merger-4": (7, 5, 1),
    "Channel Merger-5": (3, 3, 1),
    "Channel Merger-6": (5, 3, 1),
}


def merger_presets() -> dict[str, FusionSpec]:
    return {name: FusionSpec(k) for name, k in _ROWS.items()}


def merger_preset(name: str) -> FusionSpec:
    presets = merger_presets()
    if name not in presets:
        raise ConfigurationError(f"unknown merger {name!r}; valid: {sorted(presets)}")
    return presets[name]


class FusionBlock(nn.Module):
    def __init__(self, in_channels: int, spec: FusionSpec, c_out: int | None = None):
        super().__init__()
        if c_out is not None:
            spec = spec.resolve(in_channels, c_out)
        elif spec.out_channels is None:
            raise ConfigurationError("fusion spec has no widths; pass c_out")
        self.spec = spec
        layers = []
        cin = in_channels
        for k, cout in zip(spec.kernels, spec.out_channels):
            layers += [nn.Conv2d(cin, cout, k, padding=k // 2, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
            cin = cout
        if spec.terminal_pooling == "max3x3_stride1":
            layers.append(nn.MaxPool2d(3, 1, 1))
        self.body = nn.Sequential(*layers)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels[-1]

    def forward(self, x):
        return self.body(x)


def fusion_block(level: FeatureMap, block: FusionBlock) -> FeatureMap:
    return FeatureMap(block(level.tensor), level.stride)


class FPN(nn.Module):
    """Lateral 1×1 projections, nearest 2× top-down sum, 3×3 smoothing."""

    def __init__(self, in_channels: list[int], c_fpn: int = 16):
        super().__init__()
        self.c_fpn = c_fpn
        self.lateral = nn.ModuleList(nn.Conv2d(c, c_fpn, 1) for c in in_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(c_fpn, c_fpn, 3, padding=1) for _ in in_channels)

    def top_down(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        merged = [None] * len(feats)
        prev = None
        for i in range(len(feats) - 1, -1, -1):
            lat = self.lateral[i](feats[i])
            if prev is not None:
                up = F.interpolate(prev, scale_factor=2, mode="nearest")
                lat = lat + up[..., : lat.shape[-2], : lat.shape[-1]]
            merged[i] = prev = lat
        return merged

    def forward(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        return [s(m) for s, m in zip(self.smooth, self.top_down(feats))]


def build_fpn(fused: dict[int, FeatureMap], fpn: FPN) -> dict[int, FeatureMap]:
    keys = sorted(fused)
    for k in keys:
        if fused[k].stride != STRIDES[k]:
            raise InvalidInputError(f"stage {k} has stride {fused[k].stride}, expected {STRIDES[k]}")
    outs = fpn([fused[k].tensor for k in keys])
    return {k: FeatureMap(o, fused[k].stride) for k, o in zip(keys, outs)}


class ChannelMerger(nn.Module):
    def __init__(self, channels_per_level: list[int], spec: FusionSpec, c_fpn: int = 16):
        super().__init__()
        self.blocks = nn.ModuleList(FusionBlock(c, spec, c_fpn) for c in channels_per_level)
        self.fpn = FPN([b.out_channels for b in self.blocks], c_fpn)

    def forward(self, levels: dict[int, FeatureMap]) -> dict[int, FeatureMap]:
        fused = {k: fusion_block(levels[k], self.blocks[i]) for i, k in enumerate(sorted(levels))}
        return build_fpn(fused, self.fpn)
