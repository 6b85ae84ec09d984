"""Channel exploitation: align member pyramids, concatenate, reweight with attention."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backend import InvalidInputError, resize_bilinear
from .generators import AttentionRefine, FeatureMap, FeaturePyramid


@dataclass
class BoostedPyramid:
    levels: dict[int, FeatureMap]
    # per level: [(member name, (start, stop)), ...]
    source_channel_spans: dict[int, list[tuple[str, tuple[int, int]]]]

    @property
    def channels(self) -> list[int]:
        return [self.levels[i].channels for i in sorted(self.levels)]

    def member_slice(self, level: int, name: str) -> torch.Tensor:
        for member, (a, b) in self.source_channel_spans[level]:
            if member == name:
                return self.levels[level].tensor[..., a:b, :, :]
        raise KeyError(name)


def align_and_concat(pyramids: list[FeaturePyramid], names: list[str] | None = None) -> BoostedPyramid:
    if len(pyramids) < 1:
        raise InvalidInputError("need at least one pyramid")
    names = names or [f"member{i}" for i in range(len(pyramids))]
    stages = sorted(pyramids[0].levels)
    for p in pyramids[1:]:
        if sorted(p.levels) != stages:
            raise InvalidInputError("pyramids disagree on stage count")
    levels, spans = {}, {}
    for s in stages:
        ref = pyramids[0][s]
        parts, level_spans, start = [], [], 0
        for name, p in zip(names, pyramids):
            t = p[s].tensor
            if p[s].stride != ref.stride:
                raise InvalidInputError(f"stage {s}: stride {p[s].stride} != {ref.stride}")
            t = resize_bilinear(t, ref.hw)
            parts.append(t)
            c = t.shape[-3]
            level_spans.append((name, (start, start + c)))
            start += c
        levels[s] = FeatureMap(torch.cat(parts, dim=-3), ref.stride)
        spans[s] = level_spans
    return BoostedPyramid(levels, spans)


class ChannelExploiter(nn.Module):
    """Independent attention refinement per pyramid level."""

    def __init__(self, channels_per_level: list[int], reduction: int = 4):
        super().__init__()
        self.refiners = nn.ModuleList(AttentionRefine(c, min(reduction, c)) for c in channels_per_level)

    def forward(self, boosted: BoostedPyramid) -> BoostedPyramid:
        levels = {}
        for i, s in enumerate(sorted(boosted.levels)):
            fm = boosted.levels[s]
            levels[s] = FeatureMap(self.refiners[i](fm.tensor), fm.stride)
        return BoostedPyramid(levels, boosted.source_channel_spans)


def exploit(boosted: BoostedPyramid, exploiter: ChannelExploiter) -> BoostedPyramid:
    return exploiter(boosted)
