"""Simple feature pyramid over a single plain-backbone feature map.

Four parallel branches turn the stride-16 token grid into maps at strides
32, 16, 8 and 4.  There is no top-down fusion between branches.
"""

from __future__ import annotations

from fractions import Fraction

import torch
import torch.nn as nn

from .backbone import FeatureMap, trunc_normal_init
from .errors import ScaleMismatchError

STRIDES = (32, 16, 8, 4)
INPUT_STRIDE = 16


class ChannelNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class PyramidLevel(nn.Module):
    def __init__(self, resample: nn.Module, in_channels: int, out_channels: int):
        super().__init__()
        self.resample = resample
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        self.norm = ChannelNorm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.proj(self.resample(x)))


class SimplePyramid(nn.Module):
    def __init__(self, in_channels: int, out_channels: int = 64):
        super().__init__()
        d = in_channels
        self.out_channels = out_channels
        self.level32 = PyramidLevel(nn.Conv2d(d, d, kernel_size=2, stride=2), d, out_channels)
        self.level16 = PyramidLevel(nn.Identity(), d, out_channels)
        self.level8 = PyramidLevel(nn.ConvTranspose2d(d, d // 2, kernel_size=2, stride=2), d // 2, out_channels)
        self.level4 = PyramidLevel(
            nn.Sequential(
                nn.ConvTranspose2d(d, d // 2, kernel_size=2, stride=2),
                nn.GELU(),
                nn.ConvTranspose2d(d // 2, d // 4, kernel_size=2, stride=2),
            ),
            d // 4,
            out_channels,
        )
        trunc_normal_init(self)

    def forward(self, fm: FeatureMap) -> dict[int, FeatureMap]:
        """Returns ``{stride: FeatureMap}`` for strides 32, 16, 8, 4."""
        if fm.scale != Fraction(1, INPUT_STRIDE):
            raise ScaleMismatchError(f"pyramid expects a 1/16-scale map, got {fm.scale}")
        h, w = fm.spatial
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise ScaleMismatchError(
                f"{h}x{w} grid cannot produce an exact 1/32 level (needs even size >= 2)"
            )
        x = fm.data.permute(0, 3, 1, 2)
        out = {}
        for s in STRIDES:
            y = getattr(self, f"level{s}")(x)
            out[s] = FeatureMap(y.permute(0, 2, 3, 1), Fraction(1, s))
        return out


def build_pyramid(fm: FeatureMap, pyramid: SimplePyramid) -> dict[int, FeatureMap]:
    return pyramid(fm)


def levels_nchw(levels: dict[int, FeatureMap]) -> dict[int, torch.Tensor]:
    return {s: lv.data.permute(0, 3, 1, 2) for s, lv in levels.items()}

