"""Vision transformer encoder built from MultiWay blocks.

Each block owns one self-attention module shared by every modality and a
per-modality "expert" path (two layer norms plus a feed-forward network).
Vision-only inference keeps just the ``vision`` expert; the ``language``
expert is carried only so that the parameter savings of pruning can be
measured.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionMismatchError, UnknownModalityError

VISION = "vision"
LANGUAGE = "language"
MODALITIES = (VISION, LANGUAGE)


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 4
    ffn_hidden: int = 384
    expert_set: tuple[str, ...] = (VISION,)
    seed: int = 0
    # Text-side tables that only exist while a language expert is present.
    # Zero keeps the toy model free of them.
    text_vocab_size: int = 0
    text_max_positions: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not self.expert_set:
            raise ConfigError("expert_set must not be empty")
        unknown = set(self.expert_set) - set(MODALITIES)
        if unknown:
            raise ConfigError(f"unknown modalities in expert_set: {sorted(unknown)}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        object.__setattr__(self, "expert_set", tuple(m for m in MODALITIES if m in self.expert_set))

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def feature_scale(self) -> Fraction:
        return Fraction(1, self.patch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["expert_set"] = list(self.expert_set)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown backbone config keys: {sorted(extra)}")
        d = dict(d)
        if "expert_set" in d:
            d["expert_set"] = tuple(d["expert_set"])
        return cls(**d)


# Named presets.  "base" mirrors the full-size geometry for parameter
# accounting only; the toy presets are what actually gets trained.
TOY_BASE = BackboneConfig()
TOY_LARGE = BackboneConfig(embed_dim=128, depth=6, num_heads=4, ffn_hidden=512)
BASE_GEOMETRY = BackboneConfig(
    image_size=224,
    patch_size=16,
    embed_dim=768,
    depth=12,
    num_heads=12,
    ffn_hidden=3072,
    expert_set=(VISION, LANGUAGE),
    text_vocab_size=64010,
    text_max_positions=1024,
)
PRESETS = {"base": TOY_BASE, "large": TOY_LARGE}


@dataclass
class FeatureMap:
    """Channels-last spatial token grid, ``data`` is n x H x W x C."""

    data: torch.Tensor
    scale: Fraction = field(default=Fraction(1, 16))

    def __post_init__(self):
        if self.data.dim() != 4:
            raise DimensionMismatchError(f"feature map must be 4-D, got shape {tuple(self.data.shape)}")
        self.scale = Fraction(self.scale)

    @property
    def spatial(self) -> tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])


def trunc_normal_init(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class SharedAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, t, d = x.shape
        h = self.num_heads

        def split(y):
            return y.view(n, t, h, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, d)
        return self.o(out)


class ExpertPath(nn.Module):
    """Per-modality normalization pair plus feed-forward expert."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def ffn(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(self.norm2(x))))


class MultiWayBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, ffn_hidden: int, expert_set=(VISION,)):
        super().__init__()
        self.attn = SharedAttention(dim, num_heads)
        self.expert = nn.ModuleDict({m: ExpertPath(dim, ffn_hidden) for m in expert_set})

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.expert.keys())

    def forward(self, x: torch.Tensor, modality: str = VISION) -> torch.Tensor:
        if modality not in self.expert:
            raise UnknownModalityError(f"block has no '{modality}' expert (have {list(self.expert)})")
        path = self.expert[modality]
        x = x + self.attn(path.norm1(x))
        return x + path.ffn(x)


def multiway_block(tokens: torch.Tensor, block: MultiWayBlock, modality: str = VISION) -> torch.Tensor:
    return block(tokens, modality)


class Backbone(nn.Module):
    """Plain ViT encoder; state-dict keys follow ``block{i}.attn.{q,k,v,o}``."""

    def __init__(self, config: BackboneConfig = TOY_BASE, init_weights: bool = True):
        super().__init__()
        self.config = config
        c = config
        patch_dim = c.patch_size * c.patch_size * 3
        self.patch_embed = nn.Linear(patch_dim, c.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, c.num_patches + 1, c.embed_dim))
        for i in range(c.depth):
            self.add_module(f"block{i}", MultiWayBlock(c.embed_dim, c.num_heads, c.ffn_hidden, c.expert_set))
        if LANGUAGE in c.expert_set and c.text_vocab_size:
            self.text_embed = nn.Embedding(c.text_vocab_size, c.embed_dim)
            self.text_pos = nn.Parameter(torch.zeros(1, c.text_max_positions, c.embed_dim))
        if init_weights:
            self.reset_parameters()

    def reset_parameters(self) -> None:
        g = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() == 1 and (name.endswith("bias") or ".norm" in name):
                    p.fill_(1.0 if (".norm" in name and name.endswith("weight")) else 0.0)
                else:
                    p.copy_(_trunc_normal(p.shape, 0.02, g, p.dtype))

    @property
    def blocks(self) -> list[MultiWayBlock]:
        return [getattr(self, f"block{i}") for i in range(self.config.depth)]

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """Images ``n x h x w x 3`` in [0, 1] -> tokens ``n x (1 + H*W) x d``."""
        c = self.config
        if images.dim() != 4:
            raise DimensionMismatchError(f"expected n x h x w x c images, got shape {tuple(images.shape)}")
        n, h, w, ch = images.shape
        if h != c.image_size or w != c.image_size or ch != 3:
            raise DimensionMismatchError(
                f"expected images of {c.image_size}x{c.image_size}x3, got {h}x{w}x{ch}"
            )
        p, g = c.patch_size, c.grid_size
        patches = images.reshape(n, g, p, g, p, ch).permute(0, 1, 3, 2, 4, 5).reshape(n, g * g, p * p * ch)
        tokens = self.patch_embed(patches)
        cls = self.cls_token.expand(n, -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def forward(self, images: torch.Tensor, modality: str = VISION) -> tuple[torch.Tensor, FeatureMap]:
        x = self.patchify(images)
        for block in self.blocks:
            x = block(x, modality)
        g = self.config.grid_size
        grid = x[:, 1:].reshape(x.shape[0], g, g, x.shape[-1])
        return x[:, 0], FeatureMap(grid, self.config.feature_scale)

    encode = forward

    def pruned(self) -> "Backbone":
        """Copy of this encoder with every non-vision expert removed."""
        cfg = prune_experts(self.config)
        out = Backbone(cfg).to(dtype=self.pos_embed.dtype)
        state = prune_state_dict(self.state_dict())
        out.load_state_dict(state)
        return out


def _trunc_normal(shape, std, generator, dtype):
    t = torch.empty(shape, dtype=torch.float64)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)
    return t.to(dtype)


def prune_experts(config: BackboneConfig) -> BackboneConfig:
    if VISION not in config.expert_set:
        raise ConfigError("cannot prune to vision-only: config has no vision expert")
    return replace(config, expert_set=(VISION,))


def prune_state_dict(state: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Drop language-only weights by key filtering."""
    out = {}
    for k, v in state.items():
        if f".expert.{LANGUAGE}." in k or k.startswith("text_"):
            continue
        out[k] = v
    return out


def count_parameters(config: BackboneConfig | None = None, params=None) -> int:
    """Exact number of scalar weights.

    ``params`` may be a module or a name->tensor mapping; if omitted the
    encoder described by ``config`` is instantiated and counted.
    """
    if params is None:
        if config is None:
            raise ConfigError("need a config or params to count")
        with torch.device("meta"):
            params = Backbone(config, init_weights=False)
    if isinstance(params, nn.Module):
        return sum(p.numel() for p in params.parameters())
    return sum(int(v.numel()) for v in params.values())


def expert_parameter_count(config: BackboneConfig) -> int:
    """Scalars in one expert path (FFN plus its two layer norms)."""
    d, f = config.embed_dim, config.ffn_hidden
    return (d * f + f) + (f * d + d) + 2 * (2 * d)
