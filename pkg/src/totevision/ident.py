"""Identification by contrastive retrieval against per-identity reference images.

Queries are either the pre-pick view alone or pre-pick plus two post-pick
views.  Three views are encoded separately, their class embeddings are
concatenated and fused back to ``d_i`` by a small MLP.  Queries and
references share the projection ``W_i`` to the embedding space.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig
from .errors import ConfigError, DataError, DegenerateEmbeddingError, DimensionMismatchError, EmptyGalleryError
from .imaging import as_image_batch

LOGIT_SCALE_INIT = math.log(14.3)
LOGIT_SCALE_MAX = 100.0


class IdentHead(nn.Module):
    def __init__(self, embed_dim: int, mid_dim: int = 128, out_dim: int = 64, views: int = 3):
        super().__init__()
        self.views = views
        self.fusion = nn.Sequential(nn.Linear(views * embed_dim, mid_dim), nn.GELU(), nn.Linear(mid_dim, embed_dim))
        self.proj = nn.Linear(embed_dim, out_dim)
        self.logit_scale = nn.Parameter(torch.tensor(LOGIT_SCALE_INIT))

    def temperature(self) -> torch.Tensor:
        return logit_scale_to_temperature(self.logit_scale)


def logit_scale_to_temperature(t: torch.Tensor) -> torch.Tensor:
    """exp(t), capped at 100."""
    return torch.clamp(t, max=math.log(LOGIT_SCALE_MAX)).exp()


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norm <= eps).any()):
        raise DegenerateEmbeddingError("cannot normalize a zero-length embedding")
    return x / norm


@dataclass(frozen=True)
class IdentConfig:
    mid_dim: int = 128
    embed_out: int = 64

    def to_dict(self) -> dict:
        return {"mid_dim": self.mid_dim, "embed_out": self.embed_out}

    @classmethod
    def from_dict(cls, d) -> "IdentConfig":
        extra = set(d) - {"mid_dim", "embed_out"}
        if extra:
            raise ConfigError(f"unknown identification head keys: {sorted(extra)}")
        return cls(**d)


class IdentModel(nn.Module):
    def __init__(self, backbone_config: BackboneConfig | None = None, head_config: IdentConfig | None = None):
        super().__init__()
        self.backbone_config = backbone_config or BackboneConfig()
        self.head_config = hc = head_config or IdentConfig()
        self.backbone = Backbone(self.backbone_config)
        self.head = IdentHead(self.backbone_config.embed_dim, hc.mid_dim, hc.embed_out)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        cls, _ = self.backbone(images)
        return cls

    def embed_reference(self, images: torch.Tensor) -> torch.Tensor:
        """``n x h x w x 3`` -> ``n x d_e`` unit vectors."""
        return l2_normalize(self.head.proj(self.encode(images)))

    def embed_query(self, images: torch.Tensor) -> torch.Tensor:
        """``n x k x h x w x 3`` with k in {1, 3} -> ``n x d_e`` unit vectors."""
        if images.dim() != 5 or images.shape[1] not in (1, self.head.views):
            raise DimensionMismatchError(
                f"query bundles must be n x (1 or {self.head.views}) x h x w x 3, got {tuple(images.shape)}"
            )
        n, k = images.shape[:2]
        if k == 1:
            return self.embed_reference(images[:, 0])
        feats = self.encode(images.reshape(n * k, *images.shape[2:])).reshape(n, -1)
        return self.fuse(feats)

    def fuse(self, feats: torch.Tensor) -> torch.Tensor:
        """Concatenated view features ``n x 3d_i`` -> unit query embeddings."""
        return l2_normalize(self.head.proj(self.head.fusion(feats)))

    def forward(self, references: torch.Tensor, queries: torch.Tensor):
        return self.embed_reference(references), self.embed_query(queries)


def embed_reference(model: IdentModel, image) -> np.ndarray:
    x = as_image_batch(np.asarray(image)[None] if np.ndim(image) == 3 else image)
    with torch.no_grad():
        return model.embed_reference(x.to(_dtype(model))).numpy()


def embed_query(model: IdentModel, bundle) -> np.ndarray:
    """Embedding of a single query bundle (object with ``.images`` or ``k x h x w x 3``)."""
    images = bundle.images if hasattr(bundle, "images") else bundle
    x = as_image_batch(np.asarray(images))[None]
    with torch.no_grad():
        return model.embed_query(x.to(_dtype(model)))[0].numpy()


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def contrastive_loss(q: torch.Tensor, r: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
    """Symmetric cross-entropy over query/reference similarity logits.

    ``t`` is the log-temperature.  Logits are formed from the elementwise
    product so that swapping ``q`` and ``r`` transposes them bit for bit.
    """
    if q.shape != r.shape or q.dim() != 2:
        raise DimensionMismatchError(f"need two n x d_e matrices, got {tuple(q.shape)} and {tuple(r.shape)}")
    n = q.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least two pairs (no negatives otherwise)")
    t = torch.as_tensor(t, dtype=q.dtype)
    logits = (q[:, None, :] * r[None, :, :]).sum(-1) * logit_scale_to_temperature(t)
    labels = torch.arange(n)
    loss_q = F.cross_entropy(logits, labels)
    loss_r = F.cross_entropy(logits.T.contiguous(), labels)
    return (loss_q + loss_r) / 2


# ------------------------------------------------------------------ gallery

_MAGIC = b"TVGI"
_HEADER = struct.Struct("<4sIIQ")  # magic, version, d_e, count
_VERSION = 1


class GalleryIndex:
    """Reference embeddings keyed by identity id (several per id allowed)."""

    def __init__(self, vectors: np.ndarray, ids: np.ndarray):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if vectors.ndim != 2 or vectors.shape[0] != ids.shape[0]:
            raise DimensionMismatchError("gallery needs an N x d_e matrix and N ids")
        if vectors.shape[0]:
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            if np.abs(norms - 1).max() > 1e-5:
                raise DegenerateEmbeddingError("gallery vectors must be unit-norm")
        self.vectors = vectors
        self.ids = ids

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def nbytes(self) -> int:
        return _HEADER.size + self.vectors.nbytes + self.ids.nbytes

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(_MAGIC, _VERSION, self.dim, len(self)))
            f.write(self.vectors.astype("<f4").tobytes())
            f.write(self.ids.astype("<i8").tobytes())

    @classmethod
    def load(cls, path) -> "GalleryIndex":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise DataError(f"{path}: truncated gallery file")
        magic, version, dim, count = _HEADER.unpack_from(raw)
        if magic != _MAGIC or version != _VERSION:
            raise DataError(f"{path}: not a gallery file")
        off = _HEADER.size
        vec_bytes = count * dim * 4
        if len(raw) != off + vec_bytes + count * 8:
            raise DataError(f"{path}: gallery size does not match header")
        vectors = np.frombuffer(raw, "<f4", count * dim, off).reshape(count, dim)
        ids = np.frombuffer(raw, "<i8", count, off + vec_bytes)
        return cls(vectors.copy(), ids.copy())

    def scores(self, query: np.ndarray) -> np.ndarray:
        return self.vectors.astype(np.float64) @ np.asarray(query, dtype=np.float64)


def retrieve(
    query: np.ndarray, gallery: GalleryIndex, k: int | None = None, allowed: Iterable[int] | None = None
) -> list[tuple[int, float]]:
    """Top-``k`` identities by dot product, as (id, score), best first.

    An identity scores the maximum over its reference vectors.  Ties go to
    the smaller id.  ``allowed`` restricts the gallery to a container
    manifest.
    """
    s = gallery.scores(query)
    ids = gallery.ids
    if allowed is not None:
        keep = np.isin(ids, np.fromiter(allowed, dtype=np.int64))
        s, ids = s[keep], ids[keep]
    if ids.size == 0:
        raise EmptyGalleryError("no gallery entries left after filtering")
    uniq, inverse = np.unique(ids, return_inverse=True)
    best = np.full(uniq.shape, -np.inf)
    np.maximum.at(best, inverse, s)
    order = np.lexsort((uniq, -best))
    if k is not None:
        order = order[:k]
    return [(int(uniq[i]), float(best[i])) for i in order]


def build_gallery(model: IdentModel, images: Sequence[np.ndarray], ids: Sequence[int], batch_size: int = 64) -> GalleryIndex:
    if len(images) == 0:
        raise EmptyGalleryError("need at least one reference image")
    if len(images) != len(ids):
        raise DimensionMismatchError("one id per reference image is required")
    seen = set()
    for img, i in zip(images, ids):
        key = (int(i), hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest())
        if key in seen:
            raise DataError(f"duplicate reference for identity {i}")
        seen.add(key)
    out = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for j in range(0, len(images), batch_size):
            x = as_image_batch(np.stack(images[j : j + batch_size])).to(_dtype(model))
            out.append(model.embed_reference(x).numpy())
    model.train(was_training)
    return GalleryIndex(np.concatenate(out), np.asarray(ids))


def write_rankings(path, records: Iterable[tuple[str, list[tuple[int, float]]]]) -> None:
    with open(path, "w") as f:
        for pick_id, ranked in records:
            f.write(json.dumps({"pick_id": pick_id, "ranked_ids": [i for i, _ in ranked],
                                "scores": [s for _, s in ranked]}) + "\n")


def read_rankings(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


__all__ = [
    "IdentHead",
    "IdentConfig",
    "IdentModel",
    "GalleryIndex",
    "contrastive_loss",
    "embed_reference",
    "embed_query",
    "l2_normalize",
    "retrieve",
    "build_gallery",
    "write_rankings",
    "read_rankings",
]
