"""Three-way pick outcome classifier: nominal, multi-pick, package defect."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig
from PIL import Image

from .data.defects import DEFECT_LABELS
from .errors import ConfigError, DimensionMismatchError
from .imaging import as_image_batch

NUM_CLASSES = len(DEFECT_LABELS)
FRAMINGS = ("crop", "full")


@dataclass(frozen=True)
class DefectConfig:
    # "crop": square window around the transferred object(s), resampled to the frame size
    framing: str = "crop"
    crop_margin: int = 4

    def __post_init__(self):
        if self.framing not in FRAMINGS:
            raise ConfigError(f"defect framing must be one of {FRAMINGS}, got {self.framing!r}")
        if isinstance(self.crop_margin, bool) or not isinstance(self.crop_margin, int) or self.crop_margin < 0:
            raise ConfigError(f"crop_margin must be a non-negative integer, got {self.crop_margin!r}")

    def to_dict(self) -> dict:
        return {"framing": self.framing, "crop_margin": self.crop_margin}

    @classmethod
    def from_dict(cls, d) -> "DefectConfig":
        extra = set(d) - {"framing", "crop_margin"}
        if extra:
            raise ConfigError(f"unknown defect head keys: {sorted(extra)}")
        return cls(**d)


def crop_window(masks: np.ndarray, margin: int) -> tuple[float, float, float, float]:
    """Square box (left, top, right, bottom) around all mask pixels, kept inside the frame."""
    h, w = masks.shape[-2:]
    ys, xs = np.nonzero(masks.reshape(-1, h, w).any(axis=0))
    if len(ys) == 0:
        return 0.0, 0.0, float(w), float(h)
    side = min(max(ys.max() - ys.min(), xs.max() - xs.min()) + 1 + 2 * margin, h, w)
    cx = (xs.min() + xs.max() + 1) / 2
    cy = (ys.min() + ys.max() + 1) / 2
    left = min(max(cx - side / 2, 0.0), w - side)
    top = min(max(cy - side / 2, 0.0), h - side)
    return float(left), float(top), float(left + side), float(top + side)


def frame_pick(image: np.ndarray, masks: np.ndarray, margin: int = 4) -> np.ndarray:
    """Crop the pick image to the object window and resample it back to full size."""
    h, w = image.shape[:2]
    box = crop_window(masks, margin)
    return np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR, box=box))


@dataclass
class DefectPrediction:
    probabilities: np.ndarray  # 3, in DEFECT_LABELS order

    @property
    def label(self) -> str:
        return DEFECT_LABELS[int(np.argmax(self.probabilities))]


class DefectModel(nn.Module):
    def __init__(self, backbone_config: BackboneConfig | None = None):
        super().__init__()
        self.backbone_config = backbone_config or BackboneConfig()
        self.backbone = Backbone(self.backbone_config)
        # final norm on the class embedding; the encoder itself ends on a residual add
        self.norm = nn.LayerNorm(self.backbone_config.embed_dim)
        self.classifier = nn.Linear(self.backbone_config.embed_dim, NUM_CLASSES)
        nn.init.zeros_(self.classifier.weight)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Logits for ``n x h x w x 3`` or ``n x k x h x w x 3`` (views averaged)."""
        if images.dim() == 4:
            images = images[:, None]
        if images.dim() != 5 or images.shape[1] < 1:
            raise DimensionMismatchError(f"expected n x k x h x w x 3 pick images, got {tuple(images.shape)}")
        n, k = images.shape[:2]
        cls, _ = self.backbone(images.reshape(n * k, *images.shape[2:]))
        return self.classifier(self.norm(cls.reshape(n, k, -1).mean(dim=1)))


def classify_defect(model: DefectModel, images) -> DefectPrediction:
    """Class probabilities for one pick given 1..3 images (``k x h x w x 3``)."""
    arr = images if isinstance(images, torch.Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[0] == 0:
        raise ValueError("classify_defect needs at least one image")
    x = as_image_batch(arr)[None].to(next(model.parameters()).dtype)
    with torch.no_grad():
        p = torch.softmax(model(x), dim=-1)[0]
    return DefectPrediction(p.double().numpy())


def defect_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy."""
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    return F.cross_entropy(logits, labels)


def label_index(labels: Iterable[str]) -> torch.Tensor:
    return torch.tensor([DEFECT_LABELS.index(v) for v in labels], dtype=torch.long)


def write_predictions(path, records: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "w") as f:
        for sample_id, p in records:
            f.write(json.dumps({
                "sample_id": sample_id,
                "p_nominal": float(p[0]),
                "p_multi": float(p[1]),
                "p_package": float(p[2]),
                "argmax": DEFECT_LABELS[int(np.argmax(p))],
            }) + "\n")


def read_predictions(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


__all__ = [
    "DefectConfig",
    "DefectModel",
    "crop_window",
    "frame_pick",
    "DefectPrediction",
    "classify_defect",
    "defect_loss",
    "label_index",
    "write_predictions",
    "read_predictions",
    "NUM_CLASSES",
]
