from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError
from .boxes import BoxCoder, box_iou, clip_boxes


@dataclass(frozen=True)
class CascadeStageConfig:
    iou_thresholds: tuple[float, ...] = (0.5, 0.6, 0.7)
    box_weights: tuple[tuple[float, float, float, float], ...] = (
        (10.0, 10.0, 5.0, 5.0),
        (20.0, 20.0, 10.0, 10.0),
        (30.0, 30.0, 15.0, 15.0),
    )

    def __post_init__(self):
        t = self.iou_thresholds
        if not t:
            raise ConfigError("cascade needs at least one stage")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigError(f"stage IoU thresholds must be strictly increasing, got {t}")
        if len(self.box_weights) < len(t):
            raise ConfigError("one set of box-coder weights per stage is required")

    @property
    def num_stages(self) -> int:
        return len(self.iou_thresholds)

    def coders(self) -> list[BoxCoder]:
        return [BoxCoder(w) for w in self.box_weights[: self.num_stages]]


class BoxHead(nn.Module):
    """Two shared FC layers, then a 2-way classifier and class-agnostic deltas."""

    def __init__(self, in_channels: int, roi_size: int = 7, hidden: int = 128, reduced: int = 32):
        super().__init__()
        self.reduce = nn.Conv2d(in_channels, reduced, kernel_size=1)
        self.fc1 = nn.Linear(reduced * roi_size * roi_size, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, 2)
        self.reg = nn.Linear(hidden, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.zeros_(self.cls.bias)
        # zero deltas until trained: boxes pass through unchanged
        nn.init.zeros_(self.reg.weight)
        nn.init.zeros_(self.reg.bias)

    def forward(self, roi_feats: torch.Tensor):
        x = F.gelu(self.reduce(roi_feats)).flatten(1)
        x = F.gelu(self.fc2(F.gelu(self.fc1(x))))
        return self.cls(x), self.reg(x)


def match_boxes(boxes: torch.Tensor, gt_boxes: torch.Tensor, iou_threshold: float):
    """Index of the best-IoU ground truth per box, -1 below ``iou_threshold``.

    Also returns that IoU.  Ties go to the lowest GT index.
    """
    if gt_boxes.numel() == 0 or boxes.numel() == 0:
        return torch.full((boxes.shape[0],), -1, dtype=torch.long), boxes.new_zeros(boxes.shape[0])
    iou = box_iou(boxes, gt_boxes)
    best, idx = iou.max(dim=1)
    idx = torch.where(best >= iou_threshold, idx, torch.full_like(idx, -1))
    return idx, best


def cascade_refine(heads, stages: CascadeStageConfig, pool, rois: torch.Tensor, batch_index, image_size: int):
    """Run every stage on ``rois``; stage t+1 consumes stage t's boxes.

    ``pool(boxes, batch_index)`` returns RoI features.  Returns
    ``(final_boxes, final_scores, per_stage)`` where ``per_stage`` holds
    ``(input_boxes, class_logits, deltas)`` for each stage.
    """
    per_stage = []
    boxes = rois
    scores = None
    for head, coder in zip(heads, stages.coders()):
        logits, deltas = head(pool(boxes, batch_index))
        per_stage.append((boxes, logits, deltas))
        boxes = refine_boxes(coder, boxes, deltas, image_size)
        scores = torch.softmax(logits, dim=1)[:, 1]
    return boxes, scores, per_stage


def refine_boxes(coder: BoxCoder, boxes: torch.Tensor, deltas: torch.Tensor, image_size: int) -> torch.Tensor:
    """Apply deltas, clip, detach; a box collapsing below 1 px keeps its input."""
    refined = clip_boxes(coder.decode(boxes, deltas), image_size).detach()
    w = refined[:, 2] - refined[:, 0]
    h = refined[:, 3] - refined[:, 1]
    ok = ((w >= 1.0) & (h >= 1.0))[:, None]
    return torch.where(ok, refined, boxes)
