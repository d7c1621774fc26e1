from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import BoxCoder, box_area, clip_boxes, nms


@dataclass
class BoxProposal:
    box: tuple[float, float, float, float]
    objectness: float


class RPNHead(nn.Module):
    """Shared 3x3 conv tower with objectness and delta outputs, one anchor per cell."""

    def __init__(self, channels: int, num_anchors: int = 1):
        super().__init__()
        self.num_anchors = num_anchors
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, kernel_size=1)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, kernel_size=1)
        for layer in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, levels: dict[int, torch.Tensor]):
        """NCHW levels -> (logits N x total, deltas N x total x 4), stride-ascending order."""
        logits, deltas = [], []
        for s in sorted(levels):
            x = F.gelu(self.conv(levels[s]))
            n, _, h, w = x.shape
            logits.append(self.objectness(x).permute(0, 2, 3, 1).reshape(n, -1))
            d = self.deltas(x).view(n, self.num_anchors, 4, h, w).permute(0, 3, 4, 1, 2)
            deltas.append(d.reshape(n, -1, 4))
        return torch.cat(logits, 1), torch.cat(deltas, 1)


def select_proposals(
    logits: torch.Tensor,
    deltas: torch.Tensor,
    anchors: torch.Tensor,
    image_size: int,
    top_k: int = 100,
    pre_nms_top_k: int = 400,
    nms_threshold: float = 0.7,
    min_size: float = 1.0,
    coder: BoxCoder | None = None,
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Per image: decode, clip, drop tiny boxes, NMS, keep the best ``top_k``.

    Returns ``(boxes k x 4, objectness logits k)`` sorted by objectness.
    """
    coder = coder or BoxCoder()
    out = []
    for i in range(logits.shape[0]):
        score = logits[i].detach()
        k = min(pre_nms_top_k, score.numel())
        order = torch.topk(score, k, sorted=True).indices
        boxes = clip_boxes(coder.decode(anchors[order], deltas[i, order].detach()), image_size)
        score = score[order]
        w = boxes[:, 2] - boxes[:, 0]
        h = boxes[:, 3] - boxes[:, 1]
        keep = (w >= min_size) & (h >= min_size) & (box_area(boxes) >= 1.0)
        boxes, score = boxes[keep], score[keep]
        keep = nms(boxes, score, nms_threshold)[:top_k]
        out.append((boxes[keep], score[keep]))
    return out


def to_proposals(boxes: torch.Tensor, scores: torch.Tensor) -> list[BoxProposal]:
    return [BoxProposal(tuple(float(v) for v in b), float(s)) for b, s in zip(boxes, scores)]
