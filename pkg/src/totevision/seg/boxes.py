"""Box geometry: IoU, delta coding, clipping and NMS.

Boxes are ``(x1, y1, x2, y2)`` in input-pixel coordinates where pixel
``(row, col)`` covers ``[col, col + 1] x [row, row + 1]``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torchvision.ops import batched_nms as _tv_batched_nms
from torchvision.ops import nms as _tv_nms

# Deltas larger than this would scale a box by more than 1000/16.
DELTA_CLAMP = math.log(1000.0 / 16)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU, ``len(a) x len(b)``."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def clip_boxes(boxes: torch.Tensor, image_size: int) -> torch.Tensor:
    return boxes.clamp(min=0, max=float(image_size))


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Indices of kept boxes, in descending score order."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    return _tv_nms(boxes.float(), scores.float(), iou_threshold)


def batched_nms(boxes, scores, groups, iou_threshold: float) -> torch.Tensor:
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    return _tv_batched_nms(boxes.float(), scores.float(), groups, iou_threshold)


class BoxCoder:
    """Center/size deltas ``(dx, dy, dw, dh)`` with per-coordinate weights."""

    def __init__(self, weights=(1.0, 1.0, 1.0, 1.0)):
        self.weights = tuple(float(w) for w in weights)

    def encode(self, reference: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        rw = reference[:, 2] - reference[:, 0]
        rh = reference[:, 3] - reference[:, 1]
        rx = reference[:, 0] + 0.5 * rw
        ry = reference[:, 1] + 0.5 * rh
        tw = target[:, 2] - target[:, 0]
        th = target[:, 3] - target[:, 1]
        tx = target[:, 0] + 0.5 * tw
        ty = target[:, 1] + 0.5 * th
        return torch.stack(
            [wx * (tx - rx) / rw, wy * (ty - ry) / rh, ww * torch.log(tw / rw), wh * torch.log(th / rh)], dim=1
        )

    def decode(self, reference: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        rw = reference[:, 2] - reference[:, 0]
        rh = reference[:, 3] - reference[:, 1]
        rx = reference[:, 0] + 0.5 * rw
        ry = reference[:, 1] + 0.5 * rh
        dx = deltas[:, 0] / wx
        dy = deltas[:, 1] / wy
        dw = (deltas[:, 2] / ww).clamp(max=DELTA_CLAMP)
        dh = (deltas[:, 3] / wh).clamp(max=DELTA_CLAMP)
        cx = rx + dx * rw
        cy = ry + dy * rh
        w = rw * torch.exp(dw)
        h = rh * torch.exp(dh)
        return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def mask_to_box(mask) -> tuple[int, int, int, int]:
    """Tight pixel-edge box of a nonempty binary mask (numpy or torch)."""
    m = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no box")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1
