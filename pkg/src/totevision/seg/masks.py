from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .roi import roi_align


class MaskHead(nn.Module):
    """R x R RoI features -> 2R x 2R mask logits."""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, kernel_size=3, padding=1)
        self.up = nn.ConvTranspose2d(hidden, hidden, kernel_size=2, stride=2)
        self.logits = nn.Conv2d(hidden, 1, kernel_size=1)
        for m in (self.conv1, self.conv2, self.up):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
        nn.init.normal_(self.logits.weight, std=0.001)
        nn.init.zeros_(self.logits.bias)

    def forward(self, roi_feats: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.conv1(roi_feats))
        x = F.gelu(self.conv2(x))
        x = F.gelu(self.up(x))
        return self.logits(x)[:, 0]


def paste_masks(mask_logits: torch.Tensor, boxes: torch.Tensor, image_size: int, threshold: float = 0.5) -> torch.Tensor:
    """Resample K x M x M logits into their boxes on an image_size canvas.

    Probabilities are bilinearly interpolated at pixel centres inside each
    box and thresholded; pixels outside the box are always background.
    """
    k = mask_logits.shape[0]
    if k == 0:
        return torch.zeros(0, image_size, image_size, dtype=torch.bool)
    prob = torch.sigmoid(mask_logits.detach())[:, None].to(torch.float64)
    boxes = boxes.detach().to(torch.float64)
    centers = torch.arange(image_size, dtype=torch.float64) + 0.5
    x1, y1, x2, y2 = (boxes[:, i, None] for i in range(4))
    gx = 2 * (centers[None, :] - x1) / (x2 - x1) - 1
    gy = 2 * (centers[None, :] - y1) / (y2 - y1) - 1
    grid = torch.stack(
        [gx[:, None, :].expand(k, image_size, image_size), gy[:, :, None].expand(k, image_size, image_size)], dim=-1
    )
    sampled = F.grid_sample(prob, grid, mode="bilinear", padding_mode="border", align_corners=False)[:, 0]
    inside = (gx.abs() <= 1)[:, None, :] & (gy.abs() <= 1)[:, :, None]
    return (sampled >= threshold) & inside


def mask_targets(gt_masks: torch.Tensor, boxes: torch.Tensor, size: int) -> torch.Tensor:
    """Crop-and-resize binary GT masks (K x H x W) to K x size x size in {0, 1}."""
    if boxes.shape[0] == 0:
        return gt_masks.new_zeros(0, size, size, dtype=torch.float32)
    feats = gt_masks[:, None].to(boxes.dtype)
    idx = torch.arange(boxes.shape[0])
    crops = roi_align(feats, boxes, idx, size, stride=1.0)[:, 0]
    return (crops >= 0.5).to(boxes.dtype)
