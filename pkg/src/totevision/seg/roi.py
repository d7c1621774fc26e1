"""RoI Align with one bilinear sample at the centre of each output bin.

Coordinates are half-pixel aligned: input pixel coordinate ``x`` on a level
of stride ``s`` maps to feature coordinate ``x / s - 0.5``, so the centre of
feature cell ``j`` sits at pixel ``(j + 0.5) * s``.  Border handling matches
the common convention: samples further than one cell outside the map read
zero, samples within that margin are clamped onto the edge.
"""

from __future__ import annotations

import math

import torch

from ..errors import DegenerateBoxError


def _check_boxes(boxes: torch.Tensor) -> None:
    if boxes.numel() == 0:
        return
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    bad = (w <= 0) | (h <= 0) | (w * h < 1.0)
    if bool(bad.any()):
        i = int(torch.nonzero(bad)[0])
        raise DegenerateBoxError(f"box {boxes[i].tolist()} has area < 1 px")


def _axis_coords(lo, hi, size, stride, out):
    # lo, hi: K; returns sample coordinates K x out in feature units
    bins = (torch.arange(out, dtype=lo.dtype) + 0.5) / out
    return (lo[:, None] + (hi - lo)[:, None] * bins[None, :]) / stride - 0.5


def _bilinear_axis(coord: torch.Tensor, size: int):
    valid = (coord >= -1.0) & (coord <= size)
    c = coord.clamp(min=0)
    low = torch.floor(c).long()
    at_edge = low >= size - 1
    low = torch.where(at_edge, torch.full_like(low, size - 1), low)
    high = torch.where(at_edge, low, low + 1)
    c = torch.where(at_edge, low.to(c.dtype), c)
    frac = c - low.to(c.dtype)
    return low, high, frac, valid


def roi_align(
    features: torch.Tensor,
    boxes: torch.Tensor,
    batch_index: torch.Tensor | None = None,
    output_size: int = 7,
    stride: float = 1.0,
) -> torch.Tensor:
    """Pool ``K`` boxes from ``features`` (N x C x H x W) into K x C x R x R."""
    if features.dim() == 3:
        features = features[None]
    n, c, h, w = features.shape
    k = boxes.shape[0]
    if batch_index is None:
        batch_index = torch.zeros(k, dtype=torch.long)
    _check_boxes(boxes)
    if k == 0:
        return features.new_zeros(0, c, output_size, output_size)
    r = output_size
    ys = _axis_coords(boxes[:, 1], boxes[:, 3], h, stride, r)
    xs = _axis_coords(boxes[:, 0], boxes[:, 2], w, stride, r)
    y0, y1, ly, vy = _bilinear_axis(ys, h)
    x0, x1, lx, vx = _bilinear_axis(xs, w)
    flat = features.permute(0, 2, 3, 1).reshape(n * h * w, c)
    base = (batch_index.long() * h * w)[:, None, None]

    def gather(yi, xi):
        idx = base + yi[:, :, None] * w + xi[:, None, :]
        return flat[idx.reshape(-1)].reshape(k, r, r, c)

    ly = ly[:, :, None, None]
    lx = lx[:, None, :, None]
    hy, hx = 1 - ly, 1 - lx
    out = (
        hy * hx * gather(y0, x0)
        + hy * lx * gather(y0, x1)
        + ly * hx * gather(y1, x0)
        + ly * lx * gather(y1, x1)
    )
    valid = (vy[:, :, None] & vx[:, None, :])[..., None]
    out = out * valid.to(out.dtype)
    return out.permute(0, 3, 1, 2)


def assign_levels(boxes: torch.Tensor, strides=(4, 8, 16, 32), anchor_scale: float = 3.0) -> torch.Tensor:
    """Stride for each box: the level whose anchor side is closest in log scale.

    Equivalent to area thresholds at ``(anchor_scale * stride)**2 * 2``.
    """
    side = torch.sqrt(((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).clamp(min=1e-6))
    lvl = torch.round(torch.log2(side / anchor_scale))
    lo, hi = math.log2(min(strides)), math.log2(max(strides))
    return (2 ** lvl.clamp(lo, hi)).long()


def multilevel_roi_align(
    levels: dict[int, torch.Tensor],
    boxes: torch.Tensor,
    batch_index: torch.Tensor,
    output_size: int = 7,
    anchor_scale: float = 3.0,
) -> torch.Tensor:
    """Pool each box from the pyramid level chosen by :func:`assign_levels`."""
    strides = tuple(sorted(levels))
    any_level = levels[strides[0]]
    out = any_level.new_zeros(boxes.shape[0], any_level.shape[1], output_size, output_size)
    if boxes.shape[0] == 0:
        return out
    which = assign_levels(boxes, strides, anchor_scale)
    for s in strides:
        sel = torch.nonzero(which == s).flatten()
        if sel.numel():
            out = out.index_copy(0, sel, roi_align(levels[s], boxes[sel], batch_index[sel], output_size, s))
    return out
