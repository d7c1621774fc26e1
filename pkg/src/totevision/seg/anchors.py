from __future__ import annotations

import torch


def generate_anchors(grid_sizes: dict[int, tuple[int, int]], anchor_scale: float = 3.0, dtype=torch.float32):
    """One square anchor per cell per level, side ``anchor_scale * stride``.

    ``grid_sizes`` maps stride -> (H, W).  Returns stride -> (H*W) x 4,
    row-major over cells, centred on the cell centre in input pixels.
    """
    out = {}
    for stride, (h, w) in grid_sizes.items():
        ys = (torch.arange(h, dtype=dtype) + 0.5) * stride
        xs = (torch.arange(w, dtype=dtype) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        half = 0.5 * anchor_scale * stride
        out[stride] = torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1).reshape(-1, 4)
    return out
