"""Image array conversion shared by all heads."""

from __future__ import annotations

import numpy as np
import torch


def as_image_batch(images) -> torch.Tensor:
    """uint8 or float arrays (n x h x w x 3) -> float tensor in [0, 1]."""
    if isinstance(images, torch.Tensor):
        return images.float() / 255.0 if images.dtype == torch.uint8 else images
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        return torch.from_numpy(arr.astype(np.float32) / 255.0)
    return torch.from_numpy(arr.astype(np.float32))
