"""Training objective for the cascade detector.

Objectness and per-stage classification use cross-entropy, box terms use
smooth-L1 on coder-normalized deltas, the mask term is per-pixel binary
cross-entropy inside matched boxes.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .boxes import BoxCoder, box_iou

SMOOTH_L1_BETA = 1.0 / 9.0


def label_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor, pos_iou=0.7, neg_iou=0.3):
    """1 positive, 0 negative, -1 ignored; plus matched GT index per anchor.

    Each GT's best anchor(s) are positive even below ``pos_iou``.
    """
    n = anchors.shape[0]
    if gt_boxes.numel() == 0:
        return torch.zeros(n, dtype=torch.long), torch.zeros(n, dtype=torch.long)
    iou = box_iou(anchors, gt_boxes)
    best, idx = iou.max(dim=1)
    labels = torch.full((n,), -1, dtype=torch.long)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    per_gt = iou.max(dim=0).values
    is_best = (iou == per_gt[None, :]) & (per_gt[None, :] > 0)
    labels[is_best.any(dim=1)] = 1
    return labels, idx


def subsample(labels: torch.Tensor, batch_size: int | None, positive_fraction: float, generator=None):
    """Random subset of labelled entries; ``None`` keeps all non-ignored ones."""
    pos = torch.nonzero(labels >= 1).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    if batch_size is None:
        return pos, neg
    n_pos = min(pos.numel(), int(batch_size * positive_fraction))
    n_neg = min(neg.numel(), batch_size - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return pos, neg


def rpn_losses(logits, deltas, anchors, gt_boxes_list, batch_size_per_image=128, generator=None):
    """Returns ``(objectness_loss, box_loss)`` averaged over sampled anchors."""
    coder = BoxCoder()
    obj_terms, box_terms, count = [], [], 0
    for i, gt in enumerate(gt_boxes_list):
        labels, idx = label_anchors(anchors, gt)
        pos, neg = subsample(labels, batch_size_per_image, 0.5, generator)
        sel = torch.cat([pos, neg])
        target = torch.cat([torch.ones(pos.numel()), torch.zeros(neg.numel())]).to(logits.dtype)
        obj_terms.append(F.binary_cross_entropy_with_logits(logits[i, sel], target, reduction="sum"))
        if pos.numel():
            tgt = coder.encode(anchors[pos], gt[idx[pos]])
            box_terms.append(F.smooth_l1_loss(deltas[i, pos], tgt, beta=SMOOTH_L1_BETA, reduction="sum"))
        count += sel.numel()
    count = max(count, 1)
    obj = torch.stack(obj_terms).sum() / count
    box = torch.stack(box_terms).sum() / count if box_terms else deltas.sum() * 0.0
    return obj, box


def stage_losses(class_logits, deltas, rois, matched_gt_boxes, labels, coder: BoxCoder):
    """Cross-entropy over {background, object} plus smooth-L1 on positives.

    ``labels`` is 1 for rois matched at this stage's IoU threshold else 0;
    ``matched_gt_boxes`` only matters where ``labels == 1``.
    """
    cls = F.cross_entropy(class_logits, labels)
    pos = torch.nonzero(labels == 1).flatten()
    if pos.numel() == 0:
        return cls, deltas.sum() * 0.0
    tgt = coder.encode(rois[pos], matched_gt_boxes[pos])
    box = F.smooth_l1_loss(deltas[pos], tgt, beta=SMOOTH_L1_BETA, reduction="sum") / max(labels.numel(), 1)
    return cls, box


def mask_loss(mask_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if mask_logits.shape[0] == 0:
        return mask_logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(mask_logits, targets.to(mask_logits.dtype))
