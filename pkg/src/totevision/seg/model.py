"""Instance segmentation: backbone -> simple pyramid -> RPN -> cascade -> masks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..backbone import Backbone, BackboneConfig
from ..errors import ConfigError
from ..imaging import as_image_batch
from ..pyramid import SimplePyramid, levels_nchw
from .anchors import generate_anchors
from .boxes import batched_nms
from .cascade import BoxHead, CascadeStageConfig, cascade_refine, match_boxes, refine_boxes
from .losses import mask_loss, rpn_losses, stage_losses, subsample
from .masks import MaskHead, mask_targets, paste_masks
from .roi import multilevel_roi_align
from .rpn import RPNHead, select_proposals

OBJECT_CLASS = 1


@dataclass(frozen=True)
class SegHeadConfig:
    pyramid_channels: int = 64
    anchor_scale: float = 3.0
    roi_size: int = 7
    rpn_pre_nms_top_k: int = 400
    rpn_nms_threshold: float = 0.7
    proposals: int = 100
    rpn_batch_per_image: int | None = 128
    roi_batch_per_image: int | None = 64
    roi_positive_fraction: float = 0.25
    box_hidden: int = 128
    mask_hidden: int = 32
    score_threshold: float = 0.05
    test_nms_threshold: float = 0.5
    max_per_image: int = 50
    stages: CascadeStageConfig = field(default_factory=CascadeStageConfig)

    @property
    def mask_size(self) -> int:
        return 2 * self.roi_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = {k: [list(x) if isinstance(x, tuple) else x for x in v] for k, v in d["stages"].items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SegHeadConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown segmentation head keys: {sorted(extra)}")
        d = dict(d)
        if "stages" in d and not isinstance(d["stages"], CascadeStageConfig):
            st = d["stages"]
            d["stages"] = CascadeStageConfig(
                iou_thresholds=tuple(st["iou_thresholds"]),
                box_weights=tuple(tuple(w) for w in st["box_weights"]),
            )
        return cls(**d)


@dataclass
class InstancePrediction:
    box: tuple[float, float, float, float]
    mask: np.ndarray
    score: float
    class_id: int = OBJECT_CLASS


@dataclass
class SegTarget:
    boxes: torch.Tensor  # G x 4
    masks: torch.Tensor  # G x H x W, bool


class SegmentationModel(nn.Module):
    def __init__(self, backbone_config: BackboneConfig | None = None, head_config: SegHeadConfig | None = None):
        super().__init__()
        self.backbone_config = backbone_config or BackboneConfig()
        self.head_config = hc = head_config or SegHeadConfig()
        self.backbone = Backbone(self.backbone_config)
        c = hc.pyramid_channels
        self.pyramid = SimplePyramid(self.backbone_config.embed_dim, c)
        self.rpn = RPNHead(c)
        self.stage_heads = nn.ModuleList(
            [BoxHead(c, hc.roi_size, hc.box_hidden) for _ in range(hc.stages.num_stages)]
        )
        self.mask_head = MaskHead(c, hc.mask_hidden)
        size = self.backbone_config.image_size
        grids = {s: (size // s, size // s) for s in (4, 8, 16, 32)}
        anchors = generate_anchors(grids, hc.anchor_scale)
        self.register_buffer("anchors", torch.cat([anchors[s] for s in sorted(anchors)]), persistent=False)

    @property
    def image_size(self) -> int:
        return self.backbone_config.image_size

    def features(self, images: torch.Tensor) -> dict[int, torch.Tensor]:
        _, fm = self.backbone(images)
        return levels_nchw(self.pyramid(fm))

    def _pool(self, levels, size=None):
        size = size or self.head_config.roi_size

        def pool(boxes, batch_index):
            return multilevel_roi_align(levels, boxes, batch_index, size, self.head_config.anchor_scale)

        return pool

    def proposals(self, levels, logits, deltas):
        hc = self.head_config
        return select_proposals(
            logits,
            deltas,
            self.anchors.to(logits.dtype),
            self.image_size,
            top_k=hc.proposals,
            pre_nms_top_k=hc.rpn_pre_nms_top_k,
            nms_threshold=hc.rpn_nms_threshold,
        )

    def losses(self, images: torch.Tensor, targets: Sequence[SegTarget], generator=None) -> dict[str, torch.Tensor]:
        hc = self.head_config
        levels = self.features(images)
        logits, deltas = self.rpn(levels)
        anchors = self.anchors.to(logits.dtype)
        gts = [t.boxes.to(logits.dtype) for t in targets]
        out = {}
        out["rpn_objectness"], out["rpn_box"] = rpn_losses(
            logits, deltas, anchors, gts, hc.rpn_batch_per_image, generator
        )

        # first-stage rois: proposals plus the GT boxes themselves, subsampled
        props = self.proposals(levels, logits, deltas)
        rois, bidx = [], []
        thr0 = hc.stages.iou_thresholds[0]
        for i, ((boxes, _), gt) in enumerate(zip(props, gts)):
            boxes = torch.cat([boxes, gt])
            idx, _ = match_boxes(boxes, gt, thr0)
            labels = (idx >= 0).long()
            pos, neg = subsample(labels, hc.roi_batch_per_image, hc.roi_positive_fraction, generator)
            keep = torch.cat([pos, neg])
            rois.append(boxes[keep])
            bidx.append(torch.full((keep.numel(),), i, dtype=torch.long))
        rois = torch.cat(rois)
        bidx = torch.cat(bidx)

        pool = self._pool(levels)
        boxes = rois
        for t, (head, coder, thr) in enumerate(zip(self.stage_heads, hc.stages.coders(), hc.stages.iou_thresholds)):
            labels, matched, _ = self._match_per_image(boxes, bidx, gts, thr)
            cls_logits, box_deltas = head(pool(boxes, bidx))
            out[f"stage{t}_cls"], out[f"stage{t}_box"] = stage_losses(
                cls_logits, box_deltas, boxes, matched, labels, coder
            )
            boxes = refine_boxes(coder, boxes, box_deltas, self.image_size)

        # mask head trains on refined boxes that still overlap a GT at the loosest threshold
        labels, _, gt_index = self._match_per_image(boxes, bidx, gts, thr0)
        pos = torch.nonzero(labels == 1).flatten()
        if pos.numel():
            gt_masks = torch.stack([targets[int(bidx[p])].masks[int(gt_index[p])] for p in pos])
            tgt = mask_targets(gt_masks, boxes[pos], hc.mask_size)
            logits_m = self.mask_head(pool(boxes[pos], bidx[pos]))
            out["mask"] = mask_loss(logits_m, tgt)
        else:
            out["mask"] = sum(p.sum() for p in self.mask_head.parameters()) * 0.0
        return out

    def _match_index(self, boxes, bidx, gts, thr):
        index = torch.full((boxes.shape[0],), -1, dtype=torch.long)
        for i, gt in enumerate(gts):
            sel = torch.nonzero(bidx == i).flatten()
            if sel.numel():
                idx, _ = match_boxes(boxes[sel], gt, thr)
                index[sel] = idx
        return index

    def _match_per_image(self, boxes, bidx, gts, thr):
        index = self._match_index(boxes, bidx, gts, thr)
        labels = (index >= 0).long()
        matched = boxes.detach().clone()
        for i, gt in enumerate(gts):
            sel = torch.nonzero((bidx == i) & (index >= 0)).flatten()
            if sel.numel():
                matched[sel] = gt[index[sel]]
        return labels, matched, index

    @torch.no_grad()
    def predict(self, images: torch.Tensor, score_threshold: float | None = None) -> list[list[InstancePrediction]]:
        hc = self.head_config
        thr = hc.score_threshold if score_threshold is None else score_threshold
        levels = self.features(images)
        logits, deltas = self.rpn(levels)
        props = self.proposals(levels, logits, deltas)
        rois = torch.cat([p[0] for p in props])
        bidx = torch.cat([torch.full((p[0].shape[0],), i, dtype=torch.long) for i, p in enumerate(props)])
        pool = self._pool(levels)
        results: list[list[InstancePrediction]] = [[] for _ in range(images.shape[0])]
        if rois.shape[0] == 0:
            return results
        boxes, scores, _ = cascade_refine(self.stage_heads, hc.stages, pool, rois, bidx, self.image_size)
        keep = torch.nonzero(scores >= thr).flatten()
        boxes, scores, bidx = boxes[keep], scores[keep], bidx[keep]
        keep = batched_nms(boxes, scores, bidx, hc.test_nms_threshold)
        boxes, scores, bidx = boxes[keep], scores[keep], bidx[keep]
        per_image = []
        for i in range(images.shape[0]):
            sel = torch.nonzero(bidx == i).flatten()
            sel = sel[torch.argsort(-scores[sel], stable=True)][: hc.max_per_image]
            per_image.append(sel)
        sel = torch.cat(per_image)
        if sel.numel() == 0:
            return results
        masks = paste_masks(self.mask_head(pool(boxes[sel], bidx[sel])), boxes[sel], self.image_size)
        for j, s in enumerate(sel.tolist()):
            results[int(bidx[s])].append(
                InstancePrediction(
                    box=tuple(float(v) for v in boxes[s]),
                    mask=masks[j].numpy(),
                    score=float(scores[s]),
                )
            )
        return results


def segment(model: SegmentationModel, image, score_threshold: float | None = None) -> list[InstancePrediction]:
    """Instances for a single ``h x w x 3`` image (numpy uint8/float or tensor)."""
    x = as_image_batch(image[None] if np.ndim(image) == 3 else image)
    return model.predict(x.to(next(model.parameters()).dtype), score_threshold)[0]


__all__ = [
    "SegmentationModel",
    "SegHeadConfig",
    "SegTarget",
    "InstancePrediction",
    "segment",
    "as_image_batch",
]
