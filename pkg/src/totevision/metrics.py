"""Evaluation: mask AP, AP by instance count, recall@k, defect confusion rates."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data.defects import DEFECT_LABELS, MULTI_PICK, NOMINAL, PACKAGE_DEFECT

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_matrix(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> np.ndarray:
    """P x G mask IoU, vectorized over flattened masks."""
    if len(pred_masks) == 0 or len(gt_masks) == 0:
        return np.zeros((len(pred_masks), len(gt_masks)))
    p = np.stack([np.asarray(m, dtype=bool).ravel() for m in pred_masks]).astype(np.float64)
    g = np.stack([np.asarray(m, dtype=bool).ravel() for m in gt_masks]).astype(np.float64)
    if p.shape[1] != g.shape[1]:
        raise ValueError("prediction and ground-truth masks differ in shape")
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass
class ImageResult:
    """Predictions and ground truth for one image."""

    scores: np.ndarray  # P
    pred_masks: list  # P masks (H x W bool)
    gt_masks: list  # G masks
    image_id: str = ""

    @property
    def num_gt(self) -> int:
        return len(self.gt_masks)


def greedy_match(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Match rows (already in score order) to columns; returns column index or -1.

    Each prediction takes the unmatched GT of highest IoU, provided it
    reaches ``threshold``.
    """
    matched = np.full(ious.shape[0], -1, dtype=np.int64)
    taken = np.zeros(ious.shape[1], dtype=bool)
    for i in range(ious.shape[0]):
        best = -1
        for j in range(ious.shape[1]):
            if taken[j] or ious[i, j] < threshold:
                continue
            if best < 0 or ious[i, j] > ious[i, best]:
                best = j
        if best >= 0:
            taken[best] = True
            matched[i] = best
    return matched


def interpolated_ap(tp_sorted: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a score-ordered true-positive flag array."""
    if tp_sorted.size == 0:
        return 0.0
    tp = np.cumsum(tp_sorted)
    fp = np.cumsum(~tp_sorted)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at this recall or beyond
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    return float(np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0).mean())


def average_precision(results: Iterable[ImageResult], iou_threshold: float = 0.5) -> float | None:
    """AP over a set of images for the single foreground class.

    Predictions from all images are ranked together by score (ties keep
    input order); each is matched greedily within its own image.  Returns
    None when there is no ground truth and no prediction.
    """
    results = list(results)
    num_gt = sum(r.num_gt for r in results)
    scores, flags = [], []
    for r in results:
        s = np.asarray(r.scores, dtype=np.float64)
        if s.size == 0:
            continue
        order = np.argsort(-s, kind="mergesort")
        ious = iou_matrix([r.pred_masks[i] for i in order], r.gt_masks)
        matched = greedy_match(ious, iou_threshold)
        scores.append(s[order])
        flags.append(matched >= 0)
    if num_gt == 0:
        return None if not scores else 0.0
    if not scores:
        return 0.0
    scores = np.concatenate(scores)
    flags = np.concatenate(flags)
    order = np.argsort(-scores, kind="mergesort")
    return interpolated_ap(flags[order], num_gt)


def map_by_instance_count(results: Sequence[ImageResult], bins=None, iou_threshold: float = 0.5) -> dict:
    """AP within bins of ground-truth instance count.

    ``bins`` is a list of (lo, hi) inclusive ranges; by default one bin per
    observed count.  Empty bins and bins with undefined AP are omitted.
    Output keys are bin labels in ascending order.
    """
    counts = sorted({r.num_gt for r in results})
    if bins is None:
        bins = [(c, c) for c in counts]
    out = {}
    for lo, hi in sorted(bins):
        members = [r for r in results if lo <= r.num_gt <= hi]
        if not members:
            continue
        ap = average_precision(members, iou_threshold)
        if ap is None:
            continue
        out[str(lo) if lo == hi else f"{lo}-{hi}"] = ap
    return out


def recall_at_k(rankings: Sequence[Sequence[int]], truths: Sequence[int], ks=(1, 5)) -> dict[int, float]:
    if len(rankings) != len(truths):
        raise ValueError("one ranking per query is required")
    for k in ks:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
    if not rankings:
        raise ValueError("no queries to score")
    hits = {}
    for k in ks:
        hits[int(k)] = sum(int(t in list(r)[:k]) for r, t in zip(rankings, truths)) / len(truths)
    return hits


def _rates(tp: int, fp: int, fn: int, tn: int) -> dict[str, float | None]:
    return {
        "precision": tp / (tp + fp) if tp + fp else None,
        "recall": tp / (tp + fn) if tp + fn else None,
        "fpr": fp / (fp + tn) if fp + tn else None,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
    }


def defect_metrics(predictions: Sequence[str], labels: Sequence[str]) -> dict[str, dict]:
    """One-vs-rest rates per defect class plus ``combined`` (any defect vs nominal).

    Undefined ratios (zero denominators) are None.
    """
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    for v in list(predictions) + list(labels):
        if v not in DEFECT_LABELS:
            raise ValueError(f"unknown defect label {v!r}")
    p = np.asarray(predictions, dtype=object)
    y = np.asarray(labels, dtype=object)
    out = {}
    for cls in (MULTI_PICK, PACKAGE_DEFECT):
        out[cls] = _rates(
            int(np.sum((p == cls) & (y == cls))),
            int(np.sum((p == cls) & (y != cls))),
            int(np.sum((p != cls) & (y == cls))),
            int(np.sum((p != cls) & (y != cls))),
        )
    pd, yd = p != NOMINAL, y != NOMINAL
    out["combined"] = _rates(
        int(np.sum(pd & yd)), int(np.sum(pd & ~yd)), int(np.sum(~pd & yd)), int(np.sum(~pd & ~yd))
    )
    return out


@dataclass
class MetricsReport:
    task: str
    metrics: dict
    bins: dict = field(default_factory=dict)
    fingerprint: str = ""
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, v in _flatten(self.metrics):
            if v is None:
                continue
            if not math.isfinite(v):
                raise ValueError(f"metric {name} is not finite: {v}")

    def to_dict(self) -> dict:
        return {"task": self.task, "metrics": self.metrics, "bins": self.bins,
                "fingerprint": self.fingerprint, "notes": self.notes}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        return cls(d["task"], d["metrics"], d.get("bins", {}), d.get("fingerprint", ""), d.get("notes", {}))


def _flatten(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, Mapping):
            yield from _flatten(v, f"{prefix}{k}.")
        elif isinstance(v, (int, float)) or v is None:
            yield f"{prefix}{k}", v


def plot_map_by_count(bins: Mapping[str, float], path, title: str = "mAP50 vs instances per image") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = list(bins)
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=120)
    ax.plot(range(len(labels)), [bins[k] for k in labels], marker="o")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlabel("object instances per image")
    ax.set_ylabel("mAP50")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


__all__ = [
    "mask_iou",
    "iou_matrix",
    "ImageResult",
    "greedy_match",
    "interpolated_ap",
    "average_precision",
    "map_by_instance_count",
    "recall_at_k",
    "defect_metrics",
    "MetricsReport",
    "plot_map_by_count",
]
