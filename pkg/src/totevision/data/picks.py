"""Pick events for identification: a canonical reference plus query views."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .render import ObjectIdentity, Pose, background, paint, to_uint8


@dataclass
class QueryBundle:
    images: np.ndarray  # k x H x W x 3 uint8, k in {1, 3}; pre-pick first
    pick_id: str
    identity_id: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] not in (1, 3):
            raise ValueError(f"a query bundle holds 1 or 3 images, got shape {self.images.shape}")

    def single(self) -> "QueryBundle":
        return QueryBundle(self.images[:1], self.pick_id, self.identity_id)


@dataclass
class PickTriplet:
    reference: np.ndarray  # H x W x 3 uint8
    query: QueryBundle
    object_masks: np.ndarray  # 4 x H x W: reference, pre-pick, post-pick 1, post-pick 2


def canonical_pose(ident: ObjectIdentity, image_size: int) -> Pose:
    c = image_size / 2.0
    return Pose(cx=c, cy=c, size=_view_size(ident, image_size), angle=0.0, gain=1.0)


def _view_size(ident: ObjectIdentity, image_size: int) -> float:
    # the object fills roughly half the crop
    return image_size * 0.5 * (1.0 + 0.25 * (ident.size_range[1] - ident.size_range[0]) / ident.size_range[1])


def reference_view(ident: ObjectIdentity, image_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    canvas = np.full((image_size, image_size, 3), 0.86)
    m = paint(canvas, ident, canonical_pose(ident, image_size))
    return to_uint8(canvas), m


def _view(ident, image_size, rng, jitter, style, clutter=(), shift=4):
    base = canonical_pose(ident, image_size)
    dx, dy = (int(v) for v in rng.integers(-shift, shift + 1, size=2))
    pose = Pose(
        cx=base.cx + dx,
        cy=base.cy + dy,
        size=base.size * float(1.0 + jitter * rng.uniform(-0.2, 0.2)),
        angle=float(jitter * rng.uniform(-math.pi, math.pi)),
        gain=float(1.0 + jitter * rng.uniform(-0.25, 0.25)),
    )
    canvas = background(style, image_size, image_size, rng, float(1.0 + jitter * rng.uniform(-0.1, 0.1)))
    for other in clutter:
        # neighbours peek in from the crop border, under the target
        side = rng.integers(4)
        off = image_size * 0.55
        cx, cy = [(0.5 - off / image_size, 0.5), (0.5 + off / image_size, 0.5),
                  (0.5, 0.5 - off / image_size), (0.5, 0.5 + off / image_size)][int(side)]
        p = Pose(cx * image_size + rng.uniform(-6, 6), cy * image_size + rng.uniform(-6, 6),
                 _view_size(other, image_size), float(rng.uniform(0, math.pi)), pose.gain)
        paint(canvas, other, p)
    m = paint(canvas, ident, pose)
    return to_uint8(canvas), m


def generate_pick_triplet(
    ident: ObjectIdentity,
    seed: int,
    jitter: float = 1.0,
    image_size: int = 64,
    clutter_pool: list[ObjectIdentity] | None = None,
    pick_id: str | None = None,
) -> PickTriplet:
    """Reference = canonical view; pre-pick = in-tote crop; post-picks = re-posed, re-lit views."""
    rng = np.random.default_rng([seed, 5])
    ref, ref_mask = reference_view(ident, image_size)
    clutter = []
    if clutter_pool and jitter > 0:
        others = [o for o in clutter_pool if o.id != ident.id]
        n = int(round(2 * jitter * rng.uniform()))
        clutter = [others[int(i)] for i in rng.choice(len(others), size=min(n, len(others)), replace=False)]
    pre, pre_mask = _view(ident, image_size, rng, jitter, "tote", clutter)
    post1, m1 = _view(ident, image_size, rng, jitter, "bin")
    post2, m2 = _view(ident, image_size, rng, jitter, "bin")
    bundle = QueryBundle(np.stack([pre, post1, post2]), pick_id or f"pick-{ident.id}-{seed}", ident.id)
    return PickTriplet(ref, bundle, np.stack([ref_mask, pre_mask, m1, m2]))

