"""Tote scenes: several objects dropped on a textured tote floor.

Objects are placed one at a time; a later object occludes earlier ones.
A placement is rejected if it would hide more than ``occlusion_max`` of any
earlier object's area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, UnplaceableSceneError
from .render import ObjectIdentity, Pose, background, paint, rasterize, to_uint8

MAX_ATTEMPTS = 60
# identity size ranges are in pixels of a 64 px canvas; larger canvases scale them
REFERENCE_CANVAS = 64
REGIMES = ("mixed", "zoomed_out", "same_object")


@dataclass(frozen=True)
class SceneSpec:
    identity_ids: tuple[int, ...]
    count: int
    seed: int
    occlusion_max: float = 0.3
    lighting_jitter: float = 0.15
    background: str = "tote"
    scale: float = 1.0
    min_size: float = 6.0
    image_size: int = 64

    def __post_init__(self):
        if self.count < 1:
            raise DataError("a scene needs at least one object")
        if not 0.0 <= self.occlusion_max <= 0.5:
            raise DataError(f"occlusion_max must lie in [0, 0.5], got {self.occlusion_max}")
        if not self.identity_ids:
            raise DataError("scene has no identities to place")


@dataclass
class SceneSample:
    image: np.ndarray  # H x W x 3 uint8
    masks: np.ndarray  # G x H x W bool, visible part of each instance
    boxes: np.ndarray  # G x 4 int, (x1, y1, x2, y2) pixel edges
    identity_ids: list[int]
    poses: list[Pose] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.identity_ids)


def _box(mask: np.ndarray) -> list[int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return [int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1]


def generate_scene(spec: SceneSpec, catalog: dict[int, ObjectIdentity]) -> SceneSample:
    rng = np.random.default_rng([spec.seed, 2])
    size = spec.image_size
    if len(spec.identity_ids) >= spec.count:
        ids = list(spec.identity_ids[: spec.count])
    else:
        ids = [int(i) for i in rng.choice(spec.identity_ids, size=spec.count)]
    try:
        idents = [catalog[i] for i in ids]
    except KeyError as e:
        raise DataError(f"identity {e.args[0]} is not in the catalog") from None

    j = spec.lighting_jitter
    scene_gain = float(rng.uniform(1 - j, 1 + j))
    canvas = background(spec.background, size, size, rng, scene_gain)
    full: list[np.ndarray] = []
    visible: list[np.ndarray] = []
    poses: list[Pose] = []
    for ident in idents:
        for _ in range(MAX_ATTEMPTS):
            lo, hi = ident.size_range
            obj_size = max(spec.min_size, float(rng.uniform(lo, hi)) * spec.scale * size / REFERENCE_CANVAS)
            margin = obj_size * 0.3
            pose = Pose(
                cx=float(rng.uniform(margin, size - margin)),
                cy=float(rng.uniform(margin, size - margin)),
                size=obj_size,
                angle=float(rng.uniform(0, math.pi)),
                gain=scene_gain * float(rng.uniform(0.92, 1.08)),
            )
            m = rasterize(ident, pose, size, size)
            if m.sum() < 4:
                continue
            trial = [v & ~m for v in visible]
            if all(t.sum() >= (1 - spec.occlusion_max) * f.sum() and t.any() for t, f in zip(trial, full)):
                visible = trial + [m]
                full.append(m)
                poses.append(pose)
                break
        else:
            raise UnplaceableSceneError(
                f"could not place object {len(poses) + 1}/{spec.count} (seed {spec.seed}) within "
                f"{MAX_ATTEMPTS} attempts"
            )
    for ident, pose, m in zip(idents, poses, full):
        paint(canvas, ident, pose, m)
    masks = np.stack(visible)
    boxes = np.array([_box(m) for m in masks], dtype=np.int64)
    return SceneSample(to_uint8(canvas), masks, boxes, ids, poses)


def regime_spec(regime: str, seed: int, identity_pool, max_objects: int = 8, image_size: int = 64) -> SceneSpec:
    """Scene description for one of the three tote regimes.

    ``mixed``: 1..max_objects distinct identities.  ``zoomed_out``: same,
    objects at 0.6 scale.  ``same_object``: one identity repeated with
    tighter packing.
    """
    rng = np.random.default_rng([seed, 3])
    pool = np.asarray(identity_pool)
    if regime in ("mixed", "zoomed_out"):
        count = int(rng.integers(1, max_objects + 1))
        ids = tuple(int(i) for i in rng.choice(pool, size=min(count, len(pool)), replace=False))
        return SceneSpec(ids, count, seed, scale=1.0 if regime == "mixed" else 0.6, image_size=image_size)
    if regime == "same_object":
        count = int(rng.integers(2, max_objects + 1))
        return SceneSpec((int(rng.choice(pool)),), count, seed, occlusion_max=0.45, image_size=image_size)
    raise DataError(f"unknown regime {regime!r}; expected one of {REGIMES}")
