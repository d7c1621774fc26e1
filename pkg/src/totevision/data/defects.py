"""Transfer-frame pick samples and the two robot-induced defects."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .render import ObjectIdentity, Pose, background, rasterize, shade, to_uint8

NOMINAL = "nominal"
MULTI_PICK = "multi_pick"
PACKAGE_DEFECT = "package_defect"
DEFECT_LABELS = (NOMINAL, MULTI_PICK, PACKAGE_DEFECT)

# exposed packaging interior along a tear
INTERIOR_COLOR = np.array([0.93, 0.86, 0.70])


@dataclass
class PickSample:
    image: np.ndarray  # H x W x 3 uint8
    masks: np.ndarray  # G x H x W bool, one per object (or fragment group)
    identity_ids: list[int]
    label: str = NOMINAL
    background: np.ndarray | None = None  # float canvas without objects
    poses: tuple[Pose, ...] = ()


def make_pick_sample(ident: ObjectIdentity, seed: int, image_size: int = 64) -> PickSample:
    rng = np.random.default_rng([seed, 11])
    bg = background("bin", image_size, image_size, rng, float(rng.uniform(0.9, 1.1)))
    c = image_size / 2.0
    pose = Pose(
        cx=c + float(rng.uniform(-6, 6)),
        cy=c + float(rng.uniform(-6, 6)),
        size=float(rng.uniform(18, 26)) * image_size / 64,
        angle=float(rng.uniform(0, math.pi)),
        gain=float(rng.uniform(0.85, 1.15)),
    )
    canvas = bg.copy()
    m = rasterize(ident, pose, image_size, image_size)
    canvas[m] = shade(ident, pose, image_size, image_size)[m]
    return PickSample(to_uint8(canvas), m[None], [ident.id], NOMINAL, bg, (pose,))


def count_components(mask: np.ndarray) -> int:
    _, n = ndimage.label(mask)
    return int(n)


def inject_defect(
    sample: PickSample,
    label: str,
    catalog: list[ObjectIdentity] | dict[int, ObjectIdentity] | None = None,
    seed: int = 0,
) -> PickSample:
    """Return ``sample`` turned into a ``label`` sample; nominal passes through."""
    if label not in DEFECT_LABELS:
        raise ValueError(f"unknown defect label {label!r}")
    if label == NOMINAL:
        return sample
    rng = np.random.default_rng([seed, 13])
    if label == MULTI_PICK:
        return _multi_pick(sample, catalog, rng)
    return _package_defect(sample, catalog, rng)


def _lookup(catalog, ident_id):
    if isinstance(catalog, dict):
        return catalog[ident_id]
    return next(o for o in catalog if o.id == ident_id)


def _multi_pick(sample: PickSample, catalog, rng) -> PickSample:
    if not catalog:
        raise ValueError("multi_pick injection needs a catalog to draw the second object from")
    pool = [o for o in (catalog.values() if isinstance(catalog, dict) else catalog) if o.id not in sample.identity_ids]
    h, w = sample.image.shape[:2]
    occupied = sample.masks.any(axis=0)
    grown = ndimage.binary_dilation(occupied, iterations=1)
    for _ in range(200):
        other = pool[int(rng.integers(len(pool)))]
        pose = Pose(
            cx=float(rng.uniform(0.2 * w, 0.8 * w)),
            cy=float(rng.uniform(0.2 * h, 0.8 * h)),
            size=float(rng.uniform(14, 22)) * w / 64,
            angle=float(rng.uniform(0, math.pi)),
            gain=float(rng.uniform(0.85, 1.15)),
        )
        m = rasterize(other, pose, h, w)
        if m.sum() >= 20 and not (m & grown).any():
            img = sample.image.astype(np.float64) / 255.0
            img[m] = shade(other, pose, h, w)[m]
            return replace(
                sample,
                image=to_uint8(img),
                masks=np.concatenate([sample.masks, m[None]]),
                identity_ids=sample.identity_ids + [other.id],
                label=MULTI_PICK,
                poses=sample.poses + (pose,),
            )
    raise RuntimeError("could not place a second object in the transfer frame")


def _package_defect(sample: PickSample, catalog, rng) -> PickSample:
    """Tear the object along a line through its centre and pull the halves apart."""
    if sample.background is None or not sample.poses:
        raise ValueError("package_defect injection needs the sample's background and pose")
    h, w = sample.image.shape[:2]
    ident = _lookup(catalog, sample.identity_ids[0]) if catalog else None
    pose = sample.poses[0]
    obj = sample.masks[0]
    surface = (
        shade(ident, pose, h, w)
        if ident is not None
        else sample.image.astype(np.float64) / 255.0
    )
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(50):
        theta = float(rng.uniform(0, math.pi))
        nx, ny = math.cos(theta), math.sin(theta)
        side = (xs + 0.5 - pose.cx) * nx + (ys + 0.5 - pose.cy) * ny > float(rng.uniform(-2, 2))
        part_a, part_b = obj & ~side, obj & side
        if part_a.sum() < 10 or part_b.sum() < 10:
            continue
        gap = float(rng.uniform(3.0, 6.0))
        sx, sy = int(round(nx * gap)), int(round(ny * gap))
        moved = _shift(part_b, sx, sy)
        moved_rgb = _shift(surface, sx, sy)
        canvas = sample.background.copy()
        canvas[part_a] = surface[part_a]
        canvas[moved] = moved_rgb[moved]
        # torn edges show the packaging interior
        for part in (part_a, moved):
            edge = part & ~ndimage.binary_erosion(part, iterations=1)
            rim = edge & ndimage.binary_dilation(part_a if part is moved else moved, iterations=int(gap) + 2)
            canvas[rim] = INTERIOR_COLOR
        union = part_a | moved
        if moved.sum() >= 10 and count_components(union) >= 2:
            return replace(sample, image=to_uint8(canvas), masks=union[None], label=PACKAGE_DEFECT)
    raise RuntimeError("could not split the object into separate fragments")


def _shift(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(arr)
    h, w = arr.shape[:2]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = arr[ys_src, xs_src]
    return out
