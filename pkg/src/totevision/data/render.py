"""Rasterization of flat 2-D "objects" with exact pixel masks.

A pixel ``(row, col)`` is inside a shape when its centre
``(col + 0.5, row + 0.5)`` passes the analytic inside test, so masks are
reproducible bit for bit and need no anti-aliasing.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass

import numpy as np

SHAPES = ("ellipse", "rectangle", "polygon")
TEXTURES = ("stripes", "checker", "plain")


@dataclass(frozen=True)
class ObjectIdentity:
    id: int
    shape: str
    color: tuple[float, float, float]
    texture_seed: int
    size_range: tuple[float, float] = (10.0, 22.0)
    aspect: float = 1.0
    sides: int = 0

    def key(self) -> tuple:
        return (self.shape, tuple(round(c, 6) for c in self.color), self.texture_seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ObjectIdentity":
        return cls(
            id=int(d["id"]),
            shape=d["shape"],
            color=tuple(d["color"]),
            texture_seed=int(d["texture_seed"]),
            size_range=tuple(d["size_range"]),
            aspect=float(d["aspect"]),
            sides=int(d["sides"]),
        )


@dataclass(frozen=True)
class Pose:
    cx: float
    cy: float
    size: float
    angle: float = 0.0
    gain: float = 1.0


@dataclass(frozen=True)
class TextureParams:
    kind: str
    frequency: float
    direction: float
    amplitude: float
    phase: float


def texture_params(texture_seed: int) -> TextureParams:
    rng = np.random.default_rng([texture_seed, 7])
    return TextureParams(
        kind=TEXTURES[int(rng.integers(len(TEXTURES)))],
        frequency=float(rng.uniform(0.8, 2.0)),
        direction=float(rng.uniform(0, math.pi)),
        amplitude=float(rng.uniform(0.15, 0.35)),
        phase=float(rng.uniform(0, 2 * math.pi)),
    )


def make_catalog(count: int, seed: int = 0, size_range=(10.0, 22.0), start_id: int = 0) -> list[ObjectIdentity]:
    """``count`` identities with unique (shape, color, texture) triples."""
    rng = np.random.default_rng([seed, 1013])
    out: list[ObjectIdentity] = []
    seen: set[tuple] = set()
    while len(out) < count:
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        h = float(rng.uniform(0, 1))
        s = float(rng.uniform(0.55, 1.0))
        v = float(rng.uniform(0.55, 1.0))
        color = tuple(float(c) for c in colorsys.hsv_to_rgb(h, s, v))
        ident = ObjectIdentity(
            id=start_id + len(out),
            shape=shape,
            color=color,
            texture_seed=int(rng.integers(2**31 - 1)),
            size_range=tuple(float(x) for x in size_range),
            aspect=float(rng.uniform(0.55, 1.0)),
            sides=int(rng.choice([3, 5, 6])) if shape == "polygon" else 0,
        )
        if ident.key() in seen:
            continue
        seen.add(ident.key())
        out.append(ident)
    return out


def pixel_grid(height: int, width: int):
    ys, xs = np.mgrid[0:height, 0:width]
    return xs + 0.5, ys + 0.5


def object_frame(ident: ObjectIdentity, pose: Pose, height: int, width: int):
    """Pixel centres in the object's rotated frame, in units of the half-size."""
    px, py = pixel_grid(height, width)
    dx, dy = px - pose.cx, py - pose.cy
    c, s = math.cos(pose.angle), math.sin(pose.angle)
    a = pose.size / 2.0
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / (a * ident.aspect)
    return u, v


def rasterize(ident: ObjectIdentity, pose: Pose, height: int, width: int) -> np.ndarray:
    u, v = object_frame(ident, pose, height, width)
    return inside(ident, u, v)


def inside(ident: ObjectIdentity, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if ident.shape == "ellipse":
        return u * u + v * v <= 1.0
    if ident.shape == "rectangle":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if ident.shape == "polygon":
        k = ident.sides
        apothem = math.cos(math.pi / k)
        ok = np.ones(u.shape, dtype=bool)
        for i in range(k):
            phi = 2 * math.pi * i / k + math.pi / k
            ok &= u * math.cos(phi) + v * math.sin(phi) <= apothem
        return ok
    raise ValueError(f"unknown shape {ident.shape!r}")


def shade(ident: ObjectIdentity, pose: Pose, height: int, width: int) -> np.ndarray:
    """Full-canvas RGB of the object's surface (valid where the mask is set)."""
    u, v = object_frame(ident, pose, height, width)
    tp = texture_params(ident.texture_seed)
    if tp.kind == "stripes":
        t = 1.0 + tp.amplitude * np.sin(
            2 * math.pi * tp.frequency * (u * math.cos(tp.direction) + v * math.sin(tp.direction)) + tp.phase
        )
    elif tp.kind == "checker":
        f = 2.0 * tp.frequency
        t = 1.0 + tp.amplitude * np.sign(np.sin(math.pi * f * u) * np.sin(math.pi * f * v))
    else:
        t = np.ones_like(u)
    rgb = np.asarray(ident.color)[None, None, :] * t[..., None] * pose.gain
    return np.clip(rgb, 0.0, 1.0)


def paint(canvas: np.ndarray, ident: ObjectIdentity, pose: Pose, mask: np.ndarray | None = None) -> np.ndarray:
    """Draw the object over ``canvas`` (float H x W x 3) in place; returns its mask."""
    h, w = canvas.shape[:2]
    m = rasterize(ident, pose, h, w) if mask is None else mask
    if m.any():
        canvas[m] = shade(ident, pose, h, w)[m]
    return m


BACKGROUNDS = ("tote", "plain", "bin")


def background(style: str, height: int, width: int, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    if style == "plain":
        img = np.full((height, width, 3), 0.86)
    elif style in ("tote", "bin"):
        base = np.array([0.40, 0.38, 0.35]) if style == "tote" else np.array([0.28, 0.32, 0.38])
        base = base * rng.uniform(0.9, 1.1)
        coarse = rng.normal(0, 0.03, size=(height // 8 + 1, width // 8 + 1, 1))
        coarse = np.kron(coarse, np.ones((8, 8, 1)))[:height, :width]
        img = base[None, None, :] + coarse + rng.normal(0, 0.015, size=(height, width, 3))
        wall = max(2, height // 24)
        img[:wall] *= 0.7
        img[-wall:] *= 0.7
        img[:, :wall] *= 0.7
        img[:, -wall:] *= 0.7
    else:
        raise ValueError(f"unknown background style {style!r}; expected one of {BACKGROUNDS}")
    return np.clip(img * gain, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
