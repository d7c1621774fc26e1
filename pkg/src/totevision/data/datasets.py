"""Train/val/test splits for the three tasks, in memory or on disk.

On-disk layout::

    {root}/dataset.json                  config + content fingerprint
    {root}/manifest.json                 identity catalog, identity splits, containers
    {root}/{split}/{task}/{sample_id}.png
    {root}/{split}/{task}/{sample_id}.gt  JSON sidecar (RLE masks, boxes, ids, labels)

Identification samples are stored as one 4-view strip per pick:
reference | pre-pick | post-pick 1 | post-pick 2.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from ..errors import ConfigError, DataError
from .defects import DEFECT_LABELS, PickSample, inject_defect, make_pick_sample
from .picks import PickTriplet, QueryBundle, generate_pick_triplet
from .render import ObjectIdentity, make_catalog
from .rle import rle_decode, rle_encode
from .scenes import SceneSample, generate_scene, regime_spec

log = logging.getLogger(__name__)

TASKS = ("segmentation", "identification", "defect")
SPLITS = ("train", "val", "test")
_TASK_CODE = {t: i for i, t in enumerate(TASKS)}
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2, "test_unseen": 3}


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    image_size: int = 64
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # segmentation
    seg_scenes: int = 1000
    seg_max_objects: int = 8
    seg_regime: str = "mixed"
    seg_catalog_size: int = 200
    # identification
    seen_identities: int = 64
    unseen_identities: int = 32
    picks_per_identity: dict = field(default_factory=lambda: {"train": 16, "val": 2, "test": 4})
    container_size: int = 8
    view_jitter: float = 1.0
    # defect: samples per class in each split (balanced)
    defect_per_class: dict = field(default_factory=lambda: {"train": 300, "val": 50, "test": 100})
    defect_catalog_size: int = 96

    def __post_init__(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {self.split_ratios}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d) -> "DatasetConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown dataset config keys: {sorted(extra)}")
        d = dict(d)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def derive_seed(base_seed: int, task: str, split: str, index: int) -> int:
    ss = np.random.SeedSequence([base_seed, _TASK_CODE[task], _SPLIT_CODE[split], index])
    return int(ss.generate_state(1)[0])


def split_counts(total: int, ratios) -> dict[str, int]:
    n_train = int(round(total * ratios[0]))
    n_val = int(round(total * ratios[1]))
    return {"train": n_train, "val": n_val, "test": total - n_train - n_val}


# ---------------------------------------------------------------- catalogs


def seg_catalog(cfg: DatasetConfig) -> dict[int, ObjectIdentity]:
    return {o.id: o for o in make_catalog(cfg.seg_catalog_size, cfg.seed + 101)}


def ident_catalog(cfg: DatasetConfig) -> tuple[list[ObjectIdentity], list[ObjectIdentity]]:
    """(seen, unseen) identities; ids are disjoint by construction."""
    every = make_catalog(cfg.seen_identities + cfg.unseen_identities, cfg.seed + 202)
    return every[: cfg.seen_identities], every[cfg.seen_identities :]


def defect_catalog(cfg: DatasetConfig) -> list[ObjectIdentity]:
    return make_catalog(cfg.defect_catalog_size, cfg.seed + 303)


def containers(identity_ids, size: int, seed: int) -> dict[str, list[int]]:
    """Partition identities into totes of ``size`` (container manifests)."""
    ids = np.random.default_rng([seed, 17]).permutation(np.asarray(identity_ids))
    return {f"tote-{i:03d}": sorted(int(x) for x in ids[j : j + size]) for i, j in enumerate(range(0, len(ids), size))}


# ------------------------------------------------------------- generators


def segmentation_split(cfg: DatasetConfig, split: str, regime: str | None = None) -> list[SceneSample]:
    catalog = seg_catalog(cfg)
    n = split_counts(cfg.seg_scenes, cfg.split_ratios)[split]
    pool = sorted(catalog)
    out = []
    for i in range(n):
        seed = derive_seed(cfg.seed, "segmentation", split, i)
        spec = regime_spec(regime or cfg.seg_regime, seed, pool, cfg.seg_max_objects, cfg.image_size)
        out.append(generate_scene(spec, catalog))
    return out


@dataclass
class IdentSample:
    reference: np.ndarray
    query: QueryBundle
    container: str


def identification_split(cfg: DatasetConfig, split: str) -> list[IdentSample]:
    """``split`` is train/val/test (seen identities) or test_unseen."""
    seen, unseen = ident_catalog(cfg)
    idents = unseen if split == "test_unseen" else seen
    per = cfg.picks_per_identity["test" if split == "test_unseen" else split]
    boxes = containers([o.id for o in idents], cfg.container_size, cfg.seed + _SPLIT_CODE[split])
    where = {i: name for name, members in boxes.items() for i in members}
    clutter = seen + unseen
    out = []
    for ident in idents:
        for j in range(per):
            index = ident.id * 1000 + j
            seed = derive_seed(cfg.seed, "identification", split, index)
            trip = generate_pick_triplet(
                ident, seed, cfg.view_jitter, cfg.image_size, clutter, pick_id=f"{split}-{ident.id:04d}-{j:03d}"
            )
            out.append(IdentSample(trip.reference, trip.query, where[ident.id]))
    return out


def defect_split(cfg: DatasetConfig, split: str, per_class: int | None = None) -> list[PickSample]:
    """Balanced defect samples; ``per_class`` overrides the ratio-derived count."""
    catalog = defect_catalog(cfg)
    n = per_class if per_class is not None else cfg.defect_per_class[split]
    out = []
    for i in range(n * len(DEFECT_LABELS)):
        label = DEFECT_LABELS[i % len(DEFECT_LABELS)]
        seed = derive_seed(cfg.seed, "defect", split, i)
        ident = catalog[int(np.random.default_rng([seed, 19]).integers(len(catalog)))]
        base = make_pick_sample(ident, seed, cfg.image_size)
        out.append(inject_defect(base, label, catalog, seed))
    return out


# -------------------------------------------------------------- disk I/O


def _write_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(image).save(path, format="PNG", optimize=False)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _write_gt(path: Path, record: dict) -> None:
    path.write_text(json.dumps(record, sort_keys=True) + "\n")


def write_segmentation(root: Path, split: str, samples: list[SceneSample]) -> None:
    d = root / split / "segmentation"
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        sid = f"{split}-{i:05d}"
        _write_png(d / f"{sid}.png", s.image)
        _write_gt(
            d / f"{sid}.gt",
            {
                "sample_id": sid,
                "boxes": s.boxes.tolist(),
                "masks": [rle_encode(m) for m in s.masks],
                "identity_ids": list(s.identity_ids),
                "poses": [asdict(p) for p in s.poses],
            },
        )


def write_identification(root: Path, split: str, samples: list[IdentSample]) -> None:
    d = root / split / "identification"
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        sid = s.query.pick_id
        strip = np.concatenate([s.reference, *s.query.images], axis=1)
        _write_png(d / f"{sid}.png", strip)
        _write_gt(
            d / f"{sid}.gt",
            {"sample_id": sid, "identity_id": s.query.identity_id, "container": s.container,
             "views": ["reference", "pre_pick", "post_pick_1", "post_pick_2"]},
        )


def write_defect(root: Path, split: str, samples: list[PickSample]) -> None:
    d = root / split / "defect"
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        sid = f"{split}-{i:05d}"
        _write_png(d / f"{sid}.png", s.image)
        _write_gt(
            d / f"{sid}.gt",
            {"sample_id": sid, "label": s.label, "identity_ids": list(s.identity_ids),
             "masks": [rle_encode(m) for m in s.masks]},
        )


def _records(root: Path, split: str, task: str) -> Iterator[tuple[np.ndarray, dict]]:
    d = Path(root) / split / task
    if not d.is_dir():
        raise DataError(f"missing dataset directory {d}")
    for gt in sorted(d.glob("*.gt")):
        yield _read_png(gt.with_suffix(".png")), json.loads(gt.read_text())


def load_segmentation(root, split: str) -> list[SceneSample]:
    out = []
    for img, rec in _records(root, split, "segmentation"):
        masks = np.stack([rle_decode(r) for r in rec["masks"]])
        out.append(SceneSample(img, masks, np.asarray(rec["boxes"], dtype=np.int64), rec["identity_ids"]))
    return out


def load_identification(root, split: str) -> list[IdentSample]:
    out = []
    for strip, rec in _records(root, split, "identification"):
        views = np.stack(np.split(strip, 4, axis=1))
        out.append(IdentSample(views[0], QueryBundle(views[1:], rec["sample_id"], rec["identity_id"]), rec["container"]))
    return out


def load_defect(root, split: str) -> list[PickSample]:
    out = []
    for img, rec in _records(root, split, "defect"):
        masks = np.stack([rle_decode(r) for r in rec["masks"]])
        out.append(PickSample(img, masks, rec["identity_ids"], rec["label"]))
    return out


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    return json.loads(path.read_text())


def build_datasets(cfg: DatasetConfig, root, tasks=TASKS) -> bool:
    """Write all splits under ``root``.  Returns False when already up to date."""
    root = Path(root)
    stamp = root / "dataset.json"
    want = {"config": cfg.to_dict(), "fingerprint": cfg.fingerprint(), "tasks": list(tasks)}
    if stamp.exists():
        try:
            have = json.loads(stamp.read_text())
        except json.JSONDecodeError:
            have = None
        if have == want:
            log.info("dataset at %s is up to date (%s)", root, cfg.fingerprint())
            return False
    root.mkdir(parents=True, exist_ok=True)
    seen, unseen = ident_catalog(cfg)
    manifest = {
        "segmentation_catalog": [o.to_dict() for o in seg_catalog(cfg).values()],
        "identification": {
            "seen": [o.to_dict() for o in seen],
            "unseen": [o.to_dict() for o in unseen],
            "containers": {
                split: containers(
                    [o.id for o in (unseen if split == "test_unseen" else seen)],
                    cfg.container_size,
                    cfg.seed + _SPLIT_CODE[split],
                )
                for split in ("train", "val", "test", "test_unseen")
            },
        },
        "defect_catalog": [o.to_dict() for o in defect_catalog(cfg)],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    for split in SPLITS:
        if "segmentation" in tasks:
            write_segmentation(root, split, segmentation_split(cfg, split))
        if "identification" in tasks:
            write_identification(root, split, identification_split(cfg, split))
        if "defect" in tasks:
            write_defect(root, split, defect_split(cfg, split))
    if "identification" in tasks:
        write_identification(root, "test_unseen", identification_split(cfg, "test_unseen"))
    stamp.write_text(json.dumps(want, sort_keys=True, indent=1) + "\n")
    return True


def file_hashes(root) -> dict[str, str]:
    root = Path(root)
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


__all__ = [
    "DatasetConfig",
    "IdentSample",
    "PickTriplet",
    "build_datasets",
    "defect_split",
    "identification_split",
    "segmentation_split",
    "load_segmentation",
    "load_identification",
    "load_defect",
    "load_manifest",
    "file_hashes",
    "derive_seed",
    "split_counts",
]
