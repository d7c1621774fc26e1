"""Training and evaluation for the three heads.

All tasks share one loop: AdamW with linear warmup then cosine decay,
a validation pass after every epoch, best-checkpoint retention and early
stopping once ``patience`` epochs pass without improvement.  Epochs are
numbered from 1, so a run always satisfies
``epochs_run <= best_epoch + patience + 1``.
"""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_weights, read_archive, save_checkpoint
from .config import RunConfig
from .data import datasets as ds
from .data.defects import DEFECT_LABELS
from .data.rle import rle_decode, rle_encode
from .defect import DefectModel, defect_loss, frame_pick, label_index, write_predictions
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .ident import GalleryIndex, IdentModel, build_gallery, contrastive_loss, l2_normalize, retrieve, write_rankings
from .imaging import as_image_batch
from .metrics import ImageResult, MetricsReport, average_precision, defect_metrics, map_by_instance_count, recall_at_k
from .seg.boxes import mask_to_box
from .seg.model import SegmentationModel, SegTarget

log = logging.getLogger(__name__)

EVAL_BATCH = 32


def set_deterministic(seed: int, enabled: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def warmup_cosine(total_steps: int, warmup_fraction: float):
    warmup = max(1, int(round(warmup_fraction * total_steps)))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return factor


def param_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    """No decay on biases, norms, embeddings tables of position/class and the temperature."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.dim() <= 1 or name.endswith(("pos_embed", "cls_token")):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def _chunks(seq: Sequence, size: int) -> list:
    return [seq[i : i + size] for i in range(0, len(seq), size)]


# ------------------------------------------------------------------- tasks


class Task:
    name = ""
    splits: tuple[str, ...] = ("train", "val", "test")

    def __init__(self, run: RunConfig, data: Mapping[str, list] | None = None):
        self.run = run
        self.data = dict(data) if data is not None else {}

    def split(self, name: str) -> list:
        if name not in self.data:
            self.data[name] = load_split(self.run, self.name, name)
        return self.data[name]

    def build_model(self) -> nn.Module:
        raise NotImplementedError

    def epoch_batches(self, epoch: int) -> list:
        train = self.split("train")
        order = np.random.default_rng([self.run.train.seed, epoch]).permutation(len(train))
        return _chunks([train[int(i)] for i in order], self.run.train.batch_size)

    def batch_loss(self, model, batch, generator) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def validate(self, model) -> tuple[float, float | None]:
        raise NotImplementedError

    def evaluate(self, model, split: str, dump_path=None) -> MetricsReport:
        raise NotImplementedError


class SegmentationTask(Task):
    name = "segmentation"

    def build_model(self):
        return SegmentationModel(self.run.backbone, self.run.seg_head)

    def batch_loss(self, model, batch, generator):
        x = as_image_batch(np.stack([s.image for s in batch]))
        targets = [SegTarget(torch.as_tensor(s.boxes, dtype=torch.float32), torch.from_numpy(s.masks)) for s in batch]
        out = model.losses(x, targets, generator)
        out["loss"] = sum(out.values())
        return out

    def predict(self, model, samples) -> list[ImageResult]:
        results = []
        model.eval()
        for chunk in _chunks(samples, EVAL_BATCH):
            preds = model.predict(as_image_batch(np.stack([s.image for s in chunk])))
            for s, p in zip(chunk, preds):
                results.append(
                    ImageResult(
                        np.array([q.score for q in p], dtype=np.float64),
                        [q.mask for q in p],
                        list(s.masks),
                    )
                )
        model.train()
        return results

    def validate(self, model):
        return average_precision(self.predict(model, self.split("val")), 0.5) or 0.0, None

    def evaluate(self, model, split="test", dump_path=None):
        samples = self.split(split)
        results = self.predict(model, samples)
        for i, r in enumerate(results):
            r.image_id = f"{split}-{i:05d}"
        if dump_path is not None:
            write_seg_dump(dump_path, results)
        return seg_report(results, self.run.fingerprint())


def seg_report(results: Sequence[ImageResult], fingerprint: str = "") -> MetricsReport:
    return MetricsReport(
        "segmentation",
        {"mAP50": average_precision(results, 0.5), "mAP75": average_precision(results, 0.75),
         "images": len(results), "instances": sum(r.num_gt for r in results)},
        {"mAP50_by_instance_count": map_by_instance_count(results, iou_threshold=0.5)},
        fingerprint,
    )


def write_seg_dump(path, results: Sequence[ImageResult]) -> None:
    """One line per predicted instance, plus one ``gt`` line per image."""
    with open(path, "w") as f:
        for r in results:
            f.write(json.dumps({"image_id": r.image_id, "gt": [rle_encode(m) for m in r.gt_masks]}) + "\n")
            for s, m in zip(r.scores, r.pred_masks):
                box = [int(v) for v in mask_to_box(m)] if m.any() else [0, 0, 0, 0]
                f.write(json.dumps({"image_id": r.image_id, "box": box, "mask": rle_encode(m), "score": float(s)}) + "\n")


def read_seg_dump(path) -> list[ImageResult]:
    images: dict[str, ImageResult] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        r = images.setdefault(rec["image_id"], ImageResult(np.zeros(0), [], [], rec["image_id"]))
        if "gt" in rec:
            r.gt_masks = [rle_decode(m) for m in rec["gt"]]
        else:
            r.scores = np.append(r.scores, rec["score"])
            r.pred_masks.append(rle_decode(rec["mask"]))
    return list(images.values())


class IdentificationTask(Task):
    name = "identification"
    splits = ("train", "val", "test", "test_unseen")

    def build_model(self):
        return IdentModel(self.run.backbone, self.run.ident_head)

    def epoch_batches(self, epoch):
        """Batches never hold two picks of the same identity."""
        by_id: dict[int, list] = {}
        for s in self.split("train"):
            by_id.setdefault(s.query.identity_id, []).append(s)
        rng = np.random.default_rng([self.run.train.seed, epoch])
        ids = sorted(by_id)
        rounds = max(len(v) for v in by_id.values())
        batches = []
        for j in rng.permutation(rounds):
            members = [by_id[i][j] for i in ids if j < len(by_id[i])]
            order = rng.permutation(len(members))
            batches += [b for b in _chunks([members[int(k)] for k in order], self.run.train.batch_size) if len(b) >= 2]
        return batches

    def batch_loss(self, model, batch, generator):
        refs = as_image_batch(np.stack([s.reference for s in batch]))
        queries = as_image_batch(np.stack([s.query.images for s in batch]))
        n, k = queries.shape[:2]
        cls = model.encode(torch.cat([refs, queries.reshape(n * k, *queries.shape[2:])]))
        r = l2_normalize(model.head.proj(cls[:n]))
        views = cls[n:].reshape(n, k, -1)
        q1 = l2_normalize(model.head.proj(views[:, 0]))
        q3 = model.fuse(views.reshape(n, -1))
        t = model.head.logit_scale
        out = {"single_view": contrastive_loss(q1, r, t) / 2, "fused": contrastive_loss(q3, r, t) / 2}
        out["loss"] = out["single_view"] + out["fused"]
        return out

    def gallery(self, model, samples) -> GalleryIndex:
        refs = {}
        for s in samples:
            refs.setdefault(s.query.identity_id, s.reference)
        ids = sorted(refs)
        return build_gallery(model, [refs[i] for i in ids], ids)

    def rank(self, model, samples, views: int, gallery: GalleryIndex, containers=None):
        model.eval()
        embs = []
        with torch.no_grad():
            for chunk in _chunks(samples, EVAL_BATCH):
                q = as_image_batch(np.stack([s.query.images[:views] for s in chunk]))
                embs.append(model.embed_query(q).numpy())
        model.train()
        embs = np.concatenate(embs)
        out = []
        for s, e in zip(samples, embs):
            allowed = containers[s.container] if containers is not None else None
            out.append(retrieve(e, gallery, None, allowed))
        return out

    def validate(self, model):
        val = self.split("val")
        ranked = self.rank(model, val, 1, self.gallery(model, val))
        return recall_at_k([[i for i, _ in r] for r in ranked], [s.query.identity_id for s in val], (1,))[1], None

    def evaluate(self, model, split="test", dump_path=None):
        splits = ("test", "test_unseen") if split == "test" else (split,)
        metrics: dict[str, Any] = {}
        dumps = []
        for name in splits:
            samples = self.split(name)
            gallery = self.gallery(model, samples)
            containers = {}
            for s in samples:
                containers.setdefault(s.container, set()).add(s.query.identity_id)
            truths = [s.query.identity_id for s in samples]
            key = "seen" if name in ("train", "val", "test") else "unseen"
            for views in (1, 3):
                ranked = self.rank(model, samples, views, gallery)
                metrics[f"{key}_n{views}"] = {
                    f"recall@{k}": v
                    for k, v in recall_at_k([[i for i, _ in r] for r in ranked], truths, (1, 5)).items()
                }
                boxed = self.rank(model, samples, views, gallery, containers)
                metrics[f"{key}_n{views}"]["recall@1_container"] = recall_at_k(
                    [[i for i, _ in r] for r in boxed], truths, (1,)
                )[1]
                dumps += [(f"{s.query.pick_id}/n{views}", r) for s, r in zip(samples, ranked)]
            metrics[f"{key}_identities"] = len(gallery)
            metrics[f"{key}_queries"] = len(samples)
        if dump_path is not None:
            write_rankings(dump_path, dumps)
        return MetricsReport("identification", metrics, {}, self.run.fingerprint())


class DefectTask(Task):
    name = "defect"

    def build_model(self):
        return DefectModel(self.run.backbone)

    def split(self, name):
        if name not in self.data:
            samples = load_split(self.run, self.name, name)
            hc = self.run.defect_head
            if hc.framing == "crop":
                samples = [replace(s, image=frame_pick(s.image, s.masks, hc.crop_margin)) for s in samples]
            if self.run.train.shuffle_labels and name in ("train", "val"):
                samples = shuffle_labels(samples, [self.run.train.seed, 31, ("train", "val").index(name)])
            self.data[name] = samples
        return self.data[name]

    def batch_loss(self, model, batch, generator):
        x = as_image_batch(np.stack([s.image for s in batch]))
        return {"loss": defect_loss(model(x), label_index(s.label for s in batch))}

    def logits(self, model, samples) -> torch.Tensor:
        model.eval()
        with torch.no_grad():
            out = torch.cat([model(as_image_batch(np.stack([s.image for s in c]))) for c in _chunks(samples, EVAL_BATCH)])
        model.train()
        return out

    def validate(self, model):
        val = self.split("val")
        logits = self.logits(model, val)
        loss = float(defect_loss(logits, label_index(s.label for s in val)))
        pred = [DEFECT_LABELS[int(i)] for i in logits.argmax(-1)]
        m = defect_metrics(pred, [s.label for s in val])["combined"]
        # recall alone is maximized by flagging everything; penalize false alarms
        return (m["recall"] or 0.0) - (m["fpr"] or 0.0), loss

    def evaluate(self, model, split="test", dump_path=None):
        samples = self.split(split)
        logits = self.logits(model, samples)
        probs = torch.softmax(logits, -1).double().numpy()
        pred = [DEFECT_LABELS[int(i)] for i in probs.argmax(-1)]
        labels = [s.label for s in samples]
        metrics: dict[str, Any] = defect_metrics(pred, labels)
        metrics["loss"] = float(defect_loss(logits, label_index(labels)))
        metrics["accuracy"] = float(np.mean([p == y for p, y in zip(pred, labels)]))
        metrics["samples"] = len(samples)
        if dump_path is not None:
            write_predictions(dump_path, [(f"{split}-{i:05d}", p) for i, p in enumerate(probs)])
        return MetricsReport("defect", metrics, {}, self.run.fingerprint(),
                             {"combined": "multi_pick and package_defect pooled as one positive class vs nominal"})


def shuffle_labels(samples: list, seed) -> list:
    labels = [s.label for s in samples]
    perm = np.random.default_rng(seed).permutation(len(labels))
    return [replace(s, label=labels[int(j)]) for s, j in zip(samples, perm)]


TASK_TYPES = {t.name: t for t in (SegmentationTask, IdentificationTask, DefectTask)}


def make_task(run: RunConfig, data=None) -> Task:
    return TASK_TYPES[run.task](run, data)


def load_split(run: RunConfig, task: str, split: str) -> list:
    """Samples of one split, from ``train.data_dir`` if set, else generated in memory."""
    cfg = run.dataset
    if run.train.data_dir:
        root = Path(run.train.data_dir)
        stamp = root / "dataset.json"
        if not stamp.exists():
            raise DataError(f"no dataset at {root} (missing {stamp.name}); run gen-data first")
        if json.loads(stamp.read_text()).get("fingerprint") != cfg.fingerprint():
            raise DataError(f"dataset at {root} was built from a different dataset config")
        loader = {"segmentation": ds.load_segmentation, "identification": ds.load_identification,
                  "defect": ds.load_defect}[task]
        return loader(root, split)
    if task == "segmentation":
        return ds.segmentation_split(cfg, split)
    if task == "identification":
        return ds.identification_split(cfg, split)
    return ds.defect_split(cfg, split)


# -------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    best_epoch: int
    best_metric: float
    best_loss: float | None
    epochs_run: int
    stopped: str
    seconds: float
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"checkpoint": str(self.checkpoint), "log": str(self.log_path), "best_epoch": self.best_epoch,
                "best_metric": self.best_metric, "best_loss": self.best_loss, "epochs_run": self.epochs_run,
                "stopped": self.stopped, "seconds": self.seconds}


def train_task(run: RunConfig, out_dir, data: Mapping[str, list] | None = None, initial_state=None) -> TrainResult:
    """Train ``run.task``; writes ``best.npz``, ``train_log.jsonl`` and ``result.json`` under ``out_dir``."""
    tc = run.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    set_deterministic(tc.seed, tc.deterministic)
    task = make_task(run, data)
    if tc.select_by == "loss" and run.task != "defect":
        raise ConfigError("select_by=loss is only available for the defect task")
    model = task.build_model()
    if initial_state is not None:
        model.load_state_dict(initial_state)
    batches = task.epoch_batches(1)
    if not batches:
        raise DataError("training split is empty")
    total_steps = tc.max_epochs * len(batches)
    opt = torch.optim.AdamW(param_groups(model, tc.weight_decay), lr=tc.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(total_steps, tc.warmup_fraction))
    generator = torch.Generator().manual_seed(tc.seed)

    log_path = out / "train_log.jsonl"
    ckpt_path = out / "best.npz"
    log_path.write_text("")
    history: list[dict] = []
    best_score, best_epoch, best_metric, best_loss = -math.inf, 0, float("nan"), None
    stopped = "max_epochs"
    start = time.perf_counter()
    epoch_times: list[float] = []
    step = 0
    for epoch in range(1, tc.max_epochs + 1):
        if tc.time_budget is not None and epoch_times:
            if time.perf_counter() - start + max(epoch_times) > tc.time_budget:
                stopped = "time_budget"
                break
        t0 = time.perf_counter()
        if epoch > 1:
            batches = task.epoch_batches(epoch)
        sums: dict[str, float] = {}
        model.train()
        for i, batch in enumerate(batches):
            parts = task.batch_loss(model, batch, generator)
            loss = parts["loss"]
            if not torch.isfinite(loss):
                detail = {k: float(v.detach()) for k, v in parts.items()}
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {i}: {detail}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if tc.grad_clip is not None:
                nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            sched.step()
            step += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
        metric, val_loss = task.validate(model)
        score = metric if tc.select_by == "metric" else -val_loss
        record = {
            "epoch": epoch,
            "step": step,
            "train": {k: v / len(batches) for k, v in sums.items()},
            "val_metric": metric,
            "val_loss": val_loss,
            "lr": opt.param_groups[0]["lr"],
            "seconds": time.perf_counter() - t0,
        }
        history.append(record)
        with open(log_path, "a") as f:
            f.write(json.dumps(record) + "\n")
        log.info("epoch %d loss %.4f val %.4f", epoch, record["train"]["loss"], metric)
        epoch_times.append(record["seconds"])
        if score > best_score:
            best_score, best_epoch, best_metric, best_loss = score, epoch, metric, val_loss
            save_checkpoint(ckpt_path, model, checkpoint_meta(run, epoch, metric, val_loss))
        elif epoch - best_epoch > tc.early_stop_patience:
            stopped = "patience"
            break
    result = TrainResult(ckpt_path, log_path, best_epoch, best_metric, best_loss, len(history), stopped,
                         time.perf_counter() - start, history)
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=1) + "\n")
    return result


def checkpoint_meta(run: RunConfig, epoch: int, metric: float, loss: float | None) -> dict:
    return {"task": run.task, "run": run.to_dict(), "epoch": epoch, "val_metric": metric, "val_loss": loss}


def load_model(path, task: str | None = None) -> tuple[nn.Module, RunConfig, dict]:
    meta, arrays = read_archive(path)
    if "run" not in meta or "task" not in meta:
        raise CheckpointError(f"{path}: not a training checkpoint")
    if task is not None and meta["task"] != task:
        raise CheckpointError(f"{path} holds a {meta['task']} model, not {task}")
    try:
        run = RunConfig.from_dict(meta["run"])
    except ConfigError as e:
        raise CheckpointError(f"{path}: embedded config is invalid: {e}") from None
    model = make_task(run).build_model()
    load_weights(model, arrays, path)
    model.eval()
    return model, run, meta


def evaluate(checkpoint, split: str = "test", data=None, dump_path=None, data_dir: str | None = None) -> MetricsReport:
    """Run the checkpoint's task on ``split`` and score it."""
    model, run, meta = load_model(checkpoint)
    if data_dir is not None:
        run = replace(run, train=replace(run.train, data_dir=data_dir))
    task = make_task(run, data)
    if split not in task.splits:
        raise ConfigError(f"{run.task} has no split {split!r}; expected one of {task.splits}")
    set_deterministic(run.train.seed, run.train.deterministic)
    report = task.evaluate(model, split, dump_path)
    report.notes["checkpoint_epoch"] = meta.get("epoch")
    return report


def validation_metric(checkpoint, data=None) -> float:
    """Recompute the metric used for model selection on the validation split."""
    model, run, _ = load_model(checkpoint)
    return make_task(run, data).validate(model)[0]


__all__ = [
    "TrainResult",
    "train_task",
    "evaluate",
    "load_model",
    "make_task",
    "load_split",
    "validation_metric",
    "set_deterministic",
    "warmup_cosine",
    "seg_report",
    "read_seg_dump",
    "write_seg_dump",
]
