"""Command-line entry point: ``totevision {gen-data,train,eval,retrieve,report}``.

Failures print one line ``error code=<n> kind=<ErrorClass> message=<text>``
to stderr and exit with the error's code (2 config, 3 data, 4 checkpoint,
5 numerical divergence).
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .config import RunConfig, apply_overrides, load_config, with_seed
from .data.datasets import build_datasets
from .errors import CheckpointError, ConfigError, DataError, ToteVisionError
from .ident import GalleryIndex, embed_query, retrieve
from .metrics import MetricsReport, plot_map_by_count
from .train import evaluate, load_model, make_task, train_task


def _run_config(config, overrides, seed, deterministic) -> RunConfig:
    run = apply_overrides(load_config(config), list(overrides))
    if seed is not None:
        run = with_seed(run, seed)
    if deterministic is not None:
        run = replace(run, train=replace(run.train, deterministic=deterministic))
    return run


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, sort_keys=True))


config_option = click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
                             help="YAML/JSON run config.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Override a config field, e.g. train.learning_rate=1e-3.")
seed_option = click.option("--seed", type=int, default=None, help="Seed for data, init and batching.")
det_option = click.option("--deterministic/--no-deterministic", default=None,
                          help="Single-threaded deterministic kernels.")
out_option = click.option("--out-dir", type=click.Path(file_okay=False), required=True)


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    """Synthetic tote vision: data generation, training, evaluation and reports."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("gen-data")
@config_option
@set_option
@seed_option
@det_option
@out_option
@click.option("--task", "tasks", multiple=True, type=click.Choice(["segmentation", "identification", "defect"]),
              help="Restrict to these tasks (default: all).")
def gen_data(config, overrides, seed, deterministic, out_dir, tasks):
    """Write train/val/test splits as PNG + sidecar files."""
    run = _run_config(config, overrides, seed, deterministic)
    tasks = tuple(tasks) or ("segmentation", "identification", "defect")
    try:
        built = build_datasets(run.dataset, out_dir, tasks)
    except OSError as e:
        raise DataError(f"cannot write dataset to {out_dir}: {e}") from None
    _emit({"status": "built" if built else "up-to-date", "path": str(out_dir),
           "fingerprint": run.dataset.fingerprint()})


@main.command()
@config_option
@set_option
@seed_option
@det_option
@out_option
def train(config, overrides, seed, deterministic, out_dir):
    """Train the configured task; writes best.npz, train_log.jsonl, result.json."""
    run = _run_config(config, overrides, seed, deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=1, sort_keys=True) + "\n")
    result = train_task(run, out)
    _emit(result.to_dict())


@main.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--data-dir", type=click.Path(file_okay=False), default=None,
              help="Read samples from a gen-data directory instead of regenerating them.")
@out_option
def eval_cmd(checkpoint, split, data_dir, out_dir):
    """Score a checkpoint; writes metrics_<task>.json and a prediction dump."""
    if not Path(checkpoint).exists():
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, run, _ = load_model(checkpoint)
    dump = out / f"predictions_{run.task}.jsonl"
    report = evaluate(checkpoint, split, dump_path=dump, data_dir=data_dir)
    path = out / f"metrics_{run.task}.json"
    report.save(path)
    if run.task == "identification":
        model, run, _ = load_model(checkpoint)
        if data_dir is not None:
            run = replace(run, train=replace(run.train, data_dir=data_dir))
        task = make_task(run)
        for name in ("test", "test_unseen") if split == "test" else (split,):
            task.gallery(model, task.split(name)).save(out / f"gallery_{name}.bin")
    _emit({"metrics": str(path), "predictions": str(dump), **report.metrics})


@main.command("retrieve")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--gallery", type=click.Path(dir_okay=False), required=True)
@click.option("--image", "images", multiple=True, required=True, type=click.Path(dir_okay=False),
              help="Query view(s): pre-pick first, then two post-pick views.")
@click.option("-k", "k", type=int, default=5, show_default=True)
@click.option("--allow", default=None, help="Comma-separated container manifest of identity ids.")
def retrieve_cmd(checkpoint, gallery, images, k, allow):
    """Rank gallery identities for one query."""
    if len(images) not in (1, 3):
        raise ConfigError(f"a query takes 1 or 3 images, got {len(images)}")
    if not Path(gallery).exists():
        raise DataError(f"gallery not found: {gallery}")
    model, _, _ = load_model(checkpoint, task="identification")
    views = []
    for p in images:
        if not Path(p).exists():
            raise DataError(f"query image not found: {p}")
        with Image.open(p) as im:
            views.append(np.asarray(im.convert("RGB")))
    index = GalleryIndex.load(gallery)
    allowed = [int(x) for x in allow.split(",") if x.strip()] if allow else None
    ranked = retrieve(embed_query(model, np.stack(views)), index, k, allowed)
    _emit({"ranked_ids": [i for i, _ in ranked], "scores": [s for _, s in ranked]})


@main.command()
@click.argument("metrics", nargs=-1, required=True, type=click.Path(dir_okay=False))
@out_option
def report(metrics, out_dir):
    """Render metric tables and the mAP-vs-instance-count plot from metrics_*.json files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for p in metrics:
        if not Path(p).exists():
            raise DataError(f"metrics file not found: {p}")
        try:
            reports.append(MetricsReport.load(p))
        except (KeyError, json.JSONDecodeError) as e:
            raise DataError(f"{p}: not a metrics report ({e})") from None
    written = []
    lines = []
    for r in sorted(reports, key=lambda r: r.task):
        lines.append(f"## {r.task}\n")
        lines.append("| metric | value |\n|---|---|")
        for name, value in _flat(r.metrics):
            lines.append(f"| {name} | {_fmt(value)} |")
        lines.append("")
        bins = r.bins.get("mAP50_by_instance_count")
        if bins:
            lines.append("| instances per image | mAP50 |\n|---|---|")
            lines += [f"| {k} | {_fmt(v)} |" for k, v in bins.items()]
            lines.append("")
            png = out / "map50_by_instance_count.png"
            plot_map_by_count(bins, png)
            written.append(str(png))
    table = out / "report.md"
    table.write_text("\n".join(lines) + "\n")
    written.append(str(table))
    _emit({"written": written})


def _flat(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flat(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def run(argv=None) -> int:
    """Entry point returning the process exit code instead of exiting."""
    try:
        main.main(args=argv, prog_name="totevision", standalone_mode=False)
    except ToteVisionError as e:
        click.echo(f"error code={e.exit_code} kind={type(e).__name__} message={_one_line(e)}", err=True)
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("error code=1 kind=Abort message=aborted", err=True)
        return 1
    except click.ClickException as e:
        click.echo(f"error code=2 kind=UsageError message={_one_line(e.format_message())}", err=True)
        return 2
    return 0


def _one_line(e) -> str:
    return " ".join(str(e).split())


def entry() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    entry()
