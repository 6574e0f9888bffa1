"""Config-driven experiment runner, sweep driver and report emitter.

Every run gets its own directory keyed on (config fingerprint, seed) holding
the resolved-config snapshot, metric logs, checkpoints and a summary record,
so any result can be traced back to the exact recipe that produced it.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import (
    ExperimentConfig,
    config_fingerprint,
    load_config_file,
    resolve_config,
    save_config_snapshot,
)
from .errors import ConfigError, DabenchError, RunCollisionError
from .training import run_experiment

logger = logging.getLogger(__name__)

OUT_ROOT_ENV = "DABENCH_OUT_ROOT"

SWEEP_AXES = ("algorithm", "batch_size", "backbone", "scenario")

SUMMARY_COLUMNS = ("algorithm", "scenario", "backbone", "batch_size", "seed",
                   "best_accuracy", "best_epoch")


@dataclass
class RunManifest:
    config_path: str | None
    config: ExperimentConfig
    out_dir: Path
    fingerprint: str


@dataclass
class RunResult:
    status: str  # "ok" | "error"
    out_dir: str
    summary: dict | None = None
    error: str | None = None


def default_out_root(out_root=None) -> Path:
    if out_root:
        return Path(out_root)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _run_dir_name(cfg: ExperimentConfig, fingerprint: str) -> str:
    return f"{cfg.algorithm}_{cfg.scenario.describe()}_s{cfg.seed}_{fingerprint[:12]}"


def prepare_run_dir(cfg: ExperimentConfig, out_root, overwrite: bool) -> RunManifest:
    fingerprint = config_fingerprint(cfg)
    out_dir = default_out_root(out_root) / _run_dir_name(cfg, fingerprint)
    if (out_dir / "config.yaml").exists() and not overwrite:
        raise RunCollisionError(
            f"{out_dir} already holds a run with this config fingerprint and seed; "
            "pass overwrite to redo it"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    return RunManifest(config_path=None, config=cfg, out_dir=out_dir, fingerprint=fingerprint)


def _load_raw(config_source) -> dict:
    if isinstance(config_source, (str, Path)):
        return load_config_file(config_source)
    if isinstance(config_source, dict):
        return dict(config_source)
    raise ConfigError("config: expected a path or a mapping")


def cmd_run(config_source, out_root=None, seed: int | None = None,
            overwrite: bool = False) -> RunResult:
    """Resolve the config, claim an output directory, run the experiment.

    Invalid configs raise ConfigError with the offending field named; runtime
    aborts leave the partial metric log plus an error.json in place.
    """
    raw = _load_raw(config_source)
    raw.pop("sweep", None)
    if out_root is None:
        out_root = raw.pop("output_root", None)
    else:
        raw.pop("output_root", None)
    raw.pop("name", None)
    if seed is not None:
        raw["seed"] = seed
    cfg = resolve_config(raw)
    manifest = prepare_run_dir(cfg, out_root, overwrite)
    save_config_snapshot(cfg, manifest.out_dir / "config.yaml")
    try:
        summary = run_experiment(cfg, manifest.out_dir)
    except Exception as exc:  # keep partial artifacts, record the failure
        record = {"error": str(exc), "type": type(exc).__name__,
                  "traceback": traceback.format_exc()}
        with open(manifest.out_dir / "error.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2)
        logger.error("run failed in %s: %s", manifest.out_dir, exc)
        return RunResult(status="error", out_dir=str(manifest.out_dir), error=str(exc))
    return RunResult(status="ok", out_dir=str(manifest.out_dir), summary=summary)


def _sweep_cells(raw: dict) -> list[dict]:
    sweep = raw.get("sweep") or {}
    if not isinstance(sweep, dict) or not sweep:
        raise ConfigError("sweep: config needs a non-empty 'sweep' mapping")
    axes = []
    for axis, values in sweep.items():
        if axis not in SWEEP_AXES:
            raise ConfigError(f"sweep: axis must be one of {SWEEP_AXES}, got {axis!r}")
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"sweep.{axis}: needs a non-empty list of values")
        axes.append((axis, list(values)))
    cells = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        cell = {k: v for k, v in raw.items() if k != "sweep"}
        for (axis, _), value in zip(axes, combo):
            cell[axis] = value
        cells.append(cell)
    return cells


def _run_cell(args):
    cell, out_root, overwrite = args
    try:
        return cmd_run(cell, out_root=out_root, overwrite=overwrite)
    except DabenchError as exc:
        # a bad cell (invalid config, collision) must not kill the sweep
        return RunResult(status="error", out_dir="", error=str(exc))


def cmd_sweep(config_source, out_root=None, overwrite: bool = False,
              parallel: int = 1) -> dict:
    """One run per cell of the cartesian product of the sweep axes.

    Cell failures are recorded and the sweep continues. Returns the summary
    rows and writes sweep_summary.tsv (plus sweep_errors.txt when needed).
    """
    raw = _load_raw(config_source)
    if out_root is None:
        out_root = raw.get("output_root")
    cells = _sweep_cells(raw)
    jobs = [(cell, out_root, overwrite) for cell in cells]
    if parallel > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(max_workers=parallel,
                                 mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]

    rows, failures = [], []
    for cell, result in zip(cells, results):
        if result.status == "ok":
            s = result.summary
            rows.append({k: s[k] for k in SUMMARY_COLUMNS})
        else:
            failures.append({"cell": cell, "error": result.error,
                             "out_dir": result.out_dir})
    root = default_out_root(out_root)
    root.mkdir(parents=True, exist_ok=True)
    table_path = root / "sweep_summary.tsv"
    write_table(table_path, SUMMARY_COLUMNS, rows)
    if failures:
        with open(root / "sweep_errors.txt", "w", encoding="utf-8") as fh:
            for f in failures:
                fh.write(json.dumps(f) + "\n")
        logger.warning("sweep: %d of %d cells failed", len(failures), len(cells))
    return {"rows": rows, "failures": failures, "table": str(table_path),
            "cells": len(cells)}


def write_table(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(row[c]) for c in columns) + "\n")


def read_table(path) -> list[dict]:
    """Read back a table emitted by :func:`write_table`, restoring numbers."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = []
        for line in fh:
            values = line.rstrip("\n").split("\t")
            row = {}
            for key, value in zip(header, values):
                row[key] = _parse_cell(value)
            rows.append(row)
    return rows


def _parse_cell(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def read_metric_log(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.is_file():
        raise DabenchError(f"{run_dir} has no metrics.jsonl")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def cmd_report(run_dirs, out_dir) -> dict:
    """Accuracy-vs-epoch curves, a best-accuracy table and (when logged)
    divergence curves for a set of finished runs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series, table_rows, skipped = [], [], []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        try:
            rows = read_metric_log(run_dir)
            with open(run_dir / "summary.json", encoding="utf-8") as fh:
                summary = json.load(fh)
        except Exception as exc:
            skipped.append({"run_dir": str(run_dir), "error": str(exc)})
            logger.warning("report: skipping %s (%s)", run_dir, exc)
            continue
        clean = [r for r in rows if _finite_row(r)]
        if len(clean) < len(rows):
            logger.warning("report: %s has %d non-finite metric rows, excluded",
                           run_dir, len(rows) - len(clean))
        series.append((run_dir.name, clean))
        table_rows.append({k: summary[k] for k in SUMMARY_COLUMNS})

    files = []
    if series:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for name, rows in series:
            ax.plot([r["epoch"] for r in rows], [r["target_accuracy"] for r in rows],
                    marker="o", markersize=2.5, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("target accuracy")
        ax.legend(fontsize=7)
        fig.tight_layout()
        acc_path = out_dir / "accuracy_vs_epoch.png"
        fig.savefig(acc_path, dpi=130)
        plt.close(fig)
        files.append(str(acc_path))

        if any("a_distance" in r for _, rows in series for r in rows):
            fig, ax = plt.subplots(figsize=(7, 4.5))
            for name, rows in series:
                pts = [(r["epoch"], r["a_distance"]) for r in rows if "a_distance" in r]
                if pts:
                    ax.plot(*zip(*pts), marker="o", markersize=2.5, label=name)
            ax.set_xlabel("epoch")
            ax.set_ylabel("proxy A-distance")
            ax.legend(fontsize=7)
            fig.tight_layout()
            ad_path = out_dir / "a_distance_vs_epoch.png"
            fig.savefig(ad_path, dpi=130)
            plt.close(fig)
            files.append(str(ad_path))

    table_path = out_dir / "report_summary.tsv"
    write_table(table_path, SUMMARY_COLUMNS, table_rows)
    files.append(str(table_path))
    return {"files": files, "skipped": skipped}


def _finite_row(row: dict) -> bool:
    for key in ("train_loss_total", "train_loss_ce", "train_loss_da", "target_accuracy"):
        v = row.get(key)
        if v is None or v != v:  # NaN
            return False
    return True


def load_run(run_dir):
    """Rebuild (config, model) from a run directory's snapshot + checkpoint."""
    import yaml

    from .models import build_model, load_checkpoint
    from .training import build_scenario_data

    run_dir = Path(run_dir)
    with open(run_dir / "config.yaml", encoding="utf-8") as fh:
        snapshot = yaml.safe_load(fh)
    snapshot.pop("fingerprint", None)
    cfg = resolve_config(_snapshot_to_raw(snapshot))
    data = build_scenario_data(cfg)
    model = build_model(cfg.backbone, cfg.bottleneck, data.num_classes,
                        with_discriminator=cfg.algorithm == "dann")
    ckpt = run_dir / "best.pt"
    if not ckpt.exists():
        ckpt = run_dir / "final.pt"
    load_checkpoint(ckpt, model)
    return cfg, model, data


def _snapshot_to_raw(snapshot: dict) -> dict:
    """Config snapshots store nested dataclass dicts; feed them back through
    resolve_config by flattening the scenario block."""
    raw = dict(snapshot)
    scenario = raw.get("scenario") or {}
    if isinstance(scenario, dict):
        flat = {k: v for k, v in scenario.items() if k != "synthetic"}
        if scenario.get("synthetic"):
            flat.update(scenario["synthetic"])
        raw["scenario"] = flat
    return raw


def cmd_export_features(run_dir, out_path=None) -> str:
    from .evaluation import export_features

    run_dir = Path(run_dir)
    cfg, model, data = load_run(run_dir)
    out_path = Path(out_path) if out_path else run_dir / "features.txt"
    export_features(model, {"source": data.source_eval, "target": data.target_eval},
                    out_path)
    return str(out_path)


def cmd_grad_cam(run_dir, image_path, class_index: int, layer: str,
                 out_path=None) -> str:
    """Heatmap for one image using a finished run's checkpoint."""
    import numpy as np
    import torch
    from PIL import Image

    from .data import PreprocessSpec, preprocess
    from .models import grad_cam, upsample_heatmap

    run_dir = Path(run_dir)
    cfg, model, data = load_run(run_dir)
    if cfg.scenario.kind != "image-folder":
        raise ConfigError("grad-cam needs an image-folder run (spatial backbone)")
    pspec = data.target_eval.spec
    with Image.open(image_path) as img:
        arr = preprocess(img, pspec, "eval", cfg.seed)
    tensor = torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)
    heatmap = grad_cam(model, tensor, class_index, layer)
    full = upsample_heatmap(heatmap, arr.shape[0], arr.shape[1])
    out_path = Path(out_path) if out_path else run_dir / "grad_cam.npy"
    if str(out_path).endswith(".npy"):
        np.save(out_path, full)
    else:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots()
        ax.imshow(full, cmap="jet")
        ax.axis("off")
        fig.savefig(out_path, bbox_inches="tight", dpi=130)
        plt.close(fig)
    return str(out_path)
