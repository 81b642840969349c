"""Domain-shift experiment: styleA supervised pairs, styleB unsupervised and validation images.

Trains a grid of (supervised size x lambda x seed) runs and writes one CSV
row per run and epoch with train/validation PSNR.
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .net import NetConfig
from .objective import LossWeights
from .rain import build_dataset, write_scenes
from .trainer import TrainConfig, read_metrics, train

log = logging.getLogger(__name__)

CSV_HEADER = ("size", "lambda", "seed", "epoch", "trainPsnr", "valPsnr")


@dataclass
class ShiftData:
    supervised: Path
    unsupervised: Path
    validation: Path


def make_shift_datasets(root, seed: int = 0, scenario: str = "sparse", scene_size: int = 96,
                        n_sup: int = 40, n_unsup: int = 40, n_val: int = 10) -> ShiftData:
    """Self-contained data for the experiment; each split uses its own scenes."""
    root = Path(root)
    splits = {
        "supervised": ("styleA", n_sup, 0),
        "unsupervised": ("styleB", n_unsup, 1),
        "validation": ("styleB", n_val, 2),
    }
    out = {}
    for name, (mode, count, k) in splits.items():
        scenes = root / "scenes" / name
        write_scenes(scenes, count, scene_size, seed * 10 + k)
        build_dataset(scenes, root / name, mode, scenario, count, seed * 10 + k + 100)
        out[name] = root / name
    return ShiftData(**out)


@dataclass
class GridSpec:
    sizes: Sequence[int] = (500, 5000)
    lambdas: Sequence[float] = (0.0, 0.2, 1.0)
    seeds: int = 3
    base: TrainConfig = field(default_factory=lambda: TrainConfig(
        patch_size=32, epochs=6, lr_decay_every=2, net=NetConfig(), weights=LossWeights()))


def run_dir(out, size: int, lam: float, seed: int) -> Path:
    return Path(out) / "runs" / f"size{size}_lambda{lam:g}_seed{seed}"


def run_grid(out, grid: GridSpec, data: Optional[ShiftData] = None, base_seed: int = 0,
             progress=None) -> tuple[list[dict], list[dict]]:
    """Train every grid cell; a failing cell is logged and skipped.

    Returns ``(rows, failures)``; ``rows`` also lands in ``summary.csv``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = make_shift_datasets(out / "data", seed=base_seed)
    rows, failures = [], []
    for size in grid.sizes:
        for lam in grid.lambdas:
            for s in range(grid.seeds):
                cfg = replace(
                    grid.base,
                    supervised_dir=str(data.supervised),
                    unsupervised_dir=str(data.unsupervised),
                    validation_dir=str(data.validation),
                    out_dir=str(run_dir(out, size, lam, s)),
                    supervised_patches=int(size),
                    unsupervised_patches=int(size),
                    seed=base_seed + s,
                    weights=replace(grid.base.weights, lam=float(lam)),
                )
                try:
                    _, records = train(cfg)
                except Exception as exc:  # keep the rest of the grid going
                    log.error("run size=%s lambda=%s seed=%s failed: %s", size, lam, s, exc)
                    failures.append({"size": size, "lambda": lam, "seed": s, "error": repr(exc),
                                     "traceback": traceback.format_exc()})
                    continue
                for r in records:
                    rows.append({"size": int(size), "lambda": float(lam), "seed": s, "epoch": r["epoch"],
                                 "trainPsnr": r["trainPsnr"], "valPsnr": r["valPsnr"]})
                if progress is not None:
                    progress(size, lam, s, records)
                write_summary(out / "summary.csv", rows)
    write_summary(out / "summary.csv", rows)
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=1) + "\n")
    return rows, failures


def write_summary(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"size": int(r["size"]), "lambda": float(r["lambda"]), "seed": int(r["seed"]),
                 "epoch": int(r["epoch"]), "trainPsnr": float(r["trainPsnr"]), "valPsnr": float(r["valPsnr"])}
                for r in csv.DictReader(fh)]


def final_rows(rows: list[dict]) -> list[dict]:
    last = max(r["epoch"] for r in rows)
    return [r for r in rows if r["epoch"] == last]


def mean_final(rows: list[dict], size: int, lam: float, key: str = "valPsnr") -> float:
    vals = [r[key] for r in final_rows(rows) if r["size"] == size and r["lambda"] == lam]
    return float(np.mean(vals)) if vals else float("nan")
