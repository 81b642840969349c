"""Training loop: per-epoch EM refresh of the residual mixture, then Adam steps.

Each epoch

1. fits the mixture (a few EM rounds) to residual pixels of a random subset
   of unsupervised patches,
2. walks the supervised patches in shuffled batches, pairing each with an
   unsupervised batch, and takes one Adam step per pair,
3. records train/validation PSNR and writes a checkpoint.

Everything random draws from named ``numpy`` generators whose states are
checkpointed, so a resumed run continues bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import gmm as gmm_mod
from .gmm import GmmParams, SynGaussian
from .imaging import PatchBatch, extract_patches, load_pnm, psnr
from .net import ModelState, NetConfig, forward, init_model, load_model, save_model
from .numerics import adam_step
from .objective import LossWeights, total_loss
from .rain import list_images

log = logging.getLogger(__name__)

CHECKPOINT_MODEL = "checkpoint.sdrn"
CHECKPOINT_META = "checkpoint.json"
METRICS_LOG = "metrics.jsonl"

_STREAMS = ("init", "supPatches", "unsupPatches", "supShuffle", "unsupShuffle", "em")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


class DatasetError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {detail}")
        self.epoch = epoch
        self.step = step


# (attribute, json key) for scalar fields
_SCALARS = [
    ("patch_size", "patchSize", int),
    ("batch_size", "batchSize", int),
    ("epochs", "epochs", int),
    ("lr_init", "lrInit", float),
    ("lr_decay_factor", "lrDecayFactor", float),
    ("lr_decay_every", "lrDecayEvery", int),
    ("K", "K", int),
    ("seed", "seed", int),
    ("em_subsample_size", "emSubsampleSize", int),
    ("em_iterations", "emIterations", int),
    ("supervised_patches", "supervisedPatches", int),
    ("unsupervised_patches", "unsupervisedPatches", int),
    ("train_eval_patches", "trainEvalPatches", int),
    ("record_wall_clock", "recordWallClock", bool),
]
_PATHS = [
    ("supervised_dir", "supervisedDir"),
    ("unsupervised_dir", "unsupervisedDir"),
    ("validation_dir", "validationDir"),
    ("out_dir", "outDir"),
]


@dataclass
class TrainConfig:
    supervised_dir: Optional[str] = None
    unsupervised_dir: Optional[str] = None  # None -> supervised-only training
    validation_dir: Optional[str] = None
    out_dir: Optional[str] = None
    patch_size: int = 64
    batch_size: int = 20
    epochs: int = 15
    lr_init: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    K: int = 3
    seed: int = 0
    em_subsample_size: int = 100_000
    em_iterations: int = 5
    supervised_patches: int = 2000
    unsupervised_patches: int = 2000
    train_eval_patches: int = 100
    record_wall_clock: bool = True

    def validate(self) -> "TrainConfig":
        positive = ["patch_size", "batch_size", "epochs", "lr_decay_every", "K", "em_subsample_size",
                    "supervised_patches", "unsupervised_patches", "train_eval_patches"]
        for attr, key, _ in _SCALARS:
            if attr in positive and getattr(self, attr) <= 0:
                raise ConfigError(key, "must be positive")
        if self.em_iterations < 0:
            raise ConfigError("emIterations", "must be non-negative")
        if not self.lr_init > 0:
            raise ConfigError("lrInit", "must be positive")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError("lrDecayFactor", "must lie in (0, 1]")
        if self.patch_size < 2:
            raise ConfigError("patchSize", "must be at least 2")
        return self

    @property
    def semi_supervised(self) -> bool:
        return self.unsupervised_dir is not None

    def lr_at(self, epoch: int) -> float:
        return self.lr_init * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def to_json(self) -> dict:
        d = {key: getattr(self, attr) for attr, key in _PATHS}
        d.update({key: getattr(self, attr) for attr, key, _ in _SCALARS})
        d["weights"] = self.weights.to_json()
        d["netConfig"] = dataclasses.asdict(self.net)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {k for _, k in _PATHS} | {k for _, k, _ in _SCALARS} | {"weights", "netConfig"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        kwargs = {}
        for attr, key in _PATHS:
            if key in d:
                v = d[key]
                if v is not None and not isinstance(v, str):
                    raise ConfigError(key, "must be a path string or null")
                kwargs[attr] = v
        for attr, key, typ in _SCALARS:
            if key in d:
                v = d[key]
                if typ is bool:
                    if not isinstance(v, bool):
                        raise ConfigError(key, "must be true or false")
                elif typ is int:
                    if isinstance(v, bool) or not isinstance(v, int):
                        raise ConfigError(key, f"must be an integer, got {v!r}")
                else:
                    if isinstance(v, bool) or not isinstance(v, (int, float)):
                        raise ConfigError(key, f"must be a number, got {v!r}")
                    v = float(v)
                kwargs[attr] = v
        if "weights" in d:
            try:
                kwargs["weights"] = LossWeights.from_json(d["weights"])
            except (ValueError, TypeError, AttributeError) as exc:
                raise ConfigError("weights", str(exc)) from exc
        if "netConfig" in d:
            try:
                kwargs["net"] = NetConfig(**d["netConfig"])
            except (ValueError, TypeError) as exc:
                raise ConfigError("netConfig", str(exc)) from exc
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
        return cls.from_json(d)


@dataclass
class TrainCheckpoint:
    model: ModelState
    gmm: Optional[GmmParams]
    syn: Optional[SynGaussian]
    config: TrainConfig
    epoch: int  # number of completed epochs
    rng_state: dict

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(self.model, out / CHECKPOINT_MODEL)
        meta = {
            "gmm": None if self.gmm is None else self.gmm.to_json(),
            "synGaussian": None if self.syn is None else self.syn.to_json(),
            "config": self.config.to_json(),
            "epoch": self.epoch,
            "rngState": self.rng_state,
        }
        path = out / CHECKPOINT_META
        path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TrainCheckpoint":
        """``path`` is a checkpoint directory, its ``.sdrn`` file or its sidecar JSON."""
        p = Path(path)
        if p.is_dir():
            model_path, meta_path = p / CHECKPOINT_MODEL, p / CHECKPOINT_META
        elif p.suffix == ".json":
            model_path, meta_path = p.with_suffix(".sdrn"), p
        else:
            model_path, meta_path = p, p.with_suffix(".json")
        meta = json.loads(meta_path.read_text())
        return cls(
            model=load_model(model_path),
            gmm=None if meta["gmm"] is None else GmmParams.from_json(meta["gmm"]),
            syn=None if meta["synGaussian"] is None else SynGaussian.from_json(meta["synGaussian"]),
            config=TrainConfig.from_json(meta["config"]),
            epoch=int(meta["epoch"]),
            rng_state=meta["rngState"],
        )


# ------------------------------------------------------------------ data


def _paired_files(pairs_dir) -> tuple[list[str], list[Path], list[Path]]:
    d = Path(pairs_dir)
    clean = {p.name: p for p in list_images(d / "clean")}
    rainy = {p.name: p for p in list_images(d / "rainy")}
    if not clean and not rainy:
        raise DatasetError(f"{d} has no images under clean/ and rainy/")
    unmatched = sorted(set(clean) ^ set(rainy))
    if unmatched:
        raise DatasetError(f"unmatched files in {d}: {', '.join(unmatched)}")
    names = sorted(clean)
    return names, [clean[n] for n in names], [rainy[n] for n in names]


def load_pairs(pairs_dir) -> tuple[list[str], list[np.ndarray], list[np.ndarray]]:
    names, cpaths, rpaths = _paired_files(pairs_dir)
    return names, [load_pnm(p) for p in cpaths], [load_pnm(p) for p in rpaths]


def load_rain_layers(dataset_dir) -> list[np.ndarray]:
    """Stored synthetic rain layers, or ``rainy - clean`` when a dataset has none."""
    d = Path(dataset_dir)
    layers = [load_pnm(p) for p in list_images(d / "rain")]
    if layers:
        return layers
    _, cleans, rainies = load_pairs(d)
    return [r - c for c, r in zip(cleans, rainies)]


@dataclass
class _Data:
    sup: PatchBatch
    unsup: Optional[PatchBatch]
    syn: Optional[SynGaussian]
    val_clean: list
    val_rainy: list


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS.index(name)]))


def _prepare_data(cfg: TrainConfig) -> _Data:
    if cfg.supervised_dir is None:
        raise DatasetError("supervisedDir is required")
    _, cleans, rainies = load_pairs(cfg.supervised_dir)
    sup = extract_patches(rainies, cfg.patch_size, cfg.supervised_patches,
                          _stream(cfg.seed, "supPatches"), targets=cleans)

    unsup = syn = None
    if cfg.semi_supervised:
        paths = list_images(Path(cfg.unsupervised_dir) / "rainy") or list_images(cfg.unsupervised_dir)
        if not paths:
            raise DatasetError(f"no unsupervised rainy images in {cfg.unsupervised_dir}")
        images = [load_pnm(p) for p in paths]
        unsup = extract_patches(images, cfg.patch_size, cfg.unsupervised_patches,
                                _stream(cfg.seed, "unsupPatches"))
        rain = np.concatenate([r.reshape(-1) for r in load_rain_layers(cfg.supervised_dir)])
        syn = gmm_mod.fit_syn_gaussian(rain)

    val_clean, val_rainy = [], []
    if cfg.validation_dir is not None:
        _, val_clean, val_rainy = load_pairs(cfg.validation_dir)
    return _Data(sup, unsup, syn, val_clean, val_rainy)


# ------------------------------------------------------------------ inference


def infer(model: ModelState, image: np.ndarray) -> np.ndarray:
    """Whole-image forward pass, clamped to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    k = model.config.kernel
    if min(image.shape) < k:
        raise ValueError(f"image {image.shape} is smaller than the {k}x{k} kernel")
    out = forward(model, image[None, None]).data[0, 0]
    return np.clip(out, 0.0, 1.0)


def _batched_forward(model: ModelState, x: np.ndarray, batch: int = 64) -> np.ndarray:
    return np.concatenate([forward(model, x[i:i + batch]).data for i in range(0, len(x), batch)])


@dataclass
class EvalReport:
    rows: list[dict]
    mean_psnr: float
    mean_input_psnr: float

    def to_json(self) -> dict:
        return {"meanPsnr": self.mean_psnr, "meanInputPsnr": self.mean_input_psnr, "images": self.rows}


def _evaluate_images(model, names, cleans, rainies) -> EvalReport:
    rows = []
    for name, clean, rainy in sorted(zip(names, cleans, rainies), key=lambda t: t[0]):
        rows.append({"filename": name, "inputPsnr": psnr(rainy, clean), "outputPsnr": psnr(infer(model, rainy), clean)})
    if not rows:
        raise DatasetError("no image pairs to evaluate")
    return EvalReport(rows, float(np.mean([r["outputPsnr"] for r in rows])),
                      float(np.mean([r["inputPsnr"] for r in rows])))


def evaluate(model: ModelState, pairs_dir) -> EvalReport:
    names, cleans, rainies = load_pairs(pairs_dir)
    return _evaluate_images(model, names, cleans, rainies)


# ------------------------------------------------------------------ training


def _rng_states(rngs: dict) -> dict:
    return {name: g.bit_generator.state for name, g in rngs.items()}


def _restore_rngs(states: dict) -> dict:
    rngs = {}
    for name, state in states.items():
        g = np.random.default_rng()
        g.bit_generator.state = state
        rngs[name] = g
    return rngs


def _gmm_phase(cfg, model, data, gmm, rng) -> tuple[GmmParams, list[float], bool]:
    P = cfg.patch_size
    n_patches = min(data.unsup.count, math.ceil(cfg.em_subsample_size / (P * P)))
    idx = np.sort(rng.choice(data.unsup.count, size=n_patches, replace=False))
    x = data.unsup.inputs[idx]
    resid = (x - _batched_forward(model, x)).reshape(-1)
    if resid.size > cfg.em_subsample_size:
        resid = resid[np.sort(rng.choice(resid.size, size=cfg.em_subsample_size, replace=False))]
    if float(np.mean(resid * resid)) <= gmm_mod.VAR_FLOOR:
        # all-zero residuals (identity network at start) would collapse every component
        return gmm, [gmm_mod.gmm_nll(resid, gmm)], True
    gmm, history = gmm_mod.fit_em(resid, gmm, cfg.em_iterations)
    return gmm, history, False


def _train_psnr(cfg, model, data) -> float:
    n = min(cfg.train_eval_patches, data.sup.count)
    out = np.clip(_batched_forward(model, data.sup.inputs[:n]), 0.0, 1.0)
    return float(np.mean([psnr(o[0], t[0]) for o, t in zip(out, data.sup.targets[:n])]))


def _batches_for_epoch(n: int, batch: int, steps: int, rng) -> list[np.ndarray]:
    """``steps`` index batches drawn from as many fresh permutations of ``range(n)`` as needed."""
    need = steps * batch
    order = np.concatenate([rng.permutation(n) for _ in range(max(1, math.ceil(need / n)))])
    return [order[i * batch:(i + 1) * batch] for i in range(steps)]


def train(config: TrainConfig, resume=None, stop_after: Optional[int] = None,
          progress=None) -> tuple[TrainCheckpoint, list[dict]]:
    """Run (or resume) training; returns the final checkpoint and this call's epoch records.

    ``stop_after`` limits how many epochs this call runs, leaving a resumable
    checkpoint behind, which is how an interrupted run is simulated.
    """
    cfg = config.validate()
    ckpt = None
    if resume is not None:
        ckpt = resume if isinstance(resume, TrainCheckpoint) else TrainCheckpoint.load(resume)
        mine = {k: v for k, v in cfg.to_json().items() if k not in ("epochs", "outDir")}
        theirs = {k: v for k, v in ckpt.config.to_json().items() if k not in ("epochs", "outDir")}
        for key in mine:
            if mine[key] != theirs.get(key):
                raise ConfigError(key, "differs from the checkpoint being resumed")

    data = _prepare_data(cfg)  # raises before anything is written
    out_dir = Path(cfg.out_dir) if cfg.out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if ckpt is None:
        model = init_model(cfg.net, _stream(cfg.seed, "init"))
        gmm = gmm_mod.initial_gmm(cfg.K, data.syn.sigma2_syn) if data.syn is not None else None
        rngs = {name: _stream(cfg.seed, name) for name in ("supShuffle", "unsupShuffle", "em")}
        start = 0
        if out_dir is not None:
            (out_dir / METRICS_LOG).write_text("")
    else:
        model, gmm, start = ckpt.model.copy(), ckpt.gmm, ckpt.epoch
        rngs = _restore_rngs(ckpt.rng_state)
        if ckpt.syn is not None:
            data.syn = ckpt.syn

    end = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)
    records = []
    names = model.param_names()
    n_sup = data.sup.count
    steps = max(1, math.ceil(n_sup / cfg.batch_size))
    result = TrainCheckpoint(model, gmm, data.syn, cfg, start, _rng_states(rngs))

    for epoch in range(start, end):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)

        em_trace, em_skipped = [], False
        if data.unsup is not None:
            gmm, em_trace, em_skipped = _gmm_phase(cfg, model, data, gmm, rngs["em"])

        sup_perm = rngs["supShuffle"].permutation(n_sup)
        sup_batches = [sup_perm[i * cfg.batch_size:(i + 1) * cfg.batch_size] for i in range(steps)]
        unsup_batches = (_batches_for_epoch(data.unsup.count, cfg.batch_size, steps, rngs["unsupShuffle"])
                         if data.unsup is not None else [None] * steps)

        sums = dict.fromkeys(("total", "supervised", "unsupNll", "tv", "kl", "gmmNll"), 0.0)
        for step, (si, ui) in enumerate(zip(sup_batches, unsup_batches)):
            ub = None if ui is None else data.unsup.subset(ui)
            report, grads = total_loss(data.sup.subset(si), ub, model, gmm, data.syn, cfg.weights)
            if not np.isfinite(report.total):
                raise TrainingDiverged(epoch, step, f"total loss {report.total}")
            model.params, model.adam = adam_step(model.params, grads, model.adam, lr, names=names)
            for key in sums:
                sums[key] += getattr(report, key)
        model.epoch = epoch + 1

        record = {
            "epoch": epoch,
            "lr": lr,
            "supLoss": sums["supervised"] / steps,
            "unsupNll": sums["unsupNll"] / steps,
            "tv": sums["tv"] / steps,
            "kl": sums["kl"] / steps,
            "total": sums["total"] / steps,
            "trainPsnr": _train_psnr(cfg, model, data),
            "valPsnr": (_evaluate_images(model, [str(i) for i in range(len(data.val_clean))],
                                         data.val_clean, data.val_rainy).mean_psnr
                        if data.val_clean else None),
            "gmmNll": sums["gmmNll"] / steps,
            "gmm": None if gmm is None else gmm.to_json(),
            "emNll": em_trace,
            "emSkipped": em_skipped,
            "wallClockSec": (time.perf_counter() - t0) if cfg.record_wall_clock else None,
        }
        records.append(record)
        result = TrainCheckpoint(model, gmm, data.syn, cfg, epoch + 1, _rng_states(rngs))
        if out_dir is not None:
            with open(out_dir / METRICS_LOG, "a") as fh:
                fh.write(json.dumps(record) + "\n")
            result.save(out_dir)
        log.info("epoch %d lr=%.2g sup=%.4g unsup=%.4g train=%.2fdB val=%s", epoch, lr, record["supLoss"],
                 record["unsupNll"], record["trainPsnr"],
                 "n/a" if record["valPsnr"] is None else f"{record['valPsnr']:.2f}dB")
        if progress is not None:
            progress(record)
    return result, records


def read_metrics(out_dir) -> list[dict]:
    path = Path(out_dir) / METRICS_LOG
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
