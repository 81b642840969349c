"""Procedural rain streaks and (clean, rainy, rain) dataset generation.

Two generators are provided on purpose. ``styleA`` draws one layer of
straight streaks with a single direction and length; ``styleB`` superimposes
several such layers with jittered direction, length and brightness. Training
on one and validating on the other gives a controlled domain gap.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .imaging import load_pnm, quantize, save_pgm

log = logging.getLogger(__name__)

MODES = ("styleA", "styleB")
SCENARIOS = ("sparse", "dense")

SPARSE_DENSITY = (0.001, 0.01)
SPARSE_LENGTH = (15, 35)
DENSE_DENSITY = (0.01, 0.05)
DENSE_LENGTH = (25, 60)
DENSE_HAZE = (0.1, 0.3)
INTENSITY = (0.4, 0.9)
DENSE_INTENSITY = (0.15, 0.4)
STYLE_B_LAYERS = (2, 4)

_PNM_SUFFIXES = (".pgm", ".ppm", ".pnm")


@dataclass
class RainParams:
    mode: str = "styleA"
    scenario: str = "sparse"
    angleDeg: float = 0.0
    lengthPx: int = 20
    density: float = 0.005
    intensity: float = 0.6
    layers: int = 1
    hazeStrength: float = 0.0
    seed: int = 0

    def validate(self) -> "RainParams":
        if self.mode not in MODES:
            raise ValueError(f"unknown rain mode {self.mode!r}")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not -45.0 <= self.angleDeg <= 45.0:
            raise ValueError(f"angleDeg {self.angleDeg} outside [-45, 45]")
        if self.lengthPx < 1:
            raise ValueError("lengthPx must be positive")
        if not 0.0 <= self.density < 1.0:
            raise ValueError(f"density {self.density} outside [0, 1)")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError(f"intensity {self.intensity} outside (0, 1]")
        if self.layers < 1 or (self.mode == "styleA" and self.layers != 1):
            raise ValueError("styleA uses exactly one layer; styleB needs layers >= 1")
        if not 0.0 <= self.hazeStrength <= 0.5:
            raise ValueError(f"hazeStrength {self.hazeStrength} outside [0, 0.5]")
        if self.scenario == "sparse" and self.hazeStrength != 0.0:
            raise ValueError("sparse scenario has no haze")
        return self


def line_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalized (sum 1) line of ``length`` samples through the kernel centre.

    Angle 0 is horizontal; positive angles rise to the right.
    """
    if length < 1:
        raise ValueError("length must be positive")
    theta = np.deg2rad(angle_deg)
    half = (length - 1) / 2.0
    size = 2 * int(np.ceil(half)) + 1
    c = size // 2
    k = np.zeros((size, size))
    for t in np.linspace(-half, half, length):
        col = int(np.floor(c + t * np.cos(theta) + 0.5))
        row = int(np.floor(c - t * np.sin(theta) + 0.5))
        k[row, col] += 1.0
    return k / k.sum()


def streak_layer(seeds: np.ndarray, length: int, angle_deg: float) -> np.ndarray:
    """Smear each seed pixel along a line; a lone unit seed becomes ``length`` pixels of ``1/length``."""
    return ndimage.convolve(np.asarray(seeds, dtype=np.float64), line_kernel(length, angle_deg),
                            mode="constant", cval=0.0)


def _style_a(h: int, w: int, angle: float, length: int, density: float, intensity: float,
             rng: np.random.Generator) -> np.ndarray:
    noise = rng.random((h, w))
    seeds = (noise < density * intensity).astype(np.float64)
    # normalized kernel spreads a seed's unit mass; the gain restores per-pixel brightness to `intensity`
    return np.clip(intensity * length * streak_layer(seeds, length, angle), 0.0, 1.0)


def synth_rain_layer(h: int, w: int, params: RainParams) -> np.ndarray:
    params.validate()
    if h < params.lengthPx or w < params.lengthPx or h < 1 or w < 1:
        raise ValueError(f"image {h}x{w} is smaller than streak length {params.lengthPx}")
    rng = np.random.default_rng(params.seed)
    if params.mode == "styleA":
        return _style_a(h, w, params.angleDeg, params.lengthPx, params.density, params.intensity, rng)
    acc = np.zeros((h, w))
    for _ in range(params.layers):
        angle = float(np.clip(params.angleDeg + rng.uniform(-10.0, 10.0), -90.0, 90.0))
        length = max(1, int(round(params.lengthPx * rng.uniform(0.5, 1.5))))
        intensity = params.intensity * rng.uniform(0.5, 1.0)
        acc += _style_a(h, w, angle, length, params.density, intensity, rng)
    return np.clip(acc, 0.0, 1.0)


def compose_rainy(clean: np.ndarray, rain: np.ndarray, params: RainParams) -> np.ndarray:
    clean = np.asarray(clean, dtype=np.float64)
    rain = np.asarray(rain, dtype=np.float64)
    if clean.shape != rain.shape:
        raise ValueError(f"dimension mismatch: clean {clean.shape} vs rain {rain.shape}")
    if params.scenario == "dense":
        clean = (1.0 - params.hazeStrength) * clean + params.hazeStrength
    return np.clip(clean + rain, 0.0, 1.0)


def draw_params(mode: str, scenario: str, rng: np.random.Generator) -> RainParams:
    if scenario == "sparse":
        dens, lens, haze, inten = SPARSE_DENSITY, SPARSE_LENGTH, 0.0, INTENSITY
    else:
        dens, lens, inten = DENSE_DENSITY, DENSE_LENGTH, DENSE_INTENSITY
        haze = float(rng.uniform(*DENSE_HAZE))
    return RainParams(
        mode=mode,
        scenario=scenario,
        angleDeg=float(rng.uniform(-45.0, 45.0)),
        lengthPx=int(rng.integers(lens[0], lens[1] + 1)),
        density=float(rng.uniform(*dens)),
        intensity=float(rng.uniform(*inten)),
        layers=1 if mode == "styleA" else int(rng.integers(STYLE_B_LAYERS[0], STYLE_B_LAYERS[1] + 1)),
        hazeStrength=haze,
        seed=int(rng.integers(2**31)),
    ).validate()


def triple_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per dataset item, so generation order never matters."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in _PNM_SUFFIXES and p.is_file())


def build_dataset(clean_dir, out_dir, mode: str, scenario: str, count: int, seed: int) -> Path:
    """Write ``count`` (clean, rainy, rain) triples plus ``manifest.json``; returns the manifest path.

    The rain layer is quantized before composition, so recomposing the stored
    clean and rain files with the manifest parameters reproduces the stored
    rainy file byte for byte.
    """
    if mode not in MODES:
        raise ValueError(f"unknown rain mode {mode!r}")
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if count < 0:
        raise ValueError("count must be non-negative")
    sources = list_images(clean_dir)
    if not sources:
        raise FileNotFoundError(f"no PGM/PPM images in {clean_dir}")
    cleans = [load_pnm(p) for p in sources]

    out = Path(out_dir)
    for sub in ("clean", "rainy", "rain"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    manifest = []
    for i in range(count):
        rng = triple_rng(seed, i)
        clean = cleans[int(rng.integers(len(cleans)))]
        h, w = clean.shape
        params = draw_params(mode, scenario, rng)
        if params.lengthPx > min(h, w):
            params.lengthPx = min(h, w)
        rain = quantize(synth_rain_layer(h, w, params)) / 255.0
        rainy = compose_rainy(clean, rain, params)
        name = f"{i:05d}.pgm"
        save_pgm(clean, out / "clean" / name)
        save_pgm(rain, out / "rain" / name)
        save_pgm(rainy, out / "rainy" / name)
        manifest.append({"filename": name, **asdict(params)})

    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    log.info("wrote %d triples to %s", count, out)
    return path


def read_manifest(dataset_dir) -> list[RainParams]:
    entries = json.loads((Path(dataset_dir) / "manifest.json").read_text())
    return [RainParams(**{k: v for k, v in e.items() if k != "filename"}) for e in entries]


# -------------------------------------------------------------------- scenes


def synth_scene(h: int, w: int, seed: int) -> np.ndarray:
    """Rain-free piecewise-smooth test scene: shaded background, flat shapes, fine texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = rng.uniform(0.2, 0.6) + rng.uniform(-0.25, 0.25) * xx + rng.uniform(-0.25, 0.25) * yy
    for _ in range(int(rng.integers(4, 9))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.05, 0.35) * h, rng.uniform(0.05, 0.35) * w
        level = rng.uniform(0.05, 0.75)
        yy_px, xx_px = np.mgrid[0:h, 0:w]
        if rng.random() < 0.5:
            mask = ((yy_px - cy) / ry) ** 2 + ((xx_px - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy_px - cy) <= ry) & (np.abs(xx_px - cx) <= rx)
        img = np.where(mask, level, img)
    texture = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=rng.uniform(1.0, 3.0))
    texture /= texture.std() + 1e-12
    img = img + 0.04 * texture
    img = ndimage.gaussian_filter(img, sigma=0.7)
    return np.clip(img, 0.0, 0.85)


def write_scenes(out_dir, count: int, size: int, seed: int) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = triple_rng(seed, i)
        p = out / f"scene_{i:04d}.pgm"
        save_pgm(synth_scene(size, size, int(rng.integers(2**31))), p)
        paths.append(p)
    return paths

