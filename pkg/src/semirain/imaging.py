"""Netpbm I/O, patch sampling and PSNR on single-channel float images.

Images are plain 2-D ``float64`` numpy arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
_MSE_EPS = 1e-10
_LUMA = (0.299, 0.587, 0.114)


class PnmError(ValueError):
    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


def parse_pnm(buf: bytes, path: Optional[str] = None) -> np.ndarray:
    """Decode binary P5/P6 bytes (maxval 255) into a luminance image."""
    pos = 0
    n = len(buf)

    def skip_ws_and_comments():
        nonlocal pos
        while pos < n:
            c = buf[pos:pos + 1]
            if c in (b" ", b"\t", b"\n", b"\r", b"\v", b"\f"):
                pos += 1
            elif c == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break

    def token() -> tuple[bytes, int]:
        nonlocal pos
        skip_ws_and_comments()
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PnmError("unexpected end of header", start, path)
        return buf[start:pos], start

    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}, expected P5 or P6", 0, path)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, at = token()
        if not tok.isdigit():
            raise PnmError(f"invalid {name} {tok!r}", at, path)
        value = int(tok)
        if name != "maxval" and value <= 0:
            raise PnmError(f"{name} must be positive, got {value}", at, path)
        fields.append((value, at))
    (width, _), (height, _), (maxval, max_at) = fields
    if maxval != 255:
        raise PnmError(f"unsupported maxval {maxval}, only 255 is handled", max_at, path)
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise PnmError("missing whitespace after maxval", pos, path)
    pos += 1

    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PnmError(f"truncated payload: expected {need} bytes, found {len(payload)}",
                       pos + len(payload), path)
    raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    if channels == 1:
        return raw.reshape(height, width) / 255.0
    rgb = raw.reshape(height, width, 3) / 255.0
    return rgb[..., 0] * _LUMA[0] + rgb[..., 1] * _LUMA[1] + rgb[..., 2] * _LUMA[2]


def load_pnm(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        return parse_pnm(fh.read(), path)


def quantize(image: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and map to 8-bit codes, rounding halves up."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {image.shape}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + quantize(image).tobytes()


def save_pgm(image: np.ndarray, path) -> None:
    data = encode_pgm(image)
    path = os.fspath(path)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


@dataclass
class PatchBatch:
    """``B`` patches of size ``P``; ``targets`` is set only for supervised batches."""

    inputs: np.ndarray
    targets: Optional[np.ndarray] = None
    origins: Optional[np.ndarray] = None  # (B, 3): image index, row, col

    @property
    def count(self) -> int:
        return self.inputs.shape[0]

    @property
    def patch_size(self) -> int:
        return self.inputs.shape[-1]

    @property
    def supervised(self) -> bool:
        return self.targets is not None

    def subset(self, idx) -> "PatchBatch":
        return PatchBatch(
            self.inputs[idx],
            None if self.targets is None else self.targets[idx],
            None if self.origins is None else self.origins[idx],
        )


def extract_patches(images: Sequence[np.ndarray], patch_size: int, count: int, seed,
                    targets: Optional[Sequence[np.ndarray]] = None) -> PatchBatch:
    """Crop ``count`` patches at uniform positions of uniformly chosen images.

    With ``targets`` the same crop window is taken from the paired image, giving a
    supervised batch. Images smaller than the patch are skipped with a warning.
    """
    if targets is not None and len(targets) != len(images):
        raise ValueError("images and targets must pair up")
    usable = []
    for i, img in enumerate(images):
        h, w = np.shape(img)
        if h < patch_size or w < patch_size:
            log.warning("skipping image %d (%dx%d): smaller than patch size %d", i, h, w, patch_size)
            continue
        if targets is not None and np.shape(targets[i]) != (h, w):
            raise ValueError(f"target {i} shape {np.shape(targets[i])} differs from input {(h, w)}")
        usable.append(i)
    if not usable:
        raise ValueError(f"no image is at least {patch_size}x{patch_size}")

    rng = np.random.default_rng(seed)
    P = patch_size
    inputs = np.empty((count, 1, P, P))
    tgt = np.empty((count, 1, P, P)) if targets is not None else None
    origins = np.empty((count, 3), dtype=np.int64)
    for n in range(count):
        i = usable[rng.integers(len(usable))]
        h, w = np.shape(images[i])
        r = int(rng.integers(h - P + 1))
        c = int(rng.integers(w - P + 1))
        inputs[n, 0] = images[i][r:r + P, c:c + P]
        if tgt is not None:
            tgt[n, 0] = targets[i][r:r + P, c:c + P]
        origins[n] = (i, r, c)
    return PatchBatch(inputs, tgt, origins)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB with peak 1.0, capped at 99 dB for (near-)identical images."""
    err = mse(a, b)
    if err < _MSE_EPS:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))
