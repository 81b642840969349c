"""Compact negative-residual deraining CNN and its ``.sdrn`` file format.

The network computes ``f(x) = x + g(x)`` where ``g`` is a plain conv/ReLU
stack. ``g`` is trained to output the *negative* rain layer, so the residual
``x - f(x) = -g(x)`` is the rain estimate.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .numerics import AdamState, Tape, Tensor, conv2d_nhwc, relu, reshape
from .numerics import add as t_add

MAGIC = b"SDRN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")  # magic, version, header length


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    layers: int = 6
    channels: int = 16
    kernel: int = 3

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError("a network needs at least 2 layers")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")

    def layer_shapes(self) -> list[tuple[tuple, tuple]]:
        k, c = self.kernel, self.channels
        shapes = []
        for i in range(self.layers):
            cin = 1 if i == 0 else c
            cout = 1 if i == self.layers - 1 else c
            shapes.append(((cout, cin, k, k), (cout,)))
        return shapes


@dataclass
class ModelState:
    config: NetConfig
    params: list[np.ndarray]  # kernel0, bias0, kernel1, bias1, ...
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0

    def __post_init__(self):
        expected = [s for pair in self.config.layer_shapes() for s in pair]
        got = [tuple(np.shape(p)) for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match config {expected}")
        if not self.adam.m:
            self.adam = AdamState.zeros_like(self.params)

    def copy(self) -> "ModelState":
        return ModelState(self.config, [p.copy() for p in self.params], self.adam.copy(), self.epoch)

    def param_names(self) -> list[str]:
        return [f"{kind}{i}" for i in range(self.config.layers) for kind in ("kernel", "bias")]


def init_model(config: NetConfig, seed) -> ModelState:
    """He-normal hidden kernels, zero biases, and an all-zero last layer (exact identity map)."""
    rng = np.random.default_rng(seed)
    params = []
    shapes = config.layer_shapes()
    for i, (kshape, bshape) in enumerate(shapes):
        if i == len(shapes) - 1:
            params.append(np.zeros(kshape))
        else:
            fan_in = kshape[1] * kshape[2] * kshape[3]
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=kshape))
        params.append(np.zeros(bshape))
    return ModelState(config, params)


def _stack(model: ModelState, x: Tensor, params: list[Tensor]) -> Tensor:
    """Residual branch on an NHWC tensor."""
    h = x
    n = model.config.layers
    for i in range(n):
        h = conv2d_nhwc(h, params[2 * i], params[2 * i + 1])
        if i < n - 1:
            h = relu(h)
    return h


def _check_input(model: ModelState, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"network input must be [B, 1, H, W], got {x.shape}")
    if min(x.shape[2:]) < model.config.kernel:
        raise ValueError(f"input {x.shape[2:]} smaller than kernel size {model.config.kernel}")
    return x


def residual_branch(model: ModelState, x, tape: Optional[Tape] = None,
                    params: Optional[list[Tensor]] = None) -> Tensor:
    """``g_w(x)``, the learned negative rain layer, shaped like ``x``."""
    x = _check_input(model, x)
    if params is None:
        params = watch_params(model, tape) if tape is not None else [Tensor(p) for p in model.params]
    B, _, H, W = x.shape
    g = _stack(model, reshape(x, (B, H, W, 1)), params)
    return reshape(g, (B, 1, H, W))


def forward(model: ModelState, x, tape: Optional[Tape] = None,
            params: Optional[list[Tensor]] = None) -> Tensor:
    """``f_w(x) = x + g_w(x)`` on a ``[B, 1, H, W]`` batch.

    With a ``tape`` (and no explicit ``params``) the parameters are watched on
    it so :func:`semirain.numerics.backward` can return their gradients. Pass
    ``params`` from :func:`watch_params` to share one watched set across calls.
    """
    x = _check_input(model, x)
    return t_add(x, residual_branch(model, x, tape, params))


def watch_params(model: ModelState, tape: Tape) -> list[Tensor]:
    return [tape.watch(p) for p in model.params]


# ----------------------------------------------------------------- serialization


def dumps_model(model: ModelState) -> bytes:
    header = {
        "config": asdict(model.config),
        "epoch": model.epoch,
        "adamStep": model.adam.step,
        "shapes": [list(np.shape(p)) for p in model.params],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)), hbytes]
    for group in (model.params, model.adam.m, model.adam.v):
        for arr in group:
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads_model(buf: bytes) -> ModelState:
    if len(buf) < _PREFIX.size:
        raise ModelFormatError("truncated file: missing prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise ModelFormatError("truncated file: header cut short")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        config = NetConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed header: {exc}") from exc

    shapes = [s for pair in config.layer_shapes() for s in pair]
    if [tuple(s) for s in header.get("shapes", shapes)] != shapes:
        raise ModelFormatError("header shapes disagree with network config")
    sizes = [int(np.prod(s)) for s in shapes]
    payload = buf[start + hlen:]
    expected = 3 * 8 * sum(sizes)
    if len(payload) != expected:
        raise ModelFormatError(
            f"length mismatch: {config.layers}-layer config needs {expected} payload bytes, found {len(payload)}")

    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, off = [], 0
    for _ in range(3):
        group = []
        for shape, n in zip(shapes, sizes):
            group.append(flat[off:off + n].reshape(shape).copy())
            off += n
        arrays.append(group)
    adam = AdamState(int(header.get("adamStep", 0)), arrays[1], arrays[2])
    return ModelState(config, arrays[0], adam, int(header.get("epoch", 0)))


def save_model(model: ModelState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        return loads_model(fh.read())
