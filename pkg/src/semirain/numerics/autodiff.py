"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tensor` is an immutable array value. Tensors created through
:meth:`Tape.watch` (or produced by an op with a watched input) are *tracked*:
every primitive op applied to them is appended to the owning :class:`Tape`,
and :func:`backward` replays that record in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ContractError(ValueError):
    """Raised when an operation receives inputs violating its contract."""


class Tensor:
    __slots__ = ("data", "tape", "__weakref__")

    def __init__(self, data, tape: Optional["Tape"] = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Optional["Tape"]) -> "Tensor":
        # takes ownership of a freshly computed array, skipping the defensive copy
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output, inputs, vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive ops applied to tracked tensors."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._watched: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, value) -> Tensor:
        """Return a tracked copy of ``value`` owned by this tape."""
        src = value.data if isinstance(value, Tensor) else value
        t = Tensor(src, tape=self)
        self._watched.append(t)
        return t

    @property
    def watched(self) -> list[Tensor]:
        return list(self._watched)

    def clear(self) -> None:
        """Drop the recorded ops and watched tensors (breaks the tape <-> tensor reference cycle)."""
        self._nodes.clear()
        self._watched.clear()

    def _record(self, output: Tensor, inputs: tuple, vjp: Callable) -> None:
        self._nodes.append(_Node(output, inputs, vjp))


def _common_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("tensors tracked on different tapes cannot be combined")
            tape = t.tape
    return tape


def _emit(out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    tape = _common_tape(inputs)
    result = Tensor._wrap(out, tape)
    if tape is not None:
        tape._record(result, inputs, vjp)
    return result


def backward(tape: Tape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``wrt`` (default: all watched tensors).

    A tensor that the loss does not depend on gets an exact zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    targets = tape.watched if wrt is None else list(wrt)
    if loss.tape is not tape:
        return [np.zeros(t.shape) for t in targets]

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp.tape is None or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [np.array(grads.get(id(t), np.zeros(t.shape)), dtype=np.float64) for t in targets]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    # sign(0) == 0 gives the zero subgradient at the kink
    return _emit(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return _emit(np.where(mask, ad, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions / shape


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def diff(a: Tensor, axis: int) -> Tensor:
    """Forward differences ``a[i+1] - a[i]`` along ``axis`` (length shrinks by one)."""
    ad = a.data
    axis = axis % ad.ndim
    out = np.diff(ad, axis=axis)

    def vjp(g):
        pad_lo = [(0, 0)] * ad.ndim
        pad_hi = [(0, 0)] * ad.ndim
        pad_lo[axis] = (1, 0)
        pad_hi[axis] = (0, 1)
        return (np.pad(g, pad_lo) - np.pad(g, pad_hi),)

    return _emit(out, (a,), vjp)


# ---------------------------------------------------------------- convolution


def _edge_pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, width, mode="edge")


def _edge_pad_adjoint(gp: np.ndarray, p: int) -> np.ndarray:
    """Fold gradients of an edge-padded array back onto the unpadded one."""
    if p == 0:
        return gp
    g = gp[..., :, p:-p].copy()
    g[..., :, :1] += gp[..., :, :p].sum(axis=-1, keepdims=True)
    g[..., :, -1:] += gp[..., :, -p:].sum(axis=-1, keepdims=True)
    out = g[..., p:-p, :].copy()
    out[..., :1, :] += g[..., :p, :].sum(axis=-2, keepdims=True)
    out[..., -1:, :] += g[..., -p:, :].sum(axis=-2, keepdims=True)
    return out


def conv2d_nhwc(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Channels-last 'same' cross-correlation with replicate padding.

    ``x`` is ``[B, H, W, C_in]``, ``kernel`` is ``[C_out, C_in, k, k]`` (odd ``k``),
    ``bias`` is ``[C_out]``; the result is ``[B, H, W, C_out]``. This is the layout
    the network runs in; :func:`conv2d` is the channels-first wrapper.
    """
    xd, kd, bd = x.data, kernel.data, bias.data
    if kd.ndim != 4 or kd.shape[2] != kd.shape[3] or kd.shape[2] % 2 == 0:
        raise ContractError(f"kernel must be [C_out, C_in, k, k] with odd k, got {kd.shape}")
    if xd.ndim != 4:
        raise ContractError(f"input must be [B,H,W,C], got {xd.shape}")
    c_out, c_in, k, _ = kd.shape
    if xd.shape[3] != c_in:
        raise ContractError(f"input has {xd.shape[3]} channels, kernel expects {c_in}")
    if bd.shape != (c_out,):
        raise ContractError(f"bias shape {bd.shape} does not match {c_out} output channels")

    B, H, W, _ = xd.shape
    p = (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge") if p else xd
    # im2col with (ki, kj, c) ordering so backward slices are contiguous in c
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(B * H * W, k * k * c_in)
    kmat = kd.transpose(0, 2, 3, 1).reshape(c_out, k * k * c_in)
    out = (cols @ kmat.T).reshape(B, H, W, c_out) + bd

    def vjp(g):
        gmat = g.reshape(B * H * W, c_out)
        gk = (gmat.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=0)
        if x.tape is None:
            return None, gk, gb
        gcols = (gmat @ kmat).reshape(B, H, W, k, k, c_in)
        if p == 0:
            return gcols[:, :, :, 0, 0, :], gk, gb
        gp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gp[:, i:i + H, j:j + W, :] += gcols[:, :, :, i, j, :]
        return _edge_pad_adjoint(gp.transpose(0, 3, 1, 2), p).transpose(0, 2, 3, 1), gk, gb

    return _emit(out, (x, kernel, bias), vjp)


def to_nhwc(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad.transpose(0, 2, 3, 1), (a,), lambda g: (g.transpose(0, 3, 1, 2),))


def to_nchw(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad.transpose(0, 3, 1, 2), (a,), lambda g: (g.transpose(0, 2, 3, 1),))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """'Same'-size cross-correlation with replicate padding plus per-channel bias.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, k, k]`` with odd ``k``; ``bias`` is ``[C_out]``.
    """
    if x.data.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), kernel, bias)
        return reshape(out, out.shape[1:])
    if x.data.ndim != 4:
        raise ContractError(f"input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if kernel.data.ndim == 4 and x.shape[1] != kernel.shape[1]:
        raise ContractError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    return to_nchw(conv2d_nhwc(to_nhwc(x), kernel, bias))
