"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations the segmentation networks need are provided:
same-padded stride-1 convolution, ReLU, sigmoid, channel concatenation and
elementwise addition.  Every operation exists twice: as a pair of plain
array functions (``*_forward`` / ``*_backward``) and as a ``Tensor`` level
wrapper that records itself on the active :class:`GradTape`.

Arrays are float32 by default.  Operations preserve the input dtype, so
gradient checks may run the same code in float64.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# cap on the im2col buffer built per group of samples
_COLS_BUDGET_BYTES = 96 * 2**20

_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "forestseg_active_tape", default=None
)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An N-dimensional float array that can take part in gradient flow."""

    __slots__ = ("data", "requires_grad", "grad", "name", "tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are recorded.  ``backward`` replays the record
    in reverse and writes fresh ``.grad`` arrays on the leaf tensors.
    """

    records: list[_Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, inputs, output: Tensor, backward) -> None:
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if output.size != 1:
                raise DimensionError("an upstream gradient is required for non-scalar outputs")
            grad = np.ones_like(output.data)
        grad = np.asarray(grad, dtype=output.data.dtype)
        if grad.shape != output.shape:
            raise DimensionError(f"upstream gradient shape {grad.shape} != output shape {output.shape}")

        produced = {id(rec.output) for rec in self.records}
        leaves: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        # accumulators start from zero on every pass
        for t in leaves.values():
            t.grad = np.zeros_like(t.data)

        grads: dict[int, np.ndarray] = {id(output): grad}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, g_in in zip(rec.inputs, rec.backward(g)):
                if g_in is None or not t.requires_grad:
                    continue
                if id(t) in leaves:
                    t.grad += g_in
                elif id(t) in grads:
                    grads[id(t)] = grads[id(t)] + g_in
                else:
                    grads[id(t)] = g_in


def active_tape() -> GradTape | None:
    return _active_tape.get()


def _emit(inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.record(inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# convolution


def _check_conv_shapes(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None) -> None:
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    kh, kw = kernel.shape[2:]
    if kh not in (1, 3) or kw not in (1, 3):
        raise DimensionError(f"only 1x1 and 3x3 kernels are supported, got {kh}x{kw}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {kernel.shape[0]} output features")


def _sample_groups(n: int, bytes_per_sample: int) -> list[slice]:
    step = max(1, _COLS_BUDGET_BYTES // max(1, bytes_per_sample))
    return [slice(i, min(n, i + step)) for i in range(0, n, step)]


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[B,C,H,W] -> [B, C*kh*kw, H*W] with zero 'same' padding, (c, u, v) row order."""
    b, c, h, w = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(b, c, h * w)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((b, c, kh, kw, h, w), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u : u + h, v : v + w]
    return cols.reshape(b, c * kh * kw, h * w)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 convolution (cross-correlation) with zero 'same' padding.

    ``out[b,co,i,j] = bias[co] + sum_{ci,u,v} x[b,ci,i+u-kh//2,j+v-kw//2] * kernel[co,ci,u,v]``
    """
    _check_conv_shapes(x, kernel, bias)
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    k2 = kernel.reshape(cout, cin * kh * kw)
    out = np.empty((b, cout, h * w), dtype=np.result_type(x, kernel))
    per_sample = cin * kh * kw * h * w * x.itemsize
    for grp in _sample_groups(b, per_sample):
        np.matmul(k2, _im2col(x[grp], kh, kw), out=out[grp])
    out += bias.reshape(1, cout, 1)
    return out.reshape(b, cout, h, w)


def conv2d_backward(
    upstream: np.ndarray, saved_input: np.ndarray, kernel: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    _check_conv_shapes(saved_input, kernel, None)
    b, cin, h, w = saved_input.shape
    cout, _, kh, kw = kernel.shape
    if upstream.shape != (b, cout, h, w):
        raise DimensionError(f"upstream gradient {upstream.shape} != forward output {(b, cout, h, w)}")

    bias_grad = upstream.sum(axis=(0, 2, 3))
    g = upstream.reshape(b, cout, h * w)

    kernel_grad = np.zeros((cout, cin * kh * kw), dtype=kernel.dtype)
    per_sample = cin * kh * kw * h * w * saved_input.itemsize
    for grp in _sample_groups(b, per_sample):
        cols = _im2col(saved_input[grp], kh, kw)
        kernel_grad += np.matmul(g[grp], cols.transpose(0, 2, 1)).sum(axis=0)
    kernel_grad = kernel_grad.reshape(kernel.shape)

    # input gradient is a same-padded conv of the upstream map with the
    # spatially flipped, channel-transposed kernel
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    input_grad = conv2d_forward(upstream, flipped, np.zeros(cin, dtype=kernel.dtype))
    return input_grad, kernel_grad, bias_grad.astype(kernel.dtype, copy=False)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    x_data, k_data = x.data, kernel.data
    out = conv2d_forward(x_data, k_data, bias.data)

    def backward(g):
        dx, dk, db = conv2d_backward(g, x_data, k_data)
        return (dx if x.requires_grad else None), dk, db

    return _emit((x, kernel, bias), out, backward)


# ---------------------------------------------------------------------------
# activations


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, dtype=x.dtype)


def relu_backward(upstream: np.ndarray, saved_input: np.ndarray) -> np.ndarray:
    # derivative at exactly zero is taken as zero
    return np.where(saved_input > 0, upstream, np.zeros((), dtype=upstream.dtype))


def relu(x: Tensor) -> Tensor:
    x_data = x.data
    return _emit((x,), relu_forward(x_data), lambda g: (relu_backward(g, x_data),))


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    # exp is only ever taken of -|x|, so no overflow for large magnitudes
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # keep the open interval (0, 1) in finite precision
    info = np.finfo(y.dtype)
    return np.clip(y, info.tiny, 1.0 - info.epsneg, out=y)


def sigmoid_backward(upstream: np.ndarray, saved_output: np.ndarray) -> np.ndarray:
    return upstream * saved_output * (1 - saved_output)


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_forward(x.data)
    return _emit((x,), y, lambda g: (sigmoid_backward(g, y),))


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("nothing to concatenate")
    ref = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(f"cannot concatenate {p.shape} with {ref} along channels")
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit(tuple(parts), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")
    return _emit((a, b), a.data + b.data, lambda g: (g, g))
