"""Dense NCHW tensors with reverse-mode autodiff, Adam, and checkpoint I/O.

Everything the network needs runs on top of this module: float32 (or
float64, for tight gradient checks) numpy storage, a dynamically built
backward graph, conv2d via im2col + GEMM, bilinear upsampling, weighted
softmax cross-entropy, the Adam optimizer with a cosine learning-rate
schedule, and a small binary checkpoint format.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"C3PO"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus an optional edge into the autodiff graph.

    Tensors are immutable after construction except through optimizer
    steps; ops return new tensors and never mutate their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def backward(self):
        backward(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    """Wrap an op result, attaching graph edges only when grads are on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accum(t: Tensor, grad: np.ndarray):
    if t.grad is None:
        t.grad = np.array(grad, dtype=t.data.dtype)
    else:
        t.grad += grad


def backward(loss: Tensor):
    """Reverse-mode pass from a scalar loss; populates .grad on every
    requires_grad tensor reachable from it. Calling twice on the same
    graph is an error: rebuild the graph (rerun the forward pass) first.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any tracked tensor")
    if loss._backward_done:
        raise RuntimeError("backward already ran on this graph; rebuild it before calling again")
    loss._backward_done = True

    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._grad_fn is not None:
            node._grad_fn(node.grad)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _result(a.data - b.data, (a, b), grad_fn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    _check_same_shape(a, b, "maximum")
    a_wins = a.data >= b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * a_wins)
        if b.requires_grad:
            _accum(b, g * ~a_wins)

    return _result(np.maximum(a.data, b.data), (a, b), grad_fn)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first operand."""
    _check_same_shape(a, b, "minimum")
    a_wins = a.data <= b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * a_wins)
        if b.requires_grad:
            _accum(b, g * ~a_wins)

    return _result(np.minimum(a.data, b.data), (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def grad_fn(g):
        if x.requires_grad:
            _accum(x, g * pos)

    return _result(np.maximum(x.data, 0), (x,), grad_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def grad_fn(g):
        if x.requires_grad:
            _accum(x, g * s)

    return _result(x.data * s, (x,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    def grad_fn(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), grad_fn)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def grad_fn(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, float(g) / n))

    return _result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Weights for one convolution: weight (out_ch, in_ch, kH, kW), optional
    bias (out_ch,), plus stride / zero padding / dilation."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d, got shape {self.weight.data.shape}")
        kh, kw = self.weight.data.shape[2:]
        if kh not in (1, 3) or kw not in (1, 3):
            raise ShapeError(f"conv kernels are restricted to 1x1 and 3x3, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0 or self.dilation < 1:
            raise ValueError("stride/dilation must be >= 1 and padding >= 0")
        if self.bias is not None and self.bias.data.shape != (self.weight.data.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.data.shape} does not match out_ch {self.weight.data.shape[0]}"
            )


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2-d convolution (cross-correlation) via im2col and one GEMM."""
    w, b = params.weight, params.bias
    out_ch, in_ch, kh, kw = w.data.shape
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.data.shape}")
    n, c, h, win = x.data.shape
    if c != in_ch:
        raise ShapeError(
            f"conv2d: input has {c} channels (shape {x.data.shape}) but weight expects "
            f"{in_ch} (shape {w.data.shape})"
        )
    s, p, d = params.stride, params.padding, params.dilation
    span_h = (kh - 1) * d + 1
    span_w = (kw - 1) * d + 1
    ho = (h + 2 * p - span_h) // s + 1
    wo = (win + 2 * p - span_w) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel span {span_h}x{span_w} exceeds padded input {h + 2 * p}x{win + 2 * p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    windows = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    windows = windows[:, :, ::s, ::s, ::d, ::d]  # (n, c, ho, wo, kh, kw)
    col = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(out_ch, -1)
    out = col @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2))

    def grad_fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, out_ch)
        if w.requires_grad:
            _accum(w, (gmat.T @ col).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, gmat.sum(axis=0))
        if x.requires_grad:
            dcol = gmat @ wmat  # (n*ho*wo, c*kh*kw)
            dcol = np.ascontiguousarray(
                dcol.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            )
            dxp = np.zeros((n, c, h + 2 * p, win + 2 * p), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i * d : i * d + (ho - 1) * s + 1 : s, j * d : j * d + (wo - 1) * s + 1 : s] += dcol[
                        :, :, i, j
                    ]
            _accum(x, dxp[:, :, p : p + h, p : p + win] if p else dxp)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, grad_fn)


# ---------------------------------------------------------------------------
# resampling / concatenation


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense 1-d bilinear interpolation matrix, align-corners=false."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * ratio - 0.5
        i0 = math.floor(src)
        frac = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear 2x/4x upsampling (align-corners=false)."""
    if factor not in (2, 4):
        raise ValueError(f"bilinear_upsample factor must be 2 or 4, got {factor}")
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample input must be NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    ay = _interp_matrix(h, h * factor).astype(x.data.dtype)
    ax = _interp_matrix(w, w * factor).astype(x.data.dtype)

    def apply(mat_y, mat_x, arr):
        t = np.tensordot(mat_y, arr, axes=(1, 2))  # (H2, n, c, W)
        t = np.moveaxis(t, 0, 2)
        u = np.tensordot(mat_x, t, axes=(1, 3))  # (W2, n, c, H2)
        return np.ascontiguousarray(np.moveaxis(u, 0, 3))

    def grad_fn(g):
        if x.requires_grad:
            _accum(x, apply(ay.T, ax.T, g))

    return _result(apply(ay, ax, x.data), (x,), grad_fn)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; gradient splits back."""
    if not inputs:
        raise ValueError("concat_channels needs at least one tensor")
    base = inputs[0].data.shape
    for t in inputs[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels: shape {s} does not align with {base} outside the channel axis")
    widths = [t.data.shape[1] for t in inputs]
    offsets = np.cumsum([0] + widths)

    def grad_fn(g):
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accum(t, g[:, lo:hi])

    return _result(np.concatenate([t.data for t in inputs], axis=1), tuple(inputs), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, keeping 1x1 spatial dims."""
    n, c, h, w = x.data.shape

    def grad_fn(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g / (h * w), x.data.shape))

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), grad_fn)


def broadcast_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Tile a (n, c, 1, 1) map to (n, c, h, w)."""
    if x.data.shape[2:] != (1, 1):
        raise ShapeError(f"broadcast_spatial expects 1x1 spatial dims, got shape {x.data.shape}")

    def grad_fn(g):
        if x.requires_grad:
            _accum(x, g.sum(axis=(2, 3), keepdims=True))

    return _result(np.ascontiguousarray(np.broadcast_to(x.data, (x.data.shape[0], x.data.shape[1], h, w))), (x,), grad_fn)


# ---------------------------------------------------------------------------
# loss


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the channel axis (plain numpy helper)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, weights: Sequence[float]) -> Tensor:
    """Per-pixel weighted negative log-likelihood, averaged over all pixels.

    logits: (n, num_classes, h, w); labels: (n, h, w) integer classes;
    weights: one float per class applied to each pixel's true class.
    """
    if logits.data.ndim != 4:
        raise ShapeError(f"logits must be NCHW, got shape {logits.data.shape}")
    n, num_classes, h, w = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.data.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes - 1}], got range [{labels.min()}, {labels.max()}]"
        )
    wvec = np.asarray(weights, dtype=logits.data.dtype)
    if wvec.shape != (num_classes,):
        raise ShapeError(f"weights must have length {num_classes}, got shape {wvec.shape}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    idx = labels[:, None, :, :]
    logp_true = np.take_along_axis(logp, idx, axis=1)[:, 0]
    pix_w = wvec[labels]
    total = n * h * w
    loss = -(pix_w * logp_true).sum() / total

    def grad_fn(g):
        if logits.requires_grad:
            grad = e / denom
            picked = np.take_along_axis(grad, idx, axis=1)
            np.put_along_axis(grad, idx, picked - 1.0, axis=1)
            grad *= pix_w[:, None, :, :]
            grad *= float(g) / total
            _accum(logits, grad)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments and step counter for a fixed parameter list."""

    base_lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_optimizer(params: Sequence[Tensor], base_lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    state = OptimizerState(base_lr=base_lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def cosine_lr(base_lr: float, schedule_position: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * position)), position in [0, 1]."""
    if not 0.0 <= schedule_position <= 1.0:
        raise ValueError(f"schedule position must lie in [0, 1], got {schedule_position}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * schedule_position))


def adam_step(params: Sequence[Tensor], state: OptimizerState, schedule_position: float):
    """One Adam update with bias correction at the cosine-scheduled rate."""
    lr = cosine_lr(state.base_lr, schedule_position)
    for i, p in enumerate(params):
        if p.grad is None:
            raise RuntimeError(f"parameter {i} has no gradient; run backward first")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoint file format
#
# magic "C3PO", version byte, u32 entry count, then per entry:
# u32 name length, UTF-8 name, 4 x u32 dims, raw little-endian float32 data.
# Arrays with fewer than 4 dims are stored with trailing 1s.


def save_checkpoint(path, entries: dict):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([CHECKPOINT_VERSION]))
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
            if a.ndim > 4:
                raise ValueError(f"checkpoint entries are at most 4-d, {name!r} has shape {a.shape}")
            dims = list(a.shape) + [1] * (4 - a.ndim)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<4I", *dims))
            f.write(a.tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as an ordered {name: float32 array} dict."""

    def need(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise ValueError(f"truncated checkpoint: expected {n} bytes for {what}")
        return buf

    entries: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if need(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        version = need(f, 1, "version")[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        (count,) = struct.unpack("<I", need(f, 4, "entry count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", need(f, 4, "name length"))
            if name_len > 1 << 16:
                raise ValueError(f"corrupt checkpoint: name length {name_len}")
            name = need(f, name_len, "name").decode("utf-8")
            dims = struct.unpack("<4I", need(f, 16, "dims"))
            size = int(np.prod(dims))
            data = np.frombuffer(need(f, 4 * size, f"data of {name!r}"), dtype="<f4")
            entries[name] = data.reshape(dims).copy()
    return entries
