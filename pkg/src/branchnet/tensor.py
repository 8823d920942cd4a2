"""Dense tensors and taped reverse-mode differentiation.

The operation set is exactly what the branched residual network needs:
conv2d, batch_norm2d, relu, pool2d, global_avg_pool, linear, softmax,
residual_add, plus a handful of scalarizing helpers (sum_all, weighted_sum,
scale, softmax_cross_entropy) used by the loss and the gradient checker.

Gradients are recorded on an explicit :class:`Tape`: ops executed inside a
``with Tape() as tape:`` block append nodes in execution order, which is a
valid topological order, and :func:`reverse_pass` walks it backwards.
Outside a tape, ops run forward-only (evaluation mode, no graph memory).

Reference precision is float64; float32 is permitted for fast training runs.
Dtype follows the input arrays.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

DTYPE_REF = np.float64
DTYPE_FAST = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes disagree; names the offending dimension."""


class Tensor:
    """Dense N-dimensional float array with optional gradient.

    ``grad`` is populated by :func:`reverse_pass` and always has the same
    shape as ``data``. ``requires_grad`` marks leaves whose gradient is
    wanted; it propagates to op outputs while a tape is active.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE_REF)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops, appended in execution order.

    Execution order is a topological order of the (acyclic) graph, so the
    reverse pass visits each node exactly once, last-created first.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _record(op: str, inputs: tuple[Tensor, ...], output: Tensor,
            backward: Callable[[np.ndarray], tuple]) -> None:
    if not _TAPE_STACK:
        return
    if not any(t.requires_grad for t in inputs):
        return
    output.requires_grad = True
    _TAPE_STACK[-1].nodes.append(TapeNode(op, inputs, output, backward))


def reverse_pass(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate (sum) across fan-out. The walk order is fixed
    (reverse execution order), so reference-mode results are bit-reproducible.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        in_grads = node.backward(out_grad)
        for tensor, grad in zip(node.inputs, in_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = grad.astype(tensor.data.dtype, copy=True)
            else:
                tensor.grad = tensor.grad + grad


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold (N,C,H,W) into (N*OH*OW, C*kh*kw) patch rows."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Fold patch-row gradients back onto the (N,C,H,W) input, summing overlaps."""
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            out[:, :, i:i_max:stride, j:j_max:stride] += cols[:, :, i, j, :, :]
    if pad > 0:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip), NCHW layout.

    Output spatial size is floor((H + 2*pad - kh)/stride) + 1, same for W.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D [Cout,Cin,kh,kw], got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input Cin={cin}, weight Cin={wcin}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    w2 = weight.data.reshape(cout, -1)
    out_data = cols @ w2.T
    if bias is not None:
        out_data = out_data + bias.data
    out = Tensor(out_data.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))

    def backward(grad: np.ndarray):
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(weight.shape)
        dx = _col2im(g2 @ w2, x.shape, kh, kw, stride, pad)
        db = g2.sum(axis=0) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    _record("conv2d", inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# batch normalization

def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: Tensor, running_var: Tensor,
                 mode: str = "train", epsilon: float = 1e-5,
                 momentum: float = 0.9) -> Tensor:
    """Per-channel normalization over (N,H,W); population variance.

    Train mode uses batch statistics and updates the running buffers in
    place: running <- momentum*running + (1-momentum)*batch. Eval mode
    normalizes with the running buffers only.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm2d input must be 4-D [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm2d {name} must have shape ({c},), got {t.shape}")

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError(
                f"batch_norm2d train mode needs N*H*W >= 2, got {m} (degenerate variance)")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data[...] = momentum * running_mean.data + (1.0 - momentum) * mean
        running_var.data[...] = momentum * running_var.data + (1.0 - momentum) * var
    else:
        mean = running_mean.data
        var = running_var.data

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    if mode == "train":
        def backward(grad: np.ndarray):
            dbeta = grad.sum(axis=(0, 2, 3))
            dgamma = (grad * xhat).sum(axis=(0, 2, 3))
            dxhat = grad * gamma.data[None, :, None, None]
            mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv_std[None, :, None, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
            return dx, dgamma, dbeta
    else:
        def backward(grad: np.ndarray):
            dbeta = grad.sum(axis=(0, 2, 3))
            dgamma = (grad * xhat).sum(axis=(0, 2, 3))
            dx = grad * (gamma.data * inv_std)[None, :, None, None]
            return dx, dgamma, dbeta

    _record("batch_norm2d", (x, gamma, beta), out, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise / pooling / linear

def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); gradient mask is 1 where x > 0, else 0."""
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(grad: np.ndarray):
        return ((x.data > 0) * grad,)

    _record("relu", (x,), out, backward)
    return out


def pool2d(x: Tensor, kind: str, window: int, stride: Optional[int] = None) -> Tensor:
    """Per-window max or mean over non-padded windows.

    Max ties go to the first index in row-major scan order; avg splits the
    gradient uniformly across the window.
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"kind must be 'max' or 'avg', got {kind!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d input must be 4-D [N,C,H,W], got {x.shape}")
    if stride is None:
        stride = window
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input {h}x{w}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    sw = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    sw = sw[:, :, ::stride, ::stride, :, :]
    flat = sw.reshape(n, c, oh, ow, window * window)

    if kind == "max":
        # argmax over the flattened window is row-major, first occurrence wins
        idx = flat.argmax(axis=-1)
        out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

        def backward(grad: np.ndarray):
            dx = np.zeros_like(x.data)
            ni, ci, oi, oj = np.indices(idx.shape)
            src_i = oi * stride + idx // window
            src_j = oj * stride + idx % window
            np.add.at(dx, (ni, ci, src_i, src_j), grad)
            return (dx,)
    else:
        out = Tensor(flat.mean(axis=-1))

        def backward(grad: np.ndarray):
            dx = np.zeros_like(x.data)
            share = grad / (window * window)
            for i in range(window):
                for j in range(window):
                    dx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += share
            return (dx,)

    _record(f"pool2d_{kind}", (x,), out, backward)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def backward(grad: np.ndarray):
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape).copy(),)

    _record("global_avg_pool", (x,), out, backward)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: [N,D] @ [K,D]^T + [K]."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear input must be 2-D [N,D], got {x.shape}")
    n, d = x.shape
    k, wd = weight.shape
    if wd != d:
        raise ShapeError(f"linear dimension mismatch: input D={d}, weight D={wd}")
    if bias.shape != (k,):
        raise ShapeError(f"linear bias must have shape ({k},), got {bias.shape}")
    out = Tensor(x.data @ weight.data.T + bias.data)

    def backward(grad: np.ndarray):
        return grad @ weight.data, grad.T @ x.data, grad.sum(axis=0)

    _record("linear", (x, weight, bias), out, backward)
    return out


def softmax(logits: Tensor) -> Tensor:
    """Row softmax of [N,K] logits, computed with max subtraction."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax input must be 2-D [N,K], got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("softmax rejects non-finite logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def backward(grad: np.ndarray):
        return ((grad - (grad * y).sum(axis=1, keepdims=True)) * y,)

    _record("softmax", (logits,), out, backward)
    return out


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of identically shaped tensors (shortcut join)."""
    if a.shape != b.shape:
        raise ShapeError(f"residual_add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(grad: np.ndarray):
        return grad, grad

    _record("residual_add", (a, b), out, backward)
    return out


# ---------------------------------------------------------------------------
# scalarizers and loss plumbing

def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def backward(grad: np.ndarray):
        return (np.full_like(x.data, float(grad.reshape(()))),)

    _record("sum_all", (x,), out, backward)
    return out


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) with constant weights; scalarizer for gradient probes."""
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum weights shape {w.shape} != input {x.shape}")
    out = Tensor(np.asarray((x.data * w).sum(), dtype=x.data.dtype))

    def backward(grad: np.ndarray):
        return (w * float(grad.reshape(())),)

    _record("weighted_sum", (x,), out, backward)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant."""
    out = Tensor(x.data * factor)

    def backward(grad: np.ndarray):
        return (grad * factor,)

    _record("scale", (x,), out, backward)
    return out


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -sum(p * log softmax(logits)).

    ``targets`` are constant probability rows; the gradient w.r.t. the
    logits is (softmax(logits) - targets) / N, fused for stability.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy logits must be 2-D, got {logits.shape}")
    p = np.asarray(targets, dtype=logits.data.dtype)
    if p.shape != logits.shape:
        raise ShapeError(
            f"softmax_cross_entropy targets shape {p.shape} != logits {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("softmax_cross_entropy rejects non-finite logits")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_q = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Tensor(np.asarray(-(p * log_q).sum() / n, dtype=logits.data.dtype))
    q = np.exp(log_q)

    def backward(grad: np.ndarray):
        return ((q - p) / n * float(grad.reshape(())),)

    _record("softmax_cross_entropy", (logits,), out, backward)
    return out
