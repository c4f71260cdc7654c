"""Reverse-mode automatic differentiation on numpy arrays.

The operator set is exactly what the gait model needs: matmul (with
leading batch dims), 2d cross-correlation, depthwise convolution, batch
norm, layer norm, silu, softmax, global average pooling, patch
unfold/fold, affine projection and cross entropy. Every differentiable
op carries a hand-written backward closure; grad_check compares those
against central finite differences.

Two precisions are supported: float64 (gradient checking) and float32
(training). No GPU, no general broadcasting beyond what the model uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateBatchError,
    LabelError,
    NumericError,
    ShapeError,
    TilingError,
)

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A numpy array plus a gradient slot and a backward closure.

    Nodes created by ops remember their parents; ``backward()`` walks the
    graph in reverse topological order. Construction order keeps the
    graph acyclic.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"

    # operator sugar, all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Populate .grad on every reachable requires_grad tensor.

        Gradients accumulate additively across multiple uses of the same
        tensor. Must be called on a scalar.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _accum(t: Tensor, g: np.ndarray):
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.reshape(t.data.shape).copy()
    else:
        t.grad += g.reshape(t.data.shape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data, parents, op, backward):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else (), _op=op)
    if req:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), "add", backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _result(data, (a, b), "sub", backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), "mul", backward)


def sum_all(a):
    a = as_tensor(a)
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.shape))

    return _result(data, (a,), "sum", backward)


def mean_all(a):
    a = as_tensor(a)
    n = a.data.size
    data = np.asarray(a.data.mean(), dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g / n, a.shape))

    return _result(data, (a,), "mean", backward)


def silu(x):
    """x * sigmoid(x), the activation used throughout the model."""
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def backward(g):
        if x.requires_grad:
            _accum(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return _result(data, (x,), "silu", backward)


def softmax(x):
    """Numerically stabilized softmax along the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            _accum(x, data * (g - dot))

    return _result(data, (x,), "softmax", backward)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.shape))

    return _result(data, (x,), "reshape", backward)


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            _accum(x, g.transpose(inv))

    return _result(data, (x,), "transpose", backward)


def swap_last2(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _result(data, tuple(tensors), "concat", backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading batch dims allowed on either operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _result(data, (a, b), "matmul", backward)


def linear(x, w, b=None):
    """Affine map on the trailing dimension: x @ w + b."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input width {x.shape[-1]} != weight rows {w.shape[0]}")
    data = np.matmul(x.data, w.data)
    if b is not None:
        b = as_tensor(b)
        data = data + b.data

    def backward(g):
        if x.requires_grad:
            _accum(x, np.matmul(g, w.data.T))
        if w.requires_grad:
            xf = x.data.reshape(-1, x.shape[-1])
            gf = g.reshape(-1, g.shape[-1])
            _accum(w, xf.T @ gf)
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(data, parents, "linear", backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    H, W = x.shape[2], x.shape[3]
    if kh > H or kw > W:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {H}x{W}"
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return x, win  # padded input, [B,C,H',W',kh,kw]


def _conv_input_grad(gshape_pad, gout, weight_slice, kh, kw, stride, padding, out_shape):
    """Scatter-add the output gradient back onto the (padded) input."""
    dxp = np.zeros(gshape_pad, dtype=gout.dtype)
    Ho, Wo = gout.shape[2], gout.shape[3]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                weight_slice(i, j)
            )
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp.reshape(out_shape)


def conv2d(x, k, stride=1, padding=0, bias=None):
    """2d cross-correlation (no kernel flip). kh=kw=1 gives pointwise conv."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects x[B,C,H,W], k[O,C,kh,kw]; got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    O, C, kh, kw = k.shape
    xp, win = _conv_windows(x.data, kh, kw, stride, padding)
    B = x.shape[0]
    Ho, Wo = win.shape[2], win.shape[3]
    # im2col so the contraction runs as one BLAS matmul
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, C * kh * kw
    )
    w2 = k.data.reshape(O, C * kh * kw)
    data = (cols @ w2.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        data = data + bias.data[None, :, None, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        if k.requires_grad:
            _accum(k, (g2.T @ cols).reshape(k.shape))
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, Ho, Wo, C, kh, kw)

            def wslice(i, j):
                return gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)

            _accum(x, _conv_input_grad(xp.shape, g, wslice, kh, kw, stride, padding, x.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    parents = (x, k) if bias is None else (x, k, bias)
    return _result(data, parents, "conv2d", backward)


def depthwise_conv2d(x, k, stride=1, padding=0):
    """Per-channel convolution: output channel i depends only on input channel i."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects x[B,C,H,W], k[C,kh,kw]; got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[0]:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape} vs kernel {k.shape}")
    C, kh, kw = k.shape
    xp, win = _conv_windows(x.data, kh, kw, stride, padding)
    Ho, Wo = win.shape[2], win.shape[3]

    def xslice(i, j):
        return xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]

    # accumulate per kernel offset; cheaper than an einsum over windows
    data = np.zeros((x.shape[0], C, Ho, Wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            data += xslice(i, j) * k.data[None, :, i, j, None, None]

    def backward(g):
        if k.requires_grad:
            gk = np.empty_like(k.data)
            for i in range(kh):
                for j in range(kw):
                    gk[:, i, j] = (xslice(i, j) * g).sum(axis=(0, 2, 3))
            _accum(k, gk)
        if x.requires_grad:
            kd = k.data

            def wslice(i, j):
                return g * kd[None, :, i, j, None, None]

            _accum(x, _conv_input_grad(xp.shape, g, wslice, kh, kw, stride, padding, x.shape))

    return _result(data, (x, k), "depthwise_conv2d", backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNorm2dState:
    """Running statistics updated by exponential moving average."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float64, momentum: float = 0.1):
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
        )


def batchnorm2d(x, gamma, beta, state: BatchNorm2dState, mode="train", eps=1e-5):
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes by batch statistics (population variance) and
    advances the running stats; infer mode uses the running stats. The
    affine gamma*xhat + beta applies in both.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if mode == "train":
        n = B * H * W
        if n < 2:
            raise DegenerateBatchError("batchnorm2d train mode needs B*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # population (biased) variance
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var
    else:
        mu = state.running_mean
        var = state.running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = gamma.data[None, :, None, None] * inv[None, :, None, None]
            if mode == "infer":
                _accum(x, g * gi)
            else:
                n = B * H * W
                gm = g.mean(axis=(0, 2, 3))[None, :, None, None]
                gxm = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                _accum(x, gi * (g - gm - xhat * gxm))

    return _result(data, (x, gamma, beta), "batchnorm2d", backward)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalization over the last axis (token features)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            gm = gh.mean(axis=-1, keepdims=True)
            gxm = (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gh - gm - xhat * gxm))

    return _result(data, (x, gamma, beta), "layernorm", backward)


# ---------------------------------------------------------------------------
# pooling / patching
# ---------------------------------------------------------------------------

def global_avg_pool(x):
    """Mean over the full H x W plane per (batch, channel)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    data = x.data.mean(axis=(2, 3))

    def backward(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g[:, :, None, None] / (H * W), x.shape))

    return _result(data, (x,), "global_avg_pool", backward)


def unfold_patches(x, pw: int, ph: int):
    """Tile [B,C,H,W] into non-overlapping patches -> [B, P, ph*pw, C].

    Patches are enumerated row-major over the grid; pixels inside a
    patch are row-major too. Non-divisible geometry is rejected, never
    silently padded.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise TilingError(f"unfold_patches expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H % ph or W % pw:
        raise TilingError(f"patch {ph}x{pw} does not tile feature map {H}x{W}")
    gh, gw = H // ph, W // pw
    P = gh * gw
    data = (
        x.data.reshape(B, C, gh, ph, gw, pw)
        .transpose(0, 2, 4, 3, 5, 1)
        .reshape(B, P, ph * pw, C)
    )

    def backward(g):
        if x.requires_grad:
            gx = (
                g.reshape(B, gh, gw, ph, pw, C)
                .transpose(0, 5, 1, 3, 2, 4)
                .reshape(B, C, H, W)
            )
            _accum(x, gx)

    return _result(data, (x,), "unfold_patches", backward)


def fold_patches(t, H: int, W: int, pw: int, ph: int):
    """Exact inverse of unfold_patches."""
    t = as_tensor(t)
    if t.ndim != 4:
        raise TilingError(f"fold_patches expects [B,P,ph*pw,C], got {t.shape}")
    B, P, pix, C = t.shape
    if pix != ph * pw or H % ph or W % pw or P * pix != H * W:
        raise TilingError(
            f"fold_patches geometry inconsistent: P={P}, pixels={pix}, "
            f"target {H}x{W}, patch {ph}x{pw}"
        )
    gh, gw = H // ph, W // pw
    data = (
        t.data.reshape(B, gh, gw, ph, pw, C)
        .transpose(0, 5, 1, 3, 2, 4)
        .reshape(B, C, H, W)
    )

    def backward(g):
        if t.requires_grad:
            gt = (
                g.reshape(B, C, gh, ph, gw, pw)
                .transpose(0, 2, 4, 3, 5, 1)
                .reshape(B, P, pix, C)
            )
            _accum(t, gt)

    return _result(data, (t,), "fold_patches", backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B,K] logits, got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise LabelError(f"expected {B} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise LabelError(f"labels must lie in [0,{K}), got range "
                         f"[{labels.min()},{labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(B), labels]
    data = np.asarray(nll.mean(), dtype=logits.dtype)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            gl = probs.copy()
            gl[np.arange(B), labels] -= 1.0
            _accum(logits, g * gl / B)

    return _result(data, (logits,), "cross_entropy", backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    worst_index: int
    passed: bool
    step: float
    tol: float = field(default=1e-6)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{self.op_name:<32} {status}  max_rel_error={self.max_rel_error:.3e} "
            f"(worst idx {self.worst_index}, h={self.step:g}, tol={self.tol:g})"
        )


def grad_check(f, x: Tensor, step=1e-5, tol=1e-6, name="f") -> GradCheckReport:
    """Compare backward() against central finite differences.

    f must be a scalar-valued function of x that builds a fresh graph on
    every call. Relative error uses denominator max(1, |reference|).
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericError("grad_check input contains non-finite values")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x.detach()).item()
        flat[i] = orig - step
        fm = f(x.detach()).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * step)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError(f"non-finite values during grad_check of {name}")

    denom = np.maximum(1.0, np.abs(numeric))
    rel = np.abs(analytic.reshape(-1) - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(
        op_name=name,
        max_rel_error=max_rel,
        worst_index=worst,
        passed=max_rel < tol,
        step=step,
        tol=tol,
    )
