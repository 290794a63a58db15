"""Minimal reverse-mode tensor engine backed by numpy.

Only the operations the temporal residual network and its losses need are
implemented: 3D convolution (valid in time, zero-padded "same" in space),
1x1 channel convolution, elementwise add/mul/relu, reshape, stable
log-softmax / log-sum-exp, and masked weighted cross-entropy. Values are
float32 by default; running the same graph in float64 is supported for
gradient verification.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, ShapeError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus an optional gradient buffer and backward closure."""

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward_fn: Optional[Callable] = None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # numpy scalar (e.g. the result of 0-d arithmetic): keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    @property
    def has_graph(self) -> bool:
        """True when backward() can reach at least one live parameter."""
        return bool(self._parents)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this scalar into every reachable parameter."""
        if self.data.size != 1:
            raise UsageError("backward expects a scalar loss, got shape %r" % (self.shape,))
        if not self._parents and not self.requires_grad:
            raise UsageError("backward on a detached value (no graph attached)")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS; graphs can exceed the recursion limit
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), _wrap(-1.0, self.dtype)))

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named leaf tensor; frozen parameters are excluded from gradient flow."""

    def __init__(self, data: np.ndarray, name: str, frozen: bool = False):
        super().__init__(np.asarray(data), requires_grad=not frozen)
        self.name = name

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    @frozen.setter
    def frozen(self, value: bool):
        self.requires_grad = not bool(value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accumulate(t: Tensor, grad: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _node(out_data, (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(out_data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return _node(out_data, (x,), backward)


# --- convolutions -----------------------------------------------------------

def _im2col(padded: np.ndarray, kt: int, kh: int, kw: int) -> np.ndarray:
    # padded: (B, T, C, Hp, Wp) -> (B*T'*H*W, C*kt*kh*kw)
    win = sliding_window_view(padded, (kt, kh, kw), axis=(1, 3, 4))
    b, tp, c, h, w = win.shape[:5]
    cols = win.transpose(0, 1, 3, 4, 2, 5, 6, 7)
    return cols.reshape(b * tp * h * w, c * kt * kh * kw)


def _pad_spatial(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv3d(x: Tensor, kernel: Tensor, name: Optional[str] = None) -> Tensor:
    """Convolve (B,T,C,H,W) or (T,C,H,W) input with an (F,C,kt,kh,kw) kernel.

    Temporal axis is reduced by kt-1 (no padding); spatial extents are
    preserved with zero-fill padding, which requires odd kh and kw.
    """
    where = f" in {name}" if name else ""
    kd = kernel.data
    if kd.ndim != 5:
        raise ShapeError(f"conv3d kernel must be 5D (F,C,kt,kh,kw), got {kd.shape}{where}")
    f, c_k, kt, kh, kw = kd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv3d spatial kernel extents must be odd, got {kh}x{kw}{where}")
    batched = x.data.ndim == 5
    if not batched and x.data.ndim != 4:
        raise ShapeError(f"conv3d input must be 4D or 5D, got shape {x.shape}{where}")
    xd = x.data if batched else x.data[None]
    b, t, c, h, w = xd.shape
    if c != c_k:
        raise ShapeError(f"conv3d channel mismatch: input has {c}, kernel expects {c_k}{where}")
    if kt > t:
        raise ShapeError(f"temporal kernel {kt} exceeds input timesteps {t}{where}")
    tp = t - kt + 1
    ph, pw = kh // 2, kw // 2

    kmat = kd.reshape(f, -1)
    cols = _im2col(_pad_spatial(xd, ph, pw), kt, kh, kw)
    out = cols @ kmat.T
    out = np.ascontiguousarray(
        out.reshape(b, tp, h, w, f).transpose(0, 1, 4, 2, 3))
    del cols  # large; recomputed in backward rather than held in the graph

    def backward(g):
        if not batched:
            g = g[None]
        g2 = np.ascontiguousarray(g.transpose(0, 1, 3, 4, 2)).reshape(-1, f)
        if kernel.requires_grad:
            cols_b = _im2col(_pad_spatial(xd, ph, pw), kt, kh, kw)
            _accumulate(kernel, (g2.T @ cols_b).reshape(kd.shape))
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(b, tp, h, w, c, kt, kh, kw)
            gpad = np.zeros((b, t, c, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
            for dt in range(kt):
                for dy in range(kh):
                    for dx in range(kw):
                        gpad[:, dt:dt + tp, :, dy:dy + h, dx:dx + w] += \
                            gcols[..., dt, dy, dx].transpose(0, 1, 4, 2, 3)
            gx = gpad[:, :, :, ph:ph + h, pw:pw + w]
            _accumulate(x, gx if batched else gx[0])

    return _node(out if batched else out[0], (x, kernel), backward)


def conv1x1(x: Tensor, kernel: Tensor, name: Optional[str] = None) -> Tensor:
    """Per-pixel linear map over the channel axis (third from the end)."""
    where = f" in {name}" if name else ""
    kd = kernel.data
    if kd.ndim != 4 or kd.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 kernel must be (K,C,1,1), got {kd.shape}{where}")
    k, c = kd.shape[:2]
    if x.data.ndim < 3:
        raise ShapeError(f"conv1x1 input needs at least (C,H,W) dims, got {x.shape}{where}")
    if x.shape[-3] != c:
        raise ShapeError(f"conv1x1 channel mismatch: input has {x.shape[-3]}, kernel expects {c}{where}")
    kmat = kd.reshape(k, c)
    xm = np.moveaxis(x.data, -3, -1)
    out = np.moveaxis(xm @ kmat.T, -1, -3)

    def backward(g):
        gm = np.moveaxis(g, -3, -1)
        if kernel.requires_grad:
            gk = gm.reshape(-1, k).T @ xm.reshape(-1, c)
            _accumulate(kernel, gk.reshape(kd.shape))
        if x.requires_grad:
            _accumulate(x, np.moveaxis(gm @ kmat, -1, -3))

    return _node(np.ascontiguousarray(out), (x, kernel), backward)


# --- reductions and normalizers ---------------------------------------------

def log_softmax(x: Tensor, axis: int) -> Tensor:
    """Stable log-softmax along `axis` (max-shifted log-sum-exp)."""
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        # d/dx = g - softmax(x) * sum(g along axis)
        _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node(out, (x,), backward)


def logsumexp(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp; -inf entries contribute zero weight."""
    m = x.data.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        out_k = np.log(np.exp(x.data - m_safe).sum(axis=axis, keepdims=True)) + m_safe
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(x.data - out_k)
        w = np.where(np.isneginf(x.data), 0.0, w)
        _accumulate(x, gk * w)

    return _node(out, (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, axis: int = 0,
                  ignore_index: int = 65535,
                  class_weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean over non-ignored positions of -log_softmax(logits)[target].

    `targets` has the shape of `logits` with `axis` removed. Each position's
    term is scaled by its class weight when `class_weights` is given; the
    divisor stays the count of non-ignored positions. All ignored -> 0 with
    zero gradient.
    """
    axis = axis % logits.ndim
    k = logits.shape[axis]
    targets = np.asarray(targets)
    expected = logits.shape[:axis] + logits.shape[axis + 1:]
    if targets.shape != expected:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape} minus axis {axis}")
    flat_t = targets.reshape(-1).astype(np.int64)
    mask = flat_t != ignore_index
    if mask.any():
        sel = flat_t[mask]
        if sel.min() < 0 or sel.max() >= k:
            raise InputError(f"target class ids must lie in [0, {k}) or equal {ignore_index}")
    if class_weights is not None:
        class_weights = np.asarray(class_weights, dtype=logits.dtype)
        if class_weights.shape != (k,):
            raise ShapeError(f"class_weights must have shape ({k},), got {class_weights.shape}")
    if not mask.any():
        # Defined as 0; route through the graph so backward yields zero grads.
        return mul(tsum(logits), _wrap(0.0, logits.dtype))

    lm = np.moveaxis(logits.data, axis, -1).reshape(-1, k)
    rows = lm[mask]
    m = rows.max(axis=1, keepdims=True)
    shifted = rows - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    idx = np.arange(sel.size)
    picked = logp[idx, sel]
    w = class_weights[sel] if class_weights is not None else None
    terms = -picked if w is None else -(w * picked)
    n = sel.size
    out = np.asarray(terms.sum() / n, dtype=logits.dtype)

    def backward(g):
        if not logits.requires_grad:
            return
        soft = np.exp(logp)
        grad_rows = soft.copy() if w is None else soft * w[:, None]
        if w is None:
            grad_rows[idx, sel] -= 1.0
        else:
            grad_rows[idx, sel] -= w
        grad_rows *= float(g) / n
        gflat = np.zeros_like(lm)
        gflat[mask] = grad_rows
        gshape = logits.shape[:axis] + logits.shape[axis + 1:] + (k,)
        _accumulate(logits, np.moveaxis(gflat.reshape(gshape), -1, axis))

    return _node(out, (logits,), backward)
