"""Minimal dense-array substrate with reverse-mode gradients.

A ``Tensor`` wraps one numpy array plus an optional gradient buffer; every
operation records a backward closure, and ``backward()`` walks the graph in
reverse topological order. Float32 is the working precision; models can be
built in float64 for finite-difference gradient checks. Forward/backward on
one graph is single-threaded; inference over shared read-only parameters is
safe across threads.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor; seeds with ones for scalars."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(np.asarray(data), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T, parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    out._backward = backward
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx], parents=(a,))

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

    out._backward = backward
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), parents=tuple(ts))
    sizes = [t.data.shape[axis] for t in ts]

    def backward(g):
        offset = 0
        for t, size in zip(ts, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                t._accumulate(g[tuple(idx)])
            offset += size

    out._backward = backward
    return out


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup into a [rows, C] table with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(table.data[idx], parents=(table,))

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)

    out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    out._backward = backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * y * (1.0 - y))

    out._backward = backward
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, parents=(a,))

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate(y * (g - dot))

    out._backward = backward
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last (channel) axis with learned affine."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, parents=(a, gain, bias))

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, xhat.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - m1 - xhat * m2))

    out._backward = backward
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-resolution 2D convolution of [Cin,H,W] by [Cout,Cin,k,k], k odd."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects [Cin,H,W] and [Cout,Cin,k,k], got {x.data.shape}, {w.data.shape}")
    cout, cin, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0 or k not in (1, 3):
        raise ValueError(f"unsupported kernel size {k}x{k2} (must be 1 or 3)")
    if cin != x.data.shape[0]:
        raise ValueError(f"channel mismatch: input {x.data.shape[0]}, kernel {cin}")
    _, h, wd = x.data.shape
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [Cin, H, W, k, k]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h * wd, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out2 = cols @ wmat.T
    y = out2.T.reshape(cout, h, wd)
    if b is not None:
        y = y + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, parents=parents)

    def backward(g):
        g2 = g.reshape(cout, h * wd).T
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(h, wd, cin, k, k)
            dxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    dxp[:, di : di + h, dj : dj + wd] += dcols[:, :, :, di, dj].transpose(2, 0, 1)
            x._accumulate(dxp[:, pad : pad + h, pad : pad + wd] if pad else dxp)

    out._backward = backward
    return out


def upsample2_nn(a: Tensor) -> Tensor:
    """2x nearest-neighbor upsample of [C,H,W]; backward sums each 2x2 block."""
    a = _wrap(a)
    if a.data.ndim != 3:
        raise ValueError(f"upsample2_nn expects [C,H,W], got {a.data.shape}")
    out = Tensor(np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2), parents=(a,))

    def backward(g):
        if a.requires_grad:
            c, h2, w2 = g.shape
            a._accumulate(g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4)))

    out._backward = backward
    return out


def mean(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g / a.data.size))

    out._backward = backward
    return out


def tsum(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g))

    out._backward = backward
    return out


def absolute(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.abs(a.data), parents=(a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    out._backward = backward
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy from logits (stable log-sum-exp form)."""
    logits = _wrap(logits)
    z = np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    loss = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.asarray(loss.mean(), dtype=x.dtype), parents=(logits,))

    def backward(g):
        if logits.requires_grad:
            p = 1.0 / (1.0 + np.exp(-x))
            logits._accumulate(g * (p - z) / x.size)

    out._backward = backward
    return out


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error against a constant target."""
    t = Tensor(np.asarray(target, dtype=pred.data.dtype))
    return mean(absolute(pred - t))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map of row vectors: x @ w (+ b); w stored [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SGD:
    """SGD with momentum and decoupled-into-gradient weight decay.

    Update: v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    Velocity buffers start at zero.
    """

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = [p for p in params if p.trainable]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[p.name]
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_check(
    make_loss: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    entries_per_param: int | None = None,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients with central differences.

    ``make_loss`` must rebuild the forward graph and return a scalar Tensor.
    Parameters must be float64. Errors are |analytic - numeric| relative to
    max(1, |analytic|, |numeric|); per-parameter maxima are reported together
    with a non-finite flag. When ``entries_per_param`` is set, a seeded random
    subset of entries is probed instead of every entry.

    Piecewise-linear activations (relu) make the loss non-smooth at isolated
    points; a coordinate whose step interval straddles a kink yields a
    contaminated difference quotient. Coordinates whose first measurement
    disagrees with the analytic gradient are therefore re-measured at
    ``eps / 100``: a genuine backward bug persists at any step, a kink
    artifact vanishes.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, {p.name} is {p.data.dtype}")
        p.grad = None
    loss = make_loss()
    loss.backward()
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}

    rng = np.random.default_rng(seed)
    report: dict[str, dict] = {}
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if entries_per_param is not None and entries_per_param < n:
            idxs = rng.choice(n, size=entries_per_param, replace=False)
        else:
            idxs = np.arange(n)
        max_err = 0.0
        nonfinite = not np.isfinite(analytic[p.name]).all()
        for i in idxs:
            a = float(analytic[p.name].reshape(-1)[i])
            err = None
            for step in (eps, eps / 100.0):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(make_loss().data)
                flat[i] = orig - step
                f_minus = float(make_loss().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                if not np.isfinite(numeric):
                    nonfinite = True
                    err = None
                    break
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if err < 1e-7:  # smooth coordinate, no kink refinement needed
                    break
            if err is not None:
                max_err = max(max_err, err)
        report[p.name] = {"max_rel_err": max_err, "nonfinite": nonfinite}
        worst = max(worst, max_err)
    report["__overall__"] = {"max_rel_err": worst,
                             "nonfinite": any(v["nonfinite"] for k, v in report.items() if k != "__overall__")}
    return report
