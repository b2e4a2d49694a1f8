"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the handful of operations needed by the segmentation model and its
losses are provided. Each op records a closure on its output tensor; calling
``backward`` on a scalar walks the graph once in reverse topological order.
Tensors built from inputs that do not require gradients record nothing, so a
forward pass over plain arrays (the teacher) leaves no tape behind.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

IGNORE = 255


class Tensor:
    """Dense array with an optional gradient and backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit grad needs a scalar tensor")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if parent is None or not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction helpers


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: ((a, g * c),), "scale")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    total = np.sum(a.data, dtype=np.float64).astype(a.dtype)
    return _make(total, (a,), lambda g: ((a, np.broadcast_to(g, a.shape).astype(a.dtype)),), "sum")


# ---------------------------------------------------------------------------
# network ops


def conv2d(x, kernel, bias, padding: int) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIkk kernel plus bias."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-d NCHW, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-d, got shape {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: input channels (dim 1) {cin} != kernel input channels {kcin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != output channels ({cout},)")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w} with padding {padding}")

    # im2col in channels-last layout so every copy moves contiguous channel runs
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.concatenate(
        [xp[:, i:i + ho, j:j + wo, :] for i in range(kh) for j in range(kw)], axis=-1
    ).reshape(n * ho * wo, kh * kw * cin)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (gflat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            gb = np.sum(gflat, axis=0, dtype=np.float64).astype(bias.dtype)
        if x.requires_grad:
            # one small matmul per kernel tap keeps every added block contiguous
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    tap = wmat[:, (i * kw + j) * cin:(i * kw + j + 1) * cin]
                    gxp[:, i:i + ho, j:j + wo, :] += (gflat @ tap).reshape(n, ho, wo, cin)
            gx = gxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)
        return ((x, gx), (kernel, gk), (bias, gb))

    return _make(out, (x, kernel, bias), backward, "conv2d")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN visible instead of clipping it to 0
    return _make(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: ((x, g * mask),), "relu")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channel(logits) -> Tensor:
    """Per-pixel softmax over axis 1 of an NKHW tensor."""
    logits = as_tensor(logits)
    if logits.data.ndim != 4 or logits.shape[1] < 2:
        raise ValueError(f"softmax_channel: need N,K,H,W with K >= 2, got {logits.shape}")
    p = _softmax(logits.data)

    def backward(g):
        return ((logits, p * (g - np.sum(g * p, axis=1, keepdims=True))),)

    return _make(p, (logits,), backward, "softmax")


def masked_ce(logits, labels: np.ndarray, ignore_index: int = IGNORE) -> Tensor:
    """Cross-entropy averaged over valid pixels per sample, then over samples.

    Samples without a single valid pixel are left out of the outer mean. If
    no sample has a valid pixel the result is 0 with a zero gradient.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"masked_ce: labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != ignore_index
    if np.any(labels[valid] >= k):
        raise ValueError(f"masked_ce: label value >= number of classes {k}")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    nll = np.where(valid, logsumexp - picked, 0.0)

    counts = valid.reshape(n, -1).sum(axis=1)
    used = counts > 0
    n_used = int(used.sum())
    if n_used == 0:
        loss = 0.0
        weights = np.zeros(n)
    else:
        weights = np.where(used, 1.0 / np.maximum(counts, 1), 0.0) / n_used
        loss = float(np.sum(nll.reshape(n, -1).sum(axis=1) * weights))

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        coef = valid * weights[:, None, None]
        grad = (p - onehot) * coef[:, None] * float(g)
        return ((logits, grad.astype(logits.dtype)),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "masked_ce")


# ---------------------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients."""
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    fn(xt).backward()
    analytic = np.zeros_like(x) if xt.grad is None else xt.grad

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn(Tensor(x.copy())).item()
        flat[i] = old - eps
        fm = fn(Tensor(x.copy())).item()
        flat[i] = old
        nflat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
