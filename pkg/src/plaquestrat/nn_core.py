"""Tensors with tape-free reverse-mode differentiation and the layer primitives
needed by the plaque CNN.

Every primitive takes an optional leading batch axis: images are ``(H, W, C)``
or ``(N, H, W, C)``, vectors are ``(n,)`` or ``(N, n)``. All arithmetic is
float64.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, UsageError

TRAIN = "train"
INFER = "infer"

PROB_CLIP = 1e-12


class Tensor:
    """An ndarray plus the bookkeeping for reverse-mode gradients.

    Nodes produced by a primitive keep references to their parents and a
    closure that maps the output gradient to parent gradients. Nodes only
    record this when at least one parent requires a gradient, so inference
    graphs cost nothing.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def backward(self) -> "ComputeGraph":
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


class ComputeGraph:
    """Topologically ordered record of the nodes reachable from an output."""

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.nodes = order  # parents before children

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> ComputeGraph:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node needing it."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = ComputeGraph(loss)
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    for node in graph.nodes:
        if node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)
    return graph


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def tensor_sum(x: Tensor) -> Tensor:
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def sum_squares(x: Tensor) -> Tensor:
    return _node(np.array(np.sum(x.data * x.data)), (x,), lambda g: (2.0 * g * x.data,), "sum_squares")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return _node(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,), "relu")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))."""
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- convolution


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-d or batched {ndim}-d input, got shape {x.shape}")
    return x, False


def conv2d(x, kernels, bias) -> Tensor:
    """'Same' zero-padded cross-correlation.

    ``x``: (H, W, Cin) or (N, H, W, Cin); ``kernels``: (K, K, Cin, Cout), K odd;
    ``bias``: (Cout,).

    Implementation: the padded batch is flattened to rows of channels, so each
    of the K*K kernel taps is a contiguous row-slice times a (Cin, Cout) matrix.
    Outputs at padded positions are computed and discarded.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xd, squeeze = _batched(x.data, 4)
    w = kernels.data
    if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeError(f"kernels must be (K, K, Cin, Cout) with odd K, got {w.shape}")
    n, h, wd, cin = xd.shape
    k, _, kcin, cout = w.shape
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels but kernels expect {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    if h < 1 or wd < 1:
        raise ShapeError(f"input spatial dims must be >= 1, got {(h, wd)}")

    r = k // 2
    hp, wp = h + 2 * r, wd + 2 * r
    rows = n * hp * wp
    xf = np.zeros((rows + (k - 1) * wp + (k - 1), cin))
    xf[:rows].reshape(n, hp, wp, cin)[:, r : r + h, r : r + wd, :] = xd
    offsets = [(i, j, i * wp + j) for i in range(k) for j in range(k)]

    if cin == 1:
        cols = np.stack([xf[o : o + rows, 0] for _, _, o in offsets], axis=1)
        yf = cols @ w.reshape(k * k, cout)
    else:
        cols = None
        yf = np.zeros((rows, cout))
        for i, j, o in offsets:
            yf += xf[o : o + rows] @ w[i, j]
    y = yf.reshape(n, hp, wp, cout)[:, :h, :wd, :] + bias.data
    if squeeze:
        y = y[0]

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        gb = g4.sum(axis=(0, 1, 2))
        gf = np.zeros((rows, cout))
        gf.reshape(n, hp, wp, cout)[:, :h, :wd, :] = g4
        gw = np.empty_like(w)
        if cols is not None:
            gw[:] = (cols.T @ gf).reshape(k, k, 1, cout)
        else:
            for i, j, o in offsets:
                gw[i, j] = xf[o : o + rows].T @ gf
        gx = None
        if x.requires_grad:
            gxf = np.zeros_like(xf)
            for i, j, o in offsets:
                gxf[o : o + rows] += gf @ w[i, j].T
            gx = gxf[:rows].reshape(n, hp, wp, cin)[:, r : r + h, r : r + wd, :]
            gx = gx[0].copy() if squeeze else gx.copy()
        return gx, gw, gb

    return _node(np.ascontiguousarray(y), (x, kernels, bias), grad_fn, "conv2d")


def avg_pool(x, pool: int = 3) -> Tensor:
    """Non-overlapping pool x pool mean; ragged edge windows average only the
    pixels that exist. Output extent is ceil(H/pool) x ceil(W/pool)."""
    x = as_tensor(x)
    xd, squeeze = _batched(x.data, 4)
    n, h, w, c = xd.shape
    if h < 1 or w < 1:
        raise ShapeError(f"pooling needs spatial dims >= 1, got {(h, w)}")
    oh, ow = -(-h // pool), -(-w // pool)
    padded = np.zeros((n, oh * pool, ow * pool, c))
    padded[:, :h, :w, :] = xd
    sums = padded.reshape(n, oh, pool, ow, pool, c).sum(axis=(2, 4))
    rows_in = np.minimum(pool, h - np.arange(oh) * pool)
    cols_in = np.minimum(pool, w - np.arange(ow) * pool)
    counts = (rows_in[:, None] * cols_in[None, :]).astype(np.float64)[None, :, :, None]
    y = sums / counts
    if squeeze:
        y = y[0]

    def grad_fn(g):
        g4 = (g[None] if squeeze else g) / counts
        up = np.repeat(np.repeat(g4, pool, axis=1), pool, axis=2)[:, :h, :w, :]
        return (up[0] if squeeze else up,)

    return _node(y, (x,), grad_fn, "avg_pool")


# ---------------------------------------------------------------- dense head


def dense(x, weight, bias) -> Tensor:
    """``W @ x + b`` with ``W`` of shape (m, n); ``x`` is (n,) or (N, n)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.data.ndim != 2:
        raise ShapeError(f"weight must be 2-d, got {weight.shape}")
    m, n_in = weight.shape
    if x.shape[-1] != n_in or x.data.ndim not in (1, 2):
        raise ShapeError(f"input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (m,):
        raise ShapeError(f"bias must have shape ({m},), got {bias.shape}")
    y = x.data @ weight.data.T + bias.data

    def grad_fn(g):
        g2 = np.atleast_2d(g)
        x2 = np.atleast_2d(x.data)
        return g @ weight.data, g2.T @ x2, g2.sum(axis=0)

    return _node(y, (x, weight, bias), grad_fn, "dense")


def softmax(logits) -> Tensor:
    """Softmax over the last axis, shifted by the max for stability."""
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _node(p, (logits,), grad_fn, "softmax")


def dropout(x, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time so
    inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == INFER or rate == 0.0:
        return x
    if mode != TRAIN:
        raise ParameterError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")
    if rng is None:
        raise UsageError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def weighted_bce(probs, labels, pos_weight: float = 1.0) -> Tensor:
    """Class-weighted binary cross-entropy on two-class probabilities.

    ``probs`` is (2,) or (N, 2) with column 1 the positive class. A positive
    example costs ``-pos_weight * ln p1``; a negative ``-ln p0``. Batches are
    averaged. Probabilities are clipped to [1e-12, 1 - 1e-12] before the log.
    """
    probs = as_tensor(probs)
    p = np.atleast_2d(probs.data)
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if p.shape[-1] != 2 or p.shape[0] != y.shape[0]:
        raise ShapeError(f"probs {probs.shape} do not match {y.shape[0]} labels")
    if np.any((y != 0) & (y != 1)):
        raise ParameterError("labels must be 0 or 1")
    n = y.shape[0]
    rows = np.arange(n)
    picked = p[rows, y]
    clipped = np.clip(picked, PROB_CLIP, 1.0 - PROB_CLIP)
    weights = np.where(y == 1, pos_weight, 1.0)
    loss = np.sum(-weights * np.log(clipped)) / n

    def grad_fn(g):
        inside = (picked >= PROB_CLIP) & (picked <= 1.0 - PROB_CLIP)
        gp = np.zeros_like(p)
        gp[rows, y] = np.where(inside, -weights / clipped, 0.0) * g / n
        return (gp.reshape(probs.shape),)

    return _node(np.array(loss), (probs,), grad_fn, "weighted_bce")
