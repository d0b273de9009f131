"""Dense-tensor reverse-mode autodiff with differentiable gather/combine.

Small numpy-backed engine: each operation records a backward closure on
its output node, and ``Tensor.backward()`` walks the graph once in
reverse topological order.  Gradients are exact (checked against finite
differences at 64-bit in the test suite); training may run in 32-bit.

The row gather/combine pair is the load-bearing primitive here: gather
selects the kept token rows for a layer, combine scatters the layer's
output back into the full-length sequence while passing dropped rows
through untouched, and both are differentiable along every path.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import _kernels


class TensorError(ValueError):
    """Shape mismatch, invalid indices, or non-finite leaf data."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (for evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, *,
                 _parents=(), _backward=None, _check: bool = True):
        arr = np.asarray(values)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if _check and not _parents and not np.all(np.isfinite(arr)):
            raise TensorError("non-finite values in tensor")
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return (f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, "
                f"requires_grad={self.requires_grad})")

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad over the whole graph.

        self must be scalar; the graph is walked once in reverse
        topological order and each node's closure adds into its
        parents' grads (no in-place mutation of shared arrays).
        """
        if self.values.size != 1:
            raise TensorError("backward() requires a scalar root")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._parents:
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar for the handful of infix uses in model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable tensor; requires_grad is always on."""

    __slots__ = ("name",)

    def __init__(self, name: str, values):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.values.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, _check=False)


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad or t._parents:
        t.grad = g if t.grad is None else t.grad + g


def _needs_graph(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in ts)


def _result(values, parents, backward) -> Tensor:
    if _GRAD_ENABLED and _needs_graph(*parents):
        return Tensor(values, _parents=parents, _backward=backward, _check=False)
    return Tensor(values, _check=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes that broadcasting added or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        # keep python scalars weak so float32 graphs stay float32
        a = _as_tensor(a)

        def backward(g):
            _accum(a, g)

        return _result(a.values + b, (a,), backward)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values + b.values

    def backward(g):
        _accum(a, _unbroadcast(g, a.values.shape))
        _accum(b, _unbroadcast(g, b.values.shape))

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)

        def backward(g):
            _accum(a, g * b)

        return _result(a.values * b, (a,), backward)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values * b.values

    def backward(g):
        _accum(a, _unbroadcast(g * b.values, a.values.shape))
        _accum(b, _unbroadcast(g * a.values, b.values.shape))

    return _result(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim < 1 or b.values.ndim < 2:
        raise TensorError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise TensorError(f"matmul mismatch: {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def backward(g):
        _accum(a, _unbroadcast(g @ b.values.swapaxes(-1, -2), a.values.shape))
        _accum(b, _unbroadcast(a.values.swapaxes(-1, -2) @ g, b.values.shape))

    return _result(out, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.values.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.values.shape))

    return _result(out, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.values, axes)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _result(out, (a,), backward)


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size
    out = a.values.mean()

    def backward(g):
        _accum(a, np.full_like(a.values, float(g) / n))

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# neural-net primitives


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    a = _as_tensor(a)
    x = a.values
    t, out = _kernels.gelu_forward(x)

    def backward(g):
        _accum(a, _kernels.gelu_backward(x, t, g))

    return _result(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if axis not in (-1, a.values.ndim - 1):
        raise TensorError("softmax is defined over the last axis")
    out = _kernels.softmax_forward(a.values)

    def backward(g):
        _accum(a, _kernels.softmax_backward(out, g))

    return _result(out, (a,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor,
              eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.values.shape[-1]
    if gamma.values.shape != (d,) or beta.values.shape != (d,):
        raise TensorError(f"layernorm affine shapes must be ({d},)")
    out, xhat, inv = _kernels.layernorm_forward(
        x.values, gamma.values, beta.values, eps)

    def backward(g):
        gx, ggamma, gbeta = _kernels.layernorm_backward(
            xhat, inv, gamma.values, g, x.values.shape)
        _accum(x, gx)
        _accum(gamma, ggamma)
        _accum(beta, gbeta)

    return _result(out, (x, gamma, beta), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.values.shape[0]):
        raise TensorError("embedding ids out of range")
    out = table.values[ids]

    def backward(g):
        vocab, d = table.values.shape
        flat = ids.reshape(-1)
        g2 = g.reshape(flat.size, d)
        if vocab <= 1024:
            # one-hot matmul beats np.add.at by an order of magnitude
            onehot = np.zeros((flat.size, vocab), dtype=g2.dtype)
            onehot[np.arange(flat.size), flat] = 1.0
            gt = onehot.T @ g2
        else:
            gt = np.zeros_like(table.values)
            np.add.at(gt, flat, g2)
        _accum(table, gt)

    return _result(out, (table,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors
    by 1/(1-rate) so the expectation is unchanged.  rate 0 is the
    identity and consumes no randomness."""
    x = _as_tensor(x)
    if not (0.0 <= rate < 1.0):
        raise TensorError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    scale = (rng.random(x.values.shape) >= rate) / (1.0 - rate)
    scale = scale.astype(x.values.dtype)
    out = x.values * scale

    def backward(g):
        _accum(x, g * scale)

    return _result(out, (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross entropy of (N, V) logits against N integer targets."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.values.ndim != 2 or targets.shape != (logits.values.shape[0],):
        raise TensorError(f"cross_entropy expects (N, V) logits and (N,) "
                          f"targets, got {logits.shape} and {targets.shape}")
    if targets.size and (targets.min() < 0
                         or targets.max() >= logits.values.shape[1]):
        raise TensorError("targets out of vocabulary range")
    z = logits.values
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    sum_e = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(sum_e[:, 0])
    rows = np.arange(z.shape[0])
    out = lse - z[rows, targets]

    def backward(g):
        gz = (e / sum_e) * g[:, None]
        gz[rows, targets] -= g
        _accum(logits, gz)

    return _result(out, (logits,), backward)


# ---------------------------------------------------------------------------
# token gather / combine


def _check_row_indices(idx: np.ndarray, s: int, what: str):
    if idx.ndim != 1:
        raise TensorError(f"{what} indices must be one-dimensional")
    if idx.size:
        if idx[0] < 0 or idx[-1] >= s:
            raise TensorError(f"{what} indices out of range [0, {s})")
        if idx.size > 1 and not np.all(np.diff(idx) > 0):
            raise TensorError(f"{what} indices must be strictly increasing")


def gather_rows(x: Tensor, kept) -> Tensor:
    """Select token rows: output row j is x's row kept[j].

    Rows live on the second-to-last axis, so (s, d) and batched
    (B, s, d) inputs both work with one shared index list.  A (B, b)
    index matrix selects per-sequence rows instead.  The backward pass
    scatters the upstream gradient into the kept rows and leaves zeros
    elsewhere along this path.
    """
    x = _as_tensor(x)
    idx = np.asarray(kept, dtype=np.int64)
    s = x.values.shape[-2]

    if idx.ndim == 2:
        if x.values.ndim != 3 or idx.shape[0] != x.values.shape[0]:
            raise TensorError("per-sequence gather needs (B, s, d) input "
                              "and (B, b) indices")
        if idx.size and (idx.min() < 0 or idx.max() >= s):
            raise TensorError(f"gather indices out of range [0, {s})")
        out = np.take_along_axis(x.values, idx[:, :, None], axis=1)

        def backward(g):
            gx = np.zeros_like(x.values)
            rows = np.arange(idx.shape[0])[:, None]
            np.add.at(gx, (rows, idx), g)
            _accum(x, gx)

        return _result(out, (x,), backward)

    _check_row_indices(idx, s, "gather")
    out = x.values[..., idx, :]

    def backward(g):
        gx = np.zeros_like(x.values)
        gx[..., idx, :] = g
        _accum(x, gx)

    return _result(out, (x,), backward)


def combine_rows(y_kept: Tensor, x_source: Tensor, kept, dropped) -> Tensor:
    """Recover the full sequence: kept rows come from y_kept (in order),
    dropped rows pass through from x_source.  Differentiable along both
    inputs; dropped rows carry an identity gradient back to x_source.
    """
    y_kept, x_source = _as_tensor(y_kept), _as_tensor(x_source)
    s = x_source.values.shape[-2]
    kept_idx = np.asarray(kept, dtype=np.int64)
    drop_idx = np.asarray(dropped, dtype=np.int64)

    if kept_idx.ndim == 2:
        if drop_idx.ndim != 2 or x_source.values.ndim != 3:
            raise TensorError("per-sequence combine needs (B, s, d) source "
                              "and (B, *) index matrices")
        merged = np.sort(np.concatenate([kept_idx, drop_idx], axis=1), axis=1)
        if merged.shape[1] != s or not np.array_equal(
                merged, np.broadcast_to(np.arange(s), merged.shape)):
            raise TensorError("kept and dropped must partition 0..s-1 per row")
        rows = np.arange(kept_idx.shape[0])[:, None]
        out = x_source.values.copy()
        out[rows, kept_idx] = y_kept.values

        def backward(g):
            _accum(y_kept, g[rows, kept_idx])
            gx = g.copy()
            gx[rows, kept_idx] = 0.0
            _accum(x_source, gx)

        return _result(out, (y_kept, x_source), backward)

    _check_row_indices(kept_idx, s, "combine kept")
    _check_row_indices(drop_idx, s, "combine dropped")
    merged = np.concatenate([kept_idx, drop_idx])
    if merged.size != s or not np.array_equal(np.sort(merged), np.arange(s)):
        raise TensorError("kept and dropped must partition 0..s-1")
    if y_kept.values.shape[-2] != kept_idx.size:
        raise TensorError(f"y_kept has {y_kept.values.shape[-2]} rows, "
                          f"expected {kept_idx.size}")
    out = x_source.values.copy()
    out[..., kept_idx, :] = y_kept.values

    def backward(g):
        _accum(y_kept, g[..., kept_idx, :])
        gx = g.copy()
        gx[..., kept_idx, :] = 0.0
        _accum(x_source, gx)

    return _result(out, (y_kept, x_source), backward)
