"""Dense tensors with reverse-mode automatic differentiation.

Everything is float64 and row-major. The op set covers exactly what the
encoder, the attention blocks, and the losses need. Elementwise ops accept
a matching shape, a scalar, or a trailing-axis vector ([n, d] against [d]
or [1, d]) and nothing fancier, so every backward rule stays auditable.

Graphs are built eagerly. Calling ``backward()`` on a scalar walks the
graph once in reverse topological order and accumulates into ``.grad``;
a tensor feeding several consumers receives the sum of contributions.
A graph must be owned by a single thread; independent threads may each
build their own.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigError, NumericError, ShapeError

LOG_FLOOR = 1e-12

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _accumulate(t: "Tensor", g: np.ndarray) -> None:
    # Never mutates arrays in place: rebinding keeps aliased views valid.
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    if len(shape) == 2 and shape[0] == 1 and g.ndim == 2 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_elementwise(a: "Tensor", b: "Tensor") -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    for big, small in ((sa, sb), (sb, sa)):
        if len(big) == 2 and small in ((big[1],), (1, big[1])):
            return
    raise ShapeError(f"elementwise op cannot combine shapes {sa} and {sb}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _child(self, data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        _check_elementwise(self, other)
        a, b = self, other

        def backward(out):
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.data.shape))

        out = self._child(a.data + b.data, (a, b), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        _check_elementwise(self, other)
        a, b = self, other

        def backward(out):
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g, b.data.shape))

        out = self._child(a.data - b.data, (a, b), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def __rsub__(self, other) -> "Tensor":
        return Tensor._wrap(other) - self

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __mul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        _check_elementwise(self, other)
        a, b = self, other

        def backward(out):
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

        out = self._child(a.data * b.data, (a, b), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    __rmul__ = __mul__

    def __pow__(self, p) -> "Tensor":
        p = float(p)
        a = self

        def backward(out):
            _accumulate(a, out.grad * (p * a.data ** (p - 1.0)))

        out = self._child(a.data**p, (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    # -- linear algebra ----------------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul needs [m,k] @ [k,n], got {a.shape} and {b.shape}")

        def backward(out):
            g = out.grad
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)

        out = self._child(a.data @ b.data, (a, b), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def transpose(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose needs a matrix, got shape {self.shape}")
        a = self

        def backward(out):
            _accumulate(a, out.grad.T)

        out = self._child(a.data.T, (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- pointwise nonlinearities -------------------------------------------------

    def log(self) -> "Tensor":
        """Natural log with inputs clamped at LOG_FLOOR; clamped entries get zero grad."""
        a = self
        clamped = np.maximum(a.data, LOG_FLOOR)

        def backward(out):
            _accumulate(a, out.grad * (a.data >= LOG_FLOOR) / clamped)

        out = self._child(np.log(clamped), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def exp(self) -> "Tensor":
        a = self
        y = np.exp(a.data)

        def backward(out):
            _accumulate(a, out.grad * y)

        out = self._child(y, (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def relu(self) -> "Tensor":
        a = self

        def backward(out):
            _accumulate(a, out.grad * (a.data > 0.0))

        out = self._child(np.maximum(a.data, 0.0), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def gelu(self) -> "Tensor":
        a = self
        cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

        def backward(out):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
            _accumulate(a, out.grad * (cdf + a.data * pdf))

        out = self._child(a.data * cdf, (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def sigmoid(self) -> "Tensor":
        a = self
        y = expit(a.data)

        def backward(out):
            _accumulate(a, out.grad * y * (1.0 - y))

        out = self._child(y, (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def clip(self, lo: float | None = None, hi: float | None = None) -> "Tensor":
        """Clamp values; gradient flows only strictly inside the interval."""
        a = self
        y = np.clip(a.data, lo, hi)

        def backward(out):
            mask = np.ones_like(a.data, dtype=bool)
            if lo is not None:
                mask &= a.data > lo
            if hi is not None:
                mask &= a.data < hi
            _accumulate(a, out.grad * mask)

        out = self._child(y, (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    # -- reductions -----------------------------------------------------------------

    def sum(self) -> "Tensor":
        a = self

        def backward(out):
            _accumulate(a, np.broadcast_to(out.grad, a.data.shape))

        out = self._child(a.data.sum(), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def mean(self) -> "Tensor":
        a = self
        n = a.data.size

        def backward(out):
            _accumulate(a, np.broadcast_to(out.grad / n, a.data.shape))

        out = self._child(a.data.mean(), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def sum_rows(self) -> "Tensor":
        """Column sums of a matrix, kept as a [1, d] row."""
        a = self
        if a.ndim != 2:
            raise ShapeError(f"sum_rows needs a matrix, got shape {a.shape}")

        def backward(out):
            _accumulate(a, np.broadcast_to(out.grad, a.data.shape))

        out = self._child(a.data.sum(axis=0, keepdims=True), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def mean_rows(self) -> "Tensor":
        """Column means of a matrix, kept as a [1, d] row."""
        a = self
        if a.ndim != 2:
            raise ShapeError(f"mean_rows needs a matrix, got shape {a.shape}")
        n = a.data.shape[0]

        def backward(out):
            _accumulate(a, np.broadcast_to(out.grad / n, a.data.shape))

        out = self._child(a.data.mean(axis=0, keepdims=True), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    # -- structural ops ---------------------------------------------------------------

    def slice_rows(self, start: int, stop: int) -> "Tensor":
        a = self
        if a.ndim != 2:
            raise ShapeError(f"slice_rows needs a matrix, got shape {a.shape}")

        def backward(out):
            g = np.zeros_like(a.data)
            g[start:stop] = out.grad
            _accumulate(a, g)

        out = self._child(a.data[start:stop].copy(), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def slice_cols(self, start: int, stop: int) -> "Tensor":
        a = self
        if a.ndim != 2:
            raise ShapeError(f"slice_cols needs a matrix, got shape {a.shape}")

        def backward(out):
            g = np.zeros_like(a.data)
            g[:, start:stop] = out.grad
            _accumulate(a, g)

        out = self._child(a.data[:, start:stop].copy(), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def split_heads(self, n_heads: int) -> list["Tensor"]:
        """Split the trailing axis into n_heads equal column blocks."""
        if self.ndim != 2:
            raise ShapeError(f"split_heads needs a matrix, got shape {self.shape}")
        d = self.shape[1]
        if d % n_heads != 0:
            raise ConfigError(f"width {d} not divisible by {n_heads} heads")
        dh = d // n_heads
        return [self.slice_cols(i * dh, (i + 1) * dh) for i in range(n_heads)]

    def tile_rows(self, reps: int) -> "Tensor":
        """Stack `reps` copies of a matrix along the row axis."""
        a = self
        if a.ndim != 2:
            raise ShapeError(f"tile_rows needs a matrix, got shape {a.shape}")
        n = a.data.shape[0]

        def backward(out):
            _accumulate(a, out.grad.reshape(reps, n, -1).sum(axis=0))

        out = self._child(np.tile(a.data, (reps, 1)), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    # -- row-wise softmax ----------------------------------------------------------------

    def softmax_rows(self) -> "Tensor":
        a = self
        if a.ndim != 2:
            raise ShapeError(f"softmax_rows needs a matrix, got shape {a.shape}")
        if np.isnan(a.data).any():
            raise NumericError("softmax_rows received NaN input")
        shifted = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)

        def backward(out):
            g = out.grad
            _accumulate(a, (g - (g * y).sum(axis=1, keepdims=True)) * y)

        out = self._child(y, (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    def group_mean_rows(self, group: int) -> "Tensor":
        """Mean over each consecutive block of `group` rows: [n*g, d] -> [n, d]."""
        a = self
        if a.ndim != 2 or a.shape[0] % group != 0:
            raise ShapeError(f"group_mean_rows needs row count divisible by {group}, got {a.shape}")
        n = a.shape[0] // group

        def backward(out):
            g = np.repeat(out.grad / group, group, axis=0)
            _accumulate(a, g)

        out = self._child(a.data.reshape(n, group, -1).mean(axis=1), (a,), None)
        if out._prev:
            out._backward = lambda: backward(out)
        return out

    # -- backward driver -------------------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, got shape {self.shape}")
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
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to mean 0 / variance 1 (biased), then scale and shift."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm needs a matrix, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm expects gain/bias of shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(out):
        g = out.grad
        if gain.requires_grad:
            _accumulate(gain, (g * y).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            dy = g * gain.data
            term = dy - dy.mean(axis=1, keepdims=True) - y * (dy * y).mean(axis=1, keepdims=True)
            _accumulate(x, term * inv)

    out = x._child(y * gain.data + bias.data, (x, gain, bias), None)
    if out._prev:
        out._backward = lambda: backward(out)
    return out


def grad_reverse(x: Tensor, weight: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -weight."""
    if weight < 0:
        raise ConfigError(f"gradient reversal weight must be non-negative, got {weight}")

    def backward(out):
        _accumulate(x, (-weight) * out.grad)

    out = x._child(x.data.copy(), (x,), None)
    if out._prev:
        out._backward = lambda: backward(out)
    return out


def grouped_attention(q: Tensor, k: Tensor, v: Tensor, group: int, scale: float) -> Tensor:
    """Scaled-dot-product attention over consecutive row groups.

    Rows are g-token sequences stacked into [n*g, .] matrices; attention never
    crosses a group boundary. Query/key widths must match; the value width is
    free (rank-one transferability attention passes single-column scores).
    Equivalent to per-group softmax(q k^T * scale) v, done in one graph node.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("grouped_attention needs matrices")
    rows = q.shape[0]
    if k.shape != q.shape or v.shape[0] != rows:
        raise ShapeError(
            f"grouped_attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if group < 1 or rows % group != 0:
        raise ShapeError(f"row count {rows} not divisible into groups of {group}")
    n = rows // group
    q3 = q.data.reshape(n, group, -1)
    k3 = k.data.reshape(n, group, -1)
    v3 = v.data.reshape(n, group, -1)
    logits = q3 @ k3.swapaxes(1, 2) * scale
    if np.isnan(logits).any():
        raise NumericError("grouped_attention produced NaN logits")
    shifted = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    w3 = e / e.sum(axis=2, keepdims=True)
    out_data = (w3 @ v3).reshape(rows, -1)

    def backward(out):
        g3 = out.grad.reshape(n, group, -1)
        if v.requires_grad:
            _accumulate(v, (w3.swapaxes(1, 2) @ g3).reshape(rows, -1))
        if q.requires_grad or k.requires_grad:
            dw = g3 @ v3.swapaxes(1, 2)
            dlogits = (dw - (dw * w3).sum(axis=2, keepdims=True)) * w3
            if q.requires_grad:
                _accumulate(q, (dlogits @ k3).reshape(rows, -1) * scale)
            if k.requires_grad:
                _accumulate(k, (dlogits.swapaxes(1, 2) @ q3).reshape(rows, -1) * scale)

    out = q._child(out_data, (q, k, v), None)
    if out._prev:
        out._backward = lambda: backward(out)
    return out


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack matrices along the row axis."""
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = {p.shape[1] if p.ndim == 2 else None for p in parts}
    if None in cols or len(cols) != 1:
        raise ShapeError(f"concat_rows needs matrices with equal widths, got {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(out):
        g = out.grad
        for p, r0, r1 in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[r0:r1])

    out = parts[0]._child(np.vstack([p.data for p in parts]), tuple(parts), None)
    if out._prev:
        out._backward = lambda: backward(out)
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate matrices along the trailing axis (merges attention heads)."""
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = {p.shape[0] if p.ndim == 2 else None for p in parts}
    if None in rows or len(rows) != 1:
        raise ShapeError(f"concat_cols needs matrices with equal heights, got {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(out):
        g = out.grad
        for p, c0, c1 in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[:, c0:c1])

    out = parts[0]._child(np.hstack([p.data for p in parts]), tuple(parts), None)
    if out._prev:
        out._backward = lambda: backward(out)
    return out


def merge_heads(parts: list[Tensor]) -> Tensor:
    """Inverse of split_heads."""
    return concat_cols(parts)
