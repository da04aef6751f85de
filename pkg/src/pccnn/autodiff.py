"""Minimal dense tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays and record the graph as they are produced; calling
:func:`backward` on a scalar loss walks the graph once in reverse topological
order, accumulating gradients additively across fan-out. Only the op set the
network needs exists here; there is deliberately no general broadcasting
engine.

float64 is the verification dtype (finite-difference checks), float32 the
training dtype. Ops never mix dtypes silently.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Checked mode: every op output is scanned for NaN/Inf. Off by default.
_CHECK_FINITE = False


def set_finite_checks(flag: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


def finite_checks_enabled() -> bool:
    return _CHECK_FINITE


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return data


class Tensor:
    """A dense array plus the backward rule that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def _accum(self, g: np.ndarray, owned: bool = False) -> None:
        if self.grad is None:
            # adopt freshly allocated buffers; copy anything possibly aliased
            self.grad = g if owned else np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # arithmetic sugar for the common same-shape cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable tensor; grad is allocated eagerly."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def zero_grads(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor reachable from a scalar loss.

    Gradients accumulate additively, so parameters must be zeroed between
    steps; running backward twice on the same node raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward already ran for this node; rebuild the graph first")
    loss._done = True
    loss._accum(np.ones_like(loss.data))
    for node in reversed(_toposort(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    _binary_check(a, b, "matmul")
    out = Tensor(_checked(a.data @ b.data, "matmul"), _parents=(a, b))

    def _back(g):
        if a.requires_grad:
            a._accum(g @ b.data.T, owned=True)
        if b.requires_grad:
            b._accum(a.data.T @ g, owned=True)

    out._backward = _back
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    _binary_check(a, b, "add")
    out = Tensor(_checked(a.data + b.data, "add"), _parents=(a, b))

    def _back(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    out._backward = _back
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
    _binary_check(a, b, "sub")
    out = Tensor(_checked(a.data - b.data, "sub"), _parents=(a, b))

    def _back(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    out._backward = _back
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast bias add: [n, m] + [m]."""
    if x.data.ndim != 2 or bias.data.shape != (x.data.shape[1],):
        raise ValueError(f"add_bias: shapes {x.data.shape} and {bias.data.shape}")
    _binary_check(x, bias, "add_bias")
    out = Tensor(_checked(x.data + bias.data, "add_bias"), _parents=(x, bias))

    def _back(g):
        if x.requires_grad:
            x._accum(g)
        if bias.requires_grad:
            bias._accum(g.sum(axis=0), owned=True)

    out._backward = _back
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match or differ only in size-1 axes."""
    _binary_check(a, b, "mul")
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"mul: rank mismatch {a.data.shape} vs {b.data.shape}")
    for sa, sb in zip(a.data.shape, b.data.shape):
        if sa != sb and 1 not in (sa, sb):
            raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(_checked(a.data * b.data, "mul"), _parents=(a, b))

    def _back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape), owned=True)

    out._backward = _back
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(_checked(x.data * c, "scale"), _parents=(x,))

    def _back(g):
        if x.requires_grad:
            x._accum(g * c, owned=True)

    out._backward = _back
    return out


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a fixed array (e.g. a binary mask); c is not differentiated."""
    c = np.asarray(c, dtype=x.data.dtype)
    out = Tensor(_checked(x.data * c, "mul_const"), _parents=(x,))

    def _back(g):
        if x.requires_grad:
            x._accum(_unbroadcast(g * c, x.data.shape), owned=True)

    out._backward = _back
    return out


def _leaky_forward(data: np.ndarray, slope: float) -> np.ndarray:
    return np.where(data > 0, data, data * slope)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """max(x, slope*x); the subgradient at 0 is the negative-branch slope."""
    out = Tensor(_checked(_leaky_forward(x.data, slope), "leaky_relu"), _parents=(x,))

    def _back(g):
        if x.requires_grad:
            x._accum(g * _leaky_grad_factor(x.data, slope), owned=True)

    out._backward = _back
    return out


def _leaky_grad_factor(data: np.ndarray, slope: float) -> np.ndarray:
    return np.where(data > 0, np.asarray(1.0, dtype=data.dtype), np.asarray(slope, dtype=data.dtype))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, slope=0.0)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), _parents=(x,))

    def _back(g):
        if x.requires_grad:
            x._accum(g.reshape(x.data.shape))

    out._backward = _back
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input")
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), _parents=tuple(tensors))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def _back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    out._backward = _back
    return out


def _scatter_add_rows(idx: np.ndarray, g: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum g rows into n_rows bins; bincount is far faster than np.add.at."""
    flat = g.reshape(g.shape[0], -1)
    out = np.empty((n_rows, flat.shape[1]), dtype=g.dtype)
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n_rows)
    return out.reshape((n_rows,) + g.shape[1:])


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather x[idx]; backward scatters with accumulation."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx], _parents=(x,))

    def _back(g):
        if x.requires_grad:
            x._accum(_scatter_add_rows(idx, g, x.data.shape[0]), owned=True)

    out._backward = _back
    return out


def segment_sum(x: Tensor, starts: np.ndarray, num_segments: int) -> Tensor:
    """Sum contiguous row segments of x; segment i spans starts[i]:starts[i+1].

    ``starts`` has num_segments+1 entries; empty segments yield zero rows.
    """
    starts = np.asarray(starts, dtype=np.int64)
    if starts.shape != (num_segments + 1,):
        raise ValueError(f"segment_sum: starts must have {num_segments + 1} entries")
    if starts[-1] != x.data.shape[0]:
        raise ValueError("segment_sum: starts[-1] must equal the number of rows")
    lengths = np.diff(starts)
    if np.any(lengths < 0):
        raise ValueError("segment_sum: starts must be non-decreasing")
    if x.data.shape[0] == 0:
        data = np.zeros((num_segments,) + x.data.shape[1:], dtype=x.data.dtype)
    else:
        # reduceat copies the start row for empty segments; zero those out after
        safe_starts = np.minimum(starts[:-1], x.data.shape[0] - 1)
        data = np.add.reduceat(x.data, safe_starts, axis=0)
        if np.any(lengths == 0):
            data[lengths == 0] = 0
    out = Tensor(_checked(data, "segment_sum"), _parents=(x,))

    def _back(g):
        if x.requires_grad:
            x._accum(np.repeat(g, lengths, axis=0), owned=True)

    out._backward = _back
    return out


def pair_contract(f: Tensor, w: Tensor) -> Tensor:
    """Per-row channel contraction: [P, C] x [P, C, K] -> [P, K]."""
    if f.data.ndim != 2 or w.data.ndim != 3 or f.data.shape != w.data.shape[:2]:
        raise ValueError(f"pair_contract: shapes {f.data.shape} and {w.data.shape}")
    _binary_check(f, w, "pair_contract")
    out = Tensor(_checked(np.einsum("pc,pck->pk", f.data, w.data), "pair_contract"), _parents=(f, w))

    def _back(g):
        if f.requires_grad:
            f._accum(np.einsum("pk,pck->pc", g, w.data), owned=True)
        if w.requires_grad:
            w._accum(np.einsum("pc,pk->pck", f.data, g), owned=True)

    out._backward = _back
    return out


def gather_weighted_sum(features: Tensor, weights: Tensor, mask: np.ndarray) -> Tensor:
    """Masked weighted column sum: sum_i mask[i] * weights[i] * features[i].

    features is [N, C]; weights is [N, C] or [N, 1] (broadcast over channels);
    mask is a boolean [N]. Returns a [C] tensor, differentiable in both
    features and weights.
    """
    if features.data.ndim != 2:
        raise ValueError(f"gather_weighted_sum: features must be 2D, got {features.data.shape}")
    n, c = features.data.shape
    if weights.data.shape not in ((n, c), (n, 1)):
        raise ValueError(
            f"gather_weighted_sum: weights shape {weights.data.shape} incompatible with {features.data.shape}"
        )
    _binary_check(features, weights, "gather_weighted_sum")
    mask = np.asarray(mask)
    if mask.shape != (n,):
        raise ValueError(f"gather_weighted_sum: mask must have shape ({n},)")
    m = mask.astype(features.data.dtype)[:, None]
    out = Tensor(
        _checked((features.data * weights.data * m).sum(axis=0), "gather_weighted_sum"),
        _parents=(features, weights),
    )

    def _back(g):
        if features.requires_grad:
            features._accum(weights.data * m * g[None, :], owned=True)
        if weights.requires_grad:
            weights._accum(_unbroadcast(features.data * m * g[None, :], weights.data.shape), owned=True)

    out._backward = _back
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype), _parents=(x,))

    def _back(g):
        if x.requires_grad:
            x._accum(np.full_like(x.data, g), owned=True)

    out._backward = _back
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype), _parents=(x,))

    def _back(g):
        if x.requires_grad:
            x._accum(np.full_like(x.data, g / n), owned=True)

    out._backward = _back
    return out


def l1_loss(pred: Tensor, target, valid_mask=None) -> Tensor:
    """Mean absolute error over valid entries.

    target may be a Tensor or a constant array; valid_mask is a boolean array
    broadcastable to pred's shape (None means all entries count). Raises when
    no entry is valid.
    """
    target_t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.data.dtype))
    if target_t.data.shape != pred.data.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.data.shape} vs {target_t.data.shape}")
    _binary_check(pred, target_t, "l1_loss")
    if valid_mask is None:
        mask = np.ones(pred.data.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(valid_mask, dtype=bool), pred.data.shape)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("l1_loss: no valid entries")
    diff = pred.data - target_t.data
    value = np.abs(diff[mask]).sum() / count
    out = Tensor(np.asarray(value, dtype=pred.data.dtype), _parents=(pred, target_t))

    def _back(g):
        sign = np.sign(diff) * mask / count
        if pred.requires_grad:
            pred._accum((g * sign).astype(pred.data.dtype), owned=True)
        if target_t.requires_grad:
            target_t._accum((-g * sign).astype(target_t.data.dtype), owned=True)

    out._backward = _back
    return out
