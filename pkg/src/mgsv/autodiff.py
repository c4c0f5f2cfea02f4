"""Dense-tensor reverse-mode automatic differentiation on numpy arrays.

Tensors are immutable after construction and carry either float32 (training)
or float64 (gradient-check) data; an operation's output dtype follows its
inputs. All reductions use numpy's fixed sequential/pairwise order, so
forward results are reproducible bit-for-bit. Every forward op verifies its
output is finite and raises NonFiniteError otherwise.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyReductionError, GraphError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = True
_GRAD_ENABLED = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


class no_grad:
    """Context manager that stops op outputs from recording the graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._previous = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._previous
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    if not _FINITE_CHECKS or data.size == 0:
        return
    # NaN propagates through min/max, so two allocation-free reductions
    # detect every NaN/Inf without materializing a boolean array.
    if not (np.isfinite(data.min()) and np.isfinite(data.max())):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """A dense real tensor participating in a reverse-mode graph.

    `requires_grad` marks trainable leaves; interior nodes inherit it from
    their parents. After `backward()` on a scalar root, every reachable
    tensor with `requires_grad` holds its accumulated gradient in `.grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        keep_dtype = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep_dtype:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._backward_done = False
        _check_finite(arr, "tensor")

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar root.

        Visits nodes in exact reverse topological order; accumulation into
        `.grad` is additive and deterministic. A second call on the same
        root without rebuilding the graph is an error.
        """
        if self.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {self.shape}")
        if self._backward_done:
            raise GraphError("backward already ran on this graph; rebuild it or reset")
        self._backward_done = True

        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS over grad-requiring parents (acyclic graph)."""
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap raw operands, matching the dtype of the Tensor side."""
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return _as_tensor(a, like=b), b
    return _as_tensor(a), _as_tensor(b)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.grad = None
    out._backward_done = False
    if out.requires_grad:
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray, fresh: bool = False) -> None:
    # Copy on first deposit unless the caller owns `grad` outright (`fresh`):
    # pass-through gradients may alias the child's buffer or a sibling's.
    if tensor.grad is None:
        tensor.grad = grad if fresh else np.array(grad, copy=True)
    else:
        tensor.grad += grad


def _accumulate_unbroadcast(tensor: Tensor, grad: np.ndarray) -> None:
    reduced = _unbroadcast(grad, tensor.shape)
    _accumulate(tensor, reduced, fresh=reduced is not grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            _accumulate_unbroadcast(a, g)
        if b.requires_grad:
            _accumulate_unbroadcast(b, g)

    return _make(data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data - b.data

    def grad_fn(g):
        if a.requires_grad:
            _accumulate_unbroadcast(a, g)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape), fresh=True)

    return _make(data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape), fresh=True)

    return _make(data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape), fresh=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
                        fresh=True)

    return _make(data, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        _accumulate(a, -g, fresh=True)

    return _make(-a.data, (a,), grad_fn, "neg")


# -- matmul and shape ops -------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching over leading axes.

    Gradients: dL/da = g . b^T, dL/db = a^T . g, reduced over any
    broadcasted batch axes.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data @ b.data

    def grad_fn(g):
        # 2-D `b` is the weight-matrix case: collapse batch axes into one
        # GEMM instead of materializing a per-batch outer-product stack.
        flat = b.ndim == 2 and a.ndim == g.ndim
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
                _accumulate(a, ga, fresh=True)
            else:
                _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
                            fresh=True)
        if b.requires_grad:
            if flat:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
                _accumulate(b, gb, fresh=True)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                _accumulate(b, _unbroadcast(gb, b.shape), fresh=True)

    return _make(data, (a, b), grad_fn, "matmul")


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = np.argsort(axes)

    def grad_fn(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(data, (a,), grad_fn, "transpose")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def grad_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), grad_fn, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along `axis`; backward splits the gradient at the seams."""
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0]
    for t in tensors[1:]:
        if t.ndim != base.ndim:
            raise ShapeError("concat operands must share rank")
        for ax in range(base.ndim):
            if ax != axis % base.ndim and t.shape[ax] != base.shape[ax]:
                raise ShapeError(
                    f"concat operands differ off-axis: {base.shape} vs {t.shape}"
                )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def grad_fn(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                _accumulate(t, g[tuple(index)])

    return _make(data, tuple(tensors), grad_fn, "concat")


def concat_time(a, b) -> Tensor:
    """Stack two token sequences along the time axis (rows of a, then b)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"token widths differ: {a.shape[-1]} vs {b.shape[-1]}")
    return concat([a, b], axis=-2)


# -- nonlinearities -------------------------------------------------------


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def grad_fn(g):
        _accumulate(a, g * (a.data > 0), fresh=True)

    return _make(data, (a,), grad_fn, "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        _accumulate(a, g * data * (1.0 - data), fresh=True)

    return _make(data, (a,), grad_fn, "sigmoid")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def grad_fn(g):
        _accumulate(a, g * data, fresh=True)

    return _make(data, (a,), grad_fn, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def grad_fn(g):
        _accumulate(a, g / a.data, fresh=True)

    return _make(data, (a,), grad_fn, "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def grad_fn(g):
        _accumulate(a, g * 0.5 / data, fresh=True)

    return _make(data, (a,), grad_fn, "sqrt")


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    data = np.abs(a.data)

    def grad_fn(g):
        _accumulate(a, g * np.sign(a.data), fresh=True)

    return _make(data, (a,), grad_fn, "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the subgradient goes to the first operand."""
    a, b = _coerce_pair(a, b)
    data = np.maximum(a.data, b.data)

    def grad_fn(g):
        take_a = a.data >= b.data
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * take_a, a.shape), fresh=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * ~take_a, b.shape), fresh=True)

    return _make(data, (a, b), grad_fn, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = np.minimum(a.data, b.data)

    def grad_fn(g):
        take_a = a.data <= b.data
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * take_a, a.shape), fresh=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * ~take_a, b.shape), fresh=True)

    return _make(data, (a, b), grad_fn, "minimum")


def select(a, index: int, axis: int = -1) -> Tensor:
    """Pick a single index along `axis`, dropping that axis."""
    a = _as_tensor(a)
    data = np.take(a.data, index, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        _accumulate(a, full, fresh=True)

    return _make(data.copy(), (a,), grad_fn, "select")


# -- reductions -----------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy(), fresh=True)
            return
        expanded = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(expanded, a.shape).copy(), fresh=True)

    return _make(data, (a,), grad_fn, "reduce_sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over `axis`; the gradient distributes 1/n to inputs."""
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    if count == 0:
        raise EmptyReductionError("mean over a zero-length axis")
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        scale = np.asarray(1.0 / count, dtype=a.data.dtype)
        if axis is None:
            _accumulate(a, np.broadcast_to(g * scale, a.shape).copy(), fresh=True)
            return
        expanded = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(expanded * scale, a.shape).copy(), fresh=True)

    return _make(data, (a,), grad_fn, "reduce_mean")


# -- fused transformer primitives ----------------------------------------


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along `axis`.

    `mask` is an optional boolean array broadcastable to the input; False
    entries are excluded from normalization (their output is exactly 0,
    and no gradient flows through them). A fully masked slice degrades to
    a uniform distribution rather than NaN.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is not None:
        fill = np.asarray(-1e30, dtype=x.dtype)
        x = np.where(mask, x, fill)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (g - inner), fresh=True)

    return _make(data, (a,), grad_fn, "softmax")


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    a = _as_tensor(a)
    gain = _as_tensor(gain, like=a)
    bias = _as_tensor(bias, like=a)
    d = a.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm needs a non-empty feature axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.data.dtype))
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def grad_fn(g):
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.shape), fresh=True)
        if bias.requires_grad:
            _accumulate_unbroadcast(bias, g)
        if a.requires_grad:
            gx = g * gain.data
            mean_gx = gx.mean(axis=-1, keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv_std * (gx - mean_gx - xhat * mean_gx_xhat), fresh=True)

    return _make(data, (a, gain, bias), grad_fn, "layer_norm")


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout driven by an explicit RNG stream; identity in eval."""
    a = _as_tensor(a)
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise GraphError("dropout in training mode requires an RNG stream")
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=a.data.dtype)
    mask = keep * scale
    data = a.data * mask

    def grad_fn(g):
        _accumulate(a, g * mask, fresh=True)

    return _make(data, (a,), grad_fn, "dropout")
