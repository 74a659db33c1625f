"""Dense tensors with reverse-mode automatic differentiation.

Data lives in contiguous row-major numpy buffers. Every differentiable
operation is a :class:`Function` subclass; calling ``Function.apply`` runs the
forward pass on raw arrays and, when any input requires a gradient, records a
node so that :meth:`Tensor.backward` can replay the chain rule in reverse
topological order.

Two precisions are supported. ``float32`` is the default for training and
``float64`` is used for finite-difference checks::

    with precision("float64"):
        x = Tensor(np.random.randn(3), requires_grad=True)
        (x * x).sum().backward()
"""

from __future__ import annotations

import builtins
import contextlib
import os
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError

_state = {
    "dtype": np.dtype(np.float32),
    "grad": True,
    "debug": os.environ.get("CAPSATTN_DEBUG", "") not in ("", "0"),
}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


def set_debug(flag: bool) -> None:
    """Turn NaN/Inf checks at op boundaries on or off."""
    _state["debug"] = bool(flag)


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if dtype is None:
        dtype = _state["dtype"]
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional array that can take part in gradient computation.

    Float ndarrays keep their dtype; anything else (lists, scalars, integer
    arrays) is converted to the current default precision.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            keep = isinstance(data, np.ndarray) and arr.dtype in (np.float32, np.float64)
            dtype = arr.dtype if keep else _state["dtype"]
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Function | None = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that
        requires a gradient. ``self`` must hold a single element unless an
        explicit upstream gradient is given."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.data.dtype).reshape(self.shape)

        order = self._topological_order()
        grads: dict[int, np.ndarray] = {id(self): grad}
        for tensor in reversed(order):
            g = grads.pop(id(tensor), None)
            if g is None:
                continue
            node = tensor._node
            if node is None:
                if tensor.requires_grad:
                    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
                continue
            parent_grads = node.backward(g)
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in tensor._node.parents:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return order

    # -- operators -------------------------------------------------------------
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
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- method forms ------------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def square(self):
        return Square.apply(self)

    def relu(self):
        return Relu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def softmax(self, axis=-1):
        return Softmax.apply(self, axis=axis)


class Function:
    """One differentiable operation.

    Subclasses implement ``forward(*arrays, **kw) -> array`` and
    ``backward(grad) -> array | tuple`` returning one gradient per parent
    (``None`` for inputs that need none).
    """

    def __init__(self, parents: Sequence[Tensor]):
        self.parents = tuple(parents)

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        return cls.apply_with_node(*inputs, **kwargs)[0]

    @classmethod
    def apply_with_node(cls, *inputs, **kwargs) -> tuple[Tensor, "Function"]:
        """Like :meth:`apply` but also return the function instance, which
        holds whatever the forward pass stashed on it."""
        tensors = []
        dtype = None
        for x in inputs:
            if isinstance(x, Tensor):
                dtype = x.data.dtype
                break
        for x in inputs:
            tensors.append(x if isinstance(x, Tensor) else Tensor(_as_array(x, dtype), dtype=dtype))
        fn = cls(tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        if _state["debug"] and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        needs_grad = _state["grad"] and any(t.requires_grad for t in tensors)
        result = Tensor.__new__(Tensor)
        result.data = out
        result.grad = None
        result.name = None
        result.requires_grad = needs_grad
        result._node = fn if needs_grad else None
        return result, fn

    def forward(self, *arrays, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad):  # pragma: no cover - abstract
        raise NotImplementedError


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "sub")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        a, b = self.a, self.b
        ga = _unbroadcast(g * b, a.shape) if self.parents[0].requires_grad else None
        gb = _unbroadcast(g * a, b.shape) if self.parents[1].requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "div")
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        a, b = self.a, self.b
        ga = _unbroadcast(g / b, a.shape) if self.parents[0].requires_grad else None
        gb = _unbroadcast(-g * a / (b * b), b.shape) if self.parents[1].requires_grad else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return -g


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return g * self.out


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError("log of a nonpositive value")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return g / self.a


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise DomainError("sqrt of a negative value")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        return g * 0.5 / self.out


class Square(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g):
        return 2.0 * g * self.a


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, g):
        # derivative at exactly 0 is taken as 0
        return g * self.mask


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, g):
        return g * self.out * (1.0 - self.out)


class LogSigmoid(Function):
    def forward(self, a):
        self.a = a
        return -np.logaddexp(0.0, -a).astype(a.dtype, copy=False)

    def backward(self, g):
        return g * _sigmoid(-self.a)


class ClampMin(Function):
    """max(x, floor); the gradient passes only where x > floor."""

    def forward(self, a, floor=0.0):
        self.mask = a > floor
        return np.where(self.mask, a, a.dtype.type(floor))

    def backward(self, g):
        return g * self.mask


# ---------------------------------------------------------------------------
# reductions and normalisation
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axis(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims), dtype=a.dtype)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return np.broadcast_to(g, self.shape).copy()


class Softmax(Function):
    def forward(self, a, axis=-1):
        if a.shape[axis] == 0:
            raise ShapeError("softmax over an empty axis")
        self.axis = axis
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return y * (g - (g * y).sum(axis=self.axis, keepdims=True))


class LogSoftmax(Function):
    def forward(self, a, axis=-1):
        if a.shape[axis] == 0:
            raise ShapeError("log_softmax over an empty axis")
        self.axis = axis
        z = a - a.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        self.soft = np.exp(out)
        return out

    def backward(self, g):
        return g - self.soft * g.sum(axis=self.axis, keepdims=True)


class LayerNorm(Function):
    """Normalise the last axis, then scale and shift."""

    def forward(self, x, gain, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.rstd
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, g):
        xhat, rstd = self.xhat, self.rstd
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * self.gain
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias


class CrossEntropy(Function):
    """Mean token cross-entropy over positions whose target != ignore_index."""

    def forward(self, logits, targets=None, ignore_index=-1, smoothing=0.0):
        n, vocab = logits.shape
        if targets.shape != (n,):
            raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
        valid = targets != ignore_index
        count = max(int(valid.sum()), 1)
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        safe_t = np.where(valid, targets, 0)
        picked = logp[np.arange(n), safe_t]
        if smoothing:
            per = -(1.0 - smoothing) * picked - smoothing * logp.mean(axis=-1)
        else:
            per = -picked
        loss = (per * valid).sum() / count
        target_dist = np.zeros_like(logits)
        target_dist[np.arange(n), safe_t] = 1.0 - smoothing
        if smoothing:
            target_dist += smoothing / vocab
        self.dlogits = (np.exp(logp) - target_dist) * (valid[:, None] / count)
        return np.asarray(loss, dtype=logits.dtype)

    def backward(self, g):
        return (g * self.dlogits).astype(self.dlogits.dtype, copy=False)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None
        self.a, self.b = a, b
        if b.ndim == 2 and a.ndim > 2:
            # x @ W: fold the leading axes into one GEMM
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1])
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        ga = gb = None
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            if self.parents[0].requires_grad:
                ga = (g2 @ b.T).reshape(a.shape)
            if self.parents[1].requires_grad:
                gb = a.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if self.parents[0].requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        if self.parents[1].requires_grad:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) into {shape}") from None

    def backward(self, g):
        return g.reshape(self.shape)


class Transpose(Function):
    def forward(self, a, axes=None):
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        self.inv = tuple(np.argsort(axes))
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, g):
        return np.ascontiguousarray(g.transpose(self.inv))


class GetItem(Function):
    def forward(self, a, index=None):
        self.shape = a.shape
        self.index = index
        return np.ascontiguousarray(a[index])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        if _is_basic_index(self.index):
            out[self.index] = g
        else:
            np.add.at(out, self.index, g)
        return out


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in items)


class Concat(Function):
    def forward(self, *arrays, axis=-1):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            shapes = [a.shape for a in arrays]
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
        self.axis = axis
        self.sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return out

    def backward(self, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, self.sizes, axis=self.axis))


class Embedding(Function):
    """Row lookup ``table[ids]`` for an integer id array."""

    def forward(self, table, ids=None):
        self.vocab = table.shape
        self.ids = ids
        return table[ids]

    def backward(self, g):
        out = np.zeros(self.vocab, dtype=g.dtype)
        np.add.at(out, self.ids.reshape(-1), g.reshape(-1, self.vocab[-1]))
        return out


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sqrt(a) -> Tensor:
    return Sqrt.apply(a)


def square(a) -> Tensor:
    return Square.apply(a)


def relu(a) -> Tensor:
    return Relu.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def log_sigmoid(a) -> Tensor:
    return LogSigmoid.apply(a)


def clamp_min(a, floor: float) -> Tensor:
    return ClampMin.apply(a, floor=floor)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "exp": exp,
}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch a pointwise operation by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return Sum.apply(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def softmax(a, axis=-1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def log_softmax(a, axis=-1) -> Tensor:
    return LogSoftmax.apply(a, axis=axis)


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def cross_entropy(logits, targets, ignore_index=-1, smoothing=0.0) -> Tensor:
    targets = np.asarray(targets).reshape(-1)
    return CrossEntropy.apply(logits, targets=targets, ignore_index=ignore_index, smoothing=smoothing)


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def concat(tensors: Iterable, axis=-1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def split(a, parts, axis=-1) -> list[Tensor]:
    """Split into ``parts`` equal pieces (an int) or at the given sizes (a list)."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    n = a.shape[axis]
    if isinstance(parts, int):
        if parts <= 0 or n % parts:
            raise ShapeError(f"cannot split axis of length {n} into {parts} equal parts")
        sizes = [n // parts] * parts
    else:
        sizes = list(parts)
        if builtins.sum(sizes) != n:
            raise ShapeError(f"split sizes {sizes} do not add up to {n}")
    out = []
    start = 0
    ax = axis % a.ndim
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[ax] = slice(start, start + size)
        out.append(a[tuple(index)])
        start += size
    return out


def stack(tensors: Sequence, axis=0) -> Tensor:
    expanded = []
    for t in tensors:
        t = t if isinstance(t, Tensor) else Tensor(t)
        shape = list(t.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def embedding(table, ids) -> Tensor:
    return Embedding.apply(table, ids=np.asarray(ids))


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_state["dtype"]), requires_grad=requires_grad)
