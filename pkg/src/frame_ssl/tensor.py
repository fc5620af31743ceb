"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a row-major numpy array. Every differentiable operation builds a
node that remembers its inputs and the function object that produced it; the
graph is linearized into a :class:`ComputationRecord` when :func:`backward` is
called, gradients are pushed from the scalar loss back to the leaves, and the
graph is released afterwards.

Shapes must match exactly for elementwise operations. The only implicit
expansion is trailing-suffix affine addition (``add_trailing``), e.g. adding a
``(D,)`` bias or an ``(N, D)`` positional table to a ``(B, N, D)`` activation.
"""

from __future__ import annotations

import contextlib
import threading
import zlib
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "DimensionError",
    "ContractError",
    "set_precision",
    "get_precision",
    "precision",
    "default_dtype",
    "no_grad",
    "is_grad_enabled",
    "param_rng",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_trailing",
    "broadcast_leading",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "sum",
    "mean",
    "square",
    "sqrt",
    "gelu",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "numeric_grad",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was invoked outside its documented contract."""


# ---------------------------------------------------------------------------
# global switches

_PRECISION = {"bits": 32}
_state = threading.local()


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit reals for newly created tensors."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _PRECISION["bits"] = bits


def get_precision() -> int:
    return _PRECISION["bits"]


def default_dtype() -> np.dtype:
    return np.dtype(np.float64 if _PRECISION["bits"] == 64 else np.float32)


@contextlib.contextmanager
def precision(bits: int):
    old = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction on the current thread."""
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent Philox stream for one named parameter tensor.

    The stream key is ``(seed, crc32(name))`` so that adding or reordering
    parameters never shifts the values drawn for another one.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

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


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("fn", "inputs")

    def __init__(self, fn: "Function", inputs: tuple[Tensor, ...]):
        self.fn = fn
        self.inputs = inputs


class Function:
    """Base class for differentiable operations.

    ``forward`` receives raw arrays and may stash intermediates on ``self``;
    ``backward`` maps the output gradient to one gradient (or ``None``) per
    input.
    """

    name = "op"

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> tuple:
        raise NotImplementedError


def _apply(fn: Function, *inputs: Tensor) -> Tensor:
    out = Tensor._wrap(fn.forward(*(t.data for t in inputs)))
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(fn, inputs)
    return out


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


class _Add(Function):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class _Sub(Function):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class _Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class _Div(Function):
    name = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        gb = -g * self.a / (self.b * self.b)
        return g / self.b, gb


class _Scale(Function):
    name = "scale"

    def __init__(self, c: float):
        self.c = c

    def forward(self, a):
        return a * a.dtype.type(self.c)

    def backward(self, g):
        return (g * g.dtype.type(self.c),)


class _Shift(Function):
    name = "shift"

    def __init__(self, c: float):
        self.c = c

    def forward(self, a):
        return a + a.dtype.type(self.c)

    def backward(self, g):
        return (g,)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _apply(_Add(), a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _apply(_Sub(), a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _apply(_Mul(), a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    return _apply(_Div(), a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return _apply(_Scale(float(c)), a)


def shift(a: Tensor, c: float) -> Tensor:
    return _apply(_Shift(float(c)), a)


class _AddTrailing(Function):
    name = "add_trailing"

    def forward(self, x, b):
        self.lead = x.ndim - b.ndim
        return x + b

    def backward(self, g):
        gb = g.sum(axis=tuple(range(self.lead))) if self.lead else g
        return g, gb


def add_trailing(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b.shape`` is a trailing suffix of ``x.shape``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_trailing: {b.shape} is not a trailing suffix of {x.shape}")
    return _apply(_AddTrailing(), x, b)


class _BroadcastLeading(Function):
    name = "broadcast_leading"

    def __init__(self, lead: tuple[int, ...]):
        self.lead = lead

    def forward(self, x):
        return np.broadcast_to(x, self.lead + x.shape).copy()

    def backward(self, g):
        return (g.sum(axis=tuple(range(len(self.lead)))),)


def broadcast_leading(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``x`` over new leading axes of size ``lead``."""
    return _apply(_BroadcastLeading(tuple(int(s) for s in lead)), x)


# ---------------------------------------------------------------------------
# linear algebra and shape


class _MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        self.a, self.b = a, b
        self.shared = b.ndim == 2 and a.ndim > 2
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        if b.ndim == 2:
            ga = g @ b.T
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D weight shared across all leading axes of ``a`` or has
    exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    return _apply(_MatMul(), a, b)


class _Transpose(Function):
    name = "transpose"

    def __init__(self, axes):
        self.axes = axes

    def forward(self, x):
        return np.ascontiguousarray(np.transpose(x, self.axes))

    def backward(self, g):
        if self.axes is None:
            return (np.ascontiguousarray(g.T),)
        return (np.ascontiguousarray(np.transpose(g, np.argsort(self.axes))),)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is not None:
        axes = tuple(int(a) % x.ndim for a in axes)
        if sorted(axes) != list(range(x.ndim)):
            raise DimensionError(f"invalid axes {axes} for shape {x.shape}")
    return _apply(_Transpose(axes), x)


class _Reshape(Function):
    name = "reshape"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        np.empty(x.shape, dtype=np.int8).reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _apply(_Reshape(shape), x)


class _Concat(Function):
    name = "concat"

    def __init__(self, axis):
        self.axis = axis

    def forward(self, *xs):
        self.bounds = np.cumsum([x.shape[self.axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g):
        return tuple(np.split(g, self.bounds, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise DimensionError(f"concat: {ref.shape} and {t.shape} disagree off axis {axis}")
    if len(tensors) == 1:
        return tensors[0]
    return _apply(_Concat(axis), *tensors)


class _Take(Function):
    name = "take"

    def __init__(self, index):
        self.index = index

    def forward(self, x):
        self.in_shape, self.in_dtype = x.shape, x.dtype
        out = x[self.index]
        return np.array(out, copy=True)

    def backward(self, g):
        gx = np.zeros(self.in_shape, dtype=self.in_dtype)
        np.add.at(gx, self.index, g)
        return (gx,)


def take(x: Tensor, index) -> Tensor:
    """Differentiable ``x[index]`` (basic or integer-array indexing)."""
    return _apply(_Take(index), x)


# ---------------------------------------------------------------------------
# reductions and pointwise nonlinearities


class _Sum(Function):
    name = "sum"

    def __init__(self, axis, keepdims):
        self.axis, self.keepdims = axis, keepdims

    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if isinstance(axis, int):
        axis = (axis % x.ndim,)
    elif axis is not None:
        axis = tuple(a % x.ndim for a in axis)
    return _apply(_Sum(axis, keepdims), x)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


class _Square(Function):
    name = "square"

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, g):
        return (2 * g * self.x,)


def square(x: Tensor) -> Tensor:
    return _apply(_Square(), x)


class _Sqrt(Function):
    name = "sqrt"

    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, g):
        return (g / (2 * self.out),)


def sqrt(x: Tensor) -> Tensor:
    return _apply(_Sqrt(), x)


_GELU_C = np.sqrt(2.0 / np.pi)


class _Gelu(Function):
    """tanh approximation of GELU."""

    name = "gelu"

    def forward(self, x):
        self.x = x
        c = x.dtype.type(_GELU_C)
        self.t = np.tanh(c * (x + x.dtype.type(0.044715) * (x * x * x)))
        return 0.5 * x * (1 + self.t)

    def backward(self, g):
        x, t = self.x, self.t
        c = x.dtype.type(_GELU_C)
        dt = (1 - t * t) * c * (1 + 3 * x.dtype.type(0.044715) * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)


def gelu(x: Tensor) -> Tensor:
    return _apply(_Gelu(), x)


class _Softmax(Function):
    name = "softmax"

    def __init__(self, axis):
        self.axis = axis

    def forward(self, x):
        z = x - x.max(axis=self.axis, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=self.axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    return _apply(_Softmax(axis % x.ndim), x)


class _LayerNorm(Function):
    name = "layer_norm"

    def __init__(self, eps):
        self.eps = eps

    def forward(self, x, gain, bias):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
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


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}"
        )
    return _apply(_LayerNorm(eps), x, gain, bias)


class _CrossEntropy(Function):
    name = "cross_entropy"

    def __init__(self, labels, weight):
        self.labels = labels
        self.weight = weight

    def forward(self, logits):
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        self.p = np.exp(logp)
        rows = np.arange(len(self.labels))
        picked = logp[rows, self.labels]
        return np.asarray(-(picked * self.weight).sum(), dtype=logits.dtype)

    def backward(self, g):
        gl = self.p.copy()
        gl[np.arange(len(self.labels)), self.labels] -= 1
        return (gl * (self.weight[:, None] * g),)


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over rows of ``logits`` (rows with ``mask=False`` are ignored)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    mask = np.ones(len(labels), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = max(int(mask.sum()), 1)
    weight = mask.astype(logits.dtype) / count
    safe = np.where(mask, labels, 0)
    return _apply(_CrossEntropy(safe, weight), logits)


# ---------------------------------------------------------------------------
# graph linearization and the backward pass


class ComputationRecord:
    """Operation nodes reachable from an output, inputs before consumers."""

    def __init__(self, entries: list[tuple[Tensor, _Node]]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def op_names(self) -> list[str]:
        return [node.fn.name for _, node in self.entries]

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        order: list[tuple[Tensor, _Node]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append((t, t._node))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in reversed(t._node.inputs):
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every node forward from the leaves; returns ``id(output) -> array``."""
        values: dict[int, np.ndarray] = {}
        for out, node in self.entries:
            args = [values.get(id(t), t.data) for t in node.inputs]
            values[id(out)] = node.fn.forward(*args)
        return values

    def clear(self) -> None:
        for out, _ in self.entries:
            out._node = None
        self.entries = []


def backward(loss: Tensor) -> ComputationRecord:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    record = ComputationRecord.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._node is None:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
        return record
    for out, node in reversed(record.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.fn.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    record.clear()
    return record


def numeric_grad(fn, tensor: Tensor, h: float = 1e-5, indices: Iterable | None = None) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``tensor`` entries."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad
