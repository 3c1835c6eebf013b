"""Dense numpy tensors with tape-based reverse-mode differentiation.

Ops are recorded on the active :class:`Graph` (entered with ``with Graph() as graph:``)
whenever at least one input requires a gradient.  Outside a graph nothing is recorded,
which is how inference runs.  ``backward(graph, loss)`` walks the tape in reverse and
accumulates ``d loss / d leaf`` into every leaf's ``grad``.

Training runs in 32-bit floats; gradient checks switch to 64-bit with
``with float64_mode(): ...``.
"""
import itertools
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import ContractError, DimensionError, DomainError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_dtype: ContextVar[type] = ContextVar("tensor_dtype", default=np.float32)
_active_graph: ContextVar[Optional["Graph"]] = ContextVar("active_graph", default=None)
_node_ids = itertools.count()


def default_dtype() -> type:
    """Float type used for newly created tensors in this context."""
    return _dtype.get()


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Create new tensors with ``dtype`` inside the block."""
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


def float64_mode():
    return precision(np.float64)


class Tensor:
    """An n-dimensional float array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.node_id = next(_node_ids)
        out.name = None
        return out

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"<Tensor shape={self.shape} dtype={self.data.dtype}{label} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    """One recorded op: the function (holding saved activations), its inputs and output."""

    op: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Graph:
    """Ordered tape of recorded ops; construction order is a topological order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._tokens = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_active_graph.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_graph.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def replay(self) -> Dict[int, np.ndarray]:
        """Re-run every recorded forward from the leaves, returning outputs by node id."""
        values: Dict[int, np.ndarray] = {}
        for node in self.nodes:
            arrays = [values.get(t.node_id, t.data) for t in node.inputs]
            fresh = type(node.op)(**node.op.params)
            values[node.output.node_id] = fresh.forward(*arrays)
        return values


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording even inside an active graph."""
    token = _active_graph.set(None)
    try:
        yield
    finally:
        _active_graph.reset(token)


class Function:
    """Differentiable op.  Subclasses save what they need in ``forward``."""

    name = "op"

    def __init__(self, **params):
        self.params = params

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **params) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(**params)
        out_data = fn.forward(*(t.data for t in tensors))
        graph = _active_graph.get()
        track = graph is not None and any(t.requires_grad for t in tensors)
        out = Tensor._wrap(out_data, requires_grad=track)
        if track:
            graph.record(Node(fn, tensors, out))
        return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _normalize_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        if np.any(b == 0):
            raise DomainError(f"{self.name}: division by zero")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (
            _unbroadcast(grad / self.b, self.a.shape),
            _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    """Matrix product over the last two axes with broadcast batch axes."""

    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"{self.name}: cannot multiply shapes {a.shape} and {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(
                f"{self.name}: batch axes of {a.shape} and {b.shape} do not broadcast"
            ) from None
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        axes = self.params["axes"]
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        if sorted(np.asarray(axes) % max(a.ndim, 1)) != list(range(a.ndim)):
            raise DimensionError(f"{self.name}: axes {axes} invalid for shape {a.shape}")
        self.axes = tuple(int(x) % a.ndim for x in axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        self.in_shape = a.shape
        try:
            return a.reshape(self.params["shape"])
        except ValueError:
            raise DimensionError(
                f"{self.name}: cannot reshape {a.shape} into {self.params['shape']}"
            ) from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.exp(a)
        if not np.all(np.isfinite(out)):
            raise DomainError(f"{self.name}: result is not finite (input max {np.max(a)!r})")
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if not np.all(a > 0) or not np.all(np.isfinite(a)):
            raise DomainError(f"{self.name}: input must be positive and finite (min {np.min(a)!r}, max {np.max(a)!r})")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Pow(Function):
    """Elementwise power with a constant exponent."""

    name = "pow"

    def forward(self, a):
        p = self.params["exponent"]
        if p < 0 and np.any(a == 0):
            raise DomainError(f"{self.name}: zero raised to negative power {p}")
        self.a = a
        return np.power(a, p).astype(a.dtype, copy=False)

    def backward(self, grad):
        p = self.params["exponent"]
        return (grad * p * np.power(self.a, p - 1),)


class Tanh(Function):
    name = "tanh"

    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class ReLU(Function):
    name = "relu"

    def forward(self, a):
        self.positive = a > 0
        return np.where(self.positive, a, 0).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.positive,)


_GELU_C = float(np.sqrt(2.0 / np.pi))


class GELU(Function):
    """Tanh approximation of the Gaussian error linear unit."""

    name = "gelu"

    def forward(self, a):
        self.a = a
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a ** 3))
        return (0.5 * a * (1.0 + self.t)).astype(a.dtype, copy=False)

    def backward(self, grad):
        a, t = self.a, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * dt),)


class Sum(Function):
    name = "sum"

    def forward(self, a):
        self.in_shape = a.shape
        axis = self.params["axis"]
        if axis is not None:
            for ax in np.atleast_1d(axis):
                _normalize_axis(self.name, int(ax), a.ndim)
        return np.asarray(np.sum(a, axis=axis, keepdims=self.params["keepdims"]), dtype=a.dtype)

    def backward(self, grad):
        axis = self.params["axis"]
        if axis is not None and not self.params["keepdims"]:
            grad = np.expand_dims(grad, tuple(int(ax) % len(self.in_shape) for ax in np.atleast_1d(axis)))
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a):
        self.in_shape = a.shape
        axis = self.params["axis"]
        if axis is None:
            self.count = a.size
        else:
            axes = [_normalize_axis(self.name, int(ax), a.ndim) for ax in np.atleast_1d(axis)]
            self.count = int(np.prod([a.shape[ax] for ax in axes]))
        return np.asarray(np.mean(a, axis=axis, keepdims=self.params["keepdims"]), dtype=a.dtype)

    def backward(self, grad):
        axis = self.params["axis"]
        if axis is not None and not self.params["keepdims"]:
            grad = np.expand_dims(grad, tuple(int(ax) % len(self.in_shape) for ax in np.atleast_1d(axis)))
        return (np.broadcast_to(grad / self.count, self.in_shape).copy(),)


class Softmax(Function):
    """Max-subtracted softmax.  ``mask`` (True = keep) sends the rest to -inf."""

    name = "softmax"

    def forward(self, a):
        axis = _normalize_axis(self.name, self.params["axis"], a.ndim)
        mask = self.params.get("mask")
        if mask is not None:
            try:
                mask = np.broadcast_to(mask, a.shape)
            except ValueError:
                raise DimensionError(
                    f"{self.name}: mask shape {np.shape(self.params['mask'])} does not match {a.shape}"
                ) from None
            if not np.all(mask.any(axis=axis)):
                raise ContractError(f"{self.name}: a slice along axis {axis} is fully masked")
            a = np.where(mask, a, -np.inf)
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.axis = axis
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, a):
        axis = _normalize_axis(self.name, self.params["axis"], a.ndim)
        shifted = a - a.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.axis = axis
        self.out = shifted - lse
        return self.out

    def backward(self, grad):
        soft = np.exp(self.out)
        return (grad - soft * grad.sum(axis=self.axis, keepdims=True),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays):
        axis = _normalize_axis(self.name, self.params["axis"], arrays[0].ndim)
        ref = arrays[0].shape
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(arr.shape, ref)) if i != axis
            ):
                raise DimensionError(
                    f"{self.name}: shapes {[x.shape for x in arrays]} differ off axis {axis}"
                )
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class GetItem(Function):
    name = "slice"

    def forward(self, a):
        self.in_shape, self.in_dtype = a.shape, a.dtype
        try:
            return np.array(a[self.params["index"]])
        except IndexError as exc:
            raise DimensionError(f"{self.name}: {exc} (shape {a.shape})") from None

    def backward(self, grad):
        full = np.zeros(self.in_shape, dtype=self.in_dtype)
        np.add.at(full, self.params["index"], grad)
        return (full,)


class L2Normalize(Function):
    """x / max(||x||, eps) along ``axis``; zero vectors map to zero."""

    name = "l2_normalize"

    def forward(self, a):
        axis = _normalize_axis(self.name, self.params["axis"], a.ndim)
        eps = self.params["eps"]
        norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
        self.axis, self.norm = axis, norm
        self.denom = np.maximum(norm, eps)
        self.out = a / self.denom
        return self.out

    def backward(self, grad):
        y = self.out
        radial = y * (grad * y).sum(axis=self.axis, keepdims=True)
        clipped = self.norm <= self.params["eps"]
        return (np.where(clipped, grad, grad - radial) / self.denom,)


class Embedding(Function):
    """Row lookup ``weight[ids]``; gradients scatter-add back into the rows."""

    name = "embedding"

    def forward(self, weight):
        ids = np.asarray(self.params["ids"])
        if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
            raise DimensionError(f"{self.name}: ids outside [0, {weight.shape[0]})")
        self.weight_shape, self.dtype = weight.shape, weight.dtype
        return weight[ids]

    def backward(self, grad):
        full = np.zeros(self.weight_shape, dtype=self.dtype)
        np.add.at(full, np.asarray(self.params["ids"]), grad)
        return (full,)


def add(a, b): return Add.apply(a, b)
def sub(a, b): return Sub.apply(a, b)
def mul(a, b): return Mul.apply(a, b)
def div(a, b): return Div.apply(a, b)
def neg(a): return Neg.apply(a)
def matmul(a, b): return MatMul.apply(a, b)
def exp(a): return Exp.apply(a)
def log(a): return Log.apply(a)
def tanh(a): return Tanh.apply(a)
def relu(a): return ReLU.apply(a)
def gelu(a): return GELU.apply(a)
def sqrt(a): return Pow.apply(a, exponent=0.5)
def power(a, exponent: float): return Pow.apply(a, exponent=exponent)
def reshape(a, shape): return Reshape.apply(a, shape=tuple(shape))
def transpose(a, axes=None): return Transpose.apply(a, axes=None if axes is None else tuple(axes))
def sum_(a, axis=None, keepdims=False): return Sum.apply(a, axis=axis, keepdims=keepdims)
def mean(a, axis=None, keepdims=False): return Mean.apply(a, axis=axis, keepdims=keepdims)
def log_softmax(a, axis=-1): return LogSoftmax.apply(a, axis=axis)
def concat(tensors, axis=0): return Concat.apply(*tensors, axis=axis)
def l2_normalize(a, axis=-1, eps=1e-12): return L2Normalize.apply(a, axis=axis, eps=eps)
def embedding(weight, ids): return Embedding.apply(weight, ids=ids)


def scale(a, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    return Mul.apply(a, np.asarray(factor, dtype=as_tensor(a).dtype))


def softmax(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    return Softmax.apply(a, axis=axis, mask=None if mask is None else np.asarray(mask, dtype=bool))


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def backward(graph: Graph, loss: Tensor) -> Dict[int, np.ndarray]:
    """Accumulate d loss / d leaf into every requires-grad leaf reached from ``loss``.

    Returns the accumulated gradient of each reached leaf keyed by node id.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor that requires grad")

    produced = {node.output.node_id for node in graph.nodes}
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss.node_id not in produced:
        leaves[loss.node_id] = loss

    for node in reversed(graph.nodes):
        grad = grads.pop(node.output.node_id, None)
        if grad is None:
            continue
        for tensor, g in zip(node.inputs, node.op.backward(grad)):
            if g is None or not tensor.requires_grad:
                continue
            previous = grads.get(tensor.node_id)
            grads[tensor.node_id] = g if previous is None else previous + g
            if tensor.node_id not in produced:
                leaves[tensor.node_id] = tensor

    result = {}
    for node_id, leaf in leaves.items():
        g = grads.get(node_id)
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[node_id] = leaf.grad
    return result
