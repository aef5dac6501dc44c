"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

The engine is define-by-run: every operation whose inputs require gradients
appends a record (output, inputs, vector-Jacobian product) to the active
``Tape``.  Records are appended in execution order, so walking the tape
backwards visits every node after all of its consumers.

Binary operations accept equal shapes or leading-dimension expansion only
(one operand's shape is a trailing suffix of the other's).  Anything else must
be made explicit with ``expand``.
"""

import logging
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from errors import ArityMismatch, NotScalar, ShapeMismatch

logger = logging.getLogger(__name__)

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = [Tape()]
        _local.grad_enabled = True
    return _local.stack


class Tape:
    """Ordered list of recorded operations, confined to one thread."""

    def __init__(self):
        self.records: List[Tuple["Tensor", Tuple["Tensor", ...], Callable, str]] = []

    def record(self, output: "Tensor", inputs: Tuple["Tensor", ...], vjp: Callable, name: str):
        output._tape = self
        output._index = len(self.records)
        self.records.append((output, inputs, vjp, name))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def active_tape() -> Tape:
    return _tape_stack()[-1]


def grad_enabled() -> bool:
    _tape_stack()
    return _local.grad_enabled


@contextmanager
def no_grad():
    """Run a block without recording anything on the tape."""
    _tape_stack()
    previous = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """Dense float64 array that may participate in reverse-mode autodiff."""

    # keep numpy from hijacking reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None
        self._index: Optional[int] = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

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
    def values(self) -> np.ndarray:
        """Flat view of the values."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._index is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None) -> Dict["Tensor", np.ndarray]:
        return backward(self, grad)

    # operators
    def __add__(self, other):
        if not isinstance(other, Tensor):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scalar_mul(self, -1.0), float(other))

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


TensorLike = Tensor


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, name: str) -> Tensor:
    needs_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        active_tape().record(out, tuple(inputs), vjp, name)
    return out


def _check_expandable(a: Tuple[int, ...], b: Tuple[int, ...], op: str):
    if a == b:
        return
    if len(b) <= len(a) and a[len(a) - len(b):] == b:
        return
    if len(a) <= len(b) and b[len(b) - len(a):] == a:
        return
    raise ShapeMismatch(f"{op}: shapes {a} and {b} are not compatible")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


# elementwise binary ops

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_expandable(a.shape, b.shape, "add")

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_expandable(a.shape, b.shape, "sub")

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_expandable(a.shape, b.shape, "mul")

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_expandable(a.shape, b.shape, "div")
    out = a.data / b.data

    def vjp(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return _make(out, (a, b), vjp, "div")


def scalar_mul(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scalar_mul")


def add_scalar(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data + c, (x,), lambda g: (g,), "add_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes expanded."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    _check_expandable(a.shape[:-2], b.shape[:-2], "matmul")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


# structural ops

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def slice_(x: Tensor, key) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return (out,)

    return _make(x.data[key], (x,), vjp, "slice")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}: {e}") from e
    return _make(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def expand(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Explicit broadcast over new leading axes and size-1 axes."""
    x = as_tensor(x)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise ShapeMismatch(f"expand: {x.shape} -> {shape}") from e

    def vjp(g):
        g = _reduce_to(g, g.shape[g.ndim - x.ndim:]) if g.ndim > x.ndim else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(x.shape),)

    return _make(data, (x,), vjp, "expand")


def gather(x: Tensor, indices) -> Tensor:
    """Rows of ``x`` selected by an integer index array of any shape."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, indices, g)
        return (out,)

    return _make(x.data[indices], (x,), vjp, "gather")


def scatter_add(x: Tensor, indices, size: int) -> Tensor:
    """Sum rows of ``x`` into ``size`` output rows addressed by ``indices``."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    if x.shape[:indices.ndim] != indices.shape:
        raise ShapeMismatch(f"scatter_add: indices {indices.shape} do not lead values {x.shape}")
    out = np.zeros((size,) + x.shape[indices.ndim:])
    np.add.at(out, indices, x.data)
    return _make(out, (x,), lambda g: (g[indices],), "scatter_add")


# reductions

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scalar_mul(sum_(x, axis, keepdims), 1.0 / count)


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximizer."""
    x = as_tensor(x)
    ax = axis % x.ndim
    idx = np.argmax(x.data, axis=ax)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (out,)

    return _make(np.max(x.data, axis=ax), (x,), vjp, "max_reduce")


# elementwise unary ops

def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), vjp, "softmax")


# custom nodes

def custom_node(forward_fn: Callable, backward_fn: Callable, *inputs, name: str = "custom") -> Tensor:
    """Register an opaque node with an analytically supplied backward pass.

    ``forward_fn(*arrays)`` returns the output array.  ``backward_fn(grad_out,
    output, *arrays)`` returns one gradient (or ``None``) per input.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    arrays = [t.data for t in inputs]
    out = np.asarray(forward_fn(*arrays), dtype=np.float64)

    def vjp(g):
        grads = backward_fn(g, out, *arrays)
        if not isinstance(grads, (tuple, list)):
            grads = (grads,)
        if len(grads) != len(inputs):
            raise ArityMismatch(
                f"{name}: backward returned {len(grads)} gradients for {len(inputs)} inputs"
            )
        return tuple(None if gr is None else np.asarray(gr, dtype=np.float64).reshape(t.shape)
                     for gr, t in zip(grads, inputs))

    return _make(out, inputs, vjp, name)


# backward

def backward(loss: Tensor, grad=None, accumulate: bool = True) -> Dict[Tensor, np.ndarray]:
    """Propagate ``dloss`` back to every tensor that requires a gradient.

    Returns a map from tensor to gradient covering leaves and intermediate
    nodes.  With ``accumulate`` the gradients are also added to ``leaf.grad``.
    """
    if grad is None:
        if loss.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grad = np.asarray(grad, dtype=np.float64).reshape(loss.shape)

    grads: Dict[int, np.ndarray] = {id(loss): grad}
    owners: Dict[int, Tensor] = {id(loss): loss}

    if loss._tape is not None:
        records = loss._tape.records
        for index in range(loss._index, -1, -1):
            out, inputs, vjp, _ = records[index]
            g = grads.get(id(out))
            if g is None:
                continue
            input_grads = vjp(g)
            if len(input_grads) != len(inputs):
                raise ArityMismatch(f"vjp returned {len(input_grads)} gradients for {len(inputs)} inputs")
            for t, gt in zip(inputs, input_grads):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = gt
                    owners[key] = t

    result = {owners[k]: v for k, v in grads.items()}
    if accumulate:
        for t, g in result.items():
            if t.is_leaf and t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
    return result


# verification

@dataclass
class GradcheckReport:
    max_errors: List[float]
    tolerance: float
    failures: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence, h: float = 1e-5, tol: float = 1e-5) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    arrays = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]

    with Tape():
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        grads = backward(out, accumulate=False)
    analytic = [grads.get(t, np.zeros_like(t.data)) for t in leaves]

    max_errors = []
    failures = []
    with no_grad():
        for i, base in enumerate(arrays):
            numeric = np.zeros_like(base)
            flat = numeric.reshape(-1)
            for j in range(base.size):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[i].reshape(-1)[j] += h
                minus[i].reshape(-1)[j] -= h
                f_plus = fn(*[Tensor(a) for a in plus]).item()
                f_minus = fn(*[Tensor(a) for a in minus]).item()
                flat[j] = (f_plus - f_minus) / (2.0 * h)
            scale = np.maximum(1.0, np.maximum(np.abs(analytic[i]), np.abs(numeric)))
            err = float(np.max(np.abs(analytic[i] - numeric) / scale)) if base.size else 0.0
            max_errors.append(err)
            if err > tol:
                failures.append(i)

    report = GradcheckReport(max_errors=max_errors, tolerance=tol, failures=failures)
    logger.debug(f"gradcheck max errors {max_errors} (tol {tol})")
    return report


# parameters and layers

class ParameterSet:
    """Ordered collection of named trainable tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __setitem__(self, name, tensor: Tensor):
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = tensor

    def __len__(self):
        return len(self._params)

    def add(self, name: str, value) -> Tensor:
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_linear(self, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(fan_in)
        self.add(f"{prefix}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.add(f"{prefix}.bias", rng.uniform(-bound, bound, size=(fan_out,)))

    def named(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def update(self, other: "ParameterSet"):
        for name, tensor in other.named():
            self._params[name] = tensor

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self._params.items())

    def load_state(self, state: Dict[str, np.ndarray]):
        for name, tensor in self._params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeMismatch(f"parameter {name}: expected {tensor.shape}, got {value.shape}")
            tensor.data = value.copy()

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.grad = None


def linear(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    return matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


class MLP:
    """Stack of linear layers over the last axis with ReLU in between."""

    def __init__(self, params: ParameterSet, prefix: str, widths: Sequence[int],
                 rng: np.random.Generator, final_activation: bool = False):
        self.params = params
        self.prefix = prefix
        self.widths = list(widths)
        self.final_activation = final_activation
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            params.add_linear(f"{prefix}.{i}", fan_in, fan_out, rng)

    @property
    def layers(self) -> int:
        return len(self.widths) - 1

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        lead = x.shape[:-1]
        h = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        for i in range(self.layers):
            h = linear(self.params, f"{self.prefix}.{i}", h)
            if i < self.layers - 1 or self.final_activation:
                h = relu(h)
        return reshape(h, lead + (self.widths[-1],)) if x.ndim != 2 else h


class Adam:
    """Adaptive-moment update rule over a ``ParameterSet``."""

    def __init__(self, params: ParameterSet, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.named()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.named()}

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.params.named():
            if tensor.grad is None:
                continue
            g = tensor.grad
            self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            m_hat = self._m[name] / c1
            v_hat = self._v[name] / c2
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
