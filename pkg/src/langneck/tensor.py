"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations record onto the active `Tape` (entered as a context manager) when at
least one input requires a gradient. Without an active tape every operation is a
plain forward computation, which is how inference and finite differences run.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from langneck.errors import DimensionError, LabelError, NumericalError, TapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

LAYER_NORM_EPS = 1e-5
NORM_EPS = 1e-8
# tanh approximation of gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))
GELU_CUBIC = 0.044715
SABOTAGE_FACTOR = 1.5

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("langneck_tape", default=None)
_sabotaged_ops: contextvars.ContextVar[frozenset] = contextvars.ContextVar("langneck_sabotage", default=frozenset())

PRIMITIVES: Dict[str, Callable[..., "Tensor"]] = {}


def primitive(name: str):
    """Register a differentiable operation under `name`."""

    def decorator(fn):
        PRIMITIVES[name] = fn
        return fn

    return decorator


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and arr.size == 0:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self):
        """Backpropagate from this scalar through the active tape."""
        tape = self.node.tape if self.node is not None else _active_tape.get()
        if tape is None:
            raise TapeError("No tape recorded this tensor.")
        tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


@dataclass(eq=False)
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn
    index: int
    tape: Optional["Tape"]


class Tape:
    """Append-only record of operations, replayed in reverse by `backward`."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._consumed = False
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Node:
        if self._consumed:
            raise TapeError("Cannot record onto a tape after backward; call reset() first.")
        node = Node(op=op, inputs=inputs, backward=backward, index=len(self.nodes), tape=self)
        self.nodes.append(node)
        return node

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into `.grad` of every leaf that requires grad."""
        if self._consumed:
            raise TapeError("backward() already ran on this tape; call reset() before reusing it.")
        if not self.nodes:
            raise TapeError("backward() called on an empty tape.")
        if loss.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise TapeError("The loss was not recorded on this tape.")

        sabotaged = _sabotaged_ops.get()
        pending: Dict[int, np.ndarray] = {loss.node.index: np.ones(loss.shape)}
        for node in reversed(self.nodes[: loss.node.index + 1]):
            upstream = pending.pop(node.index, None)
            if upstream is None:
                continue
            input_grads = node.backward(upstream)
            if node.op in sabotaged:
                input_grads = [None if g is None else g * SABOTAGE_FACTOR for g in input_grads]
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.node is not None and tensor.node.tape is self:
                    idx = tensor.node.index
                    pending[idx] = pending[idx] + grad if idx in pending else grad
                elif tensor.node is None:
                    tensor.grad = np.array(grad) if tensor.grad is None else tensor.grad + grad
        self._consumed = True

    def reset(self):
        for node in self.nodes:
            node.inputs = ()
            node.tape = None
        self.nodes = []
        self._consumed = False


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward computations without recording, even inside an active tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


@contextmanager
def sabotaged(*ops: str) -> Iterator[None]:
    """Scale the backward output of the named ops by a wrong factor (negative-control hook)."""
    unknown = [op for op in ops if op not in PRIMITIVES]
    if unknown:
        raise KeyError(f"Unknown primitive(s): {', '.join(unknown)}")
    token = _sabotaged_ops.set(_sabotaged_ops.get() | frozenset(ops))
    try:
        yield
    finally:
        _sabotaged_ops.reset(token)


def zero_grad(tensors: Iterable[Tensor]):
    for t in tensors:
        t.zero_grad()


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values", op=op)
    out = Tensor._wrap(data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = tape.record(op, inputs, backward)
    return out


def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} do not broadcast")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


@primitive("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


@primitive("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


@primitive("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


@primitive("scale")
def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g * factor,)

    return _make("scale", x.data * factor, (x,), backward)


@primitive("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def backward(g):
        ga = np.matmul(g, _swap_last(b.data))
        gb = np.matmul(_swap_last(a.data), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", np.matmul(a.data, b.data), (a, b), backward)


@primitive("transpose")
def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(perm) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {perm} do not permute a rank-{x.ndim} tensor")
    inverse = tuple(int(i) for i in np.argsort(perm))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", np.transpose(x.data, perm), (x,), backward)


@primitive("reshape")
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}")

    def backward(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), backward)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@primitive("sum")
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (_expand_reduced(g, x.shape, axis, keepdims),)

    return _make("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


@primitive("mean")
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // max(np.size(out), 1)

    def backward(g):
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)

    return _make("mean", out, (x,), backward)


def _softmax_data(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


@primitive("softmax")
def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = as_tensor(x)
    if x.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    s = _softmax_data(x.data)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make("softmax", s, (x,), backward)


@primitive("log_softmax")
def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0:
        raise DimensionError("log_softmax needs at least one axis")
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), backward)


@primitive("cross_entropy")
def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy needs B x C logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for a batch of {batch}")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise LabelError(f"cross_entropy: labels must lie in [0, {classes})")
    rows = np.arange(batch)
    shifted = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    loss = -np.mean(log_probs[rows, labels])

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _make("cross_entropy", np.asarray(loss), (logits,), backward)


@primitive("normalize")
def normalize(x: Tensor) -> Tensor:
    """Scale each last-axis row to unit L2 norm; norms are clamped below at NORM_EPS."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    clamped = np.maximum(norm, NORM_EPS)
    y = x.data / clamped

    def backward(g):
        radial = np.where(norm > NORM_EPS, np.sum(g * y, axis=-1, keepdims=True), 0.0)
        return ((g - y * radial) / clamped,)

    return _make("normalize", y, (x,), backward)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """u.v / (|u| |v|) along the last axis, with each norm clamped at NORM_EPS."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_similarity shapes differ: {u.shape} vs {v.shape}")
    return sum_(mul(normalize(u), normalize(v)), axis=-1)


PRIMITIVES["cosine_similarity"] = cosine_similarity


@primitive("layer_norm")
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({width},)")
    centered = x.data - np.mean(x.data, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + LAYER_NORM_EPS)
    xhat = centered * rstd

    def backward(g):
        reduce_axes = tuple(range(x.ndim - 1))
        dgain = np.sum(g * xhat, axis=reduce_axes)
        dbias = np.sum(g, axis=reduce_axes)
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - np.mean(dxhat, axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), backward)


@primitive("gelu")
def gelu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    inner = GELU_SQRT_2_OVER_PI * (x.data + GELU_CUBIC * x.data**3)
    t = np.tanh(inner)

    def backward(g):
        d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _make("gelu", 0.5 * x.data * (1.0 + t), (x,), backward)


@primitive("embedding_lookup")
def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of `table` (V x d) selected by integer `ids` of any shape."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be V x d, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise LabelError(f"token ids must lie in [0, {table.shape[0]})")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _make("embedding_lookup", table.data[ids], (table,), backward)


@primitive("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tensors, backward)


@primitive("slice")
def slice_(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as e:
        raise DimensionError(f"slice: {e}")
    out = np.array(out)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make("slice", out, (x,), backward)


def causal_mask(length: int) -> np.ndarray:
    """True where attention is forbidden (key position after query position)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


@primitive("scaled_dot_attention")
def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; leading axes are batch/head."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if causal and q.shape[-2] != k.shape[-2]:
        raise DimensionError("causal attention needs equal query and key lengths")
    factor = 1.0 / np.sqrt(q.shape[-1])
    scores = np.matmul(q.data, _swap_last(k.data)) * factor
    if causal:
        scores = np.where(causal_mask(q.shape[-2]), -np.inf, scores)
    weights = _softmax_data(scores)

    def backward(g):
        dv = np.matmul(_swap_last(weights), g)
        dweights = np.matmul(g, _swap_last(v.data))
        dscores = weights * (dweights - np.sum(dweights * weights, axis=-1, keepdims=True))
        dq = np.matmul(dscores, k.data) * factor
        dk = np.matmul(_swap_last(dscores), q.data) * factor
        return dq, dk, dv

    return _make("scaled_dot_attention", np.matmul(weights, v.data), (q, k, v), backward)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central finite differences.

    Relative error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise NumericalError("grad_check needs a finite input")
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
        if y.size != 1:
            raise DimensionError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
        if y.node is not None:
            tape.backward(y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros(x0.size)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            f_plus = f(Tensor(bumped.reshape(x0.shape))).item()
            bumped[i] = flat[i] - h
            f_minus = f(Tensor(bumped.reshape(x0.shape))).item()
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
    numeric = numeric.reshape(x0.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
