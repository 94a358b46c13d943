"""
Differentiable computation on dense float64 tensors.

Every forward op returns a new Tensor. When any input requires gradients the
op keeps references to its inputs and a closure mapping the output gradient to
per-input gradients; `backward` rebuilds the ordered record from the output
(define-by-run) and replays it in reverse.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import ConfigError, GradientError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._op = "leaf"
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="expected a single value")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator sugar over the op functions below.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scale_add(self, 1.0, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return scale_add(self, 1.0, -other)

    def __rsub__(self, other):
        return scale_add(self, -1.0, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale_add(self, other, 0.0)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale_add(self, 1.0 / other, 0.0)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._op = op
        out._backward = backward_fn
    else:
        out._parents = ()
        out._op = op
        out._backward = None
    return out


def _require_2d(op: str, *tensors: Tensor):
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(op, *(x.shape for x in tensors), detail="matrices required")


def _require_same(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.data, b.data

    def backward_fn(g):
        return g @ bv.T, av.T @ g

    return _make("matmul", av @ bv, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(x: Tensor) -> Tensor:
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same("mul", a, b)
    av, bv = a.data, b.data
    return _make("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same("div", a, b)
    av, bv = a.data, b.data
    if np.any(bv == 0):
        raise NumericalError("div: zero denominator")

    def backward_fn(g):
        return g / bv, -g * av / (bv * bv)

    return _make("div", av / bv, (a, b), backward_fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-F bias to every row of a B×F matrix."""
    _require_2d("add_bias", x)
    if bias.data.size != x.shape[1] or bias.data.ndim > 2:
        raise ShapeError("add_bias", x.shape, bias.shape)
    bias_shape = bias.shape

    def backward_fn(g):
        return g, g.sum(axis=0).reshape(bias_shape)

    return _make("add_bias", x.data + bias.data.reshape(1, -1), (x, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(DTYPE)
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def row_sum(x: Tensor) -> Tensor:
    _require_2d("row_sum", x)
    cols = x.shape[1]
    return _make(
        "row_sum", x.data.sum(axis=1, keepdims=True), (x,),
        lambda g: (np.repeat(g, cols, axis=1),),
    )


def row_mean(x: Tensor) -> Tensor:
    _require_2d("row_mean", x)
    cols = x.shape[1]
    return _make(
        "row_mean", x.data.mean(axis=1, keepdims=True), (x,),
        lambda g: (np.repeat(g / cols, cols, axis=1),),
    )


def row_center(x: Tensor) -> Tensor:
    """Subtract each row's mean from that row."""
    _require_2d("row_center", x)

    def backward_fn(g):
        return (g - g.mean(axis=1, keepdims=True),)

    return _make("row_center", x.data - x.data.mean(axis=1, keepdims=True), (x,), backward_fn)


def row_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Divide row i of a B×D matrix by scale[i] (scale is B×1)."""
    _require_2d("row_scale", x, scale)
    if scale.shape != (x.shape[0], 1):
        raise ShapeError("row_scale", x.shape, scale.shape)
    xv, sv = x.data, scale.data
    if np.any(sv == 0):
        raise NumericalError("row_scale: zero scale")

    def backward_fn(g):
        return g / sv, -(g * xv).sum(axis=1, keepdims=True) / (sv * sv)

    return _make("row_scale", xv / sv, (x, scale), backward_fn)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericalError("sqrt: negative input")
    root = np.sqrt(x.data)

    def backward_fn(g):
        # zero at the origin, same subgradient choice as frobenius_norm
        safe = np.where(root > 0, root, 1.0)
        return (np.where(root > 0, g * 0.5 / safe, 0.0),)

    return _make("sqrt", root, (x,), backward_fn)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row as a B×1 column."""
    return sqrt(row_sum(mul(x, x)))


def log_softmax(x: Tensor) -> Tensor:
    _require_2d("log_softmax", x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax", out, (x,), backward_fn)


def frobenius_norm(x: Tensor) -> Tensor:
    xv = x.data
    norm = float(np.sqrt(np.sum(xv * xv)))

    def backward_fn(g):
        if norm == 0.0:
            return (np.zeros_like(xv),)
        return (g * xv / norm,)

    return _make("frobenius_norm", np.array(norm), (x,), backward_fn)


def scale_add(x: Tensor, a: Scalar, b: Scalar = 0.0) -> Tensor:
    """a·x + b for python scalars a and b."""
    a, b = float(a), float(b)
    return _make("scale_add", a * x.data + b, (x,), lambda g: (g * a,))


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)
    return _make("transpose", x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, *shape: int) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", original, shape)
    return _make("reshape", out, (x,), lambda g: (g.reshape(original),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    original = x.shape
    return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(original, float(g)),))


def mean(x: Tensor) -> Tensor:
    original, size = x.shape, x.data.size
    return _make("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(original, float(g) / size),))


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecordEntry:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]


class ComputationRecord:
    """Ordered ops that produced an output, inputs before consumers."""

    def __init__(self, entries: List[RecordEntry]):
        self.entries = entries

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputationRecord":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or node.is_leaf:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if not parent.is_leaf and id(parent) not in visited:
                    stack.append((parent, False))
        return cls([RecordEntry(t._op, t, t._parents) for t in order])

    @property
    def ops(self) -> List[str]:
        return [e.op for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[RecordEntry]:
        return iter(self.entries)


def backward(output: Tensor, record: Optional[ComputationRecord] = None) -> ComputationRecord:
    """Populate .grad on every gradient-requiring leaf that output depends on.

    Leaf gradients accumulate into any existing .grad buffer.
    """
    if output.data.size != 1:
        raise GradientError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise GradientError("backward called on an output detached from every gradient-requiring input")
    if record is None:
        record = ComputationRecord.from_output(output)

    pending = {id(output): np.ones_like(output.data)}
    for entry in reversed(record.entries):
        g = pending.pop(id(entry.output), None)
        if g is None:
            continue
        input_grads = entry.output._backward(g)
        for parent, pg in zip(entry.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    return record


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def _evaluate(f: Callable, values: np.ndarray) -> float:
    out = f(Tensor(values.copy()))
    value = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(value):
        raise NumericalError("finite_diff_grad: function returned a non-finite value")
    return value


def finite_diff_grad(f: Callable, x, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of one tensor."""
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = _evaluate(f, base)
        flat[i] = original - step
        lower = _evaluate(f, base)
        flat[i] = original
        grad.reshape(-1)[i] = (upper - lower) / (2.0 * step)
    return grad


def _as_pair(op: str, analytic, numeric) -> Tuple[np.ndarray, np.ndarray]:
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    if analytic.shape != numeric.shape:
        raise ShapeError(op, analytic.shape, numeric.shape)
    return analytic, numeric


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    analytic, numeric = _as_pair("relative_error", analytic, numeric)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def scaled_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - n_i| / max(max|a|, max|n|, floor).

    Never larger than `relative_error`; every entry is judged against the
    gradient's largest magnitude.
    """
    analytic, numeric = _as_pair("scaled_error", analytic, numeric)
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


# ---------------------------------------------------------------------------
# SGD with step decay
# ---------------------------------------------------------------------------

class SgdConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    initial_lr: float = Field(0.05, gt=0)
    decay_factor: float = Field(0.1, gt=0, lt=1)
    decay_start_epoch: int = Field(150, ge=0)
    decay_every: int = Field(30, ge=1)
    total_epochs: int = Field(240, ge=0)


def lr_at_epoch(cfg: SgdConfig, epoch: int) -> float:
    """First decay lands on decay_start_epoch, then every decay_every epochs."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.decay_start_epoch:
        k = 0
    else:
        k = (epoch - cfg.decay_start_epoch) // cfg.decay_every + 1
    return cfg.initial_lr * cfg.decay_factor ** k


def sgd_step(params: Sequence[Tensor], lr: float):
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradientError(f"sgd_step: parameter {i} {p.shape} has no gradient")
    for p in params:
        p.data = p.data - lr * p.grad
        p.grad = None


class Sgd:
    """Plain SGD over a fixed parameter list, lr taken from the epoch schedule."""

    def __init__(self, params: Sequence[Tensor], cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, epoch: int) -> float:
        lr = lr_at_epoch(self.cfg, epoch)
        sgd_step(self.params, lr)
        return lr
