"""
ABMT Tensor - dense float64 arrays with reverse-mode automatic differentiation.

Every differentiable op records a node (parents plus a backward closure) when
gradients are enabled and at least one input requires them. ``backward``
replays the recorded nodes in exact reverse execution order, accumulates
gradient contributions, fills the ``grad`` slot of every tensor that requires
gradients, and frees the graph.

Shapes never broadcast: elementwise ops take equal shapes or a Python scalar,
and ``linear`` is the only op that adds a row vector (its bias) to a matrix.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractError, DimensionError, NumericalError, ParameterError, StateError

logger = logging.getLogger("abmt.tensor")

Scalar = Union[int, float]
ArrayLike = Union[np.ndarray, Sequence, Scalar]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_mode = threading.local()
_node_counter = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph (inference, teacher passes, EMA)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_op", "_freed")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericalError("Tensor data must be finite")
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._seq = -1
        self._op = "leaf"
        self._freed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Scalar) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Scalar) -> "Tensor":
        return add(neg(self), other)

    def __mul__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Scalar) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __truediv__(self, other: Scalar) -> "Tensor":
        if isinstance(other, Tensor):
            raise ContractError("Division is only defined by a scalar")
        return mul(self, 1.0 / other)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"'{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._freed = False
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward_fn
        out._seq = next(_node_counter)
    else:
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _accumulate(slot: Optional[np.ndarray], contribution: np.ndarray) -> np.ndarray:
    return contribution.copy() if slot is None else slot + contribution


def backward(loss: Tensor) -> None:
    """
    Fill ``grad`` of every tensor reachable from ``loss`` with d loss / d tensor.

    Raises:
        ContractError: loss is not a single element or carries no graph
        StateError: the graph behind ``loss`` was already consumed
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise StateError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a graph")

    nodes: List[Tensor] = []
    seen = set()
    stack = [loss]
    while stack:
        tensor = stack.pop()
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        nodes.append(tensor)
        stack.extend(p for p in tensor._parents if p.requires_grad)

    # sequence numbers follow execution; leaves carry -1 and come last
    nodes.sort(key=lambda t: t._seq, reverse=True)
    pending = {id(loss): np.ones_like(loss.data)}

    for tensor in nodes:
        g = pending.pop(id(tensor), None)
        if g is None:
            continue
        tensor.grad = _accumulate(tensor.grad, g)
        if tensor._backward is None:
            continue
        for parent, contribution in zip(tensor._parents, tensor._backward(g)):
            if contribution is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = contribution if key not in pending else pending[key] + contribution

    for tensor in nodes:
        if tensor._backward is not None:
            tensor._parents = ()
            tensor._backward = None
            tensor._freed = True
    loss._freed = True
    logger.debug(f"🔙 Backward visited {len(nodes)} tensors")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _node(a.data + float(b), (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _node(a.data - float(b), (a,), lambda g: (g,), "sub_scalar")
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _node(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full_like(x.data, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise DimensionError("mean of an empty tensor")
    n = x.size
    return _node(
        np.array(x.data.mean()), (x,), lambda g: (np.full_like(x.data, float(g) / n),), "mean"
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _node(out, (x,), lambda g: (g / x.data,), "log")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    if low > high:
        raise ParameterError(f"clamp: low {low} > high {high}")
    inside = (x.data >= low) & (x.data <= high)
    return _node(np.clip(x.data, low, high), (x,), lambda g: (g * inside,), "clamp")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    original = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def take(x: Tensor, index: Sequence[int]) -> Tensor:
    """1-D gather ``x[index]``."""
    if x.ndim != 1:
        raise DimensionError(f"take expects a vector, got shape {x.shape}")
    idx = np.asarray(index, dtype=np.int64)

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), _backward, "take")


def pick(x: Tensor, index: Sequence[int]) -> Tensor:
    """Row-wise gather ``out[i] = x[i, index[i]]``."""
    if x.ndim != 2:
        raise DimensionError(f"pick expects a matrix, got shape {x.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise DimensionError(f"pick: {idx.shape[0] if idx.ndim else 0} indices for {x.shape[0]} rows")
    rows = np.arange(x.shape[0])

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return _node(x.data[rows, idx], (x,), _backward, "pick")


def gather2d(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """``out[k] = x[rows[k], cols[k]]``."""
    if x.ndim != 2:
        raise DimensionError(f"gather2d expects a matrix, got shape {x.shape}")
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if r.shape != c.shape:
        raise DimensionError("gather2d: rows and cols differ in length")

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        out = np.zeros_like(x.data)
        np.add.at(out, (r, c), g)
        return (out,)

    return _node(x.data[r, c], (x,), _backward, "gather2d")


# ---------------------------------------------------------------------------
# network building blocks
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``out[i, j] = sum_k x[i, k] * weight[j, k] (+ bias[j])``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is None:
        return _node(out, (x, weight), lambda g: (g @ weight.data, g.T @ x.data), "linear")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return _node(
        out + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
        "linear",
    )


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax with max subtraction."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"log_softmax expects N x C with C >= 1, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _node(
        out, (x,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),), "log_softmax"
    )


def pool(x: Tensor, mode: str) -> Tensor:
    """
    Reduce the part axis of an N x P x D tensor.

    ``mean`` averages the parts; ``max`` takes the per-dimension maximum and
    routes the gradient to the first maximal part.
    """
    if x.ndim != 3:
        raise DimensionError(f"pool expects N x P x D, got {x.shape}")
    n, p, d = x.shape
    if p == 0:
        raise DimensionError("pool over an empty part axis")
    if mode == "mean":
        return _node(
            x.data.mean(axis=1),
            (x,),
            lambda g: (np.repeat(g[:, None, :] / p, p, axis=1),),
            "pool_mean",
        )
    if mode == "max":
        arg = x.data.argmax(axis=1)
        out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

        def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            grad = np.zeros_like(x.data)
            np.put_along_axis(grad, arg[:, None, :], g[:, None, :], axis=1)
            return (grad,)

        return _node(out, (x,), _backward, "pool_max")
    raise ParameterError(f"Unknown pooling mode: {mode}")


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat: row mismatch {a.shape} vs {b.shape}")
    da = a.shape[1]
    return _node(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :da], g[:, da:]),
        "concat",
    )


def l2_normalize(x: Tensor, eps_norm: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps_norm)``."""
    if eps_norm <= 0:
        raise ParameterError("eps_norm must be positive")
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize expects N x D, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    scaled = norms >= eps_norm
    denom = np.where(scaled, norms, eps_norm)
    out = x.data / denom

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        projected = g - out * (g * out).sum(axis=1, keepdims=True)
        return (np.where(scaled, projected, g) / denom,)

    return _node(out, (x,), _backward, "l2_normalize")


def pairwise_distance(x: Tensor) -> Tensor:
    """Euclidean distance matrix of the rows of ``x`` (zero subgradient at 0)."""
    if x.ndim != 2:
        raise DimensionError(f"pairwise_distance expects N x D, got {x.shape}")
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    inv = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > 0)

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        coef = (g + g.T) * inv
        return ((coef[:, :, None] * diff).sum(axis=1),)

    return _node(dist, (x,), _backward, "pairwise_distance")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4, floor: float = 1e-8
) -> float:
    """
    Compare analytic gradients of ``f`` with central differences.

    Args:
        f: Builds and returns a scalar loss from the current parameter values
        params: Tensors (requires_grad=True) to check, perturbed in place
        h: Finite-difference step
        floor: Smallest denominator; coordinates whose gradients sit below it
            are effectively compared by absolute error

    Returns:
        Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    if h <= 0:
        raise ParameterError("finite-difference step must be positive")
    if floor <= 0:
        raise ParameterError("finite-difference floor must be positive")
    for p in params:
        p.grad = None
    backward(f())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            flat_grad = grad.reshape(-1)
            for k in range(flat.size):
                original = flat[k]
                flat[k] = original + h
                f_plus = f().item()
                flat[k] = original - h
                f_minus = f().item()
                flat[k] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = flat_grad[k]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    logger.debug(f"🔍 Finite-difference check over {len(params)} tensors: max rel err {worst:.3e}")
    return worst
