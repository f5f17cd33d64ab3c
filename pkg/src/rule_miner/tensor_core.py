"""Dense float64 tensors with a reverse-mode tape and a finite-difference gradient oracle.

Every tensor is two-dimensional. Scalars are stored as ``[1x1]`` and vectors as
``[1xn]`` rows. Operations record themselves on the active :class:`Tape` when at
least one input requires a gradient; :func:`backward` then walks the tape in reverse
and applies each op's vector-Jacobian product from the op registry.
"""

import logging
import threading
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import NumericError, ShapeError, UsageError


logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
LOG_FLOOR = 1e-12
GELU_C = float(np.sqrt(2.0 / np.pi))


class Tensor:
    """Row-major float64 array with an optional gradient."""

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {array.shape}")
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {array.shape}")

        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = np.ascontiguousarray(array, dtype=np.float64)
        tensor.requires_grad = False
        tensor.grad = None
        tensor.name = None
        tensor.is_leaf = True
        return tensor

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise UsageError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class Node:
    """One recorded operation: op id, input tensors, output and saved activations."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    saved: Dict[str, Any] = field(default_factory=dict)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is a topological order.
    Use as a context manager; the active tape is tracked per thread.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, saved: Dict[str, Any]):
        self.nodes.append(Node(op=op, inputs=inputs, output=output, saved=saved))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _tape_stack().pop()


_local = threading.local()


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


VJP = Callable[[np.ndarray, Node], Tuple[Optional[np.ndarray], ...]]
_REGISTRY: Dict[str, VJP] = {}


def register_vjp(op: str) -> Callable[[VJP], VJP]:
    """Register the vector-Jacobian product for ``op``."""
    def decorator(func: VJP) -> VJP:
        _REGISTRY[op] = func
        return func
    return decorator


def registered_ops() -> List[str]:
    return sorted(_REGISTRY)


def _apply(op: str, inputs: Sequence[Tensor], value: np.ndarray, **saved: Any) -> Tensor:
    out = Tensor._wrap(value)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(op, tuple(inputs), out, saved)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _apply("add", (a, b), a.data + b.data)


@register_vjp("add")
def _add_vjp(g, node):
    return g, g


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _apply("sub", (a, b), a.data - b.data)


@register_vjp("sub")
def _sub_vjp(g, node):
    return g, -g


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _apply("mul", (a, b), a.data * b.data)


@register_vjp("mul")
def _mul_vjp(g, node):
    a, b = node.inputs
    return g * b.data, g * a.data


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data)


@register_vjp("neg")
def _neg_vjp(g, node):
    return (-g,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of ``[p x q]`` and ``[q x r]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    return _apply("matmul", (a, b), a.data @ b.data)


@register_vjp("matmul")
def _matmul_vjp(g, node):
    a, b = node.inputs
    return g @ b.data.T, a.data.T @ g


def transpose(a: Tensor) -> Tensor:
    return _apply("transpose", (a,), a.data.T.copy())


@register_vjp("transpose")
def _transpose_vjp(g, node):
    return (g.T,)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    return _apply("exp", (a,), np.exp(a.data))


@register_vjp("exp")
def _exp_vjp(g, node):
    return (g * node.output.data,)


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with inputs clamped from below at ``floor``."""
    return _apply("log", (a,), np.log(np.maximum(a.data, floor)), floor=floor)


@register_vjp("log")
def _log_vjp(g, node):
    x = node.inputs[0].data
    live = x > node.saved["floor"]
    return (np.where(live, g / np.where(live, x, 1.0), 0.0),)


def sqrt(a: Tensor) -> Tensor:
    return _apply("sqrt", (a,), np.sqrt(a.data))


@register_vjp("sqrt")
def _sqrt_vjp(g, node):
    return (g / (2.0 * node.output.data),)


def tanh(a: Tensor) -> Tensor:
    return _apply("tanh", (a,), np.tanh(a.data))


@register_vjp("tanh")
def _tanh_vjp(g, node):
    y = node.output.data
    return (g * (1.0 - y * y),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    return _apply("sigmoid", (a,), _sigmoid(a.data))


@register_vjp("sigmoid")
def _sigmoid_vjp(g, node):
    y = node.output.data
    return (g * y * (1.0 - y),)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return _apply("softplus", (a,), np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0))


@register_vjp("softplus")
def _softplus_vjp(g, node):
    return (g * _sigmoid(node.inputs[0].data),)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    return _apply("gelu", (a,), 0.5 * x * (1.0 + inner), inner=inner)


@register_vjp("gelu")
def _gelu_vjp(g, node):
    x = node.inputs[0].data
    inner = node.saved["inner"]
    d_inner = (1.0 - inner ** 2) * GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
    return (g * (0.5 * (1.0 + inner) + 0.5 * x * d_inner),)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        value = np.array([[a.data.sum()]])
    else:
        value = a.data.sum(axis=axis, keepdims=True)
    return _apply("reduce_sum", (a,), value)


@register_vjp("reduce_sum")
def _sum_vjp(g, node):
    return (np.broadcast_to(g, node.inputs[0].shape).copy(),)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / count)


def max_all(a: Tensor) -> Tensor:
    index = int(np.argmax(a.data))
    return _apply("extreme", (a,), np.array([[a.data.flat[index]]]), index=index)


def min_all(a: Tensor) -> Tensor:
    index = int(np.argmin(a.data))
    return _apply("extreme", (a,), np.array([[a.data.flat[index]]]), index=index)


@register_vjp("extreme")
def _extreme_vjp(g, node):
    grad = np.zeros(node.inputs[0].shape)
    grad.flat[node.saved["index"]] = g.item()
    return (grad,)


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------

def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int) -> Tensor:
    return _apply("softmax", (a,), _softmax(a.data, axis), axis=axis)


@register_vjp("softmax")
def _softmax_vjp(g, node):
    s = node.output.data
    axis = node.saved["axis"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax stabilized by per-row max subtraction."""
    return softmax(as_tensor(a), axis=1)


def softmax_cols(a: Tensor) -> Tensor:
    """Column-wise softmax; every column sums to one."""
    return softmax(as_tensor(a), axis=0)


def row_normalize(a: Tensor) -> Tensor:
    """Scale every row to unit L2 norm; rows with norm below 1e-12 map to zero."""
    norms = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True))
    live = norms >= NORM_FLOOR
    safe = np.where(live, norms, 1.0)
    return _apply("row_normalize", (a,), np.where(live, a.data / safe, 0.0), norms=safe, live=live)


@register_vjp("row_normalize")
def _row_normalize_vjp(g, node):
    y = node.output.data
    projected = g - y * (g * y).sum(axis=1, keepdims=True)
    return (np.where(node.saved["live"], projected / node.saved["norms"], 0.0),)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree on axis {other}")
    sizes = [t.shape[axis] for t in tensors]
    return _apply("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
                  axis=axis, sizes=sizes)


@register_vjp("concat")
def _concat_vjp(g, node):
    splits = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=node.saved["axis"]))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=0)


def take_row(a: Tensor, index: int) -> Tensor:
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"take_row: row {index} out of range for shape {a.shape}")
    return _apply("take_row", (a,), a.data[index:index + 1].copy(), index=index)


@register_vjp("take_row")
def _take_row_vjp(g, node):
    grad = np.zeros(node.inputs[0].shape)
    grad[node.saved["index"]] = g[0]
    return (grad,)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {a.shape}")
    return _apply("slice_cols", (a,), a.data[:, start:stop].copy(), start=start, stop=stop)


@register_vjp("slice_cols")
def _slice_cols_vjp(g, node):
    grad = np.zeros(node.inputs[0].shape)
    grad[:, node.saved["start"]:node.saved["stop"]] = g
    return (grad,)


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def cosine_similarity(x: TensorLike, y: TensorLike) -> float:
    """Cosine similarity of two vectors; 0 when either norm is below 1e-12."""
    xv = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(-1)
    yv = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64).reshape(-1)
    if xv.shape != yv.shape:
        raise ShapeError(f"cosine_similarity: lengths {xv.size} and {yv.size} differ")
    nx, ny = np.linalg.norm(xv), np.linalg.norm(yv)
    if nx < NORM_FLOOR or ny < NORM_FLOOR:
        return 0.0
    return float(np.clip(xv @ yv / (nx * ny), -1.0, 1.0))


def cosine_similarity_matrix(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``x`` and rows of ``y``."""
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"cosine_similarity_matrix: widths of {x.shape} and {y.shape} differ")
    return matmul(row_normalize(x), transpose(row_normalize(y)))


# ---------------------------------------------------------------------------
# Reverse pass and gradient oracle
# ---------------------------------------------------------------------------

def backward(tape: Tape, output: Tensor) -> Dict[Tensor, np.ndarray]:
    """Propagate d(output)/d(leaf) for every requires-grad leaf on the tape.

    Returns a mapping from leaf tensor to gradient and also stores it on ``leaf.grad``.
    """
    if output.data.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return {}
    if output.is_leaf:
        output.grad = np.ones_like(output.data)
        return {output: output.grad}

    grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: Dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        input_grads = _REGISTRY[node.op](upstream, node)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            grad = _unbroadcast(grad, tensor.shape)
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            if tensor.is_leaf:
                leaves[key] = tensor

    result: Dict[Tensor, np.ndarray] = {}
    for key, tensor in leaves.items():
        tensor.grad = grads[key]
        result[tensor] = grads[key]
    return result


def _scalar_value(f: Callable[[], Tensor]) -> float:
    value = f().item()
    if not np.isfinite(value):
        raise NumericError(f"objective evaluated to non-finite value {value}")
    return value


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Union[Tensor, Iterable[Tensor]],
    h: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients against central differences.

    Args:
        f: Zero-argument callable computing a scalar tensor from ``params``.
        params: Tensor(s) whose entries are perturbed in place and restored.
        h: Central-difference step.

    Returns:
        max over entries of |analytic - numeric| / max(1, |numeric|).
    """
    if h <= 0:
        raise UsageError(f"finite difference step must be positive, got {h}")
    params = [params] if isinstance(params, Tensor) else list(params)

    with Tape() as tape:
        out = f()
    if not np.isfinite(out.item()):
        raise NumericError(f"objective evaluated to non-finite value {out.item()}")
    grads = backward(tape, out)

    max_error = 0.0
    for param in params:
        analytic = grads.get(param, np.zeros(param.shape))
        for index in np.ndindex(*param.shape):
            original = param.data[index]
            param.data[index] = original + h
            plus = _scalar_value(f)
            param.data[index] = original - h
            minus = _scalar_value(f)
            param.data[index] = original
            numeric = (plus - minus) / (2.0 * h)
            error = abs(analytic[index] - numeric) / max(1.0, abs(numeric))
            max_error = max(max_error, error)

    logger.debug(f"Finite-difference check over {len(params)} tensors: max rel err {max_error:.3e}")
    return max_error


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------

def make_rng(seed: int, stream: str = "default") -> np.random.Generator:
    """Independent generator for a named substream of ``seed``."""
    if seed < 0:
        raise UsageError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode("utf-8"))])


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: Optional[str] = None) -> Tensor:
    """Trainable ``[fan_in x fan_out]`` parameter with Glorot-normal entries."""
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros_param(rows: int, cols: int, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=True, name=name)
