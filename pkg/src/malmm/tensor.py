"""
Dense float64 tensors with tape-based reverse-mode differentiation.

This module provides the small set of numeric operations the Q-Former needs
(matrix products, row softmax, layer normalization, GELU and a handful of
structural ops). Every operation works on immutable row-major ``Tensor``
objects. When at least one input is traced on a ``Tape`` the operation is
recorded, so that ``backward`` can later compute gradients for every traced
parameter.

Example:
    tape = Tape()
    w = tape.watch(Tensor([[1.0, 2.0], [3.0, 4.0]]))
    loss = sum_all(mul(w, w))
    grads = backward(tape, loss)
    grads[w.node_id]  # 2 * w
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised when an operation receives NaN or infinite input."""


class Tensor:
    """
    Immutable dense tensor of 64-bit floats.

    A tensor optionally carries the tape and node id that produced it; such a
    tensor is "traced" and operations involving it are recorded.
    """

    __slots__ = ("_data", "tape", "node_id")

    def __init__(
        self,
        data: Any,
        tape: Optional["Tape"] = None,
        node_id: Optional[int] = None,
    ):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        if any(size < 1 for size in array.shape):
            raise ShapeError(f"All dimension sizes must be >= 1, got {array.shape}")
        array.setflags(write=False)
        self._data = array
        self.tape = tape
        self.node_id = node_id

    @classmethod
    def _wrap(
        cls,
        array: np.ndarray,
        tape: Optional["Tape"] = None,
        node_id: Optional[int] = None,
    ) -> "Tensor":
        """Wrap a freshly computed array without copying it."""
        tensor = cls.__new__(cls)
        array = np.ascontiguousarray(array, dtype=np.float64)
        array.setflags(write=False)
        tensor._data = array
        tensor.tape = tape
        tensor.node_id = node_id
        return tensor

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls._wrap(np.zeros(shape))

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying values."""
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self._data.shape)

    @property
    def is_traced(self) -> bool:
        return self.tape is not None

    def detach(self) -> "Tensor":
        """Return an untraced tensor sharing the same values."""
        return Tensor._wrap(self._data)

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self._data.reshape(-1)[0])

    def tolist(self) -> Any:
        return self._data.tolist()

    def __len__(self) -> int:
        return self._data.shape[0]

    def __repr__(self) -> str:
        traced = f", node={self.node_id}" if self.is_traced else ""
        return f"Tensor(shape={self.shape}{traced})"


@dataclass
class Node:
    """A recorded operation: kind, input node ids and saved forward values."""

    kind: str
    inputs: Tuple[Optional[int], ...]
    shape: Tuple[int, ...]
    saved: Dict[str, Any] = field(default_factory=dict)


class Tape:
    """
    Append-only record of traced operations.

    Inputs of a node always refer to earlier nodes, so the node list is a
    topological order by construction. A tape is single-threaded; use one tape
    per stream or training step.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a tensor as a differentiable leaf (a parameter)."""
        node_id = self._append(Node("leaf", (), tensor.shape))
        return Tensor._wrap(tensor.data, self, node_id)

    def record(
        self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, **saved: Any
    ) -> Tensor:
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        node_id = self._append(Node(kind, ids, tuple(out.shape), saved))
        return Tensor._wrap(out, self, node_id)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


VJP = Callable[[np.ndarray, Node], Sequence[Optional[np.ndarray]]]
_VJPS: Dict[str, VJP] = {}


def _vjp(kind: str) -> Callable[[VJP], VJP]:
    def register(fn: VJP) -> VJP:
        _VJPS[kind] = fn
        return fn

    return register


def _common_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape: Optional[Tape] = None
    for tensor in inputs:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise ValueError("Cannot combine tensors traced on different tapes")
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, **saved: Any) -> Tensor:
    tape = _common_tape(inputs)
    if tape is None:
        return Tensor._wrap(out)
    return tape.record(kind, inputs, out, **saved)


def _require_2d(name: str, tensor: Tensor) -> None:
    if len(tensor.shape) != 2:
        raise ShapeError(f"{name} expects a 2-D tensor, got shape {tensor.shape}")


def _require_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# Operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[m×k]`` and ``b[k×n]``."""
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, a=a.data, b=b.data)


@_vjp("matmul")
def _matmul_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    return g @ node.saved["b"].T, node.saved["a"].T @ g


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data)


@_vjp("add")
def _add_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    return g, g


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _require_same_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data, a=a.data, b=b.data)


@_vjp("mul")
def _mul_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    return g * node.saved["b"], g * node.saved["a"]


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", (a,), a.data * factor, factor=factor)


@_vjp("scale")
def _scale_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    return (g * node.saved["factor"],)


def gelu(a: Tensor) -> Tensor:
    """GELU activation, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return _emit("gelu", (a,), 0.5 * x * (1.0 + t), x=x, t=t)


@_vjp("gelu")
def _gelu_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    x, t = node.saved["x"], node.saved["t"]
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax computed with max subtraction."""
    _require_2d("softmax_rows", a)
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("softmax_rows received non-finite input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    return _emit("softmax_rows", (a,), y, y=y)


@_vjp("softmax_rows")
def _softmax_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    y = node.saved["y"]
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def log_softmax_rows(a: Tensor) -> Tensor:
    _require_2d("log_softmax_rows", a)
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("log_softmax_rows received non-finite input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return _emit("log_softmax_rows", (a,), out, y=np.exp(out))


@_vjp("log_softmax_rows")
def _log_softmax_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    return (g - node.saved["y"] * g.sum(axis=1, keepdims=True),)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row of ``a[m×C]`` then apply the affine ``gamma``/``beta``."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    _require_2d("layer_norm", a)
    channels = a.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} "
            f"do not match input {a.shape}"
        )
    x = a.data
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    saved = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma.data}
    return _emit("layer_norm", (a, gamma, beta), out, **saved)


@_vjp("layer_norm")
def _layer_norm_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    xhat, inv_std = node.saved["xhat"], node.saved["inv_std"]
    gamma = node.saved["gamma"]
    channels = xhat.shape[1]
    dxhat = g * gamma
    dx = (inv_std / channels) * (
        channels * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    return _emit("transpose", (a,), a.data.T)


@_vjp("transpose")
def _transpose_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    return (g.T,)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors with equal column counts on top of each other."""
    if not tensors:
        raise ShapeError("concat_rows needs at least one tensor")
    for tensor in tensors:
        _require_2d("concat_rows", tensor)
        if tensor.shape[1] != tensors[0].shape[1]:
            raise ShapeError(
                f"concat_rows: column mismatch {tensors[0].shape} vs {tensor.shape}"
            )
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _emit("concat_rows", tensors, out, rows=[t.shape[0] for t in tensors])


@_vjp("concat_rows")
def _concat_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    bounds = np.cumsum(node.saved["rows"])[:-1]
    return np.split(g, bounds, axis=0)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_rows", a)
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    return _emit(
        "slice_rows", (a,), a.data[start:stop], start=start, stop=stop, rows=a.shape[0]
    )


@_vjp("slice_rows")
def _slice_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    full = np.zeros((node.saved["rows"], g.shape[1]))
    full[node.saved["start"] : node.saved["stop"]] = g
    return (full,)


def tile_rows(a: Tensor, count: int) -> Tensor:
    """Repeat a single-row tensor ``count`` times."""
    _require_2d("tile_rows", a)
    if a.shape[0] != 1 or count < 1:
        raise ShapeError(f"tile_rows needs a 1×C tensor and count >= 1, got {a.shape}")
    return _emit("tile_rows", (a,), np.repeat(a.data, count, axis=0))


@_vjp("tile_rows")
def _tile_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    return (g.sum(axis=0, keepdims=True),)


def mean_rows(a: Tensor) -> Tensor:
    """Average over rows, producing a ``1×C`` tensor."""
    _require_2d("mean_rows", a)
    return _emit("mean_rows", (a,), a.data.mean(axis=0, keepdims=True), rows=a.shape[0])


@_vjp("mean_rows")
def _mean_rows_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    rows = node.saved["rows"]
    return (np.repeat(g / rows, rows, axis=0),)


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum_all", (a,), np.array([a.data.sum()]), shape=a.shape)


@_vjp("sum_all")
def _sum_all_vjp(g: np.ndarray, node: Node) -> Sequence[Optional[np.ndarray]]:
    return (np.full(node.saved["shape"], g.reshape(-1)[0]),)


def backward(tape: Tape, loss: Tensor) -> Dict[int, Tensor]:
    """
    Reverse-mode pass from a scalar ``loss``.

    Args:
        tape: Tape the loss was recorded on
        loss: Single-element traced tensor

    Returns:
        Mapping of node id to the gradient of ``loss`` with respect to that
        node's value. Untraced constants have no node and get no entry.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise ValueError("loss is not traced on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.kind == "leaf":
            continue
        for input_id, input_grad in zip(node.inputs, _VJPS[node.kind](g, node)):
            if input_id is None or input_grad is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = input_grad

    logger.debug("backward visited %d of %d nodes", len(grads), len(tape))
    return {node_id: Tensor._wrap(g) for node_id, g in grads.items()}
