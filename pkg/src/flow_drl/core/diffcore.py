"""
Reverse-mode automatic differentiation over dense fp64 arrays
=============================================================

Every gradient in flow-drl flows through this module.

Graph model:
  - A CompGraph is an append-only list of Nodes. Inputs always precede their
    consumers, so the list order is a topological order.
  - Every primitive is a (forward, vjp) pair. The vjp rules are written with the
    same public ops, so they run eagerly on numpy arrays (numeric backward) or
    record new nodes when handed Nodes (graph-building backward). The second
    mode is what makes Jacobian columns themselves differentiable, which the
    flow log-density needs for its trace term.
  - Ops called on plain arrays compute eagerly and record nothing.

Also here: ParamSet, Adam, and the parameter checkpoint container.

Copyright (c) 2026 flow-drl authors
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger("flow-drl")

DenseArray = np.ndarray
Operand = Union["Node", np.ndarray, float, int]
Axis = Union[None, int, Tuple[int, ...]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input outside an op's domain (log of non-positive, bad index)."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached a place that must stay finite."""

    def __init__(self, message: str, payload: Optional[dict] = None):
        super().__init__(message)
        self.payload = payload or {}


class CheckpointError(ValueError):
    """Checkpoint file is missing, truncated or not in the expected format."""


def as_dense(value) -> np.ndarray:
    """Coerce to a float64 ndarray (no copy when already float64)."""
    return np.asarray(value, dtype=np.float64)


# ============ NODES AND GRAPH ============


class Node:
    """One recorded value in a CompGraph."""

    __slots__ = ("graph", "index", "value", "op", "inputs", "attrs", "needs_grad", "entry")

    # numpy must defer to our reflected operators (array + node -> node)
    __array_ufunc__ = None

    def __init__(
        self,
        graph: "CompGraph",
        index: int,
        value: np.ndarray,
        op: Optional["Primitive"] = None,
        inputs: Tuple["Node", ...] = (),
        attrs: Optional[dict] = None,
        needs_grad: bool = False,
        entry: Optional["ParamEntry"] = None,
    ):
        self.graph = graph
        self.index = index
        self.value = value
        self.op = op
        self.inputs = inputs
        self.attrs = attrs or {}
        self.needs_grad = needs_grad
        self.entry = entry

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        kind = self.op.name if self.op else ("param" if self.entry else "leaf")
        return f"Node(#{self.index} {kind} shape={self.shape})"

    def __add__(self, other: Operand) -> "Node":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Node":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Node":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Node":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Node":
        return mul(other, self)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __matmul__(self, other: Operand) -> "Node":
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "Node":
        return matmul(other, self)


class Gradients:
    """Gradients of one backward pass, keyed by leaf node."""

    def __init__(self, by_index: Dict[int, np.ndarray]):
        self._by_index = by_index

    def of(self, node: Node) -> np.ndarray:
        grad = self._by_index.get(node.index)
        if grad is None:
            return np.zeros(node.shape)
        return grad


class CompGraph:
    """Dynamic computation graph, rebuilt for every training step."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.outputs: List[int] = []
        self._bound: Dict[Tuple[int, str], Node] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, value: np.ndarray, **kwargs) -> Node:
        node = Node(self, len(self.nodes), value, **kwargs)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        """Leaf that never receives a gradient."""
        return self._append(as_dense(value))

    def variable(self, value) -> Node:
        """Leaf whose gradient is reported by backward()."""
        return self._append(as_dense(value), needs_grad=True)

    def parameter(self, params: "ParamSet", name: str, trainable: bool = True) -> Node:
        """Leaf bound to a ParamSet entry; backward() accumulates into entry.grad.

        A non-trainable binding is a plain constant (gradient-stopped).
        Repeated calls in one graph return the same node, so shared subgraphs
        accumulate into a single gradient.
        """
        key = (id(params), name)
        node = self._bound.get(key)
        if node is None:
            entry = params[name]
            if trainable:
                node = self._append(entry.value, needs_grad=True, entry=entry)
            else:
                node = self._append(entry.value)
            self._bound[key] = node
        return node

    def bind(self, params: "ParamSet", trainable: bool = True) -> Dict[str, Node]:
        """Bind every entry of a ParamSet; returns name -> node."""
        return {name: self.parameter(params, name, trainable) for name in params.names()}

    def lift(self, value: Operand) -> Node:
        if isinstance(value, Node):
            if value.graph is not self:
                raise ValueError("operand belongs to a different CompGraph")
            return value
        return self.constant(value)

    def mark_output(self, node: Node) -> Node:
        self.outputs.append(node.index)
        return node

    def record(self, op: "Primitive", inputs: Sequence[Node], value: np.ndarray, attrs: dict):
        return self._append(
            value,
            op=op,
            inputs=tuple(inputs),
            attrs=attrs,
            needs_grad=any(inp.needs_grad for inp in inputs),
        )

    # ============ BACKWARD ============

    def backward(self, loss: Node) -> Gradients:
        """Numeric reverse pass from a scalar loss.

        Parameter gradients accumulate into their ParamSet entries (callers
        zero them); gradients of variable leaves are returned.
        """
        if loss.graph is not self:
            raise ValueError("loss node belongs to a different CompGraph")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        leaf_grads: Dict[int, np.ndarray] = {}
        grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.needs_grad:
                continue
            if node.op is None:
                if node.entry is not None:
                    node.entry.grad += g
                leaf_grads[node.index] = g
                continue
            values = [inp.value for inp in node.inputs]
            contributions = node.op.vjp(g, values, node.value, **node.attrs)
            for inp, contrib in zip(node.inputs, contributions):
                if contrib is None or not inp.needs_grad:
                    continue
                contrib = as_dense(contrib)
                if inp.index in grads:
                    grads[inp.index] = grads[inp.index] + contrib
                else:
                    grads[inp.index] = contrib
        return Gradients(leaf_grads)

    def vjp(self, output: Node, wrt: Node, seed: Operand) -> Node:
        """Graph-building vector-Jacobian product seedᵀ · ∂output/∂wrt.

        The result is a Node, so it can be differentiated again. Only paths
        that start at `wrt` are followed; every other input is held fixed.
        """
        for node in (output, wrt):
            if node.graph is not self:
                raise ValueError("vjp operands belong to a different CompGraph")
        seed_shape = shape_of(seed)
        if seed_shape != output.shape:
            raise ShapeError(f"vjp seed shape {seed_shape} does not match output {output.shape}")

        live = {wrt.index}
        for node in self.nodes[wrt.index + 1 : output.index + 1]:
            if node.op is not None and any(inp.index in live for inp in node.inputs):
                live.add(node.index)
        if output.index not in live:
            return self.constant(np.zeros(wrt.shape))

        grads: Dict[int, Node] = {output.index: self.lift(seed)}
        for index in range(output.index, wrt.index, -1):
            if index not in live:
                continue
            g = grads.pop(index, None)
            if g is None:
                continue
            node = self.nodes[index]
            contributions = node.op.vjp(g, list(node.inputs), node, **node.attrs)
            for inp, contrib in zip(node.inputs, contributions):
                if contrib is None or inp.index not in live:
                    continue
                contrib = self.lift(contrib)
                grads[inp.index] = add(grads[inp.index], contrib) if inp.index in grads else contrib
        result = grads.get(wrt.index)
        return result if result is not None else self.constant(np.zeros(wrt.shape))

    def jacobian_column(self, output: Node, wrt: Node, j: int) -> Node:
        """∂output_j/∂wrt via one backward pass seeded with e_j.

        Leading axes are treated as a batch of independent samples, so for
        output (B, m) and wrt (B, d) the result is (B, d) with row b equal to
        ∂output[b, j]/∂wrt[b].
        """
        width = output.shape[-1] if output.ndim else 1
        if not 0 <= j < width:
            raise DomainError(f"jacobian column index {j} out of range for output width {width}")
        seed = np.zeros(output.shape)
        seed[..., j] = 1.0
        return self.vjp(output, wrt, seed)


def backward(graph: CompGraph, loss: Node) -> Gradients:
    """Reverse pass from a scalar loss.

    Args:
        graph: Graph that recorded `loss`
        loss: Scalar node

    Returns:
        Gradients of the variable leaves. Trainable parameter gradients are
        added to their ParamEntry.grad; callers zero them first.

    Raises:
        ShapeError: if `loss` is not a scalar
    """
    return graph.backward(loss)


def jacobian_column(graph: CompGraph, output: Node, wrt: Node, j: int) -> Node:
    """Column j of the Jacobian, batched over leading axes.

    Args:
        graph: Graph holding both nodes
        output: Node of shape (..., m)
        wrt: Node of shape (..., d) upstream of `output`
        j: Output coordinate, 0 <= j < m

    Returns:
        Node of shape (..., d); differentiable again

    Raises:
        DomainError: if j is out of range
    """
    return graph.jacobian_column(output, wrt, j)


# ============ PRIMITIVE PLUMBING ============


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., List[Optional[Operand]]]


def shape_of(x: Operand) -> Tuple[int, ...]:
    if isinstance(x, Node):
        return x.shape
    return np.shape(x)


def value_of(x: Operand) -> np.ndarray:
    if isinstance(x, Node):
        return x.value
    return as_dense(x)


def _graph_of(operands: Sequence[Operand]) -> Optional[CompGraph]:
    graph = None
    for x in operands:
        if isinstance(x, Node):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise ValueError("operands belong to different CompGraphs")
    return graph


def _apply(op: Primitive, operands: Sequence[Operand], **attrs) -> Union[Node, np.ndarray]:
    graph = _graph_of(operands)
    out = op.forward(*[value_of(x) for x in operands], **attrs)
    if graph is None:
        return out
    return graph.record(op, [graph.lift(x) for x in operands], out, attrs)


def _pair(name: str, a: Operand, b: Operand) -> Tuple[Operand, Operand]:
    """Expand bare scalar constants; otherwise shapes must match exactly."""
    sa, sb = shape_of(a), shape_of(b)
    if sa == sb:
        return a, b
    if not isinstance(a, Node) and sa == ():
        return np.full(sb, float(value_of(a))), b
    if not isinstance(b, Node) and sb == ():
        return a, np.full(sa, float(value_of(b)))
    raise ShapeError(f"{name}: shape mismatch {sa} vs {sb}")


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < max(ndim, 1):
            raise DomainError(f"axis {ax} out of range for {ndim}-d operand")
        normalized.append(ax % ndim if ndim else 0)
    return tuple(sorted(set(normalized)))


def _kept_shape(shape: Tuple[int, ...], axes: Tuple[int, ...]) -> Tuple[int, ...]:
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


# ============ PRIMITIVES ============


def _add_vjp(g, inputs, out):
    return [g, g]


def _sub_vjp(g, inputs, out):
    return [g, scale(g, -1.0)]


def _mul_vjp(g, inputs, out):
    a, b = inputs
    return [mul(g, b), mul(g, a)]


def _matmul_forward(a, b):
    return np.matmul(a, b)


def _matmul_vjp(g, inputs, out):
    a, b = inputs
    grad_a = matmul(g, transpose(b))
    if len(shape_of(b)) == 2 and len(shape_of(a)) > 2:
        k, m = shape_of(b)
        flat_a = reshape(a, (-1, k))
        flat_g = reshape(g, (-1, m))
        grad_b = matmul(transpose(flat_a), flat_g)
    else:
        grad_b = matmul(transpose(a), g)
    return [grad_a, grad_b]


def _transpose_forward(x):
    return np.swapaxes(x, -1, -2)


def _transpose_vjp(g, inputs, out):
    return [transpose(g)]


def _swapaxes_forward(x, axis1, axis2):
    return np.swapaxes(x, axis1, axis2)


def _swapaxes_vjp(g, inputs, out, axis1, axis2):
    return [swapaxes(g, axis1, axis2)]


def _reshape_forward(x, shape):
    return np.reshape(x, shape)


def _reshape_vjp(g, inputs, out, shape):
    return [reshape(g, shape_of(inputs[0]))]


def _relu_forward(x):
    return np.maximum(x, 0.0)


def _relu_vjp(g, inputs, out):
    return [mul(g, (value_of(inputs[0]) > 0.0).astype(np.float64))]


def _tanh_vjp(g, inputs, out):
    return [mul(g, sub(1.0, square(out)))]


def _exp_vjp(g, inputs, out):
    return [mul(g, out)]


def _log_forward(x):
    if x.size and not np.all(x > 0.0):
        raise DomainError(f"log of non-positive value (min={np.min(x)!r})")
    return np.log(x)


def _log_vjp(g, inputs, out):
    # 1/x expressed in the closed op set so it stays differentiable
    return [mul(g, exp(scale(log(inputs[0]), -1.0)))]


def _square_vjp(g, inputs, out):
    return [mul(g, scale(inputs[0], 2.0))]


def _sum_forward(x, axis, keepdims):
    return np.asarray(np.sum(x, axis=axis, keepdims=keepdims), dtype=np.float64)


def _sum_vjp(g, inputs, out, axis, keepdims):
    shape = shape_of(inputs[0])
    kept = _kept_shape(shape, _normalize_axes(axis, len(shape)))
    return [broadcast(reshape(g, kept), shape)]


def _mean_forward(x, axis, keepdims):
    return np.asarray(np.mean(x, axis=axis, keepdims=keepdims), dtype=np.float64)


def _mean_vjp(g, inputs, out, axis, keepdims):
    shape = shape_of(inputs[0])
    axes = _normalize_axes(axis, len(shape))
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    kept = _kept_shape(shape, axes)
    return [scale(broadcast(reshape(g, kept), shape), 1.0 / count)]


def _broadcast_forward(x, shape):
    return np.array(np.broadcast_to(x, shape))


def _sum_to(g: Operand, shape: Tuple[int, ...]) -> Operand:
    gshape = shape_of(g)
    lead = len(gshape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, d in enumerate(shape) if d == 1 and gshape[i + lead] != 1
    )
    summed = sum(g, axis=axes) if axes else g
    return reshape(summed, shape)


def _broadcast_vjp(g, inputs, out, shape):
    return [_sum_to(g, shape_of(inputs[0]))]


def _concat_forward(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, inputs, out, axis):
    grads = []
    start = 0
    for x in inputs:
        width = shape_of(x)[axis]
        grads.append(slice_(g, axis, start, start + width))
        start += width
    return grads


def _slice_forward(x, axis, start, stop):
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return np.array(x[tuple(index)])


def _slice_vjp(g, inputs, out, axis, start, stop):
    shape = list(shape_of(inputs[0]))
    parts: List[Operand] = []
    if start > 0:
        parts.append(np.zeros(tuple(shape[:axis] + [start] + shape[axis + 1 :])))
    parts.append(g)
    if stop < shape[axis]:
        rest = shape[axis] - stop
        parts.append(np.zeros(tuple(shape[:axis] + [rest] + shape[axis + 1 :])))
    return [concat(parts, axis=axis) if len(parts) > 1 else g]


def _softmax_forward(x):
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_vjp(g, inputs, out):
    shape = shape_of(out)
    inner = sum(mul(g, out), axis=-1, keepdims=True)
    return [mul(out, sub(g, broadcast(inner, shape)))]


def _scale_forward(x, c):
    return x * c


def _scale_vjp(g, inputs, out, c):
    return [scale(g, c)]


def _minimum_vjp(g, inputs, out):
    a, b = (value_of(x) for x in inputs)
    take_a = (a <= b).astype(np.float64)
    return [mul(g, take_a), mul(g, 1.0 - take_a)]


def _abs_vjp(g, inputs, out):
    return [mul(g, np.sign(value_of(inputs[0])))]


ADD = Primitive("add", np.add, _add_vjp)
SUB = Primitive("sub", np.subtract, _sub_vjp)
MUL = Primitive("mul", np.multiply, _mul_vjp)
MATMUL = Primitive("matmul", _matmul_forward, _matmul_vjp)
TRANSPOSE = Primitive("transpose", _transpose_forward, _transpose_vjp)
SWAPAXES = Primitive("swapaxes", _swapaxes_forward, _swapaxes_vjp)
RESHAPE = Primitive("reshape", _reshape_forward, _reshape_vjp)
RELU = Primitive("relu", _relu_forward, _relu_vjp)
TANH = Primitive("tanh", np.tanh, _tanh_vjp)
EXP = Primitive("exp", np.exp, _exp_vjp)
LOG = Primitive("log", _log_forward, _log_vjp)
SQUARE = Primitive("square", np.square, _square_vjp)
SUM = Primitive("sum", _sum_forward, _sum_vjp)
MEAN = Primitive("mean", _mean_forward, _mean_vjp)
BROADCAST = Primitive("broadcast", _broadcast_forward, _broadcast_vjp)
CONCAT = Primitive("concat", _concat_forward, _concat_vjp)
SLICE = Primitive("slice", _slice_forward, _slice_vjp)
SOFTMAX = Primitive("softmax", _softmax_forward, _softmax_vjp)
SCALE = Primitive("scale", _scale_forward, _scale_vjp)
MINIMUM = Primitive("minimum", np.minimum, _minimum_vjp)
ABS = Primitive("abs", np.abs, _abs_vjp)

PRIMITIVES: Dict[str, Primitive] = {
    p.name: p
    for p in (
        ADD, SUB, MUL, MATMUL, TRANSPOSE, SWAPAXES, RESHAPE, RELU, TANH, EXP, LOG,
        SQUARE, SUM, MEAN, BROADCAST, CONCAT, SLICE, SOFTMAX, SCALE, MINIMUM, ABS,
    )
}  # fmt: skip


# ============ PUBLIC OPS ============


def add(a: Operand, b: Operand):
    return _apply(ADD, _pair("add", a, b))


def sub(a: Operand, b: Operand):
    return _apply(SUB, _pair("sub", a, b))


def mul(a: Operand, b: Operand):
    return _apply(MUL, _pair("mul", a, b))


def matmul(a: Operand, b: Operand):
    sa, sb = shape_of(a), shape_of(b)
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {sa} and {sb}")
    if len(sb) != 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {sa} vs {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: inner dims differ, {sa} vs {sb}")
    return _apply(MATMUL, (a, b))


def transpose(x: Operand):
    """Swap the last two axes."""
    if len(shape_of(x)) < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {shape_of(x)}")
    return _apply(TRANSPOSE, (x,))


def swapaxes(x: Operand, axis1: int, axis2: int):
    """Exchange two axes; the attention heads use it to move the head axis."""
    ndim = len(shape_of(x))
    first, second = (_normalize_axes(ax, ndim)[0] for ax in (axis1, axis2))
    return _apply(SWAPAXES, (x,), axis1=first, axis2=second)


def reshape(x: Operand, shape: Sequence[int]):
    shape = tuple(int(d) for d in shape)
    try:
        resolved = np.empty(shape_of(x), dtype=np.int8).reshape(shape).shape
    except ValueError as e:
        raise ShapeError(f"cannot reshape {shape_of(x)} to {shape}") from e
    return _apply(RESHAPE, (x,), shape=resolved)


def relu(x: Operand):
    return _apply(RELU, (x,))


def tanh(x: Operand):
    return _apply(TANH, (x,))


def exp(x: Operand):
    return _apply(EXP, (x,))


def log(x: Operand):
    return _apply(LOG, (x,))


def square(x: Operand):
    return _apply(SQUARE, (x,))


def sum(x: Operand, axis: Axis = None, keepdims: bool = False):  # noqa: A001
    axes = _normalize_axes(axis, len(shape_of(x)))
    return _apply(SUM, (x,), axis=axes, keepdims=keepdims)


def mean(x: Operand, axis: Axis = None, keepdims: bool = False):
    axes = _normalize_axes(axis, len(shape_of(x)))
    return _apply(MEAN, (x,), axis=axes, keepdims=keepdims)


def broadcast(x: Operand, shape: Sequence[int]):
    shape = tuple(int(d) for d in shape)
    try:
        target = np.broadcast_shapes(shape_of(x), shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {shape_of(x)} to {shape}") from e
    if target != shape:
        raise ShapeError(f"cannot broadcast {shape_of(x)} to {shape}")
    return _apply(BROADCAST, (x,), shape=shape)


def concat(xs: Sequence[Operand], axis: int = -1):
    if not xs:
        raise ShapeError("concat needs at least one operand")
    shapes = [shape_of(x) for x in xs]
    ndim = len(shapes[0])
    axis = _normalize_axes(axis, ndim)[0]
    for s in shapes[1:]:
        if len(s) != ndim or any(a != b for i, (a, b) in enumerate(zip(s, shapes[0])) if i != axis):
            raise ShapeError(f"concat: shape mismatch {shapes[0]} vs {s} along axis {axis}")
    return _apply(CONCAT, tuple(xs), axis=axis)


def slice_(x: Operand, axis: int, start: int, stop: int):
    shape = shape_of(x)
    axis = _normalize_axes(axis, len(shape))[0]
    if not 0 <= start < stop <= shape[axis]:
        raise DomainError(f"slice [{start}:{stop}] out of range for axis {axis} of {shape}")
    return _apply(SLICE, (x,), axis=axis, start=int(start), stop=int(stop))


def softmax(x: Operand):
    """Softmax over the last axis."""
    return _apply(SOFTMAX, (x,))


def scale(x: Operand, c: float):
    return _apply(SCALE, (x,), c=float(c))


def minimum(a: Operand, b: Operand):
    return _apply(MINIMUM, _pair("minimum", a, b))


def abs(x: Operand):  # noqa: A001
    return _apply(ABS, (x,))


def maximum(a: Operand, b: Operand):
    return scale(minimum(scale(a, -1.0), scale(b, -1.0)), -1.0)


def clip(x: Operand, low: float, high: float):
    shape = shape_of(x)
    return minimum(maximum(x, np.full(shape, low)), np.full(shape, high))


# ============ PARAMETERS ============


@dataclass
class ParamEntry:
    name: str
    value: np.ndarray
    grad: np.ndarray


class ParamSet:
    """Named, ordered parameter arrays with matched gradient storage."""

    def __init__(self, name: str = ""):
        self.name = name
        self._entries: Dict[str, ParamEntry] = {}

    def add(self, name: str, value) -> ParamEntry:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name '{name}' in ParamSet '{self.name}'")
        value = np.array(value, dtype=np.float64)
        entry = ParamEntry(name, value, np.zeros_like(value))
        self._entries[name] = entry
        return entry

    def __getitem__(self, name: str) -> ParamEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no parameter '{name}' in ParamSet '{self.name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def values(self) -> Dict[str, np.ndarray]:
        """Plain-array binding for graph-free (eager) evaluation."""
        return {name: entry.value for name, entry in self._entries.items()}

    def zero_grads(self) -> None:
        for entry in self._entries.values():
            entry.grad = np.zeros_like(entry.value)

    def copy(self, name: Optional[str] = None) -> "ParamSet":
        clone = ParamSet(self.name if name is None else name)
        for entry in self._entries.values():
            clone.add(entry.name, entry.value.copy())
        return clone

    def assign(self, other: "ParamSet") -> None:
        """Copy values from a ParamSet with identical names and shapes."""
        if other.names() != self.names():
            raise ValueError(f"ParamSet '{other.name}' does not match '{self.name}'")
        for entry in self._entries.values():
            source = other[entry.name].value
            if source.shape != entry.value.shape:
                raise ShapeError(
                    f"parameter '{entry.name}': shape {source.shape} vs {entry.value.shape}"
                )
            entry.value = source.copy()

    def num_values(self) -> int:
        return int(np.sum([entry.value.size for entry in self._entries.values()]))


# ============ ADAM ============


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 3e-4, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for entry in params:
            state.m[entry.name] = np.zeros_like(entry.value)
            state.v[entry.name] = np.zeros_like(entry.value)
        return state


def adam_step(params: ParamSet, state: AdamState) -> Tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update from the gradients stored in `params`.

    Raises:
        NonFiniteError: if any gradient holds NaN/inf; nothing is updated.
    """
    for entry in params:
        if not np.all(np.isfinite(entry.grad)):
            raise NonFiniteError(
                f"non-finite gradient in parameter '{params.name}/{entry.name}'",
                payload={"paramset": params.name, "parameter": entry.name},
            )
        if entry.name not in state.m:
            state.m[entry.name] = np.zeros_like(entry.value)
            state.v[entry.name] = np.zeros_like(entry.value)

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for entry in params:
        g = entry.grad
        m = state.beta1 * state.m[entry.name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[entry.name] + (1.0 - state.beta2) * (g * g)
        state.m[entry.name] = m
        state.v[entry.name] = v
        step = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        # rebinding (not in-place) keeps values captured by older graphs intact
        entry.value = entry.value - step
    return params, state


# ============ CHECKPOINT CONTAINER ============

CHECKPOINT_MAGIC = b"FDRLCKPT"
CHECKPOINT_VERSION = 1


def flatten_params(prefix: str, params: ParamSet) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{entry.name}": entry.value for entry in params}


def restore_params(params: ParamSet, entries: Mapping[str, np.ndarray], prefix: str) -> None:
    for entry in params:
        key = f"{prefix}/{entry.name}"
        if key not in entries:
            raise CheckpointError(f"checkpoint has no entry '{key}'")
        value = entries[key]
        if value.shape != entry.value.shape:
            raise ShapeError(f"checkpoint entry '{key}' has shape {value.shape}, "
                             f"model expects {entry.value.shape}")
        entry.value = value.copy()


def encode_checkpoint(entries: Mapping[str, np.ndarray]) -> bytes:
    """Serialize name -> array into the versioned little-endian container."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, value in entries.items():
        value = as_dense(value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a flow-drl checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", blob, offset)
        offset += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        entries: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            nbytes = 8 * size
            if offset + nbytes > len(blob):
                raise CheckpointError(f"checkpoint truncated inside entry '{name}'")
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            entries[name] = data.astype(np.float64).reshape(shape)
            offset += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if offset != len(blob):
        raise CheckpointError(f"corrupt checkpoint: {len(blob) - offset} trailing bytes")
    return entries


def save_checkpoint(path: Path, entries: Mapping[str, np.ndarray]) -> Path:
    """Write atomically: temp file first, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(entries))
    os.replace(tmp, path)
    logger.debug(f"[CKPT] Wrote {len(entries)} entries to {path.name}")
    return path


def load_checkpoint(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
