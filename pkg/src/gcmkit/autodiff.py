"""Reverse-mode automatic differentiation over dense float32 tensors.

The execution model is a flat tape: every primitive operation appends one
node in execution order, which is already a topological order, so the
backward pass is a single reverse sweep that visits each node at most once.
Values are stored in 32-bit floats; reductions (sums, losses) keep 64-bit
accumulators so finite-difference checks stay meaningful.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeMismatchError, TapeError


class Tensor:
    """Immutable dense array of 32-bit floats in row-major order.

    NaN/Inf are rejected at construction unless ``allow_nonfinite`` is set.
    The underlying buffer is adopted without copying when possible and
    marked read-only, so tensors can be shared freely across tapes and
    threads; pass a copy if you need to keep writing to the source array.
    """

    __slots__ = ("_data",)

    def __init__(self, data, allow_nonfinite=False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise NumericError("tensor rejected: contains non-finite values")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        """Read-only float32 ndarray view of the values."""
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self.size == 1 else self._raise_item()

    def _raise_item(self):
        raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")

    def ravel(self) -> np.ndarray:
        return self._data.reshape(-1)

    def tolist(self):
        return self._data.tolist()

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float32))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Node:
    """One value on a tape: a leaf (input, parameter, constant) or the
    output of a primitive operation together with its local gradient rule."""

    __slots__ = ("value", "parents", "vjp", "name", "param_id", "is_input", "tape")

    def __init__(self, value, parents, vjp, name, param_id, is_input, tape):
        self.value = value          # ndarray; float32 except 0-d float64 reductions
        self.parents = parents      # tuple of Node
        self.vjp = vjp              # grad_out ndarray -> tuple of per-parent grads
        self.name = name
        self.param_id = param_id
        self.is_input = is_input
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name}, shape={self.value.shape})"


class Tape:
    """Execution-ordered record of primitive operations.

    Leaves (inputs, parameters, constants) are tracked separately from
    operations; ``len(tape)`` counts executed primitives only. A tape is
    append-only and never mutated by ``backward``, so it may be replayed
    any number of times, but must not be shared across concurrent backward
    passes that are still being recorded.
    """

    __slots__ = ("leaves", "operations", "logits", "input")

    def __init__(self):
        self.leaves = []
        self.operations = []
        self.logits = None   # set by forward_eval
        self.input = None    # set by forward_eval

    def leaf(self, value, name="leaf", param_id=None, is_input=False) -> Node:
        node = Node(np.asarray(value, dtype=np.float32), (), None, name, param_id, is_input, self)
        self.leaves.append(node)
        if is_input:
            self.input = node
        return node

    def record(self, value, parents, vjp, name) -> Node:
        for p in parents:
            if p.tape is not self:
                raise TapeError(f"operation '{name}' mixes nodes from different tapes")
        node = Node(value, tuple(parents), vjp, name, None, False, self)
        self.operations.append(node)
        return node

    def __len__(self):
        return len(self.operations)


@dataclass
class GradientBundle:
    """Gradients of one scalar loss: one tensor per parameter identifier plus
    the gradient with respect to the network input (same shape as the input).
    Parameters that did not contribute to the loss get zero tensors."""

    params: dict
    input_gradient: Tensor | None

    def param(self, param_id: str) -> Tensor:
        return self.params[param_id]


def backward(tape: Tape, loss: Node) -> GradientBundle:
    """Reverse sweep over the tape from a scalar loss node.

    Raises TapeError if the loss is not a node of this tape or is not scalar.
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise TapeError("loss node was not produced by this tape")
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.operations):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    # gradient tensors may saturate float32 (stacked concealment layers
    # multiply by ~1e12 each), so non-finite values are explicitly allowed
    params = {}
    input_gradient = None
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.value)
        if leaf.param_id is not None:
            params[leaf.param_id] = Tensor(np.asarray(g, dtype=np.float32), allow_nonfinite=True)
        if leaf.is_input:
            input_gradient = Tensor(np.asarray(g, dtype=np.float32), allow_nonfinite=True)
    return GradientBundle(params=params, input_gradient=input_gradient)


def finite_difference_gradient(f, x: Tensor, h: float) -> Tensor:
    """Central-difference gradient estimate of a scalar function of a tensor.

    Perturbs one float32 coordinate at a time and divides by the realized
    span (x_plus - x_minus) in float64, so quantization of the perturbed
    inputs does not bias the quotient.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = x.data.reshape(-1)
    out = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] = np.float32(float(flat[i]) + h)
        xm[i] = np.float32(float(flat[i]) - h)
        span = float(xp[i]) - float(xm[i])
        if span == 0.0:
            raise ValueError(f"step h={h} is below float32 resolution at coordinate {i}")
        fp = float(f(Tensor(xp.reshape(x.shape))))
        fm = float(f(Tensor(xm.reshape(x.shape))))
        out[i] = (fp - fm) / span
    return Tensor(out.reshape(x.shape))


def require_same_shape(a, b, op: str):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not match")
