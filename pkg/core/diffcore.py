"""
Reverse-mode automatic differentiation on dense float64 arrays
Define-by-run tape, the primitive set used by the learned heads, and the Adam optimizer
"""
import contextvars
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.exceptions import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Number = Union[int, float]

_ACTIVE_TAPE: "contextvars.ContextVar[Optional[Tape]]" = contextvars.ContextVar("fvin_active_tape", default=None)


class Tensor:
    """
    Dense float64 array that can participate in reverse-mode differentiation

    Leaves created with requires_grad=True are parameters; every primitive applied while a
    Tape is active records itself when at least one input requires a gradient.
    """

    __array_ufunc__ = None  # numpy scalars defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a tensor is not a primitive", primitive="div",
                             shapes=[self.shape, other.shape])
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeNode:
    """One recorded primitive: inputs, output and its vector-Jacobian rule"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """
    Ordered record of primitives for one forward pass

    Nodes are appended in evaluation order, so every node's inputs precede it; backward visits
    them in exact reverse order. A tape is single-owner: use one per rollout/thread.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode):
        self.nodes.append(node)

    def leaves(self) -> List[Tensor]:
        """Parameters reached by this tape, in first-use order"""
        produced = {id(node.output) for node in self.nodes}
        seen, leaves = set(), []
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in produced and id(tensor) not in seen:
                    seen.add(id(tensor))
                    leaves.append(tensor)
        return leaves


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


def _emit(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"primitive '{op}' produced a non-finite output", primitive=op,
                             details={"shape": list(out.shape)})
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    tape = _ACTIVE_TAPE.get()
    if needs_grad and tape is not None:
        tape.record(TapeNode(op, inputs, result, vjp))
    return result


def _row_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """True for (matrix, vector) operands where the vector spans the last axis"""
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    raise ShapeError(f"'{op}' needs equal shapes or (batch, d) with (d,), got {a.shape} and {b.shape}",
                     primitive=op, shapes=[a.shape, b.shape])


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands sharing the contraction axis"""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul cannot contract {a.shape} with {b.shape}", primitive="matmul",
                         shapes=[a.shape, b.shape])
    a_val, b_val = a.data, b.data

    def vjp(g):
        if a_val.ndim == 2 and b_val.ndim == 2:
            return g @ b_val.T, a_val.T @ g
        if a_val.ndim == 2:
            return np.outer(g, b_val), a_val.T @ g
        if b_val.ndim == 2:
            return b_val @ g, np.outer(a_val, g)
        return g * b_val, g * a_val

    return _emit("matmul", (a, b), a_val @ b_val, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    rows = _row_broadcast("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (g, g.sum(axis=0) if rows else g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    rows = _row_broadcast("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (g, -(g.sum(axis=0) if rows else g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}", primitive="mul",
                         shapes=[a.shape, b.shape])
    a_val, b_val = a.data, b.data
    return _emit("mul", (a, b), a_val * b_val, lambda g: (g * b_val, g * a_val))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", (a,), a.data * factor, lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = (a.data > 0.0).astype(np.float64)
    return _emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


def sin(a: Tensor) -> Tensor:
    a_val = a.data
    return _emit("sin", (a,), np.sin(a_val), lambda g: (g * np.cos(a_val),))


def cos(a: Tensor) -> Tensor:
    a_val = a.data
    return _emit("cos", (a,), np.cos(a_val), lambda g: (-g * np.sin(a_val),))


def square(a: Tensor) -> Tensor:
    a_val = a.data
    return _emit("square", (a,), a_val * a_val, lambda g: (2.0 * g * a_val,))


def mean(a: Tensor) -> Tensor:
    n, shape = a.size, a.shape
    return _emit("mean", (a,), np.array(a.data.mean()),
                 lambda g: (np.full(shape, float(g) / n),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis; all other axes must agree"""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of nothing", primitive="concat")
    lead = tensors[0].shape[:-1]
    if axis not in (-1, tensors[0].ndim - 1) or any(t.shape[:-1] != lead or t.ndim == 0 for t in tensors):
        raise ShapeError("concat needs operands that differ only in the last axis", primitive="concat",
                         shapes=[t.shape for t in tensors])
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=-1), vjp)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) of the last axis"""
    width = a.shape[-1] if a.ndim else 0
    if a.ndim == 0 or not 0 <= start < stop <= width:
        raise ShapeError(f"slice [{start}:{stop}] out of range for {a.shape}", primitive="slice",
                         shapes=[a.shape])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", (a,), a.data[..., start:stop].copy(), vjp)


def zeros(shape) -> Tensor:
    return constant(np.zeros(shape))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def forward(graph: Callable[..., Tensor], *inputs: Tensor) -> Tuple[Tensor, Tape]:
    """Evaluate a composed graph on a fresh tape"""
    with Tape() as tape:
        output = graph(*inputs)
    return output, tape


def backward(tape: Tape, root: Tensor, wrt: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """
    Exact reverse-mode gradients of a scalar root

    Args:
        tape: Tape recorded during the forward pass
        root: Scalar output node
        wrt: Leaves to differentiate with respect to (defaults to every leaf on the tape)

    Returns:
        Gradients aligned with wrt; leaves the root does not depend on get zeros. Each
        gradient is also stored on tensor.grad.
    """
    if root.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}", primitive="backward",
                         shapes=[root.shape])
    targets = list(wrt) if wrt is not None else tape.leaves()

    adjoints = {id(root): np.array(1.0)}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, contribution in zip(node.inputs, node.vjp(g)):
            if contribution is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in adjoints:
                adjoints[key] = adjoints[key] + contribution
            else:
                adjoints[key] = np.array(contribution, dtype=np.float64)

    grads = []
    for tensor in targets:
        grad = adjoints.get(id(tensor))
        grad = np.zeros(tensor.shape) if grad is None else grad.reshape(tensor.shape)
        tensor.grad = grad
        grads.append(grad)
    return grads


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar loss w.r.t. one parameter"""
    grad = np.zeros(param.shape)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = loss_fn().item()
        flat[i] = original - eps
        minus = loss_fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> List[np.ndarray]:
    norm = global_norm(grads)
    if not np.isfinite(norm) or norm <= max_norm:
        return list(grads)
    factor = max_norm / norm
    return [g * factor for g in grads]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameters"""
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 5e-4) -> "AdamState":
        return cls(
            lr=lr,
            first_moment=[np.zeros(p.shape) for p in params],
            second_moment=[np.zeros(p.shape) for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> bool:
    """
    Apply one Adam update in place

    Returns:
        True when the step was applied, False when it was skipped on a non-finite gradient
    """
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError("adam_step got mismatched parameter/gradient/state counts", primitive="adam")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"adam_step shape mismatch for {p!r}", primitive="adam",
                             shapes=[p.shape, np.shape(g), m.shape])

    if not all(np.all(np.isfinite(g)) for g in grads):
        logger.warning(f"Skipping Adam step {state.step + 1}: non-finite gradient")
        return False

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return True
