"""
Dense tensors and a minimal reverse-mode differentiation tape

Tensors wrap a row-major numpy array. Operations executed while a ``Tape`` is
active are recorded together with their backward rule; ``Tape.backward``
replays them in reverse order.
"""

import contextlib
import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from hsi_rcnet.errors import NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]
ArrayLike = Union[np.ndarray, Sequence[float], float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# Thread-local so that independent tapes may run in worker threads
_local = threading.local()


def default_dtype() -> np.dtype:
    """Element type used for newly created tensors in this thread"""
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def double_precision() -> Iterator[None]:
    """Switch tensor creation to float64 (verification mode)"""
    previous = default_dtype()
    _local.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _local.dtype = previous


def _tape_stack() -> List[Optional["Tape"]]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> Optional["Tape"]:
    """The innermost active tape, if any"""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (evaluation, finite differences)"""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """Dense N-dimensional array with an optional gradient"""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[np.dtype] = None,
    ):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Shape:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} does not match tensor shape {self.shape}"
            )
        grad = grad.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise("sub", self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise("mul", self, other)

    def __neg__(self) -> "Tensor":
        return elementwise("neg", self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{label})"


@dataclass
class TapeRecord:
    """One recorded operation"""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations"""

    def __init__(self):
        self.records: List[TapeRecord] = []
        self._replayed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, record: TapeRecord) -> None:
        self.records.append(record)

    def backward(
        self, loss: Tensor, params: Optional[Sequence[Tensor]] = None
    ) -> int:
        """
        Propagate gradients from a scalar loss

        Args:
            loss: single-element tensor produced under this tape
            params: trainable tensors that must end up with a grad

        Returns:
            Number of records visited
        """
        if self._replayed:
            raise TapeError("tape has already been replayed")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._replayed = True

        loss.accumulate_grad(np.ones_like(loss.data))
        visited = 0
        for rec in reversed(self.records):
            visited += 1
            upstream = rec.output.grad
            if upstream is None:
                continue
            grads = rec.backward(upstream)
            for tensor, grad in zip(rec.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                tensor.accumulate_grad(np.asarray(grad))

        for param in params or ():
            if param.grad is None:
                param.grad = np.zeros_like(param.data)

        logger.debug(f"Tape replayed {visited} records")
        return visited


def record_op(
    op: str,
    inputs: Sequence[Tensor],
    output: np.ndarray,
    backward: BackwardFn,
) -> Tensor:
    """Wrap an op result and register its backward rule on the active tape"""
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor(output, requires_grad=requires_grad, dtype=output.dtype)
    tape = current_tape()
    if tape is not None and requires_grad:
        tape.record(TapeRecord(op, tuple(inputs), result, backward))
    return result


def new_tensor(
    shape: Sequence[int],
    fill: Optional[float] = 0.0,
    seed: Optional[int] = None,
    low: float = -1.0,
    high: float = 1.0,
    requires_grad: bool = False,
    name: Optional[str] = None,
) -> Tensor:
    """
    Create a tensor filled with a constant or seeded uniform values

    Args:
        shape: positive extents
        fill: constant value, used when no seed is given
        seed: if set, values are drawn uniformly from [low, high)
        low, high: range of the seeded fill

    Returns:
        New tensor of the current default dtype
    """
    extents = tuple(int(d) for d in shape)
    if any(d < 1 for d in extents):
        raise ShapeError(f"invalid shape {list(shape)}: extents must be >= 1")
    if seed is not None:
        rng = np.random.default_rng(seed)
        data = rng.uniform(low, high, size=extents)
    else:
        data = np.full(extents, 0.0 if fill is None else fill)
    return Tensor(data, requires_grad=requires_grad, name=name)


# Elementwise function library and partial derivatives per input
_FORWARD: Dict[str, Callable[..., np.ndarray]] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "exp": np.exp,
    "neg": np.negative,
}

_PARTIALS: Dict[str, Callable[..., Tuple[np.ndarray, ...]]] = {
    "add": lambda g, a, b, out: (g, g),
    "sub": lambda g, a, b, out: (g, -g),
    "mul": lambda g, a, b, out: (g * b, g * a),
    "exp": lambda g, a, b, out: (g * out,),
    "neg": lambda g, a, b, out: (-g,),
}

_BINARY = {"add", "sub", "mul"}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Apply add|sub|mul|exp|neg without broadcasting"""
    if op not in _FORWARD:
        raise ValueError(f"unknown elementwise op: {op}")
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")
        out = _FORWARD[op](a.data, b.data)
        inputs: Tuple[Tensor, ...] = (a, b)
    else:
        out = _FORWARD[op](a.data)
        inputs = (a,)

    a_data = a.data
    b_data = b.data if b is not None else None

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return _PARTIALS[op](g, a_data, b_data, out)

    return record_op(op, inputs, out, backward)


def reduce_sum(a: Tensor, axis: int) -> Tensor:
    """Sum over one axis; the output drops that axis"""
    if not 0 <= axis < a.data.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.data.ndim}")
    out = a.data.sum(axis=axis)
    in_shape = a.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(np.expand_dims(g, axis), in_shape).copy(),)

    return record_op("reduce_sum", (a,), out, backward)


def sum_all(a: Tensor) -> Tensor:
    """Scalar sum of every element"""
    return reduce_sum(reshape(a, (a.size,)), 0)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit reshape (same element count)"""
    target = tuple(int(d) for d in shape)
    if int(np.prod(target, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {list(a.shape)} into {list(target)}")
    in_shape = a.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(in_shape),)

    return record_op("reshape", (a,), a.data.reshape(target), backward)


def expand(a: Tensor, axis: int, size: int) -> Tensor:
    """Insert a new axis and repeat the tensor ``size`` times along it"""
    if not 0 <= axis <= a.data.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.data.ndim}")
    if size < 1:
        raise ShapeError(f"expand size must be >= 1, got {size}")
    out = np.repeat(np.expand_dims(a.data, axis), size, axis=axis)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.sum(axis=axis),)

    return record_op("expand", (a,), out, backward)


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6
) -> float:
    """
    Compare the taped gradient of ``f`` with central finite differences

    Runs in double precision. The error per coordinate is
    |analytic - numeric| / max(1, |numeric|).

    Args:
        f: scalar-valued differentiable function of one tensor
        x: evaluation point
        eps: finite-difference step

    Returns:
        Maximum relative error over all coordinates
    """
    with double_precision():
        base = np.array(x.data, dtype=np.float64)
        probe = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            out = f(probe)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got {out.shape}")
        tape.backward(out)
        analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

        def evaluate(point: np.ndarray) -> float:
            with no_tape():
                value = f(Tensor(point.copy())).item()
            if not math.isfinite(value):
                raise NumericError("non-finite value during finite differences")
            return value

        flat = base.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            upper = evaluate(base)
            flat[i] = original - eps
            lower = evaluate(base)
            flat[i] = original
            numeric[i] = (upper - lower) / (2.0 * eps)

        analytic = analytic.reshape(-1)
        if not np.all(np.isfinite(analytic)):
            raise NumericError("non-finite analytic gradient")
        errors = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        return float(errors.max()) if errors.size else 0.0
