"""Reverse-mode autodiff core: tensors, the tape, and parameter storage.

The engine is define-by-run: ops execute eagerly on numpy arrays and, when a
Tape is active, append a node holding the inputs and a vector-Jacobian closure.
``backward`` replays the tape in reverse and accumulates gradients into leaf
tensors. Everything is dtype-strict: float32 for training runs, float64 for
gradient checks; mixing the two in one expression is an error.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ParamStore",
    "EngineError",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "record",
    "active_tape",
    "set_check_finite",
]


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeError(EngineError):
    """Operand shapes or dtypes are incompatible."""


class NonFiniteError(EngineError):
    """An operation produced NaN or Inf."""


# Global toggle for the per-op finiteness sweep. Gradient checks and training
# keep it on; it exists so micro-benchmarks can opt out.
_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> bool:
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


class Tensor:
    """A dense real-valued tensor with an optional accumulated gradient.

    ``data`` is always a C-contiguous numpy array of float32 or float64.
    ``grad`` is lazily allocated and accumulates across backward passes until
    explicitly cleared.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # note: ascontiguousarray would promote 0-d to 1-d, but 0-d is
            # always contiguous so scalars never reach this branch
            arr = np.ascontiguousarray(arr)
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ShapeError(f"tensor dimensions must all be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "vjp", "name")

    def __init__(self, out, inputs, vjp, name):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Execution record of one forward pass, consumed by ``backward``.

    Tapes are rebuilt per forward pass and are exclusively owned by one
    training step at a time; use as a context manager.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(name: str, out_data: np.ndarray, inputs, vjp) -> Tensor:
    """Finish an op: wrap the result, check finiteness, and tape it.

    ``inputs`` is the tuple of Tensor operands; ``vjp`` maps the output
    gradient to a tuple of per-input gradients (None for inputs that do not
    need one). Recording only happens when a tape is active and some input
    requires a gradient.
    """
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"op '{name}' produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if tape is not None and needs:
        tape.nodes.append(_Node(out, tuple(inputs), vjp, name))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every contributing leaf's ``grad``.

    Leaves that never touched the loss keep whatever is already in ``grad``
    (exact zeros for freshly cleared parameters). Repeated calls accumulate.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise EngineError("backward on an empty tape")

    produced = {id(node.out) for node in tape.nodes}
    # id -> (tensor, accumulated output gradient)
    pending: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}

    for node in reversed(tape.nodes):
        entry = pending.pop(id(node.out), None)
        if entry is None:
            continue
        grads = node.vjp(entry[1])
        for tensor, g in zip(node.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            if _CHECK_FINITE and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"backward of '{node.name}' produced non-finite gradient")
            if g.shape != tensor.data.shape:
                raise ShapeError(
                    f"backward of '{node.name}': gradient shape {g.shape} != input shape {tensor.data.shape}"
                )
            slot = pending.get(id(tensor))
            if slot is None:
                pending[id(tensor)] = [tensor, g.astype(tensor.data.dtype, copy=True)]
            else:
                slot[1] += g

    for tensor, g in pending.values():
        if tensor.requires_grad and id(tensor) not in produced:
            tensor.accumulate_grad(g)


class ParamStore:
    """Named, insertion-ordered collection of learnable tensors.

    Gradients are materialized as zeros at registration so that parameters
    off the loss path report exact-zero gradients after any backward pass.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        t.zero_grad()
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def grads(self) -> dict[str, np.ndarray]:
        return {name: t.grad for name, t in self._entries.items()}

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def n_params(self) -> int:
        return sum(t.size for t in self._entries.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype=dtype)
        for name, t in self._entries.items():
            out.add(name, t.data)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._entries) - set(values)
        extra = set(values) - set(self._entries)
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, arr in values.items():
            t = self._entries[name]
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)
