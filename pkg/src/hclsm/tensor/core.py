"""Dense tensors with a reverse-mode gradient tape.

A forward pass appends one node per differentiable operation to the current
thread's :class:`Tape`. :func:`backward` walks that tape once in reverse,
fills ``.grad`` on every reachable tensor that requires it, and then retires
the tape; a second call on the same loss raises :class:`StaleTapeError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class StaleTapeError(RuntimeError):
    """Raised when backward() is asked to replay a tape that was already consumed."""


class DimensionError(ValueError):
    pass


class Tape:
    """Append-only record of the operations of one forward pass."""

    __slots__ = ("nodes", "consumed")

    def __init__(self) -> None:
        self.nodes: list[tuple] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.enabled = True
        self.held: "_Held | None" = None


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def reset_tape() -> Tape:
    """Drop everything recorded so far and start a fresh tape."""
    _state.tape.consumed = True
    _state.tape.nodes.clear()
    _state.tape = Tape()
    return _state.tape


@contextmanager
def sub_tape():
    """Record onto a private tape for the duration of the block.

    Lets a backward rule re-run part of a forward pass (recomputation) and
    call ``backward`` on it without touching the tape being walked.
    """
    prev, prev_enabled = _state.tape, _state.enabled
    _state.tape = Tape()
    _state.enabled = True
    try:
        yield _state.tape
    finally:
        _state.tape = prev
        _state.enabled = prev_enabled


def grad_enabled() -> bool:
    return _state.enabled


class _Held:
    def __init__(self, values: list | None):
        self.replay = values is not None
        self.values = [] if values is None else values
        self.pos = 0


@contextmanager
def hold_constants(values: list | None = None):
    """Record (``values=None``) or replay the results of every ``held`` call.

    Code computes stop-gradient quantities and discrete decisions through
    ``held``. A finite-difference probe records them once at the base point
    and replays them at perturbed points, so both sides see the same function.
    Yields the list of recorded values.
    """
    prev = _state.held
    _state.held = _Held(values)
    try:
        yield _state.held.values
    finally:
        _state.held = prev


def held(compute: Callable[[], object]):
    h = _state.held
    if h is None:
        return compute()
    if h.replay:
        if h.pos >= len(h.values):
            raise RuntimeError("replay ran past the recorded constants; the call sequence changed")
        value = h.values[h.pos]
        h.pos += 1
        return value
    # a held call nested inside this one is part of the recorded value, so it is not recorded itself
    _state.held = None
    try:
        value = compute()
    finally:
        _state.held = h
    h.values.append(value)
    return value


@contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            return data
        dtype = _DEFAULT_DTYPE
    return np.asarray(data, dtype=dtype)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    # ----- basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # ----- operator sugar (implementations live in ops)
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __pow__(self, exponent):
        return _ops().power(self, exponent)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _ops().transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def _scalar_error(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _ops():
    from . import ops

    return ops


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Backward) -> Tensor:
    """Wrap ``data`` as the output of an op and, if needed, put it on the tape."""
    out = Tensor.__new__(Tensor)
    out.data = data if type(data) is np.ndarray else np.asarray(data)
    out.grad = None
    out.name = None
    out._tape = None
    out.requires_grad = False
    if _state.enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                tape = _state.tape
                out._tape = tape
                tape.nodes.append((out, tuple(parents), backward_fn))
                break
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every requires-grad tensor that ``loss`` depends on."""
    if loss.data.size != 1 and grad is None:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")
    tape = loss._tape
    if tape is None:
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return
    if tape.consumed:
        raise StaleTapeError("tape already consumed by a previous backward(); re-run the forward pass")

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for out, parents, fn in reversed(tape.nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        grads = fn(g)
        for p, pg in zip(parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.data.dtype, copy=True)
                else:
                    p.grad += pg
            else:
                key = id(p)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg
    tape.consumed = True
    tape.nodes.clear()
    if _state.tape is tape:
        _state.tape = Tape()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
