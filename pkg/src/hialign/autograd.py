"""Dense tensors, the gradient tape, and parameter bookkeeping.

The execution model is define-by-run: ops in :mod:`hialign.ops` compute
eagerly on numpy arrays and, when a tape is active and some input requires
grad, append one entry per primitive application.  Execution order is a
topological order by construction, so one reverse sweep over the entries
propagates gradients to every reachable leaf.

Tensors are float32 by default; tests and gradcheck build float64 tensors
and every op preserves the input dtype.  Stochastic ops (dropout) draw from
explicitly passed Philox streams and respect the global train/eval mode.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, NonFiniteError

DEFAULT_DTYPE = np.float32


class _Config:
    """Process-global numeric modes (single training thread owns these)."""

    def __init__(self):
        self.training = False        # dropout / batch-norm behaviour
        self.deterministic = False   # forces dropout off even in train mode
        self.nan_check = False       # raise on any non-finite op output


config = _Config()


@contextlib.contextmanager
def training_mode(enabled=True):
    prev = config.training
    config.training = enabled
    try:
        yield
    finally:
        config.training = prev


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    prev = config.deterministic
    config.deterministic = enabled
    try:
        yield
    finally:
        config.deterministic = prev


@contextlib.contextmanager
def nan_check_mode(enabled=True):
    prev = config.nan_check
    config.nan_check = enabled
    try:
        yield
    finally:
        config.nan_check = prev


def rng_stream(seed, *subkeys):
    """Counter-based Philox stream keyed by (seed, folded subkeys).

    Philox is platform-independent and splittable, so every stochastic
    consumer (dropout, init, shuffling, corpus synthesis) gets its own
    explicitly keyed stream and runs reproduce bit-identically.
    """
    mask = 0xFFFFFFFFFFFFFFFF
    sub = 0
    for k in subkeys:
        sub = ((sub ^ (int(k) & mask)) * 0x9E3779B97F4A7C15) & mask
    return np.random.Generator(np.random.Philox(key=[np.uint64(int(seed) & mask), np.uint64(sub)]))


class Tensor:
    """A dense row-major array with optional gradient tracking.

    Immutable by convention once created: ops allocate fresh outputs, and
    shared read-only use across threads is safe.  ``grad`` is populated by
    a reverse sweep and cleared by the owner (optimizer / gradcheck).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind == "f" and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        elif arr.dtype.kind in "iub" and requires_grad:
            raise ContractError("integer tensors cannot require grad")
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar is attached by hialign.ops at import time so the
    # primitive definitions stay in one module.


def tensor(data, requires_grad=False, dtype=None):
    """Build a Tensor, defaulting floats to float32."""
    arr = np.asarray(data)
    if dtype is None and arr.dtype.kind == "f":
        dtype = DEFAULT_DTYPE
    return Tensor(arr, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


@dataclass
class TapeEntry:
    """One recorded primitive application: op id, operands, and its VJP."""

    op: str
    out: Tensor
    inputs: tuple
    backward: object  # callable(grad_out) -> sequence of grads aligned with inputs


class Tape:
    """Ordered record of primitive applications for one reverse sweep.

    Entries are appended in execution order, which is a topological order
    (an op's inputs necessarily exist before its output).  The tape is
    single-writer: exactly one training thread builds and consumes it.
    """

    _stack = []

    def __init__(self):
        self.entries = []
        self.consumed = False

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._stack.pop()
        return False

    @staticmethod
    def active():
        return Tape._stack[-1] if Tape._stack else None

    def record(self, op, out, inputs, backward):
        self.entries.append(TapeEntry(op, out, tuple(inputs), backward))

    def reset(self):
        self.entries.clear()
        self.consumed = False

    def backward(self, loss):
        """Reverse sweep from a scalar loss; fills ``grad`` on reachable leaves."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise ContractError("tape already consumed; reset() before reuse")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            gout = entry.out.grad
            if gout is None:
                continue
            grads = entry.backward(gout)
            for inp, g in zip(entry.inputs, grads):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                inp.accumulate_grad(g)
            # Intermediates won't be read again; drop their grad buffers.
            entry.out.grad = None


def apply_op(op, out_data, inputs, backward):
    """Funnel for every primitive: builds the output, checks finiteness in
    nan-check mode, and records on the active tape when gradients flow."""
    if config.nan_check and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    requires = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        tape = Tape.active()
        if tape is not None:
            tape.record(op, out, inputs, backward)
    return out


@dataclass
class Param:
    tensor: Tensor
    trainable: bool = True
    frozen: bool = False


class ParameterStore:
    """Name -> (tensor, trainable, frozen) with unique names.

    ``frozen`` is permanent (prototype bank, text encoder, LoRA bases):
    those leaves never require grad and are never updated.  ``trainable``
    is the stage-dependent switch the two-phase protocol flips; a tensor
    requires grad iff trainable and not frozen.
    """

    def __init__(self):
        self._params = {}

    def add(self, name, t, trainable=True, frozen=False):
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        if not isinstance(t, Tensor):
            t = Tensor(t)
        p = Param(t, trainable=trainable and not frozen, frozen=frozen)
        t.requires_grad = p.trainable
        self._params[name] = p
        return t

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name].tensor

    def param(self, name):
        return self._params[name]

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def is_frozen(self, name):
        return self._params[name].frozen

    def is_trainable(self, name):
        return self._params[name].trainable

    def trainable_names(self):
        return [n for n, p in self._params.items() if p.trainable]

    def set_trainable(self, flag, prefix=""):
        """Flip the stage switch for every non-frozen param under ``prefix``."""
        for name, p in self._params.items():
            if name.startswith(prefix) and not p.frozen:
                p.trainable = bool(flag)
                p.tensor.requires_grad = p.trainable

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None

    def cast(self, dtype):
        """In-place dtype change for every parameter (gradcheck runs at float64)."""
        for p in self._params.values():
            if p.tensor.data.dtype.kind == "f":
                p.tensor.data = p.tensor.data.astype(dtype)

    def state_arrays(self):
        """name -> ndarray view, in insertion order (checkpointing)."""
        return {n: p.tensor.data for n, p in self._params.items()}


def collect_gradients(store, dtype=None):
    """Gradient map for every parameter; frozen/untouched leaves get zeros."""
    out = {}
    for name, p in store.items():
        if p.tensor.grad is None:
            out[name] = np.zeros_like(p.tensor.data, dtype=dtype or p.tensor.data.dtype)
        else:
            out[name] = p.tensor.grad
    return out


def backward(tape, loss, store=None):
    """Reverse sweep; with a store, returns the name -> gradient map
    (zeros for frozen leaves, per the ParameterStore contract)."""
    tape.backward(loss)
    if store is not None:
        return collect_gradients(store)
    return None
