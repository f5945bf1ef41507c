"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Everything is float64 and rank <= 2; vectors are stored as (n, 1) columns
or (1, n) rows. Broadcasting is deliberately restricted: `add` accepts a
(1, d) bias row against an (n, d) matrix, and `mul` accepts a (n, 1) column
or (1, d) row as its second operand. Any other shape mismatch raises.

Gradients are recorded on a per-forward-pass :class:`Tape` (a Wengert list):
ops executed inside a ``with Tape() as tape:`` block append themselves in
execution order, and ``tape.backward(loss)`` replays them reversed, which is
a reverse topological order by construction.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class TapeError(RuntimeError):
    """Backward called on an unusable tape or a non-scalar loss."""


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"tensors are rank <= 2, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A (rows, cols) float64 array, optionally accumulating a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_matrix(values)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise TapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            raise TapeError("gradient routed to a tensor without requires_grad")
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    """One primitive on the tape: output plus a closure pushing grads to inputs."""

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...],
                 backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Per-forward-pass op recorder. One backward() per tape."""

    def __init__(self):
        self._records: list[_Record] = []
        self._outputs: set[int] = set()
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, record: _Record) -> None:
        self._records.append(record)
        self._outputs.add(id(record.out))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

        Intermediate gradients live in a transient table; the tape is
        consumed afterwards and cannot be replayed.
        """
        if self._used:
            raise TapeError("tape already consumed by a previous backward()")
        if loss.shape != (1, 1):
            raise TapeError(f"loss must be scalar (1, 1), got shape {loss.shape}")
        self._used = True
        pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for rec in reversed(self._records):
            g_out = pending.pop(id(rec.out), None)
            if g_out is None:
                continue
            contribs = rec.backward(g_out)
            for inp, g in zip(rec.inputs, contribs):
                if g is None or not inp.requires_grad:
                    continue
                if id(inp) in self._outputs:
                    slot = pending.get(id(inp))
                    pending[id(inp)] = g.copy() if slot is None else slot + g
                else:
                    inp.accumulate_grad(g)
        self._records.clear()
        self._outputs.clear()


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run reverse mode from a scalar loss on the given (or active) tape."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise TapeError("no active tape to differentiate")
    tape.backward(loss)


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._record(_Record(out, inputs, backward_fn))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; d/da = g b^T, d/db = a^T g."""
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        return (g.T,)

    return _emit(a.data.T, (a,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a (1, d) bias row against (n, d) a."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif b.shape == (1, a.shape[1]):
        def bwd(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise DimensionError(f"add mismatch: {a.shape} + {b.shape}")
    return _emit(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub mismatch: {a.shape} - {b.shape}")

    def bwd(g):
        return g, -g

    return _emit(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a (n, 1) column or (1, d) row of a."""
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        def bwd(g):
            return g * bd, g * ad
    elif b.shape == (a.shape[0], 1):
        def bwd(g):
            return g * bd, (g * ad).sum(axis=1, keepdims=True)
    elif b.shape == (1, a.shape[1]):
        def bwd(g):
            return g * bd, (g * ad).sum(axis=0, keepdims=True)
    else:
        raise DimensionError(f"mul mismatch: {a.shape} * {b.shape}")
    return _emit(ad * bd, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _emit(a.data * c, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    gate = a.data > 0

    def bwd(g):
        return (g * gate,)

    return _emit(np.where(gate, a.data, 0.0), (a,), bwd)


def rowsum(a: Tensor) -> Tensor:
    """Sum across columns, (n, d) -> (n, 1)."""
    cols = a.shape[1]

    def bwd(g):
        return (np.repeat(g, cols, axis=1),)

    return _emit(a.data.sum(axis=1, keepdims=True), (a,), bwd)


def total_sum(a: Tensor) -> Tensor:
    """Sum of all entries, -> (1, 1)."""
    shape = a.shape

    def bwd(g):
        return (np.full(shape, g[0, 0]),)

    return _emit(np.array([[a.data.sum()]]), (a,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with max subtraction; each output row sums to 1."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (x,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over features, then affine gain/bias.

    Population variance; a constant row maps to zeros thanks to eps.
    """
    n, d = x.shape
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise DimensionError(
            f"layernorm affine shapes {gain.shape}/{bias.shape} do not match features ({d},)"
        )
    if eps <= 0:
        raise ValueError("layernorm eps must be > 0")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gain.data

    def bwd(g):
        gx = g * gd
        dx = inv * (
            gx
            - gx.mean(axis=1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit(xhat * gd + bias.data, (x, gain, bias), bwd)


def batch_standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-column standardization over the batch axis (population variance).

    Zero-variance columns map to zeros via the eps guard. Gradients flow
    through the batch mean and variance.
    """
    if eps <= 0:
        raise ValueError("batch_standardize eps must be > 0")
    n = x.shape[0]
    mu = x.data.mean(axis=0, keepdims=True)
    var = x.data.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(g):
        dx = inv * (
            g
            - g.mean(axis=0, keepdims=True)
            - xhat * (g * xhat).mean(axis=0, keepdims=True)
        )
        return (dx,)

    return _emit(xhat, (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero features w.p. p and scale survivors by 1/(1-p).

    The mask is drawn once from `rng` at call time, so replaying a forward
    pass with an identically seeded generator reproduces it exactly. Eval
    mode is simply "do not call dropout".
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if p == 0.0:
        mask = np.ones(x.shape)
    else:
        mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def bwd(g):
        return (g * mask,)

    return _emit(x.data * mask, (x,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along columns; all parts share the row count."""
    if not parts:
        raise DimensionError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    widths = []
    for t in parts:
        if t.shape[0] != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {t.shape} vs ({rows}, ...)"
            )
        widths.append(t.shape[1])
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(widths)))

    return _emit(np.concatenate([t.data for t in parts], axis=1), tuple(parts), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    n, d = a.shape
    if not (0 <= start < stop <= d):
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for shape {a.shape}")

    def bwd(g):
        full = np.zeros((n, d))
        full[:, start:stop] = g
        return (full,)

    return _emit(a.data[:, start:stop].copy(), (a,), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy from raw logits via stable log-softmax, -> (1, 1)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def bwd(g):
        dl = probs.copy()
        dl[np.arange(n), labels] -= 1.0
        return (g[0, 0] * dl / n,)

    return _emit(np.array([[loss]]), (logits,), bwd)
