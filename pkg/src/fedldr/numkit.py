"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the forecaster needs are provided. Every primitive is a
pure function of its inputs; when a :class:`GradTape` is active and any input
is differentiable, the primitive appends a record holding its inputs, output
and vector-Jacobian product to the tape. :func:`backward` then replays the tape
in reverse and accumulates adjoints, summing contributions from repeated uses
of the same value.

Usage::

    ea = Tensor(np.random.randn(4, 2), requires_grad=True)
    with GradTape() as tape:
        adj = row_softmax(relu(matmul(ea, transpose(ea))))
        loss = total(adj)
    (g,) = backward(tape, loss, [ea])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "fedldr_active_tape", default=None
)


class Tensor:
    """A float64 array, optionally tracked for differentiation.

    Identity semantics: two tensors are equal only if they are the same
    object, so tensors can key dictionaries of adjoints.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"rank {arr.ndim} tensors are not supported (max 3)")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class GradTape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the ``with`` block on
    differentiable inputs are recorded. A tape belongs to one computation at a
    time and is never shared between concurrent trainings.
    """

    records: list[_Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        """Differentiable inputs that were not produced by a recorded primitive."""
        produced = {id(r.out) for r in self.records}
        seen: set[int] = set()
        out = []
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _record(data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.name = None
    if track:
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _record(A @ B, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for overflow safety."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"row_softmax: expected a matrix, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record(s, (a,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x| with subgradient 0 at ties."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sign,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d scalar."""
    a = as_tensor(a)
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def sum_squares(a: Tensor) -> Tensor:
    """Squared Frobenius norm."""
    a = as_tensor(a)
    A = a.data
    return _record(np.asarray(np.sum(A * A)), (a,), lambda g: (2.0 * float(g) * A,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def pool_contract(e: Tensor, w: Tensor) -> Tensor:
    """Draw per-row slices from a pool: out[i, c, f] = sum_k e[i, k] * w[k, c, f]."""
    e, w = as_tensor(e), as_tensor(w)
    if e.ndim != 2 or w.ndim != 3 or e.shape[1] != w.shape[0]:
        raise DimensionError(f"pool_contract: embedding {e.shape} does not match pool {w.shape}")
    E, W = e.data, w.data
    d, c, f = W.shape
    out = (E @ W.reshape(d, c * f)).reshape(E.shape[0], c, f)

    def vjp(g):
        g2 = g.reshape(E.shape[0], c * f)
        return g2 @ W.reshape(d, c * f).T, (E.T @ g2).reshape(d, c, f)

    return _record(out, (e, w), vjp)


def propagate(adj: Tensor, x: Tensor) -> Tensor:
    """Graph propagation with self loop: (I + adj) x.

    ``x`` is N×C, or B×N×C for a batch of B inputs sharing one adjacency.
    """
    adj, x = as_tensor(adj), as_tensor(x)
    n = adj.shape[0]
    if adj.ndim != 2 or adj.shape[1] != n or x.ndim not in (2, 3) or x.shape[-2] != n:
        raise DimensionError(f"propagate: adjacency {adj.shape} does not match input {x.shape}")
    A, X = adj.data, x.data
    out = X + np.matmul(A, X)

    def vjp(g):
        gx = g + np.matmul(A.T, g)
        if X.ndim == 2:
            ga = g @ X.T
        else:
            ga = np.einsum("bic,bjc->ij", g, X)
        return ga, gx

    return _record(out, (adj, x), vjp)


def node_contract(h: Tensor, theta: Tensor) -> Tensor:
    """Per-node linear map: out[..., i, f] = sum_c h[..., i, c] * theta[i, c, f]."""
    h, theta = as_tensor(h), as_tensor(theta)
    if theta.ndim != 3 or h.ndim not in (2, 3) or h.shape[-2:] != theta.shape[:2]:
        raise DimensionError(f"node_contract: input {h.shape} does not match parameters {theta.shape}")
    H, T = h.data, theta.data
    if H.ndim == 2:
        out = np.einsum("ic,icf->if", H, T)

        def vjp(g):
            return np.einsum("if,icf->ic", g, T), np.einsum("ic,if->icf", H, g)
    else:
        # node axis first so each node is one batched matmul
        Hn = H.transpose(1, 0, 2)
        out = np.matmul(Hn, T).transpose(1, 0, 2)

        def vjp(g):
            gn = g.transpose(1, 0, 2)
            gh = np.matmul(gn, T.transpose(0, 2, 1)).transpose(1, 0, 2)
            gt = np.matmul(Hn.transpose(0, 2, 1), gn)
            return gh, gt

    return _record(out, (h, theta), vjp)


def add_node_bias(z: Tensor, b: Tensor) -> Tensor:
    """Add a per-node bias (N×F) to N×F or B×N×F activations."""
    z, b = as_tensor(z), as_tensor(b)
    if b.ndim != 2 or z.shape[-2:] != b.shape:
        raise DimensionError(f"add_node_bias: bias {b.shape} does not match activations {z.shape}")
    batched = z.ndim == 3

    def vjp(g):
        return g, (g.sum(axis=0) if batched else g)

    return _record(z.data + b.data, (z, b), vjp)


# ---------------------------------------------------------------- backward


def backward(tape: GradTape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Reverse-accumulate d(loss)/d(leaf) over the tape.

    Returns one gradient array per tensor in ``wrt`` (default: the tape's
    leaves, in first-use order). Leaves that do not influence ``loss`` get an
    all-zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    targets = list(wrt) if wrt is not None else tape.leaves()
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = adj.get(id(t))
            adj[id(t)] = gi if prev is None else prev + gi
    return [adj.get(id(t), np.zeros_like(t.data)) for t in targets]
