"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the active :class:`GradTape` (see
:func:`tape`) whenever at least one input requires a gradient.  Calling
:func:`backward` on a scalar walks the tape once in reverse and accumulates
``grad`` on every reachable leaf that asked for one.

Only the broadcasting needed by the transformer is supported: a row-vector
bias added to every row of a matrix, and a per-row scalar multiplying every
row (:func:`row_scale`).  Everything else requires matching shapes.
"""

from __future__ import annotations

import contextvars
import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_active_tape: contextvars.ContextVar[GradTape | None] = contextvars.ContextVar(
    "esftlab_tape", default=None
)


@contextmanager
def tape() -> Iterator[GradTape]:
    """Record every differentiable op executed inside the block."""
    t = GradTape()
    token = _active_tape.set(t)
    try:
        yield t
    finally:
        _active_tape.reset(token)


@contextmanager
def no_tape() -> Iterator[None]:
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    # NaN/Inf anywhere makes the sum non-finite; far cheaper than isfinite().all()
    if not math.isfinite(float(arr.sum())) and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite(data, op)
    out.grad = None
    out.id = next(_ids)
    out.name = None
    t = _active_tape.get()
    out.requires_grad = t is not None and any(x.requires_grad for x in inputs)
    if out.requires_grad:
        t.record(Node(op, inputs, out, bwd))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _make("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row bias of shape ``[n]`` for ``a`` of ``[m, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make("add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _make("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array of identical shape, e.g. an attention mask."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"add_const: shapes {a.shape} and {c.shape} differ")
    return _make("add_const", a.data + c, (a,), lambda g: (g,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shapes {a.shape} and {c.shape} differ")
    return _make("mul_const", a.data * c, (a,), lambda g: (g * c,))


def row_scale(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x`` ([m, n]) by scalar ``w[i]`` ([m])."""
    if x.data.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"row_scale: shapes {x.shape} and {w.shape} do not conform")
    X, W = x.data, w.data
    return _make(
        "row_scale",
        X * W[:, None],
        (x, w),
        lambda g: (g * W[:, None], np.einsum("ij,ij->i", g, X)),
    )


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of a matrix as a vector."""
    m, n = x.shape
    if not 0 <= j < n:
        raise ShapeError(f"column: index {j} out of range for {x.shape}")

    def bwd(g):
        full = np.zeros((m, n))
        full[:, j] = g
        return (full,)

    return _make("column", x.data[:, j].copy(), (x,), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``idx`` of a matrix; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make("take_rows", x.data[idx], (x,), bwd)


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Entries ``idx`` of a vector; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make("take", x.data[idx], (x,), bwd)


def add_rows(base: Tensor, rows: Tensor, idx: np.ndarray) -> Tensor:
    """``base`` with ``rows[j]`` added to row ``idx[j]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if rows.data.ndim != 2 or rows.shape[1] != base.shape[1] or rows.shape[0] != idx.size:
        raise ShapeError(f"add_rows: rows {rows.shape} do not fit base {base.shape}")
    out = base.data.copy()
    np.add.at(out, idx, rows.data)
    return _make("add_rows", out, (base, rows), lambda g: (g, g[idx]))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return _make("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    X = x.data
    if np.any(X <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make("log", np.log(X), (x,), lambda g: (g / X,))


def silu(x: Tensor) -> Tensor:
    X = x.data
    sig = 1.0 / (1.0 + np.exp(-X))
    return _make("silu", X * sig, (x,), lambda g: (g * sig * (1.0 + X * (1.0 - sig)),))


def _softmax(X: np.ndarray) -> np.ndarray:
    z = np.exp(X - X.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows: expected [m, n>=1], got {x.shape}")
    y = _softmax(x.data)

    def bwd(g):
        return (y * (g - np.einsum("ij,ij->i", g, y)[:, None]),)

    return _make("softmax_rows", y, (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    X = x.data
    shifted = X - X.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _make("log_softmax_rows", y, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_seq: int) -> Tensor:
    """Single-head causal attention over ``n_seq`` stacked sequences.

    ``q``, ``k``, ``v`` are ``[n_seq * T, d]`` with sequences stored one after
    another; position ``t`` attends to positions ``<= t`` of its own sequence.
    """
    _same_shape("causal_attention", q, k)
    _same_shape("causal_attention", q, v)
    m, d = q.shape
    if m % n_seq:
        raise ShapeError(f"causal_attention: {m} rows do not split into {n_seq} sequences")
    T = m // n_seq
    c = d ** -0.5
    Q, K, V = (x.data.reshape(n_seq, T, d) for x in (q, k, v))
    mask = np.triu(np.full((T, T), -np.inf), 1)
    S = np.einsum("btd,bsd->bts", Q, K) * c + mask
    S -= S.max(axis=2, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=2, keepdims=True)
    out = np.einsum("bts,bsd->btd", P, V).reshape(m, d)

    def bwd(g):
        G = g.reshape(n_seq, T, d)
        dV = np.einsum("bts,btd->bsd", P, G)
        dP = np.einsum("btd,bsd->bts", G, V)
        dS = P * (dP - (dP * P).sum(axis=2, keepdims=True)) * c
        dQ = np.einsum("bts,bsd->btd", dS, K)
        dK = np.einsum("bts,btd->bsd", dS, Q)
        return dQ.reshape(m, d), dK.reshape(m, d), dV.reshape(m, d)

    return _make("causal_attention", out, (q, k, v), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * gain`` applied per row."""
    if x.data.ndim != 2 or gain.shape != (x.shape[1],):
        raise ShapeError(f"rms_norm: shapes {x.shape} and {gain.shape} do not conform")
    X, G = x.data, gain.data
    n = X.shape[1]
    r = np.sqrt((X * X).mean(axis=1, keepdims=True) + eps)
    xhat = X / r

    def bwd(g):
        gx = g * G
        dx = gx / r - xhat * (np.einsum("ij,ij->i", gx, xhat)[:, None] / n) / r
        return dx, np.einsum("ij,ij->j", g, xhat)

    return _make("rms_norm", xhat * G, (x, gain), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding: ids must lie in [0, {V})")

    def bwd(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        return (full,)

    return _make("embedding", table.data[ids], (table,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy of ``logits`` [m, V] against integer ``targets`` [m]."""
    targets = np.asarray(targets, dtype=np.int64)
    m, V = logits.shape
    if targets.shape != (m,):
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    X = logits.data
    shifted = X - X.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    loss = np.array((logz - shifted[rows, targets]).mean())

    def bwd(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, targets] -= 1.0
        return (p * (float(g) / m),)

    return _make("cross_entropy", loss, (logits,), bwd)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, t: GradTape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``t`` defaults to the active tape.  Interior tensors receive no ``grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    t = t if t is not None else _active_tape.get()
    if t is None:
        raise ContractError("backward() called with no tape")
    if not loss.requires_grad:
        return
    produced = {n.output.id for n in t.nodes}
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in reversed(t.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in produced:
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------- grad check


class GradCheckError(FloatingPointError):
    pass


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    Returns ``max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` over
    every coordinate of every input.  Discrete routing decisions made inside
    ``f`` are recorded on the first (analytic) evaluation and replayed on every
    perturbed evaluation, so the check is taken on a single smooth piece.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    from esftlab.model import frozen_routing

    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with frozen_routing() as frozen:
        with tape() as t:
            out = f(*inputs)
            backward(out, t)
        analytic = [x.grad if x.grad is not None else np.zeros(x.shape) for x in inputs]

        worst = 0.0
        with no_tape():
            for k, x in enumerate(inputs):
                flat = x.data.reshape(-1)
                agrad = analytic[k].reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    try:
                        flat[i] = orig + eps
                        frozen.rewind()
                        fp = f(*inputs).item()
                        flat[i] = orig - eps
                        frozen.rewind()
                        fm = f(*inputs).item()
                    except FloatingPointError as exc:
                        raise GradCheckError(f"input {k} coordinate {i}: {exc}") from exc
                    finally:
                        flat[i] = orig
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise GradCheckError(f"input {k} coordinate {i}: non-finite f")
                    num = (fp - fm) / (2 * eps)
                    a = float(agrad[i])
                    err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                    worst = max(worst, err)
    return worst
