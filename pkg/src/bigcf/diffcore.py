"""Minimal reverse-mode differentiation over dense 2-D arrays.

Every value is a 2-D numpy array (scalars are 1x1). Operations on a
:class:`Var` are recorded on its :class:`Tape`; :meth:`Tape.backward` walks
the record in reverse and returns gradients for every trainable leaf.

The only sparse primitive is :func:`sp_dense_matmul`, where the sparse
operand is a constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError, NumericError

EPS_LOG = 1e-10
EPS_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class SparseMat:
    """Compressed-row sparse matrix with explicit invariants."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _csr: sp.csr_matrix = field(init=False, repr=False, compare=False)
    _csr_t: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rows, cols = self.shape
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        data = np.asarray(self.data, dtype=np.float64)
        if indptr.shape != (rows + 1,) or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ConfigError("indptr does not match shape / nnz")
        if np.any(np.diff(indptr) < 0):
            raise ConfigError("row offsets must be nondecreasing")
        if len(data) != len(indices):
            raise ConfigError("indices and data differ in length")
        if len(indices) and (indices.min() < 0 or indices.max() >= cols):
            raise ConfigError("column index out of range")
        if len(indices) > 1:
            step = np.diff(indices)
            same_row = np.ones(len(step), dtype=bool)
            starts = indptr[1:-1]
            starts = starts[(starts > 0) & (starts < len(indices))]
            same_row[starts - 1] = False
            bad = np.flatnonzero(same_row & (step <= 0))
            if len(bad):
                r = int(np.searchsorted(indptr, bad[0], side="right") - 1)
                raise ConfigError(f"column indices of row {r} not strictly increasing")
        if np.any(data <= 0):
            raise ConfigError("nonzero values must be positive")
        csr = sp.csr_matrix((data, indices, indptr), shape=self.shape)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "_csr", csr)
        object.__setattr__(self, "_csr_t", csr.T.tocsr())

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> "SparseMat":
        m = sp.coo_matrix((values, (rows, cols)), shape=shape).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        m.eliminate_zeros()
        return cls(shape=tuple(shape), indptr=m.indptr, indices=m.indices, data=m.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMat":
        return cls(shape=(n, n), indptr=np.arange(n + 1), indices=np.arange(n), data=np.ones(n))

    @property
    def nnz(self) -> int:
        return len(self.data)

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def dot(self, b: np.ndarray) -> np.ndarray:
        out = self._csr @ b
        return out.astype(b.dtype, copy=False)

    def rdot(self, b: np.ndarray) -> np.ndarray:
        """Transposed product ``self.T @ b``."""
        out = self._csr_t @ b
        return out.astype(b.dtype, copy=False)


class Var:
    """A node on a tape: a value plus its provenance."""

    __slots__ = ("tape", "value", "requires_grad", "name", "_index")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", value: np.ndarray, requires_grad: bool,
                 name: str | None = None):
        self.tape = tape
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self._index = -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on non-scalar of shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Var(shape={self.shape}, grad={self.requires_grad}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


Backfn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self, dtype=np.float64, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._nodes: list[tuple[Var, tuple[Var, ...], Backfn]] = []
        self._leaves: dict[str, Var] = {}

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value, name: str | None = None) -> Var:
        """A trainable input; its gradient is reported by :meth:`backward`."""
        name = name or f"leaf{len(self._leaves)}"
        if name in self._leaves:
            raise ConfigError(f"duplicate leaf name {name!r}")
        v = Var(self, _as2d(value, self.dtype), True, name)
        self._leaves[name] = v
        return v

    def const(self, value) -> Var:
        return Var(self, _as2d(value, self.dtype), False)

    def record(self, value: np.ndarray, parents: tuple[Var, ...], backfn: Backfn) -> Var:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError("non-finite value produced on tape")
        needs = any(p.requires_grad for p in parents)
        out = Var(self, value, needs)
        if needs:
            out._index = len(self._nodes)
            self._nodes.append((out, parents, backfn))
        return out

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every leaf (zeros where unreached)."""
        if loss.tape is not self:
            raise ContractError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        out = {name: np.zeros_like(v.value) for name, v in self._leaves.items()}
        if not loss.requires_grad:
            return out
        leaf_ids = {id(v): name for name, v in self._leaves.items()}

        def push(var: Var, g: np.ndarray):
            if not var.requires_grad:
                return
            if var._index < 0:
                name = leaf_ids[id(var)]
                out[name] = out[name] + g
                return
            prev = grads.get(var._index)
            grads[var._index] = g if prev is None else prev + g

        if loss._index < 0:
            push(loss, np.ones_like(loss.value))
            return out
        grads[loss._index] = np.ones_like(loss.value)
        for k in range(loss._index, -1, -1):
            g = grads.pop(k, None)
            if g is None:
                continue
            _, parents, backfn = self._nodes[k]
            for p, gp in zip(parents, backfn(g)):
                if gp is not None:
                    push(p, gp)
        return out


def _as2d(value, dtype) -> np.ndarray:
    arr = np.array(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ConfigError(f"expected a 2-D array, got {arr.ndim}-D")
    return arr


def _same_shape(a: Var, b: Var, op: str):
    if a.shape != b.shape:
        raise ConfigError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("no Var among operands")


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Var:
    if not isinstance(b, Var):
        c = float(b)
        return a.tape.record(a.value + c, (a,), lambda g: (g,))
    if not isinstance(a, Var):
        return add(b, a)
    _same_shape(a, b, "add")
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    if not isinstance(b, Var):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return a.tape.record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a: Var) -> Var:
    y = np.exp(a.value)
    return a.tape.record(y, (a,), lambda g: (g * y,))


def log_eps(a: Var, eps: float = EPS_LOG) -> Var:
    """``log(a + eps)``; the floor keeps the log finite at zero."""
    shifted = a.value + eps
    return a.tape.record(np.log(shifted), (a,), lambda g: (g / shifted,))


def sigmoid(a: Var) -> Var:
    y = _sigmoid(a.value)
    return a.tape.record(y, (a,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a: Var) -> Var:
    x = a.value
    y = -np.logaddexp(0.0, -x)
    return a.tape.record(y, (a,), lambda g: (g * _sigmoid(-x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- shape / reduction -------------------------------------------------------

def transpose(a: Var) -> Var:
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,))


def total_sum(a: Var) -> Var:
    shape, dtype = a.shape, a.value.dtype
    return a.tape.record(np.sum(a.value, dtype=dtype).reshape(1, 1), (a,),
                         lambda g: (np.full(shape, g[0, 0], dtype=dtype),))


def mean(a: Var) -> Var:
    return scale(total_sum(a), 1.0 / a.value.size)


def row_sum(a: Var) -> Var:
    shape = a.shape
    return a.tape.record(a.value.sum(axis=1, keepdims=True), (a,),
                         lambda g: (np.broadcast_to(g, shape).copy(),))


def take_rows(a: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape.record(a.value[idx], (a,), back)


def pick(a: Var, cols) -> Var:
    """Column ``cols[r]`` of every row ``r``, as an (n, 1) column."""
    cols = np.asarray(cols, dtype=np.int64)
    n = a.shape[0]
    if cols.shape != (n,):
        raise ConfigError(f"pick: need {n} column ids, got {cols.shape}")
    rows = np.arange(n)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, cols] = g[:, 0]
        return (full,)

    return a.tape.record(a.value[rows, cols].reshape(n, 1), (a,), back)


def hstack(a: Var, b: Var) -> Var:
    if a.shape[0] != b.shape[0]:
        raise ConfigError(f"hstack: row mismatch {a.shape} vs {b.shape}")
    k = a.shape[1]
    return a.tape.record(np.hstack([a.value, b.value]), (a, b),
                         lambda g: (g[:, :k], g[:, k:]))


# --- matrix ------------------------------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def sp_dense_matmul(a: SparseMat, b: Var) -> Var:
    """``a @ b`` with ``a`` a constant sparse matrix."""
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"sp_dense_matmul: {a.shape} @ {b.shape}")
    return b.tape.record(a.dot(b.value), (b,), lambda g: (a.rdot(g),))


def row_softmax(x: Var, temperature: float = 1.0) -> Var:
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if x.shape[1] == 0:
        raise ConfigError("row_softmax over zero columns")
    z = x.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return ((g - (g * s).sum(axis=1, keepdims=True)) * s / temperature,)

    return x.tape.record(s, (x,), back)


def logsumexp_rows(x: Var) -> Var:
    xv = x.value
    m = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - m)
    tot = e.sum(axis=1, keepdims=True)
    y = m + np.log(tot)
    p = e / tot
    return x.tape.record(y, (x,), lambda g: (g * p,))


def normalize_rows(a: Var, eps: float = EPS_NORM) -> Var:
    """Rows scaled to unit length; norms are floored at ``eps``."""
    av = a.value
    raw = np.sqrt((av * av).sum(axis=1, keepdims=True))
    floored = raw <= eps
    n = np.where(floored, eps, raw)
    y = av / n

    def back(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        proj = np.where(floored, 0.0, proj)
        return ((g - y * proj) / n,)

    return a.tape.record(y, (a,), back)


def row_cosine(a: Var, b: Var, eps: float = EPS_NORM) -> Var:
    """All-pairs cosine similarity, shape (a.rows, b.rows)."""
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"row_cosine: {a.shape} vs {b.shape}")
    return matmul(normalize_rows(a, eps), transpose(normalize_rows(b, eps)))


def paired_cosine(a: Var, b: Var, eps: float = EPS_NORM) -> Var:
    """Cosine of row r of ``a`` with row r of ``b``, as an (n, 1) column."""
    _same_shape(a, b, "paired_cosine")
    return row_sum(mul(normalize_rows(a, eps), normalize_rows(b, eps)))


def matmul_xent_rows(a: Var, b: Var, pos_cols, scale_by: float = 1.0,
                     chunk: int = 1024) -> Var:
    """Per-row cross-entropy of ``scale_by * a @ b.T`` against column ``pos_cols[r]``.

    Same value as ``logsumexp_rows(L) - pick(L, pos_cols)`` but the logit
    matrix is only ever materialized ``chunk`` rows at a time, in forward and
    again in backward.
    """
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"matmul_xent_rows: {a.shape} vs {b.shape}")
    cols = np.asarray(pos_cols, dtype=np.int64)
    n = a.shape[0]
    if cols.shape != (n,):
        raise ConfigError(f"matmul_xent_rows: need {n} column ids, got {cols.shape}")
    if n and (cols.min() < 0 or cols.max() >= b.shape[0]):
        raise ConfigError("matmul_xent_rows: column id out of range")
    av, bv = a.value, b.value
    out = np.empty((n, 1), dtype=np.result_type(av, bv))

    pos = (av * bv[cols]).sum(axis=1, keepdims=True) * scale_by

    def shifted_exp(lo, hi):
        z = av[lo:hi] @ bv.T
        z *= scale_by
        m = z.max(axis=1, keepdims=True)
        z -= m
        np.exp(z, out=z)
        return z, m, z.sum(axis=1, keepdims=True)

    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        _, m, tot = shifted_exp(lo, hi)
        out[lo:hi] = m + np.log(tot) - pos[lo:hi]

    def back(g):
        ga = np.empty_like(av)
        gb = np.zeros_like(bv)
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            p, _, tot = shifted_exp(lo, hi)
            p /= tot
            p[np.arange(hi - lo), cols[lo:hi]] -= 1.0
            p *= g[lo:hi] * scale_by
            ga[lo:hi] = p @ bv
            gb += p.T @ av[lo:hi]
        return ga, gb

    return a.tape.record(out, (a, b), back)


def cosine_xent_rows(a: Var, b: Var, pos_cols, tau: float, eps: float = EPS_NORM,
                     chunk: int = 1024) -> Var:
    """Cross-entropy over cosine logits ``cos(a_r, b_j) / tau``, one row per anchor."""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    return matmul_xent_rows(normalize_rows(a, eps), normalize_rows(b, eps), pos_cols,
                            1.0 / tau, chunk)


__all__ = [
    "EPS_LOG", "EPS_NORM", "SparseMat", "Tape", "Var",
    "add", "sub", "mul", "scale", "square", "exp", "log_eps", "sigmoid", "log_sigmoid",
    "transpose", "total_sum", "mean", "row_sum", "take_rows", "pick", "hstack",
    "matmul", "sp_dense_matmul", "row_softmax", "logsumexp_rows", "normalize_rows",
    "row_cosine", "paired_cosine", "matmul_xent_rows", "cosine_xent_rows",
]
