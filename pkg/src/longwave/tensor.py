"""Symmetric tensors over R^d stored by their distinct entries.

A tensor of order ``n`` in ``Sym^n(R^d)`` is kept as a flat array indexed by
the non-decreasing multi-indices ``1 <= i_1 <= ... <= i_n <= d`` in
lexicographic order.  The same layout is used for tensor-valued grid fields
(correctors): the leading axis runs over canonical multi-indices and any
trailing axes hold the field values.

Axes are 1-based everywhere in this module, as in the text format.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

MultiIndex = tuple[int, ...]

#: default relative tolerance of :func:`sym_equal`
SYM_TOL = 1e-10


def n_distinct(d: int, n: int) -> int:
    """Number of distinct entries N(d, n) of a symmetric order-n tensor."""
    return math.comb(d + n - 1, n)


@lru_cache(maxsize=None)
def _index_set(d: int, n: int) -> tuple[MultiIndex, ...]:
    if d < 1 or n < 0:
        raise ValueError(f"invalid tensor shape d={d}, n={n}")
    return tuple(itertools.combinations_with_replacement(range(1, d + 1), n))


@lru_cache(maxsize=None)
def _positions(d: int, n: int) -> dict[MultiIndex, int]:
    return {idx: pos for pos, idx in enumerate(_index_set(d, n))}


@lru_cache(maxsize=None)
def _index_array(d: int, n: int) -> np.ndarray:
    """Canonical indices as a 0-based integer array of shape (N, n)."""
    return np.array(_index_set(d, n), dtype=np.intp).reshape(-1, n) - 1


def multi_index_set(d: int, n: int) -> list[MultiIndex]:
    """All non-decreasing n-tuples over 1..d in lexicographic order."""
    return list(_index_set(d, n))


def canonical(idx: Sequence[int]) -> MultiIndex:
    return tuple(sorted(idx))


def position(d: int, idx: Sequence[int]) -> int:
    """Position of (the canonicalization of) ``idx`` in the storage layout."""
    return _positions(d, len(idx))[canonical(idx)]


def multiplicity(idx: Sequence[int], n: int | None = None) -> int:
    """Number of raw multi-indices equal to ``idx`` up to permutation."""
    if n is not None and n != len(idx):
        raise ValueError("multi-index length does not match the order")
    out = math.factorial(len(idx))
    for count in Counter(idx).values():
        out //= math.factorial(count)
    return out


@lru_cache(maxsize=None)
def _multiplicities(d: int, n: int) -> np.ndarray:
    return np.array([multiplicity(i) for i in _index_set(d, n)], dtype=float)


def _remove(idx: MultiIndex, sub: MultiIndex) -> MultiIndex:
    rest = Counter(idx)
    rest.subtract(sub)
    return tuple(sorted(rest.elements()))


def _splits(idx: MultiIndex, orders: tuple[int, ...]):
    if len(orders) == 1:
        yield (idx,)
        return
    for sub in sorted(set(itertools.combinations(idx, orders[0]))):
        for tail in _splits(_remove(idx, sub), orders[1:]):
            yield (sub,) + tail


@lru_cache(maxsize=None)
def _split_table(d: int, orders: tuple[int, ...]):
    """Terms of the full symmetrization of a block-symmetric tensor.

    For a tensor ``T`` that is symmetric inside each block of sizes ``orders``,
    ``S(T)_I = sum_w w * T[J_1, ..., J_m]`` where ``(J_1, ..., J_m)`` runs over
    the ordered splittings of the multiset ``I`` and
    ``w = prod z(J_k) / z(I)``.  Returns the output positions (sorted), the
    block positions and the weights; ``starts`` delimits the output groups.
    """
    n = sum(orders)
    out, w = [], []
    parts: list[list[int]] = [[] for _ in orders]
    for pos, idx in enumerate(_index_set(d, n)):
        z_out = multiplicity(idx)
        for blocks in _splits(idx, orders):
            out.append(pos)
            w.append(math.prod(multiplicity(b) for b in blocks) / z_out)
            for k, b in enumerate(blocks):
                parts[k].append(_positions(d, len(b))[b])
    out_arr = np.array(out, dtype=np.intp)
    starts = np.flatnonzero(np.r_[True, out_arr[1:] != out_arr[:-1]])
    return out_arr, tuple(np.array(p, dtype=np.intp) for p in parts), np.array(w), starts


def _as_blocks(arr: np.ndarray, ndim: int) -> np.ndarray:
    # pad trailing axes so scalar tensors broadcast against field tensors
    return arr.reshape(arr.shape + (1,) * (ndim - arr.ndim))


def sym_outer(factors: Sequence[np.ndarray], orders: Sequence[int], d: int) -> np.ndarray:
    """Canonical entries of ``S(f_1 ⊗ ... ⊗ f_m)``.

    Each factor is an array whose leading axis holds the canonical entries of
    a symmetric tensor of the matching order; trailing axes (grid values) are
    broadcast and carried through.
    """
    orders = tuple(int(o) for o in orders)
    if len(factors) != len(orders):
        raise ValueError("one order per factor is required")
    for f, o in zip(factors, orders):
        if f.shape[0] != n_distinct(d, o):
            raise ValueError(f"factor of order {o} has {f.shape[0]} entries")
    out_idx, parts, w, starts = _split_table(d, orders)
    ndim = max(f.ndim for f in factors)
    terms = _as_blocks(w, ndim)
    for f, p in zip(factors, parts):
        terms = terms * _as_blocks(f, ndim)[p]
    return np.add.reduceat(terms, starts, axis=0)


def symmetrize_blocks(T: np.ndarray, orders: Sequence[int], d: int) -> np.ndarray:
    """Full symmetrization of a tensor that is symmetric inside each block.

    ``T`` has one leading axis per block (canonical positions of that block)
    followed by optional trailing field axes.
    """
    orders = tuple(int(o) for o in orders)
    out_idx, parts, w, starts = _split_table(d, orders)
    rest = T.ndim - len(orders)
    terms = w.reshape(w.shape + (1,) * rest) * T[parts]
    return np.add.reduceat(terms, starts, axis=0)


@lru_cache(maxsize=None)
def _full_map(d: int, n: int) -> np.ndarray:
    """Storage position of every raw index, as an array of shape (d,)*n."""
    if n == 0:
        return np.zeros((), dtype=np.intp)
    raw = np.indices((d,) * n).reshape(n, -1).T + 1
    pos = _positions(d, n)
    flat = np.array([pos[tuple(sorted(r))] for r in raw], dtype=np.intp)
    return flat.reshape((d,) * n)


@lru_cache(maxsize=None)
def _merge_table(d: int, n: int) -> np.ndarray:
    """Position of sorted(I + J) in Sym^{2n} for every pair I, J in Sym^n."""
    idx = _index_set(d, n)
    pos = _positions(d, 2 * n)
    return np.array([[pos[tuple(sorted(i + j))] for j in idx] for i in idx], dtype=np.intp)


@dataclass(frozen=True, eq=False)
class SymTensor:
    """Real symmetric tensor of order ``order`` over R^``dim``."""

    dim: int
    order: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.size != n_distinct(self.dim, self.order):
            raise ValueError(
                f"expected {n_distinct(self.dim, self.order)} values for "
                f"d={self.dim}, n={self.order}, got {vals.size}"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SymTensor):
            return NotImplemented
        return (self.dim, self.order) == (other.dim, other.order) and np.array_equal(self.values, other.values)

    __hash__ = None

    @classmethod
    def zeros(cls, dim: int, order: int) -> "SymTensor":
        return cls(dim, order, np.zeros(n_distinct(dim, order)))

    @classmethod
    def scalar(cls, dim: int, value: float) -> "SymTensor":
        return cls(dim, 0, np.array([value]))

    @classmethod
    def from_matrix(cls, mat) -> "SymTensor":
        """Order-2 tensor from a symmetric matrix (symmetrized on the way in)."""
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        return symmetrize(mat)

    @classmethod
    def from_entries(cls, dim: int, order: int, entries: dict) -> "SymTensor":
        vals = np.zeros(n_distinct(dim, order))
        for idx, v in entries.items():
            vals[position(dim, idx)] = v
        return cls(dim, order, vals)

    def __getitem__(self, idx) -> float:
        if isinstance(idx, int):
            idx = (idx,)
        if len(idx) != self.order:
            raise IndexError(f"order-{self.order} tensor indexed with {len(idx)} axes")
        return float(self.values[position(self.dim, idx)])

    def items(self):
        return zip(_index_set(self.dim, self.order), self.values)

    def to_full(self) -> np.ndarray:
        """Dense array of shape (d,)*n."""
        return self.values[_full_map(self.dim, self.order)]

    def to_matrix(self) -> np.ndarray:
        if self.order != 2:
            raise ValueError("only order-2 tensors convert to matrices")
        return self.to_full()

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def _check(self, other: "SymTensor"):
        if (self.dim, self.order) != (other.dim, other.order):
            raise ValueError(
                f"shape mismatch: (d={self.dim}, n={self.order}) vs "
                f"(d={other.dim}, n={other.order})"
            )

    def __add__(self, other: "SymTensor") -> "SymTensor":
        self._check(other)
        return SymTensor(self.dim, self.order, self.values + other.values)

    def __sub__(self, other: "SymTensor") -> "SymTensor":
        self._check(other)
        return SymTensor(self.dim, self.order, self.values - other.values)

    def __neg__(self) -> "SymTensor":
        return SymTensor(self.dim, self.order, -self.values)

    def __mul__(self, c: float) -> "SymTensor":
        return SymTensor(self.dim, self.order, float(c) * self.values)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"SymTensor(d={self.dim}, n={self.order}, values={self.values!r})"


def identity(d: int) -> SymTensor:
    return SymTensor.from_matrix(np.eye(d))


def symmetrize(T: np.ndarray | Callable[[MultiIndex], float], d: int | None = None,
               n: int | None = None) -> SymTensor:
    """Full symmetrization S^n of a (not necessarily symmetric) tensor.

    ``T`` is either a dense array of shape (d,)*n or a function of a 1-based
    raw multi-index; in the latter case ``d`` and ``n`` are required.
    """
    if callable(T):
        if d is None or n is None:
            raise ValueError("d and n are required for a callable tensor")
        lookup = lambda raw: T(tuple(raw))  # noqa: E731
    else:
        T = np.asarray(T, dtype=float)
        n = T.ndim
        d = T.shape[0] if n else (d or 1)
        if any(s != d for s in T.shape):
            raise ValueError("tensor must have equal extents on every axis")
        lookup = lambda raw: T[tuple(i - 1 for i in raw)]  # noqa: E731
    vals = np.empty(n_distinct(d, n))
    for pos, idx in enumerate(_index_set(d, n)):
        arrangements = set(itertools.permutations(idx))
        vals[pos] = sum(lookup(p) for p in arrangements) / len(arrangements)
    return SymTensor(d, n, vals)


def sym_equal(p: SymTensor, q: SymTensor, tol: float = SYM_TOL) -> bool:
    """Equality up to symmetries, relative to the larger entry."""
    p._check(q)
    scale = 1.0 + max(p.max_abs(), q.max_abs())
    return bool(np.max(np.abs(p.values - q.values)) <= tol * scale)


def tensor_product(p: SymTensor, q: SymTensor) -> SymTensor:
    """Symmetrized tensor product S^{m+n}(p ⊗ q)."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    vals = sym_outer([p.values, q.values], (p.order, q.order), p.dim)
    return SymTensor(p.dim, p.order + q.order, vals)


def sym_power(q: SymTensor, s: int) -> SymTensor:
    """S(q ⊗ ... ⊗ q) with ``s`` factors."""
    if s < 1:
        raise ValueError("sym_power needs s >= 1")
    out = q
    for _ in range(s - 1):
        out = tensor_product(out, q)
    return out


def quadratic_form(q: SymTensor, xi: SymTensor) -> float:
    """``q xi : xi`` summed over all raw indices."""
    if q.order != 2 * xi.order:
        raise ValueError(f"order mismatch: q has order {q.order}, xi has order {xi.order}")
    if q.dim != xi.dim:
        raise ValueError("dimension mismatch")
    m = xi.dim ** xi.order
    qf = q.to_full().reshape(m, m)
    x = xi.to_full().reshape(m)
    return float(x @ qf @ x)


def contract_kpow(q: SymTensor, k) -> np.ndarray | float:
    """``q : k ⊗ ... ⊗ k``; ``k`` may be a stack of vectors (last axis = d)."""
    k = np.asarray(k, dtype=float)
    if k.shape[-1] != q.dim:
        raise ValueError(f"wave vector has {k.shape[-1]} components, tensor has d={q.dim}")
    z = _multiplicities(q.dim, q.order)
    out = np.zeros(k.shape[:-1])
    for c, val, idx in zip(z, q.values, _index_array(q.dim, q.order)):
        if val == 0.0:
            continue
        term = c * val
        for axis in idx:
            term = term * k[..., axis]
        out = out + term
    return float(out) if out.ndim == 0 else out


def nu(xi: SymTensor) -> np.ndarray:
    """Vector of distinct entries in the lexicographic order used by matricize."""
    return np.array(xi.values)


def matricize(q: SymTensor) -> np.ndarray:
    """Symmetric N(d,n) x N(d,n) matrix with ``q xi:xi = M nu(xi).nu(xi)``."""
    if q.order % 2:
        raise ValueError(f"matricize needs an even order, got {q.order}")
    n = q.order // 2
    z = _multiplicities(q.dim, n)
    return np.outer(z, z) * q.values[_merge_table(q.dim, n)]


def min_eigenvalue(M: np.ndarray) -> float:
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return float(np.linalg.eigvalsh(M)[0])


def is_psd(q: SymTensor, tol: float = 1e-12) -> bool:
    return min_eigenvalue(matricize(q)) >= -tol


# text serialization --------------------------------------------------------

def dumps(t: SymTensor) -> str:
    lines = [f"symtensor d={t.dim} n={t.order}"]
    for idx, v in t.items():
        lines.append(" ".join([*(str(i) for i in idx), f"{v:.17g}"]))
    return "\n".join(lines) + "\n"


def _parse_header(line: str, tag: str) -> dict[str, str]:
    fields = line.split()
    if not fields or fields[0] != tag:
        raise ValueError(f"expected a '{tag}' header, got {line!r}")
    return dict(f.split("=", 1) for f in fields[1:])


def loads(text: str) -> SymTensor:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = _parse_header(lines[0], "symtensor")
    d, n = int(head["d"]), int(head["n"])
    entries = {}
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != n + 1:
            raise ValueError(f"bad symtensor line {ln!r}")
        entries[tuple(int(p) for p in parts[:n])] = float(parts[n])
    if len(entries) != n_distinct(d, n):
        raise ValueError(f"symtensor block has {len(entries)} entries, expected {n_distinct(d, n)}")
    return SymTensor.from_entries(d, n, entries)
