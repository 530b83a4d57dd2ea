"""Gaussian Markov random field building blocks.

Precision matrices for the intrinsic CAR and first-order random-walk priors,
a sparse Cholesky factorization with a fill-reducing ordering, and
conditioning by kriging for linear equality constraints.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import _cholesky
from .errors import ConstraintError, DataError, GraphError, NotPositiveDefiniteError


@dataclass(frozen=True, eq=False)
class SparseSymmetric:
    """Symmetric matrix stored as its upper triangle in coordinate form."""

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows, cols and vals must have equal length")
        if np.any(rows > cols):
            raise ValueError("only upper-triangle entries (row <= col) may be stored")
        if rows.size and (rows.min() < 0 or cols.max() >= self.dim):
            raise ValueError("entry index out of range")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite matrix entry")
        # canonical form: column-major order, duplicates summed, zeros dropped
        key = cols * self.dim + rows
        order = np.argsort(key, kind="stable")
        key, vals = key[order], vals[order]
        uniq, start = np.unique(key, return_index=True)
        vals = np.add.reduceat(vals, start) if vals.size else vals
        keep = vals != 0.0
        uniq, vals = uniq[keep], vals[keep]
        object.__setattr__(self, "rows", uniq % self.dim)
        object.__setattr__(self, "cols", uniq // self.dim)
        object.__setattr__(self, "vals", vals)
        for arr in (self.rows, self.cols, self.vals):
            arr.flags.writeable = False

    @classmethod
    def from_matrix(cls, matrix) -> "SparseSymmetric":
        """Build from a dense array or scipy sparse matrix (upper part is read)."""
        m = sp.coo_matrix(matrix)
        if m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        upper = m.row <= m.col
        return cls(m.shape[0], m.row[upper], m.col[upper], m.data[upper])

    @classmethod
    def diagonal(cls, values) -> "SparseSymmetric":
        values = np.asarray(values, dtype=np.float64)
        idx = np.arange(values.size)
        return cls(values.size, idx, idx, values)

    @property
    def nnz(self):
        return self.vals.size

    def to_csc(self) -> sp.csc_matrix:
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.vals, self.vals[off]])
        out = sp.csc_matrix((v, (r, c)), shape=(self.dim, self.dim))
        out.sort_indices()
        return out

    def to_dense(self) -> np.ndarray:
        return self.to_csc().toarray()

    def scaled(self, factor: float) -> "SparseSymmetric":
        return SparseSymmetric(self.dim, self.rows, self.cols, self.vals * factor)

    def __add__(self, other: "SparseSymmetric") -> "SparseSymmetric":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return SparseSymmetric(
            self.dim,
            np.concatenate([self.rows, other.rows]),
            np.concatenate([self.cols, other.cols]),
            np.concatenate([self.vals, other.vals]),
        )

    def matvec(self, x):
        return self.to_csc() @ np.asarray(x, dtype=np.float64)

    def quadratic_form(self, x):
        x = np.asarray(x, dtype=np.float64)
        off = self.rows != self.cols
        diag = np.sum(self.vals[~off] * x[self.rows[~off]] ** 2)
        return diag + 2.0 * np.sum(self.vals[off] * x[self.rows[off]] * x[self.cols[off]])


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Undirected neighbourhood structure over areal units."""

    n_units: int
    neighbors: tuple

    def __post_init__(self):
        if self.n_units < 1:
            raise GraphError("graph needs at least one unit")
        if len(self.neighbors) != self.n_units:
            raise GraphError("one neighbour list per unit required")
        nb = tuple(tuple(int(m) for m in lst) for lst in self.neighbors)
        for ell, lst in enumerate(nb):
            if list(lst) != sorted(set(lst)):
                raise GraphError(f"neighbours of unit {ell} must be sorted and distinct")
            for m in lst:
                if m == ell:
                    raise GraphError(f"self-loop at unit {ell}")
                if not 0 <= m < self.n_units:
                    raise GraphError(f"neighbour index {m} out of range")
        for ell, lst in enumerate(nb):
            for m in lst:
                if ell not in nb[m]:
                    raise GraphError(f"asymmetric adjacency between units {ell} and {m}")
        object.__setattr__(self, "neighbors", nb)

    @classmethod
    def from_edges(cls, n_units: int, edges) -> "AdjacencyGraph":
        sets = [set() for _ in range(n_units)]
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise GraphError(f"self-loop at unit {a}")
            if not (0 <= a < n_units and 0 <= b < n_units):
                raise GraphError(f"edge ({a}, {b}) references an unknown unit")
            sets[a].add(b)
            sets[b].add(a)
        return cls(n_units, tuple(tuple(sorted(s)) for s in sets))

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(lst) for lst in self.neighbors], dtype=np.int64)

    def edges(self):
        return [(a, b) for a, lst in enumerate(self.neighbors) for b in lst if a < b]

    def adjacency_matrix(self) -> sp.csr_matrix:
        e = np.array(self.edges(), dtype=np.int64).reshape(-1, 2)
        r = np.concatenate([e[:, 0], e[:, 1]])
        c = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((np.ones(r.size), (r, c)), shape=(self.n_units, self.n_units))

    @cached_property
    def components(self) -> np.ndarray:
        """Connected-component label per unit."""
        _, labels = connected_components(self.adjacency_matrix(), directed=False)
        return labels

    @property
    def n_components(self) -> int:
        return int(self.components.max()) + 1


def load_adjacency(path, n_units=None) -> AdjacencyGraph:
    """Read a ``unit_id,neighbor_id`` edge list; edges may be listed once."""
    edges = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["unit_id", "neighbor_id"]:
            raise DataError(f"{path}: expected header 'unit_id,neighbor_id'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                a, b = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise DataError(f"{path}: line {lineno}: malformed edge {row!r}") from None
            edges.append((a, b))
    if n_units is None:
        n_units = 1 + max((max(a, b) for a, b in edges), default=-1)
    return AdjacencyGraph.from_edges(n_units, edges)


def save_adjacency(graph: AdjacencyGraph, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "neighbor_id"])
        w.writerows(graph.edges())


def build_car_precision(graph: AdjacencyGraph, tau: float) -> SparseSymmetric:
    """Intrinsic CAR precision tau * (D - A); each unit is Gaussian around
    the mean of its neighbours with variance 1 / (n_l * tau)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    deg = graph.degrees
    if np.any(deg == 0):
        ell = int(np.flatnonzero(deg == 0)[0])
        raise GraphError(f"unit with no neighbors: {ell}")
    e = np.array(graph.edges(), dtype=np.int64).reshape(-1, 2)
    idx = np.arange(graph.n_units)
    rows = np.concatenate([idx, e[:, 0]])
    cols = np.concatenate([idx, e[:, 1]])
    vals = np.concatenate([tau * deg.astype(float), np.full(len(e), -tau)])
    return SparseSymmetric(graph.n_units, rows, cols, vals)


def build_rw1_precision(n_bins: int, tau: float, cyclic: bool = False) -> SparseSymmetric:
    """First-order random walk precision; the cyclic variant wraps bin n-1 to 0."""
    if n_bins < 2:
        raise ValueError("degenerate random walk: need at least 2 bins")
    if cyclic and n_bins < 3:
        raise ValueError("degenerate random walk: cyclic walk needs at least 3 bins")
    if not tau > 0:
        raise ValueError("tau must be positive")
    idx = np.arange(n_bins)
    if cyclic:
        diag = np.full(n_bins, 2.0 * tau)
        rows = np.concatenate([idx, idx[:-1], [0]])
        cols = np.concatenate([idx, idx[1:], [n_bins - 1]])
    else:
        diag = np.full(n_bins, 2.0 * tau)
        diag[0] = diag[-1] = tau
        rows = np.concatenate([idx, idx[:-1]])
        cols = np.concatenate([idx, idx[1:]])
    vals = np.concatenate([diag, np.full(rows.size - n_bins, -tau)])
    return SparseSymmetric(n_bins, rows, cols, vals)


class Symbolic:
    """Ordering and factor structure for one sparsity pattern.

    Reused for every matrix whose pattern is contained in the analysed one,
    so the ordering is computed once per model rather than once per tau.
    """

    def __init__(self, pattern, ordering="minimum_degree"):
        if isinstance(pattern, SparseSymmetric):
            pattern = pattern.to_csc()
        a = sp.csc_matrix(pattern, dtype=np.float64)
        n = a.shape[0]
        if a.shape != (n, n):
            raise ValueError("pattern must be square")
        a = abs(a) + abs(a.T) + sp.identity(n, format="csc")
        a = sp.csc_matrix(a)
        a.sort_indices()
        if ordering == "minimum_degree":
            perm = _cholesky.minimum_degree(a.indptr, a.indices, n)
        elif ordering == "natural":
            perm = np.arange(n, dtype=np.int64)
        else:
            raise ValueError(f"unknown ordering {ordering!r}")
        iperm = np.empty(n, dtype=np.int64)
        iperm[perm] = np.arange(n)
        ap = a[perm][:, perm].tocsc()
        ap.sort_indices()
        Ap = ap.indptr.astype(np.int64)
        Ai = ap.indices.astype(np.int64)
        parent = _cholesky.etree(n, Ap, Ai)
        Lp, Li, Rp, Rcol, Rpos = _cholesky.symbolic(n, Ap, Ai, parent)
        self.n = n
        self.perm = perm
        self.iperm = iperm
        self.parent = parent
        self.Lp, self.Li, self.Rp, self.Rcol, self.Rpos = Lp, Li, Rp, Rcol, Rpos
        col_of = np.repeat(np.arange(n, dtype=np.int64), np.diff(Lp))
        self._col_of = col_of
        self._keys = col_of * n + Li

    @property
    def nnz(self):
        return int(self.Lp[-1])

    def scatter(self, matrix) -> np.ndarray:
        """Lower-triangle values of the permuted matrix laid out like L."""
        if isinstance(matrix, SparseSymmetric):
            m = matrix.to_csc().tocoo()
        else:
            m = sp.coo_matrix(matrix)
        pr = self.iperm[m.row]
        pc = self.iperm[m.col]
        lower = pr >= pc
        keys = pc[lower] * self.n + pr[lower]
        slots = np.searchsorted(self._keys, keys)
        slots = np.minimum(slots, self._keys.size - 1)
        if np.any(self._keys[slots] != keys):
            raise ValueError("matrix has entries outside the analysed pattern")
        out = np.zeros(self.nnz)
        np.add.at(out, slots, m.data[lower])
        return out

    @cached_property
    def full_pattern(self):
        """CSC structure (original ordering) of L + L' and the source index
        of each entry in the lower-triangular value array."""
        rows = self.perm[self.Li]
        cols = self.perm[self._col_of]
        src = np.arange(self.nnz)
        off = self.Li != self._col_of
        r = np.concatenate([rows, cols[off]])
        c = np.concatenate([cols, rows[off]])
        s = np.concatenate([src, src[off]])
        order = np.lexsort((r, c))
        r, c, s = r[order], c[order], s[order]
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(c, minlength=self.n), out=indptr[1:])
        return indptr, r, s


_symbolic_cache: dict = {}
_symbolic_lock = threading.Lock()


def analyze(pattern) -> Symbolic:
    """Symbolic analysis, memoised on the sparsity pattern."""
    if isinstance(pattern, SparseSymmetric):
        pattern = pattern.to_csc()
    a = sp.csc_matrix(pattern)
    a.sort_indices()
    key = (a.shape[0], a.indptr.tobytes(), a.indices.tobytes())
    with _symbolic_lock:
        sym = _symbolic_cache.get(key)
    if sym is None:
        sym = Symbolic(a)
        with _symbolic_lock:
            if len(_symbolic_cache) > 64:
                _symbolic_cache.clear()
            _symbolic_cache[key] = sym
    return sym


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """P Q P' = L L' for the fill-reducing permutation P."""

    symbolic: Symbolic
    values: np.ndarray
    log_determinant: float
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self):
        return self.symbolic.n

    @property
    def permutation(self):
        return self.symbolic.perm

    @property
    def L(self) -> sp.csc_matrix:
        s = self.symbolic
        return sp.csc_matrix((self.values, s.Li, s.Lp), shape=(s.n, s.n))

    def _as_2d(self, b):
        b = np.asarray(b, dtype=np.float64)
        return (b[:, None], True) if b.ndim == 1 else (b, False)

    def solve(self, b) -> np.ndarray:
        """Solve Q x = b for a vector or a matrix of right-hand sides."""
        s = self.symbolic
        b2, flat = self._as_2d(b)
        y = _cholesky.solve_lower(s.n, s.Lp, s.Li, self.values, np.ascontiguousarray(b2[s.perm]))
        z = _cholesky.solve_upper(s.n, s.Lp, s.Li, self.values, y)
        x = np.empty_like(z)
        x[s.perm] = z
        return x[:, 0] if flat else x

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draws from N(0, Q^{-1})."""
        s = self.symbolic
        m = 1 if size is None else int(size)
        z = rng.standard_normal((s.n, m))
        y = _cholesky.solve_upper(s.n, s.Lp, s.Li, self.values, z)
        x = np.empty_like(y)
        x[s.perm] = y
        return x[:, 0] if size is None else x.T

    def selected_inverse(self) -> np.ndarray:
        """Entries of Q^{-1} on the factor pattern, aligned with
        ``symbolic.full_pattern`` (original ordering, both triangles)."""
        if "sinv" not in self._cache:
            s = self.symbolic
            lower = _cholesky.selected_inverse(s.n, s.Lp, s.Li, self.values)
            _, _, src = s.full_pattern
            self._cache["sinv"] = lower[src]
        return self._cache["sinv"]

    def inverse_diagonal(self) -> np.ndarray:
        s = self.symbolic
        lower = _cholesky.selected_inverse(s.n, s.Lp, s.Li, self.values)
        out = np.empty(s.n)
        out[s.perm] = lower[s.Lp[:-1]]
        return out


def factorize(Q, symbolic: Symbolic | None = None) -> CholeskyFactor:
    """Sparse Cholesky factorization of a symmetric positive definite matrix."""
    if symbolic is None:
        symbolic = analyze(Q)
    s = symbolic
    values = s.scatter(Q)
    pivot = _cholesky.numeric(s.n, s.Lp, s.Li, s.Rp, s.Rcol, s.Rpos, values)
    if pivot >= 0:
        raise NotPositiveDefiniteError(pivot, s.perm[pivot], values[s.Lp[pivot]])
    logdet = 2.0 * float(np.sum(np.log(values[s.Lp[:-1]])))
    return CholeskyFactor(s, values, logdet)


@dataclass(frozen=True, eq=False)
class LinearConstraint:
    """Equality constraints ``matrix @ x == rhs`` with independent rows."""

    matrix: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        e = np.asarray(self.rhs, dtype=np.float64).reshape(-1)
        if a.shape[0] != e.size:
            raise ValueError("one right-hand value per constraint row")
        if a.shape[0] and np.linalg.matrix_rank(a) < a.shape[0]:
            raise ConstraintError("redundant constraints: rows are linearly dependent")
        a.flags.writeable = False
        e.flags.writeable = False
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "rhs", e)

    @classmethod
    def from_rows(cls, dim, rows) -> "LinearConstraint":
        rows = list(rows)
        if not rows:
            return cls.empty(dim)
        return cls(np.array([r[0] for r in rows], dtype=float), np.array([r[1] for r in rows], dtype=float))

    @classmethod
    def empty(cls, dim) -> "LinearConstraint":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    def residual(self, x):
        return self.matrix @ x - self.rhs


def kriging_terms(factor: CholeskyFactor, constraint: LinearConstraint):
    """Return (V, M) with V = Q^{-1} A' and M = A Q^{-1} A'."""
    a = constraint.matrix
    v = factor.solve(a.T)
    m = a @ v
    m = 0.5 * (m + m.T)
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise ConstraintError("redundant constraints: A Q^-1 A' is singular") from None
    if np.linalg.cond(m) > 1e14:
        raise ConstraintError("redundant constraints: A Q^-1 A' is numerically singular")
    return v, m


def constrain_mean(mean, factor: CholeskyFactor, constraint: LinearConstraint) -> np.ndarray:
    """Correct ``mean`` of N(mean, Q^{-1}) to the constrained conditional mean."""
    x = np.array(mean, dtype=np.float64)
    if constraint.n_rows == 0:
        return x
    v, m = kriging_terms(factor, constraint)
    scale = 1.0 + np.max(np.abs(constraint.rhs), initial=0.0) + np.max(np.abs(x), initial=0.0)
    for _ in range(3):
        r = constraint.residual(x)
        if np.max(np.abs(r)) <= 1e-14 * scale:
            break
        x = x - v @ np.linalg.solve(m, r)
    return x
