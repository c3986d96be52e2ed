"""Operator-splitting solver for small semidefinite programs.

Problems are posed as::

    minimize    1/2 x'Px + q'x
    subject to  Ax + s = b,   s in K

where ``K`` is a product of zero, nonnegative, box, real PSD and Hermitian
PSD cones. PSD slacks are stored in scaled half-vectorized form so that the
Euclidean inner product of two slacks equals the trace inner product of the
matrices. The iteration is the conic ADMM of Garstka, Cannon & Goulart
(COSMO) with over-relaxation and residual-balancing penalty updates.

Expressions are built with :class:`VecExpr` (real vectors) and
:class:`MatExpr` (square Hermitian or symmetric matrices), both affine in the
program's named variables.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
PROGRAM_SCHEMA = "cohmeter.cone-program/1"

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible-suspected"


# --------------------------------------------------------------------------
# Vectorization helpers
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _triu_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(n, 1)
    return i, j


def hvec(h: np.ndarray) -> np.ndarray:
    """Scaled half-vectorization of a Hermitian matrix (length n^2)."""
    h = np.asarray(h)
    n = h.shape[0]
    i, j = _triu_pairs(n)
    upper = (h[i, j] + np.conj(h[j, i])) / 2
    return np.concatenate([np.real(np.diagonal(h)), SQRT2 * upper.real, SQRT2 * upper.imag])


def unhvec(v: np.ndarray, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    i, j = _triu_pairs(n)
    m = len(i)
    out = np.zeros((n, n), dtype=complex)
    out[np.arange(n), np.arange(n)] = v[:n]
    off = (v[n : n + m] + 1j * v[n + m :]) / SQRT2
    out[i, j] = off
    out[j, i] = np.conj(off)
    return out


def svec(s: np.ndarray) -> np.ndarray:
    """Scaled half-vectorization of a real symmetric matrix (length n(n+1)/2)."""
    s = np.asarray(s, dtype=float)
    n = s.shape[0]
    i, j = _triu_pairs(n)
    return np.concatenate([np.diagonal(s), SQRT2 * (s[i, j] + s[j, i]) / 2])


def unsvec(v: np.ndarray, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    i, j = _triu_pairs(n)
    out = np.zeros((n, n))
    out[np.arange(n), np.arange(n)] = v[:n]
    out[i, j] = v[n:] / SQRT2
    out[j, i] = v[n:] / SQRT2
    return out


def svec_size_to_n(size: int) -> int:
    n = int(round((math.sqrt(8 * size + 1) - 1) / 2))
    if n * (n + 1) // 2 != size:
        raise ValueError(f"{size} is not a triangular number")
    return n


def embed_hermitian(h: np.ndarray) -> np.ndarray:
    """Real symmetric embedding ``[[Re H, -Im H], [Im H, Re H]]``.

    ``H >= 0`` iff the embedding is PSD; every eigenvalue of ``H`` appears
    twice in the embedding.
    """
    h = np.asarray(h, dtype=complex)
    if not np.allclose(h, h.conj().T, rtol=0, atol=1e-10 * max(1.0, np.abs(h).max(initial=0))):
        raise ValueError("matrix is not Hermitian")
    re, im = h.real, h.imag
    return np.block([[re, -im], [im, re]])


def project_psd(block: np.ndarray) -> np.ndarray:
    """Frobenius-nearest PSD matrix, by clipping negative eigenvalues."""
    a = np.asarray(block)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.conj().T).max(initial=0.0) > 1e-10 * scale:
        raise ValueError("block is not symmetric/Hermitian")
    a = (a + a.conj().T) / 2
    w, v = np.linalg.eigh(a)
    if w[0] >= 0:
        return a
    w = np.maximum(w, 0.0)
    return (v * w) @ v.conj().T


# --------------------------------------------------------------------------
# Affine expressions
# --------------------------------------------------------------------------


# scipy's .real/.imag share index arrays with the parent, and some methods
# canonicalize them in place; build independent copies instead.
def _re(m) -> sp.csr_matrix:
    m = sp.csr_matrix(m)
    return sp.csr_matrix((m.data.real.copy(), m.indices.copy(), m.indptr.copy()), shape=m.shape)


def _im(m) -> sp.csr_matrix:
    m = sp.csr_matrix(m)
    return sp.csr_matrix((m.data.imag.copy(), m.indices.copy(), m.indptr.copy()), shape=m.shape)


def _merge(a: dict, b: dict, sign: float = 1.0) -> dict:
    out = dict(a)
    for k, m in b.items():
        out[k] = out[k] + sign * m if k in out else sign * m
    return out


class VecExpr:
    """Affine real vector ``sum_v M_v x_v + c``."""

    __array_ufunc__ = None

    def __init__(self, terms: dict, const):
        self.terms = {k: sp.csr_matrix(m) for k, m in terms.items()}
        self.const = np.atleast_1d(np.asarray(const, dtype=float))

    @property
    def size(self) -> int:
        return self.const.shape[0]

    @classmethod
    def constant(cls, values) -> "VecExpr":
        return cls({}, np.atleast_1d(np.asarray(values, dtype=float)))

    def _coerce(self, other) -> "VecExpr":
        if isinstance(other, VecExpr):
            return other
        return VecExpr.constant(np.broadcast_to(np.asarray(other, float), (self.size,)))

    def __add__(self, other):
        other = self._coerce(other)
        if other.size != self.size:
            raise ValueError(f"size mismatch {self.size} vs {other.size}")
        return VecExpr(_merge(self.terms, other.terms), self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return VecExpr({k: -m for k, m in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, c):
        c = float(c)
        return VecExpr({k: c * m for k, m in self.terms.items()}, c * self.const)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def __rmatmul__(self, mat):
        return self.left_multiply(mat)

    def left_multiply(self, mat) -> "VecExpr":
        mat = sp.csr_matrix(mat)
        return VecExpr({k: mat @ m for k, m in self.terms.items()}, mat @ self.const)

    def __getitem__(self, idx):
        rows = np.arange(self.size)[idx]
        rows = np.atleast_1d(rows)
        return VecExpr({k: m[rows] for k, m in self.terms.items()}, self.const[rows])

    def sum(self) -> "VecExpr":
        return self.left_multiply(np.ones((1, self.size)))

    def value(self, values: dict) -> np.ndarray:
        out = self.const.copy()
        for k, m in self.terms.items():
            out = out + m @ values[k]
        return out


class MatExpr:
    """Affine square matrix in row-major vectorized form.

    ``terms[v]`` maps the real variable vector ``x_v`` to ``vec(M)``
    (complex, length n^2).
    """

    __array_ufunc__ = None

    def __init__(self, n: int, terms: dict, const=None):
        self.n = int(n)
        self.terms = {k: sp.csr_matrix(m, dtype=complex) for k, m in terms.items()}
        if const is None:
            const = np.zeros(self.n * self.n, complex)
        const = np.asarray(const, dtype=complex).reshape(-1)
        if const.shape[0] != self.n * self.n:
            raise ValueError("constant has wrong size")
        self.const = const

    @classmethod
    def constant(cls, matrix) -> "MatExpr":
        m = np.asarray(matrix, dtype=complex)
        return cls(m.shape[0], {}, m.reshape(-1))

    @classmethod
    def scaled_identity(cls, scalar: VecExpr, n: int) -> "MatExpr":
        """``scalar * I_n`` for a size-1 expression."""
        if scalar.size != 1:
            raise ValueError("scalar expression must have size 1")
        col = sp.csr_matrix(np.eye(n).reshape(-1, 1))
        terms = {k: col @ m for k, m in scalar.terms.items()}
        return cls(n, terms, np.eye(n).reshape(-1) * scalar.const[0])

    @classmethod
    def diag(cls, vec: VecExpr) -> "MatExpr":
        n = vec.size
        place = sp.csr_matrix((np.ones(n), (np.arange(n) * (n + 1), np.arange(n))), shape=(n * n, n))
        return cls(n, {k: place @ m for k, m in vec.terms.items()}, place @ vec.const)

    @property
    def is_real(self) -> bool:
        if np.any(self.const.imag != 0):
            return False
        return all(not np.any(m.data.imag) for m in self.terms.values())

    def _coerce(self, other) -> "MatExpr":
        if isinstance(other, MatExpr):
            if other.n != self.n:
                raise ValueError(f"dimension mismatch {self.n} vs {other.n}")
            return other
        return MatExpr.constant(other)

    def __add__(self, other):
        other = self._coerce(other)
        return MatExpr(self.n, _merge(self.terms, other.terms), self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return MatExpr(self.n, {k: -m for k, m in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, c):
        c = float(c)
        return MatExpr(self.n, {k: c * m for k, m in self.terms.items()}, c * self.const)

    __rmul__ = __mul__

    def apply(self, lin: sp.spmatrix, n_out: int) -> "MatExpr":
        """Apply a linear map given as a sparse matrix on row-major vec."""
        lin = sp.csr_matrix(lin, dtype=complex)
        return MatExpr(n_out, {k: lin @ m for k, m in self.terms.items()}, lin @ self.const)

    @property
    def T(self) -> "MatExpr":
        return self.apply(_transpose_map(self.n), self.n)

    def conj(self) -> "MatExpr":
        return MatExpr(self.n, {k: m.conj() for k, m in self.terms.items()}, np.conj(self.const))

    def hvec(self) -> VecExpr:
        """Real coordinates of the Hermitian part (see :func:`hvec`)."""
        h = _hvec_map(self.n)
        terms = {k: h[0] @ _re(m) + h[1] @ _im(m) for k, m in self.terms.items()}
        return VecExpr(terms, h[0] @ self.const.real + h[1] @ self.const.imag)

    def svec(self) -> VecExpr:
        s = _svec_map(self.n)
        return VecExpr({k: s @ _re(m) for k, m in self.terms.items()}, s @ self.const.real)

    def entries(self, rows, cols) -> tuple[VecExpr, VecExpr]:
        """Real and imaginary parts of selected entries."""
        idx = np.asarray(rows) * self.n + np.asarray(cols)
        re = VecExpr({k: _re(m[idx]) for k, m in self.terms.items()}, self.const[idx].real)
        im = VecExpr({k: _im(m[idx]) for k, m in self.terms.items()}, self.const[idx].imag)
        return re, im

    def value(self, values: dict) -> np.ndarray:
        out = self.const.copy()
        for k, m in self.terms.items():
            out = out + m @ values[k]
        return out.reshape(self.n, self.n)


@lru_cache(maxsize=None)
def _transpose_map(n: int) -> sp.csr_matrix:
    i, j = np.divmod(np.arange(n * n), n)
    return sp.csr_matrix((np.ones(n * n), (i * n + j, j * n + i)), shape=(n * n, n * n))


@lru_cache(maxsize=None)
def _hvec_map(n: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse maps (R, I) with hvec(M) = R Re vec(M) + I Im vec(M)."""
    i, j = _triu_pairs(n)
    m = len(i)
    d = np.arange(n)
    rows_r = np.concatenate([d, n + np.arange(m), n + np.arange(m)])
    cols_r = np.concatenate([d * (n + 1), i * n + j, j * n + i])
    vals_r = np.concatenate([np.ones(n), np.full(m, SQRT2 / 2), np.full(m, SQRT2 / 2)])
    rows_i = np.concatenate([n + m + np.arange(m), n + m + np.arange(m)])
    cols_i = np.concatenate([i * n + j, j * n + i])
    vals_i = np.concatenate([np.full(m, SQRT2 / 2), np.full(m, -SQRT2 / 2)])
    shape = (n * n, n * n)
    return (
        sp.csr_matrix((vals_r, (rows_r, cols_r)), shape=shape),
        sp.csr_matrix((vals_i, (rows_i, cols_i)), shape=shape),
    )


@lru_cache(maxsize=None)
def _svec_map(n: int) -> sp.csr_matrix:
    i, j = _triu_pairs(n)
    m = len(i)
    d = np.arange(n)
    rows = np.concatenate([d, n + np.arange(m), n + np.arange(m)])
    cols = np.concatenate([d * (n + 1), i * n + j, j * n + i])
    vals = np.concatenate([np.ones(n), np.full(2 * m, SQRT2 / 2)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n * (n + 1) // 2, n * n))


@lru_cache(maxsize=None)
def _unhvec_map(n: int) -> sp.csr_matrix:
    """Complex map hvec -> row-major vec."""
    i, j = _triu_pairs(n)
    m = len(i)
    d = np.arange(n)
    rows = np.concatenate([d * (n + 1), i * n + j, j * n + i, i * n + j, j * n + i])
    cols = np.concatenate([d, n + np.arange(m), n + np.arange(m), n + m + np.arange(m), n + m + np.arange(m)])
    vals = np.concatenate(
        [np.ones(n), np.full(2 * m, 1 / SQRT2), np.full(m, 1j / SQRT2), np.full(m, -1j / SQRT2)]
    )
    return sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n), dtype=complex)


@lru_cache(maxsize=None)
def _unsvec_map(n: int) -> sp.csr_matrix:
    i, j = _triu_pairs(n)
    m = len(i)
    d = np.arange(n)
    rows = np.concatenate([d * (n + 1), i * n + j, j * n + i])
    cols = np.concatenate([d, n + np.arange(m), n + np.arange(m)])
    vals = np.concatenate([np.ones(n), np.full(2 * m, 1 / SQRT2)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * (n + 1) // 2), dtype=complex)


def block_matrix(blocks) -> MatExpr:
    """Assemble a block matrix from a square grid of MatExpr / arrays / None."""
    k = len(blocks)
    sizes = []
    for r in range(k):
        found = [b for b in blocks[r] if b is not None]
        if not found:
            raise ValueError("every block row needs at least one entry")
        b = found[0]
        sizes.append(b.n if isinstance(b, MatExpr) else np.asarray(b).shape[0])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    out = MatExpr(total, {})
    for r in range(k):
        for c in range(k):
            b = blocks[r][c]
            if b is None:
                continue
            if not isinstance(b, MatExpr):
                b = MatExpr.constant(b)
            if b.n != sizes[r] or sizes[r] != sizes[c]:
                raise ValueError("only square blocks of matching size are supported")
            n = b.n
            i, j = np.divmod(np.arange(n * n), n)
            dest = (i + offsets[r]) * total + (j + offsets[c])
            place = sp.csr_matrix((np.ones(n * n), (dest, np.arange(n * n))), shape=(total * total, n * n))
            out = out + b.apply(place, total)
    return out


def partial_trace_map(d_in: int, d_out: int, keep: str = "in") -> sp.csr_matrix:
    """Partial trace on ``C^{d_in} (x) C^{d_out}`` (input index is the slow one)."""
    n = d_in * d_out
    rows, cols = [], []
    if keep == "in":
        for i in range(d_in):
            for j in range(d_in):
                for a in range(d_out):
                    rows.append(i * d_in + j)
                    cols.append((i * d_out + a) * n + (j * d_out + a))
        shape = (d_in * d_in, n * n)
    elif keep == "out":
        for a in range(d_out):
            for b in range(d_out):
                for i in range(d_in):
                    rows.append(a * d_out + b)
                    cols.append((i * d_out + a) * n + (i * d_out + b))
        shape = (d_out * d_out, n * n)
    else:
        raise ValueError("keep must be 'in' or 'out'")
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=shape)


# --------------------------------------------------------------------------
# Cones
# --------------------------------------------------------------------------


@dataclass
class Cone:
    kind: str  # zero | nonneg | box | psd | hpsd
    size: int
    n: int = 0
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def project(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(v)
        if self.kind == "nonneg":
            return np.maximum(v, 0.0)
        if self.kind == "box":
            return np.clip(v, self.lower, self.upper)
        if self.kind == "psd":
            return _project_svec(v, self.n)
        if self.kind == "hpsd":
            return _project_hvec(v, self.n)
        raise ValueError(f"unknown cone {self.kind}")

    def to_json(self) -> dict:
        out = {"kind": self.kind, "size": self.size}
        if self.kind in ("psd", "hpsd"):
            out["n"] = self.n
        if self.kind == "box":
            out["lower"] = self.lower.tolist()
            out["upper"] = self.upper.tolist()
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Cone":
        lower = np.asarray(d["lower"], float) if "lower" in d else None
        upper = np.asarray(d["upper"], float) if "upper" in d else None
        return cls(d["kind"], int(d["size"]), int(d.get("n", 0)), lower, upper)


def _project_svec(v: np.ndarray, n: int) -> np.ndarray:
    w, q = np.linalg.eigh(unsvec(v, n))
    if w[0] >= 0:
        return v
    w = np.maximum(w, 0.0)
    return svec((q * w) @ q.T)


def _project_hvec(v: np.ndarray, n: int) -> np.ndarray:
    w, q = np.linalg.eigh(unhvec(v, n))
    if w[0] >= 0:
        return v
    w = np.maximum(w, 0.0)
    return hvec((q * w) @ q.conj().T)


# --------------------------------------------------------------------------
# Program container
# --------------------------------------------------------------------------


class ConeProgram:
    """Builder for a conic program over named variables."""

    def __init__(self):
        self.variables: dict[str, tuple[int, int]] = {}
        self._kinds: dict[str, tuple[str, int]] = {}
        self._n = 0
        self._rows: list[tuple[Cone, VecExpr]] = []
        self._lin: VecExpr | None = None
        self._quad: list[sp.spmatrix] = []
        self._obj_const = 0.0

    # variables ------------------------------------------------------------
    def _new(self, name: str, size: int, kind: str, n: int = 0) -> None:
        if name in self.variables:
            raise ValueError(f"duplicate variable {name!r}")
        self.variables[name] = (self._n, size)
        self._kinds[name] = (kind, n)
        self._n += size

    def variable(self, name: str, size: int = 1) -> VecExpr:
        self._new(name, size, "vector")
        return VecExpr({name: sp.identity(size, format="csr")}, np.zeros(size))

    def hermitian(self, name: str, n: int) -> MatExpr:
        self._new(name, n * n, "hermitian", n)
        return MatExpr(n, {name: _unhvec_map(n)})

    def symmetric(self, name: str, n: int) -> MatExpr:
        size = n * (n + 1) // 2
        self._new(name, size, "symmetric", n)
        return MatExpr(n, {name: _unsvec_map(n)})

    @property
    def num_variables(self) -> int:
        return self._n

    # constraints ----------------------------------------------------------
    def add_equality(self, expr: VecExpr, rhs=0.0) -> None:
        expr = expr - rhs
        self._rows.append((Cone("zero", expr.size), expr))

    def add_nonneg(self, expr: VecExpr) -> None:
        self._rows.append((Cone("nonneg", expr.size), expr))

    def add_box(self, expr: VecExpr, lower, upper) -> None:
        lo = np.broadcast_to(np.asarray(lower, float), (expr.size,)).copy()
        hi = np.broadcast_to(np.asarray(upper, float), (expr.size,)).copy()
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        self._rows.append((Cone("box", expr.size, lower=lo, upper=hi), expr))

    def add_psd(self, expr: MatExpr, embed: bool = False) -> None:
        """Constrain ``expr >= 0``.

        Real expressions use the real PSD cone. Complex (Hermitian) ones use
        the Hermitian PSD cone, or the real PSD cone of their
        ``[[Re, -Im], [Im, Re]]`` embedding if ``embed`` is set.
        """
        if expr.is_real:
            self._rows.append((Cone("psd", expr.n * (expr.n + 1) // 2, n=expr.n), expr.svec()))
        elif embed:
            self.add_psd(_embed_expr(expr))
        else:
            self._rows.append((Cone("hpsd", expr.n * expr.n, n=expr.n), expr.hvec()))

    # objective ------------------------------------------------------------
    def minimize(self, expr: VecExpr) -> None:
        """Add a linear objective term (size-1 expression)."""
        if expr.size != 1:
            raise ValueError("objective must be scalar")
        self._lin = expr if self._lin is None else self._lin + expr

    def add_squared_norm(self, expr: VecExpr, weight: float = 1.0) -> None:
        """Add ``weight * ||expr||^2`` to the objective."""
        if weight < 0:
            raise ValueError("weight must be nonnegative")
        if weight == 0:
            return
        g, c = self._assemble_rows(expr)
        self._quad.append((2.0 * weight) * (g.T @ g))
        self.minimize(VecExpr(self._split(2.0 * weight * (g.T @ c)), [weight * float(c @ c)]))

    def _split(self, dense_row: np.ndarray) -> dict:
        terms = {}
        for name, (off, size) in self.variables.items():
            block = dense_row[off : off + size]
            if np.any(block):
                terms[name] = sp.csr_matrix(block.reshape(1, -1))
        return terms

    def _assemble_rows(self, expr: VecExpr) -> tuple[sp.csr_matrix, np.ndarray]:
        blocks = []
        for name, (off, size) in self.variables.items():
            if name in expr.terms:
                blocks.append(expr.terms[name])
            else:
                blocks.append(sp.csr_matrix((expr.size, size)))
        unknown = set(expr.terms) - set(self.variables)
        if unknown:
            raise KeyError(f"unknown variables {sorted(unknown)}")
        if not blocks:
            return sp.csr_matrix((expr.size, 0)), expr.const
        return sp.hstack(blocks, format="csr"), expr.const

    # assembly -------------------------------------------------------------
    def to_standard_form(self) -> "StandardForm":
        """Collapse into ``(P, q, A, b, cones)`` arrays."""
        n = self._n
        a_parts, b_parts, cones = [], [], []
        for cone, expr in self._rows:
            g, c = self._assemble_rows(expr)
            # cone membership of s = g x + c  <=>  A x + s = b with A = -g, b = c
            a_parts.append(-g)
            b_parts.append(c)
            cones.append(cone)
        if a_parts:
            a = sp.vstack(a_parts, format="csc")
            b = np.concatenate(b_parts)
        else:
            a = sp.csc_matrix((0, n))
            b = np.zeros(0)
        p = sp.csc_matrix((n, n))
        for term in self._quad:
            p = p + _pad(term, n)
        q = np.zeros(n)
        const = 0.0
        if self._lin is not None:
            g, c = self._assemble_rows(self._lin)
            q = np.asarray(g.toarray()).ravel()
            const = float(c[0])
        return StandardForm(p=sp.csc_matrix(p), q=q, a=a, b=b, cones=cones, const=const,
                            variables=dict(self.variables), kinds=dict(self._kinds))


def _pad(m: sp.spmatrix, n: int) -> sp.csc_matrix:
    m = sp.csc_matrix(m)
    if m.shape == (n, n):
        return m
    out = sp.lil_matrix((n, n))
    out[: m.shape[0], : m.shape[1]] = m
    return out.tocsc()


def _embed_expr(expr: MatExpr) -> MatExpr:
    n = expr.n
    re_map, im_map = _embed_maps(n)
    terms = {k: re_map @ _re(m) + im_map @ _im(m) for k, m in expr.terms.items()}
    const = re_map @ expr.const.real + im_map @ expr.const.imag
    return MatExpr(2 * n, terms, const)


@lru_cache(maxsize=None)
def _embed_maps(n: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    i, j = np.divmod(np.arange(n * n), n)
    big = 2 * n
    src = np.arange(n * n)
    re_rows = np.concatenate([i * big + j, (i + n) * big + (j + n)])
    im_rows = np.concatenate([i * big + (j + n), (i + n) * big + j])
    re_map = sp.csr_matrix((np.ones(2 * n * n), (re_rows, np.concatenate([src, src]))), shape=(big * big, n * n))
    im_map = sp.csr_matrix(
        (np.concatenate([-np.ones(n * n), np.ones(n * n)]), (im_rows, np.concatenate([src, src]))),
        shape=(big * big, n * n),
    )
    return re_map, im_map


@dataclass
class StandardForm:
    p: sp.csc_matrix
    q: np.ndarray
    a: sp.csc_matrix
    b: np.ndarray
    cones: list[Cone]
    const: float = 0.0
    variables: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)

    def cone_slices(self) -> list[tuple[Cone, slice]]:
        out, start = [], 0
        for cone in self.cones:
            out.append((cone, slice(start, start + cone.size)))
            start += cone.size
        return out

    def project(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        for cone, sl in self.cone_slices():
            out[sl] = cone.project(v[sl])
        return out

    def to_json(self) -> dict:
        p = sp.coo_matrix(self.p)
        a = sp.coo_matrix(self.a)
        return {
            "schema": PROGRAM_SCHEMA,
            "n": int(self.p.shape[0]),
            "m": int(self.a.shape[0]),
            "P": {"row": p.row.tolist(), "col": p.col.tolist(), "val": p.data.tolist()},
            "q": self.q.tolist(),
            "A": {"row": a.row.tolist(), "col": a.col.tolist(), "val": a.data.tolist()},
            "b": self.b.tolist(),
            "objective_constant": self.const,
            "cones": [c.to_json() for c in self.cones],
            "variables": {k: [off, size, *self.kinds.get(k, ("vector", 0))] for k, (off, size) in self.variables.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "StandardForm":
        if d.get("schema") != PROGRAM_SCHEMA:
            raise ValueError(f"unsupported program schema {d.get('schema')!r}")
        n, m = d["n"], d["m"]
        p = sp.csc_matrix((d["P"]["val"], (d["P"]["row"], d["P"]["col"])), shape=(n, n))
        a = sp.csc_matrix((d["A"]["val"], (d["A"]["row"], d["A"]["col"])), shape=(m, n))
        variables = {k: (v[0], v[1]) for k, v in d["variables"].items()}
        kinds = {k: (v[2], v[3]) for k, v in d["variables"].items()}
        return cls(p, np.asarray(d["q"], float), a, np.asarray(d["b"], float),
                   [Cone.from_json(c) for c in d["cones"]], d.get("objective_constant", 0.0), variables, kinds)


def dump_program(prog: ConeProgram | StandardForm, path) -> None:
    """Write a program to the JSON debug format."""
    form = prog.to_standard_form() if isinstance(prog, ConeProgram) else prog
    Path(path).write_text(json.dumps(form.to_json()), encoding="utf-8")


def load_program(path) -> StandardForm:
    return StandardForm.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# Solver
# --------------------------------------------------------------------------


@dataclass
class SolverSettings:
    tol: float | None = None
    max_iter: int = 50_000
    alpha: float = 1.6
    rho: float = 0.1
    sigma: float = 1e-6
    eq_rho_scale: float = 1e3
    adapt_every: int = 50
    adapt_threshold: float = 5.0
    check_every: int = 5
    scale_iters: int = 10
    anderson_memory: int = 10  # 0 disables acceleration
    safeguard: float = 1.0


@dataclass
class SolverReport:
    status: str
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    dual_objective: float = float("nan")
    gap: float = float("nan")
    tol: float = float("nan")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Solution:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray  # multipliers in the dual cone K*
    report: SolverReport
    form: StandardForm

    def __getitem__(self, name: str) -> np.ndarray:
        off, size = self.form.variables[name]
        kind, n = self.form.kinds.get(name, ("vector", 0))
        v = self.x[off : off + size]
        if kind == "hermitian":
            return unhvec(v, n)
        if kind == "symmetric":
            return unsvec(v, n)
        return v

    def value(self, expr) -> np.ndarray:
        values = {k: self.x[off : off + size] for k, (off, size) in self.form.variables.items()}
        return expr.value(values)


class SolverError(RuntimeError):
    def __init__(self, message: str, solution: Solution | None = None):
        super().__init__(message)
        self.solution = solution


def default_tol(num_variables: int) -> float:
    return 1e-7 if num_variables <= 200 * 200 else 1e-6


def _equalities_consistent(form: StandardForm) -> bool:
    rows = []
    start = 0
    for cone in form.cones:
        if cone.kind == "zero":
            rows.extend(range(start, start + cone.size))
        start += cone.size
    if not rows:
        return True
    a_eq = form.a[rows]
    b_eq = form.b[rows]
    if a_eq.shape[1] == 0:
        return bool(np.allclose(b_eq, 0))
    sol = spla.lsqr(a_eq, b_eq, atol=1e-14, btol=1e-14, iter_lim=20 * a_eq.shape[1] + 100)
    resid = np.linalg.norm(a_eq @ sol[0] - b_eq)
    return resid <= 1e-7 * (1 + np.linalg.norm(b_eq))


class _Anderson:
    """Type-II Anderson acceleration of a fixed-point map ``z -> T(z)``."""

    def __init__(self, memory: int, size: int):
        self.memory = memory
        if memory > 0:
            self.dg = np.empty((size, memory))
            self.dt = np.empty((size, memory))
        self.reset()

    def reset(self) -> None:
        self.count = 0
        self.head = 0
        self.prev: tuple[np.ndarray, np.ndarray] | None = None

    def push(self, z: np.ndarray, tz: np.ndarray) -> None:
        if self.memory <= 0:
            return
        g = tz - z
        if self.prev is not None:
            self.dg[:, self.head] = g - self.prev[0]
            self.dt[:, self.head] = tz - self.prev[1]
            self.head = (self.head + 1) % self.memory
            self.count = min(self.count + 1, self.memory)
        self.prev = (g, tz)

    def extrapolate(self) -> np.ndarray | None:
        if self.count == 0:
            return None
        g, tz = self.prev
        dg, dt = self.dg[:, : self.count], self.dt[:, : self.count]
        gram = dg.T @ dg
        gram[np.diag_indices_from(gram)] += 1e-10 * max(float(np.trace(gram)), 1e-300)
        try:
            gamma = np.linalg.solve(gram, dg.T @ g)
        except np.linalg.LinAlgError:
            return None
        cand = tz - dt @ gamma
        return cand if np.all(np.isfinite(cand)) else None


@dataclass
class _Scaling:
    d: np.ndarray  # x = d * x_scaled
    e: np.ndarray  # s_scaled = e * s
    c: float  # objective multiplier


def _equilibrate(form: StandardForm, iters: int) -> tuple[StandardForm, _Scaling]:
    """Ruiz equilibration of the KKT matrix.

    Row scalings are averaged (geometrically) over each PSD block so that
    the scaled cone is still a PSD cone.
    """
    n, m = form.a.shape[1], form.a.shape[0]
    p, q = sp.csc_matrix(form.p), form.q.copy()
    a, b = sp.csc_matrix(form.a), form.b.copy()
    d, e, c = np.ones(n), np.ones(m), 1.0
    blocks = [sl for cone, sl in form.cone_slices() if cone.kind in ("psd", "hpsd")]

    def limit(norms):
        norms = np.where(norms < 1e-4, 1.0, norms)
        return np.clip(norms, 1e-4, 1e4)

    for _ in range(iters):
        col_p = abs(p).max(axis=0).toarray().ravel() if p.nnz else np.zeros(n)
        col_a = abs(a).max(axis=0).toarray().ravel() if a.nnz else np.zeros(n)
        row_a = abs(a).max(axis=1).toarray().ravel() if a.nnz else np.zeros(m)
        dd = 1.0 / np.sqrt(limit(np.maximum(col_p, col_a)))
        de = 1.0 / np.sqrt(limit(row_a))
        for sl in blocks:
            de[sl] = np.exp(np.log(de[sl]).mean())
        p = sp.diags(dd) @ p @ sp.diags(dd)
        q = dd * q
        a = sp.diags(de) @ a @ sp.diags(dd)
        b = de * b
        d *= dd
        e *= de
        col_p = abs(p).max(axis=0).toarray().ravel() if p.nnz else np.zeros(n)
        gamma = 1.0 / float(limit(np.array([max(col_p.mean() if n else 0.0, _inf(q))]))[0])
        p, q, c = gamma * p, gamma * q, c * gamma

    cones = []
    for cone, sl in form.cone_slices():
        if cone.kind == "box":
            cone = Cone("box", cone.size, cone.n, cone.lower * e[sl], cone.upper * e[sl])
        cones.append(cone)
    scaled = StandardForm(sp.csc_matrix(p), q, sp.csc_matrix(a), b, cones, form.const, form.variables, form.kinds)
    return scaled, _Scaling(d, e, c)


def solve(prog: ConeProgram | StandardForm, tol: float | None = None, max_iter: int | None = None,
          settings: SolverSettings | None = None) -> Solution:
    """Run ADMM from the all-zero start on the equilibrated problem.

    Returns the final (or best, on iteration exhaustion) iterate together
    with a :class:`SolverReport`. Residuals in the report are relative and
    measured on the original problem: ``||r|| / (1 + scale)``; ``optimal``
    means primal residual, dual residual and duality gap are all below
    ``tol``.
    """
    form = prog.to_standard_form() if isinstance(prog, ConeProgram) else prog
    st = settings or SolverSettings()
    n, m = form.a.shape[1], form.a.shape[0]
    tol = tol if tol is not None else (st.tol if st.tol is not None else default_tol(n))
    max_iter = max_iter if max_iter is not None else st.max_iter

    if not _equalities_consistent(form):
        zeros = np.zeros(n), np.zeros(m), np.zeros(m)
        report = SolverReport(INFEASIBLE, float("nan"), float("inf"), float("inf"), 0, tol=tol)
        return Solution(*zeros, report, form)

    scaled, sc = _equilibrate(form, st.scale_iters)
    p, q, a, b = scaled.p, scaled.q, scaled.a, scaled.b
    at = sp.csr_matrix(a.T)
    p0, q0, a0, b0 = form.p, form.q, form.a, form.b
    at0 = sp.csr_matrix(a0.T)

    is_eq = np.zeros(m, bool)
    for cone, sl in form.cone_slices():
        if cone.kind == "zero":
            is_eq[sl] = True

    def rho_vector(rho: float) -> np.ndarray:
        r = np.full(m, float(rho))
        r[is_eq] *= st.eq_rho_scale
        return r

    def factor(rvec: np.ndarray):
        kkt = p + st.sigma * sp.identity(n, format="csc") + at @ sp.diags(rvec) @ a
        return spla.splu(sp.csc_matrix(kkt), permc_spec="COLAMD").solve

    rho = st.rho
    rvec = rho_vector(rho)
    lin_solve = factor(rvec)

    def step(z: np.ndarray) -> np.ndarray:
        x, s, y = z[:n], z[n : n + m], z[n + m :]
        rhs = st.sigma * x - q + at @ (rvec * (b - s) + y)
        xt = lin_solve(rhs)
        x = st.alpha * xt + (1 - st.alpha) * x
        v = st.alpha * (b - a @ xt) + (1 - st.alpha) * s + y / rvec
        s = scaled.project(v)
        return np.concatenate([x, s, rvec * (v - s)])

    accel = _Anderson(st.anderson_memory, n + 2 * m)
    z = np.zeros(n + 2 * m)
    tz = step(z)
    it = 1
    rounds = 0
    best = None
    status = MAX_ITER
    r_p = r_d = gap = float("inf")
    pobj = dobj = float("nan")

    while True:
        rounds += 1
        x, s, y = tz[:n], tz[n : n + m], tz[n + m :]
        if rounds % st.check_every == 0 or it >= max_iter:
            # residuals of the unscaled problem
            xu, su, yu = sc.d * x, s / sc.e, sc.e * y / sc.c
            ax = a0 @ xu
            px = p0 @ xu
            aty = at0 @ yu
            rp_vec = ax + su - b0
            rd_vec = px + q0 - aty
            scale_p = max(_inf(ax), _inf(su), _inf(b0))
            scale_d = max(_inf(px), _inf(aty), _inf(q0))
            r_p = _inf(rp_vec) / (1 + scale_p)
            r_d = _inf(rd_vec) / (1 + scale_d)
            xpx = float(xu @ px)
            pobj = 0.5 * xpx + float(q0 @ xu) + form.const
            dobj = -0.5 * xpx + float(b0 @ yu) - _box_support(form, yu) + form.const
            gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
            merit = max(r_p, r_d, gap)
            if best is None or merit < best[0]:
                best = (merit, xu, su, yu, r_p, r_d, gap, pobj, dobj)
            if r_p <= tol and r_d <= tol and gap <= tol:
                status = OPTIMAL
                break
        if it >= max_iter:
            break

        if rounds % st.adapt_every == 0:
            # balance scaled residuals
            num = _inf(a @ x + s - b) / max(_inf(a @ x), _inf(s), _inf(b), 1e-30)
            den = _inf(p @ x + q - at @ y) / max(_inf(p @ x), _inf(at @ y), _inf(q), 1e-30)
            if den > 0 and num > 0:
                new_rho = float(np.clip(rho * math.sqrt(num / den), 1e-6, 1e6))
                if new_rho > rho * st.adapt_threshold or new_rho < rho / st.adapt_threshold:
                    rho = new_rho
                    rvec = rho_vector(rho)
                    lin_solve = factor(rvec)
                    accel.reset()
                    z, tz = tz, step(tz)
                    it += 1
                    continue

        accel.push(z, tz)
        cand = accel.extrapolate()
        if cand is not None and it + 1 < max_iter:
            tc = step(cand)
            it += 1
            if np.linalg.norm(tc - cand) <= st.safeguard * np.linalg.norm(tz - z):
                z, tz = cand, tc
                continue
            accel.reset()
        z, tz = tz, step(tz)
        it += 1

    if status != OPTIMAL:
        _, xu, su, yu, r_p, r_d, gap, pobj, dobj = best
    report = SolverReport(status, pobj, r_p, r_d, it, dobj, gap, tol)
    logger.debug("solve: %s after %d iterations (rp=%.2e rd=%.2e gap=%.2e)", status, it, r_p, r_d, gap)
    return Solution(xu, su, -yu, report, form)


def _box_support(form: StandardForm, y: np.ndarray) -> float:
    """``sup_{s in box} y's`` summed over box cones; other cones contribute 0 at dual feasibility."""
    total = 0.0
    for cone, sl in form.cone_slices():
        if cone.kind == "box":
            v = y[sl]
            with np.errstate(invalid="ignore"):
                terms = np.where(v > 0, cone.upper * v, np.where(v < 0, cone.lower * v, 0.0))
            total += float(terms.sum())
    return total


def _inf(v: np.ndarray) -> float:
    return float(np.abs(v).max(initial=0.0))
