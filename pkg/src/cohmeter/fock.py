"""Truncated single-mode Fock-space linear algebra.

Operators are indexed by photon number ``0 .. dim-1``. Hermitian operators
with limited off-diagonal reach are stored by diagonals in
:class:`HermitianBanded`; everything else is a plain numpy array.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaln

from .tolerances import TOL

logger = logging.getLogger(__name__)

__all__ = [
    "HermitianBanded",
    "coherent_amplitudes",
    "truncation_tail",
    "displacement_matrix",
    "dephase",
    "born_probability",
    "validate_density_matrix",
    "hermitian_eig",
    "trace_norm",
    "spectral_norm",
    "as_dense",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HermitianBanded:
    """Hermitian operator stored as its upper diagonals.

    ``diagonals[k][j]`` holds the matrix entry ``(j, j + k)``; the lower
    triangle is implied by Hermiticity. Diagonal 0 is real.
    """

    diagonals: tuple[np.ndarray, ...]

    def __post_init__(self):
        diags = tuple(np.asarray(d, dtype=complex) for d in self.diagonals)
        if not diags:
            raise ValueError("need at least the main diagonal")
        dim = diags[0].shape[0]
        if dim < 1:
            raise ValueError("dimension must be at least 1")
        if len(diags) > dim:
            raise ValueError(f"band {len(diags) - 1} exceeds dim - 1 = {dim - 1}")
        for k, d in enumerate(diags):
            if d.shape != (dim - k,):
                raise ValueError(f"diagonal {k} has shape {d.shape}, expected ({dim - k},)")
        main = diags[0].real.astype(complex)
        diags = (main,) + diags[1:]
        object.__setattr__(self, "diagonals", tuple(_frozen(d) for d in diags))

    @property
    def dim(self) -> int:
        return self.diagonals[0].shape[0]

    @property
    def band(self) -> int:
        return len(self.diagonals) - 1

    @classmethod
    def from_dense(cls, matrix, band: int | None = None) -> "HermitianBanded":
        """Keep diagonals ``0..band`` of the upper triangle of ``matrix``.

        The matrix is assumed Hermitian; only its upper triangle is read.
        """
        m = np.asarray(matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("expected a square matrix")
        dim = m.shape[0]
        if band is None:
            band = dim - 1
        if not 0 <= band <= dim - 1:
            raise ValueError(f"band must lie in [0, {dim - 1}], got {band}")
        return cls(tuple(np.diagonal(m, k).copy() for k in range(band + 1)))

    @classmethod
    def zeros(cls, dim: int, band: int = 0) -> "HermitianBanded":
        return cls(tuple(np.zeros(dim - k, complex) for k in range(band + 1)))

    @classmethod
    def identity(cls, dim: int, band: int = 0) -> "HermitianBanded":
        diags = [np.ones(dim, complex)] + [np.zeros(dim - k, complex) for k in range(1, band + 1)]
        return cls(tuple(diags))

    @classmethod
    def diagonal(cls, values, band: int = 0) -> "HermitianBanded":
        values = np.asarray(values, dtype=float)
        return cls((values.astype(complex),) + tuple(np.zeros(len(values) - k, complex) for k in range(1, band + 1)))

    def to_dense(self) -> np.ndarray:
        dim = self.dim
        out = np.zeros((dim, dim), dtype=complex)
        idx = np.arange(dim)
        out[idx, idx] = self.diagonals[0].real
        for k in range(1, self.band + 1):
            j = idx[: dim - k]
            out[j, j + k] = self.diagonals[k]
            out[j + k, j] = np.conj(self.diagonals[k])
        return out

    def entry(self, j: int, k: int) -> complex:
        if k >= j:
            d = k - j
            return complex(self.diagonals[d][j]) if d <= self.band else 0j
        return np.conj(self.entry(k, j))

    def with_band(self, band: int) -> "HermitianBanded":
        """Truncate to, or zero-pad up to, ``band`` off-diagonals."""
        if not 0 <= band <= self.dim - 1:
            raise ValueError(f"band must lie in [0, {self.dim - 1}], got {band}")
        diags = list(self.diagonals[: band + 1])
        diags += [np.zeros(self.dim - k, complex) for k in range(len(diags), band + 1)]
        return HermitianBanded(tuple(diags))

    def truncated(self, dim: int) -> "HermitianBanded":
        """Compress onto the first ``dim`` photon numbers."""
        if not 1 <= dim <= self.dim:
            raise ValueError(f"dim must lie in [1, {self.dim}]")
        band = min(self.band, dim - 1)
        return HermitianBanded(tuple(self.diagonals[k][: dim - k] for k in range(band + 1)))

    def max_offdiagonal(self) -> float:
        if self.band == 0:
            return 0.0
        return float(max(np.abs(d).max(initial=0.0) for d in self.diagonals[1:]))

    def conjugate_by_phases(self, phi: float) -> "HermitianBanded":
        """Return ``U X U^dag`` with ``U = diag(exp(i j phi))``."""
        return HermitianBanded(tuple(d * np.exp(-1j * k * phi) for k, d in enumerate(self.diagonals)))

    def __add__(self, other: "HermitianBanded") -> "HermitianBanded":
        if not isinstance(other, HermitianBanded):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        band = max(self.band, other.band)
        a, b = self.with_band(band), other.with_band(band)
        return HermitianBanded(tuple(x + y for x, y in zip(a.diagonals, b.diagonals)))

    def __neg__(self) -> "HermitianBanded":
        return HermitianBanded(tuple(-d for d in self.diagonals))

    def __sub__(self, other: "HermitianBanded") -> "HermitianBanded":
        return self + (-other)

    def __mul__(self, c: float) -> "HermitianBanded":
        c = float(c)
        return HermitianBanded(tuple(c * d for d in self.diagonals))

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, HermitianBanded):
            return NotImplemented
        return self.band == other.band and self.dim == other.dim and all(
            np.array_equal(x, y) for x, y in zip(self.diagonals, other.diagonals)
        )

    def __repr__(self) -> str:
        return f"HermitianBanded(dim={self.dim}, band={self.band})"


def as_dense(op) -> np.ndarray:
    if isinstance(op, HermitianBanded):
        return op.to_dense()
    return np.asarray(op)


def coherent_amplitudes(alpha: complex, dim: int) -> np.ndarray:
    """Fock amplitudes ``<j|alpha>`` for ``j < dim``.

    Magnitudes are evaluated in log space with ``lgamma`` so that photon
    numbers in the hundreds do not overflow.
    """
    alpha = complex(alpha)
    if not np.isfinite(alpha.real) or not np.isfinite(alpha.imag):
        raise ValueError(f"non-finite coherent amplitude {alpha!r}")
    if dim < 1:
        raise ValueError("dim must be at least 1")
    r = abs(alpha)
    out = np.zeros(dim, dtype=complex)
    if r == 0.0:
        out[0] = 1.0
        return out
    j = np.arange(dim)
    log_mag = -0.5 * r * r + j * np.log(r) - 0.5 * gammaln(j + 1)
    if alpha.imag == 0.0:
        # keep real amplitudes exactly real
        return (np.exp(log_mag) * np.where((j % 2 == 1) & (alpha.real < 0), -1.0, 1.0)).astype(complex)
    return np.exp(log_mag) * np.exp(1j * j * np.angle(alpha))


def truncation_tail(alpha: complex, dim: int) -> float:
    """Poisson mass of ``|alpha>`` above photon number ``dim - 1``."""
    mean = abs(complex(alpha)) ** 2
    if mean == 0.0:
        return 0.0
    return float(gammainc(dim, mean))


def displacement_matrix(beta: complex, dim: int) -> np.ndarray:
    """Matrix elements ``<m|D(beta)|n>`` for ``m, n < dim``.

    Columns are built by the recurrence
    ``sqrt(n+1) <m|D|n+1> = sqrt(m) <m-1|D|n> - conj(beta) <m|D|n>``,
    started from the coherent amplitudes. Each entry only depends on entries
    with smaller indices, so the block is exact (no truncation artefacts).
    """
    beta = complex(beta)
    out = np.zeros((dim, dim), dtype=complex)
    out[:, 0] = coherent_amplitudes(beta, dim)
    sqrt_m = np.sqrt(np.arange(dim))
    for n in range(dim - 1):
        col = -np.conj(beta) * out[:, n]
        col[1:] += sqrt_m[1:] * out[:-1, n]
        out[:, n + 1] = col / np.sqrt(n + 1)
    return out


def dephase(op):
    """Total dephasing in the photon-number basis: drop every off-diagonal."""
    if isinstance(op, HermitianBanded):
        return HermitianBanded((op.diagonals[0],) + tuple(np.zeros_like(d) for d in op.diagonals[1:]))
    m = np.asarray(op)
    return np.diag(np.diag(m))


def validate_density_matrix(rho, tol: float = TOL.psd_slack) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    if abs(np.trace(rho) - 1.0) > TOL.trace * max(1, rho.shape[0]) * 10:
        raise ValueError(f"density matrix trace {np.trace(rho).real:.3g} != 1")
    evals, _ = hermitian_eig(rho)
    if evals[0] < -tol:
        raise ValueError(f"density matrix has eigenvalue {evals[0]:.3g} < 0")
    return rho


def born_probability(state, element) -> float:
    """``tr(rho Pi)`` for a density matrix, or ``<alpha|Pi|alpha>`` for a complex amplitude.

    Values within ``TOL.prob_clamp`` outside [0, 1] are clamped (logged);
    anything further out raises.
    """
    pi = as_dense(element)
    dim = pi.shape[0]
    if np.isscalar(state):
        v = coherent_amplitudes(state, dim)
        value = float(np.vdot(v, pi @ v).real)
    else:
        rho = np.asarray(state)
        if rho.shape != pi.shape:
            raise ValueError(f"dimension mismatch: state {rho.shape} vs element {pi.shape}")
        value = float(np.einsum("ij,ji->", rho, pi).real)
    eps = TOL.prob_clamp
    if value < -eps or value > 1 + eps:
        raise ValueError(f"probability {value:.6g} outside [0, 1]")
    clamped = min(max(value, 0.0), 1.0)
    if clamped != value:
        logger.debug("clamped probability %.3g to %.3g", value, clamped)
    return clamped


def hermitian_eig(matrix) -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenvalues and unitary eigenvectors of a Hermitian matrix."""
    a = as_dense(matrix)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    asym = float(np.abs(a - a.conj().T).max(initial=0.0))
    if asym > TOL.hermitian * scale:
        raise ValueError(f"matrix is not Hermitian (asymmetry {asym:.3g})")
    return np.linalg.eigh(a)


def _singular_or_eig(op) -> np.ndarray:
    a = as_dense(op)
    if a.size == 0:
        return np.zeros(0)
    if np.allclose(a, a.conj().T, rtol=0, atol=TOL.hermitian * max(1.0, np.abs(a).max())):
        return np.abs(np.linalg.eigvalsh(a))
    return np.linalg.svd(a, compute_uv=False)


def trace_norm(op) -> float:
    return float(_singular_or_eig(op).sum())


def spectral_norm(op) -> float:
    return float(_singular_or_eig(op).max(initial=0.0))


def random_density_matrix(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real

