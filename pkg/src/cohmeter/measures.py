"""How well a measurement detects coherence in the photon-number basis.

A POVM ``{Pi_n}`` acts as the channel ``rho -> sum_n tr(rho Pi_n) |n><n|``.
The diamond measure is the smallest diamond-norm distance between the
dephased channel and the dephased version of any detection-incoherent (DI)
channel; the NSID measure uses the induced trace norm instead. Choi
matrices use the ordering input (x) output,
``J = sum_ij |i><j| (x) Phi(|i><j|)``, so a POVM maps to
``J = sum_n Pi_n^T (x) |n><n|``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .fock import HermitianBanded, as_dense, dephase
from .solver import (
    OPTIMAL,
    ConeProgram,
    MatExpr,
    SolverReport,
    block_matrix,
    partial_trace_map,
    solve,
)
from .tolerances import TOL

logger = logging.getLogger(__name__)


class MeasureError(RuntimeError):
    """The measure SDP did not reach the requested tolerance."""

    def __init__(self, message: str, primal: float, dual: float, report: SolverReport):
        super().__init__(message)
        self.primal = primal
        self.dual = dual
        self.report = report


class UnsupportedOutcomeCount(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementChannel:
    povm: tuple[np.ndarray, ...]

    @property
    def in_dim(self) -> int:
        return self.povm[0].shape[0]

    @property
    def out_dim(self) -> int:
        return len(self.povm)

    @property
    def is_real(self) -> bool:
        return all(not np.any(p.imag) for p in self.povm)


@dataclass(frozen=True)
class ChoiMatrix:
    matrix: np.ndarray
    in_dim: int
    out_dim: int

    def partial_trace_out(self) -> np.ndarray:
        j = self.matrix.reshape(self.in_dim, self.out_dim, self.in_dim, self.out_dim)
        return np.einsum("iaja->ij", j)


@dataclass
class MeasureResult:
    value: float
    report: SolverReport
    effects: tuple[np.ndarray, ...] | None = None  # diagonal DI effects at the optimum


def _dense_povm(povm) -> tuple[np.ndarray, ...]:
    if isinstance(povm, MeasurementChannel):
        return povm.povm
    mats = tuple(np.array(as_dense(p), dtype=complex) for p in povm)
    if not mats:
        raise ValueError("empty POVM")
    d = mats[0].shape[0]
    for m in mats:
        if m.shape != (d, d):
            raise ValueError("POVM elements must be square and share a dimension")
    return mats


def channel_from_povm(povm, renormalize: bool = False) -> MeasurementChannel:
    """Wrap a POVM as a measurement channel after checking completeness.

    With ``renormalize`` every element is conjugated by ``S^{-1/2}``, where
    ``S`` is the Hermitian part of the element sum.
    """
    mats = tuple((m + m.conj().T) / 2 for m in _dense_povm(povm))
    total = sum(mats)
    d = total.shape[0]
    if renormalize:
        w, v = np.linalg.eigh(total)
        if w[0] <= 0:
            raise ValueError("element sum is not positive definite; cannot renormalize")
        inv_sqrt = (v / np.sqrt(w)) @ v.conj().T
        mats = tuple(inv_sqrt @ m @ inv_sqrt for m in mats)
        total = sum(mats)
    defect = float(np.abs(total - np.eye(d)).max())
    if defect > TOL.completeness:
        raise ValueError(f"POVM is incomplete: max |sum_n Pi_n - 1| = {defect:.3g}")
    lowest = min(float(np.linalg.eigvalsh(m)[0]) for m in mats)
    if lowest < -TOL.channel:
        logger.warning("POVM element has eigenvalue %.3g < 0; measures treat it as given", lowest)
    return MeasurementChannel(mats)


def choi_of(channel: MeasurementChannel) -> ChoiMatrix:
    d, k = channel.in_dim, channel.out_dim
    j = np.zeros((d * k, d * k), dtype=complex)
    for n, p in enumerate(channel.povm):
        proj = np.zeros((k, k))
        proj[n, n] = 1.0
        j += np.kron(p.T, proj)
    return ChoiMatrix(j, d, k)


def _as_channel(channel_or_povm) -> MeasurementChannel:
    if isinstance(channel_or_povm, MeasurementChannel):
        return channel_or_povm
    return channel_from_povm(channel_or_povm)


def is_detection_incoherent(povm, tol: float = 1e-7) -> tuple[bool, float]:
    """True iff every element is diagonal up to ``tol``; also returns the largest off-diagonal magnitude."""
    worst = 0.0
    for p in povm.povm if isinstance(povm, MeasurementChannel) else povm:
        if isinstance(p, HermitianBanded):
            worst = max(worst, p.max_offdiagonal())
        else:
            m = np.asarray(p)
            worst = max(worst, float(np.abs(m - np.diag(np.diag(m))).max(initial=0.0)))
    return worst <= tol, worst


def dephasing_gap_lower_bound(povm) -> float:
    """Largest off-diagonal magnitude of the no-click element.

    For two outcomes this never exceeds the diamond measure.
    """
    mats = _dense_povm(povm)
    if len(mats) != 2:
        raise UnsupportedOutcomeCount("the off-diagonal lower bound is only derived for two outcomes")
    m = mats[0]
    return float(np.abs(m - np.diag(np.diag(m))).max(initial=0.0))


# --------------------------------------------------------------------------
# SDPs
# --------------------------------------------------------------------------


def _check(result: MeasureResult, name: str, strict: bool) -> MeasureResult:
    rep = result.report
    if strict and rep.status != OPTIMAL:
        raise MeasureError(
            f"{name} SDP stopped with status {rep.status} (rp={rep.primal_residual:.2e}, "
            f"rd={rep.dual_residual:.2e}, gap={rep.gap:.2e})",
            rep.objective, rep.dual_objective, rep,
        )
    return result


def _hermitian_or_symmetric(prog: ConeProgram, name: str, n: int, real: bool) -> MatExpr:
    # real POVMs admit real optimal Y, Z (average any optimum with its conjugate)
    return prog.symmetric(name, n) if real else prog.hermitian(name, n)


def solve_diamond(channel, formulation: str = "blocks", tol: float | None = None,
                  max_iter: int = 50_000, strict: bool = True) -> MeasureResult:
    """Diamond measure via the stabilized diamond-norm SDP.

    ``formulation="full"`` optimizes over the complete Choi matrix of the
    candidate DI channel with DI imposed entrywise, and over full ``Y, Z``
    stabilizer blocks. ``"blocks"`` uses that ``Delta(Theta - Phi)`` is
    block diagonal in the outcome index: only the outcome-diagonal Choi
    blocks of ``Phi`` matter, DI forces them to be diagonal matrices
    ``D_n >= 0`` with ``sum_n D_n = 1``, and ``Y, Z`` may be pinched to the
    same block structure. ``"difference"`` uses that ``Delta Theta`` and
    ``Delta Phi`` are both channels, for which the norm of their difference
    is ``2 min ||tr_out Z||_inf`` over ``Z >= 0, Z >= J``; again ``Z`` is
    pinched to outcome blocks. All three give the same optimum.
    """
    ch = _as_channel(channel)
    try:
        build = _FORMULATIONS[formulation]
    except KeyError:
        raise ValueError(f"unknown formulation {formulation!r}") from None
    return _check(build(ch, tol, max_iter), "diamond", strict)


def _diamond_blocks(ch: MeasurementChannel, tol, max_iter) -> MeasureResult:
    d, k = ch.in_dim, ch.out_dim
    real = ch.is_real
    prog = ConeProgram()
    mu_y, mu_z = prog.variable("mu_y"), prog.variable("mu_z")
    effects = [prog.variable(f"d{n}", d) for n in range(k)]
    for e in effects:
        prog.add_nonneg(e)
    prog.add_equality(sum(effects[1:], effects[0]), np.ones(d))
    sum_y = sum_z = None
    for n, (pi, e) in enumerate(zip(ch.povm, effects)):
        y = _hermitian_or_symmetric(prog, f"y{n}", d, real)
        z = _hermitian_or_symmetric(prog, f"z{n}", d, real)
        x = MatExpr.constant(pi.T) - MatExpr.diag(e)
        prog.add_psd(block_matrix([[y, -x], [-x, z]]))
        sum_y = y if sum_y is None else sum_y + y
        sum_z = z if sum_z is None else sum_z + z
    prog.add_psd(MatExpr.scaled_identity(mu_y, d) - sum_y)
    prog.add_psd(MatExpr.scaled_identity(mu_z, d) - sum_z)
    prog.minimize(0.5 * (mu_y + mu_z))
    sol = solve(prog, tol=tol, max_iter=max_iter)
    value = float(0.5 * (sol["mu_y"][0] + sol["mu_z"][0]))
    return MeasureResult(value, sol.report, tuple(np.diag(sol[f"d{n}"]) for n in range(k)))


def _dephase_out_map(d_in: int, d_out: int) -> sp.csr_matrix:
    """(id (x) Delta) on row-major vec of an (d_in d_out)-square matrix."""
    n = d_in * d_out
    idx = np.arange(n * n)
    r, c = np.divmod(idx, n)
    keep = (r % d_out) == (c % d_out)
    return sp.csr_matrix((np.ones(keep.sum()), (idx[keep], idx[keep])), shape=(n * n, n * n))


def _diamond_full(ch: MeasurementChannel, tol, max_iter) -> MeasureResult:
    d, k = ch.in_dim, ch.out_dim
    n = d * k
    prog = ConeProgram()
    mu_y, mu_z = prog.variable("mu_y"), prog.variable("mu_z")
    j_phi = prog.hermitian("j_phi", n)
    y = prog.hermitian("y", n)
    z = prog.hermitian("z", n)
    prog.add_psd(j_phi)
    ptr = partial_trace_map(d, k, keep="in")
    prog.add_equality(j_phi.apply(ptr, d).hvec(), MatExpr.constant(np.eye(d)).hvec().const)
    # DI: output-diagonal entries of off-diagonal input blocks vanish
    rows, cols = [], []
    for i in range(d):
        for jj in range(i + 1, d):
            for o in range(k):
                rows.append(i * k + o)
                cols.append(jj * k + o)
    if rows:
        re, im = j_phi.entries(rows, cols)
        prog.add_equality(re)
        prog.add_equality(im)
    j_theta = choi_of(ch).matrix
    j_psi = (MatExpr.constant(j_theta) - j_phi).apply(_dephase_out_map(d, k), n)
    prog.add_psd(block_matrix([[y, -j_psi], [-j_psi, z]]))
    prog.add_psd(MatExpr.scaled_identity(mu_y, d) - y.apply(ptr, d))
    prog.add_psd(MatExpr.scaled_identity(mu_z, d) - z.apply(ptr, d))
    prog.minimize(0.5 * (mu_y + mu_z))
    sol = solve(prog, tol=tol, max_iter=max_iter)
    value = float(0.5 * (sol["mu_y"][0] + sol["mu_z"][0]))
    jp = sol["j_phi"].reshape(d, k, d, k)
    effects = tuple(np.diag(np.real(np.diagonal(jp[:, o, :, o]))) for o in range(k))
    return MeasureResult(value, sol.report, effects)


def _diamond_difference(ch: MeasurementChannel, tol, max_iter) -> MeasureResult:
    d, k = ch.in_dim, ch.out_dim
    prog = ConeProgram()
    t = prog.variable("t")
    effects = [prog.variable(f"d{n}", d) for n in range(k)]
    for e in effects:
        prog.add_nonneg(e)
    prog.add_equality(sum(effects[1:], effects[0]), np.ones(d))
    total = None
    for n, (pi, e) in enumerate(zip(ch.povm, effects)):
        z = _hermitian_or_symmetric(prog, f"z{n}", d, ch.is_real)
        prog.add_psd(z)
        prog.add_psd(z - (MatExpr.constant(pi.T) - MatExpr.diag(e)))
        total = z if total is None else total + z
    prog.add_psd(MatExpr.scaled_identity(t, d) - total)
    prog.minimize(2.0 * t)
    sol = solve(prog, tol=tol, max_iter=max_iter)
    return MeasureResult(2.0 * float(sol["t"][0]), sol.report, tuple(np.diag(sol[f"d{n}"]) for n in range(k)))


_FORMULATIONS = {"blocks": _diamond_blocks, "full": _diamond_full, "difference": _diamond_difference}


def solve_nsid(channel, tol: float | None = None, max_iter: int = 50_000, strict: bool = True) -> MeasureResult:
    """NSID measure of a two-outcome measurement.

    Reduces to ``2 min_D ||Pi_0 - D||_inf`` over diagonal ``0 <= D <= 1``,
    posed as ``min t`` with ``-t 1 <= Pi_0 - D <= t 1``.
    """
    ch = _as_channel(channel)
    if ch.out_dim != 2:
        raise UnsupportedOutcomeCount(
            "NSID is implemented for two outcomes only; for more outcomes the induced "
            "trace-norm distance is not a semidefinite program in general"
        )
    d = ch.in_dim
    pi0 = ch.povm[0]
    prog = ConeProgram()
    t = prog.variable("t")
    diag = prog.variable("d", d)
    prog.add_box(diag, 0.0, 1.0)
    x = MatExpr.constant(pi0) - MatExpr.diag(diag)
    t_eye = MatExpr.scaled_identity(t, d)
    prog.add_psd(t_eye - x)
    prog.add_psd(t_eye + x)
    prog.minimize(t)
    sol = solve(prog, tol=tol, max_iter=max_iter)
    d0 = np.diag(sol["d"])
    return _check(MeasureResult(2.0 * float(sol["t"][0]), sol.report, (d0, np.eye(d) - d0)), "NSID", strict)


def diamond_measure(channel, **kwargs) -> float:
    return solve_diamond(channel, **kwargs).value


def nsid_binary(channel, **kwargs) -> float:
    return solve_nsid(channel, **kwargs).value


# --------------------------------------------------------------------------
# Ensembles
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasureSummary:
    mean: float
    std: float
    min: float
    max: float
    count: int

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std, "min": self.min, "max": self.max, "count": self.count}


def summarize(values: Sequence[float]) -> MeasureSummary:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty ensemble")
    # identical members give exactly zero, not a rounding residue of the mean
    std = float(v.std(ddof=1)) if v.size > 1 and v.max() > v.min() else 0.0
    return MeasureSummary(float(v.mean()), std, float(v.min()), float(v.max()), int(v.size))


def measure_with_uncertainty(ensemble: Sequence, measure=diamond_measure) -> MeasureSummary:
    """Summary statistics of ``measure`` over a bootstrap ensemble of POVMs."""
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    return summarize([measure(povm) for povm in ensemble])


def dephased_povm(povm) -> list:
    return [dephase(p) for p in povm]
