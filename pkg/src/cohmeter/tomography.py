"""Detector tomography for a binary (click / no-click) detector.

The no-click element ``Pi_0`` is parametrized by its banded entries: the
real main diagonal followed by real and imaginary parts of each kept
off-diagonal. Coherent probes turn the Born rule into a linear map from
these parameters to no-click probabilities, which is fitted by regularized
least squares under ``0 <= Pi_0 <= 1``. ``Pi_1`` is ``1 - Pi_0``.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .detector import DEFAULT_BAND, DEFAULT_DIM, JitterModel, ProbeRecord
from .fock import HermitianBanded, coherent_amplitudes
from .solver import OPTIMAL, ConeProgram, MatExpr, SolverReport, SolverSettings, solve

logger = logging.getLogger(__name__)

POVM_SCHEMA = "cohmeter.povm/1"


class RankDeficiencyError(ValueError):
    pass


class ReconstructionError(RuntimeError):
    """Solver did not converge; carries the best iterate found."""

    def __init__(self, message: str, best: tuple[HermitianBanded, HermitianBanded] | None, report: SolverReport):
        super().__init__(message)
        self.best = best
        self.report = report


@dataclass(frozen=True)
class ReconstructionSettings:
    dim: int = DEFAULT_DIM
    band: int = DEFAULT_BAND
    reg_weight: float = 1e-3
    solver_tol: float = 1e-7
    weighting: str = "uniform"  # or "inverse_variance"
    max_iter: int = 50_000

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not 0 <= self.band < self.dim:
            raise ValueError(f"band must satisfy 0 <= band < dim, got band={self.band}, dim={self.dim}")
        if not (math.isfinite(self.reg_weight) and self.reg_weight >= 0):
            raise ValueError("reg_weight must be finite and >= 0")
        if self.weighting not in ("uniform", "inverse_variance"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass
class Design:
    matrix: np.ndarray
    dim: int
    band: int
    condition_number: float


@dataclass
class FitReport:
    residual: float
    regularizer: float
    solver: SolverReport
    condition_number: float
    settings: ReconstructionSettings = field(repr=False, default=None)

    def to_json(self) -> dict:
        return {
            "residual": self.residual,
            "regularizer": self.regularizer,
            "condition_number": self.condition_number,
            "solver": self.solver.to_json(),
            "settings": asdict(self.settings) if self.settings else None,
        }


# --------------------------------------------------------------------------
# Parameter layout
# --------------------------------------------------------------------------


def num_params(dim: int, band: int) -> int:
    return dim + 2 * sum(dim - k for k in range(1, band + 1))


def _offsets(dim: int, band: int) -> list[tuple[int, int]]:
    """(re_offset, im_offset) of each off-diagonal k = 1..band."""
    out, off = [], dim
    for k in range(1, band + 1):
        out.append((off, off + dim - k))
        off += 2 * (dim - k)
    return out


def params_from_banded(op: HermitianBanded, band: int | None = None) -> np.ndarray:
    band = op.band if band is None else band
    op = op.with_band(band)
    parts = [op.diagonals[0].real]
    for k in range(1, band + 1):
        parts += [op.diagonals[k].real, op.diagonals[k].imag]
    return np.concatenate(parts)


def banded_from_params(x: np.ndarray, dim: int, band: int) -> HermitianBanded:
    diags = [np.asarray(x[:dim], dtype=complex)]
    for k, (re_off, im_off) in enumerate(_offsets(dim, band), start=1):
        size = dim - k
        diags.append(x[re_off : re_off + size] + 1j * x[im_off : im_off + size])
    return HermitianBanded(tuple(diags))


def _param_to_vec_map(dim: int, band: int) -> sp.csr_matrix:
    """Complex sparse map from parameters to row-major vec(Pi_0)."""
    rows, cols, vals = [], [], []
    j = np.arange(dim)
    rows.append(j * dim + j)
    cols.append(j)
    vals.append(np.ones(dim, complex))
    for k, (re_off, im_off) in enumerate(_offsets(dim, band), start=1):
        jj = np.arange(dim - k)
        up, lo = jj * dim + jj + k, (jj + k) * dim + jj
        rows += [up, lo, up, lo]
        cols += [re_off + jj, re_off + jj, im_off + jj, im_off + jj]
        vals += [np.ones(dim - k), np.ones(dim - k), np.full(dim - k, 1j), np.full(dim - k, -1j)]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(dim * dim, num_params(dim, band)),
    )


def smoothing_matrix(dim: int, band: int) -> sp.csr_matrix:
    """First differences along every kept diagonal, real and imaginary parts separately."""
    blocks = []

    def diff(size: int) -> sp.csr_matrix:
        if size < 2:
            return sp.csr_matrix((0, size))
        return sp.diags([-np.ones(size - 1), np.ones(size - 1)], [0, 1], shape=(size - 1, size), format="csr")

    blocks.append(diff(dim))
    for k in range(1, band + 1):
        blocks += [diff(dim - k), diff(dim - k)]
    return sp.block_diag(blocks, format="csr")


# --------------------------------------------------------------------------
# Design matrix
# --------------------------------------------------------------------------


def design_row(alpha: complex, dim: int, band: int) -> np.ndarray:
    v = coherent_amplitudes(alpha, dim)
    parts = [np.abs(v) ** 2]
    for k in range(1, band + 1):
        w = np.conj(v[: dim - k]) * v[k:]
        parts += [2 * w.real, -2 * w.imag]
    return np.concatenate(parts)


def _distinct_phases(probes: Sequence[complex], decimals: int = 9) -> int:
    units = {(round(a.real / abs(a), decimals), round(a.imag / abs(a), decimals)) for a in map(complex, probes) if abs(a) > 0}
    return len(units)


def build_design(probes: Sequence[complex], dim: int, band: int, check_rank: bool = True) -> Design:
    """Real matrix mapping banded parameters of ``Pi_0`` to ``<alpha|Pi_0|alpha>``.

    With ``check_rank`` the probe phases must be able to separate every
    kept diagonal, which needs at least ``2 * band + 1`` distinct phases.
    """
    if len(probes) == 0:
        raise ValueError("need at least one probe")
    if not 0 <= band < dim:
        raise ValueError(f"band must satisfy 0 <= band < dim, got band={band}, dim={dim}")
    if check_rank and band > 0:
        phases = _distinct_phases(probes)
        if phases < 2 * band + 1:
            raise RankDeficiencyError(
                f"band {band} needs at least {2 * band + 1} distinct probe phases, got {phases}"
            )
    f = np.array([design_row(a, dim, band) for a in probes])
    sv = np.linalg.svd(f, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 and f.shape[0] >= f.shape[1] else float("inf")
    return Design(f, dim, band, cond)


# --------------------------------------------------------------------------
# Reconstruction
# --------------------------------------------------------------------------


def _weights(records: Sequence[ProbeRecord], scheme: str) -> np.ndarray:
    if scheme == "uniform":
        return np.ones(len(records))
    shots = np.array([r.shots for r in records], float)
    freq = np.array([r.no_click_frequency for r in records])
    # add-one smoothing keeps the variance away from zero at p in {0, 1}
    p = (freq * shots + 1) / (shots + 2)
    w = shots / (p * (1 - p))
    return w / w.mean()


def reconstruct_povm(records: Sequence[ProbeRecord], settings: ReconstructionSettings = ReconstructionSettings()
                     ) -> tuple[HermitianBanded, HermitianBanded, FitReport]:
    """Fit ``Pi_0`` to the observed no-click frequencies.

    Minimizes ``sum_i w_i (F x - p)_i^2 + reg_weight * ||G x||^2`` subject to
    ``0 <= Pi_0 <= 1``, where ``G`` takes adjacent differences along each
    kept diagonal.
    """
    if not records:
        raise ValueError("no probe records")
    dim, band = settings.dim, settings.band
    design = build_design([r.alpha for r in records], dim, band)
    freq = np.array([r.no_click_frequency for r in records])
    sqrt_w = np.sqrt(_weights(records, settings.weighting))

    prog = ConeProgram()
    x = prog.variable("x", num_params(dim, band))
    prog.add_squared_norm(x.left_multiply(sqrt_w[:, None] * design.matrix) - sqrt_w * freq)
    g = smoothing_matrix(dim, band)
    prog.add_squared_norm(x.left_multiply(g), settings.reg_weight)
    pi0 = MatExpr(dim, {"x": _param_to_vec_map(dim, band)})
    prog.add_psd(pi0)
    prog.add_psd(MatExpr.constant(np.eye(dim)) - pi0)

    sol = solve(prog, tol=settings.solver_tol, settings=SolverSettings(max_iter=settings.max_iter))
    params = sol["x"]
    pi0_op = banded_from_params(params, dim, band)
    pi1_op = HermitianBanded.identity(dim, band) - pi0_op
    report = FitReport(
        residual=float(np.sum((design.matrix @ params - freq) ** 2)),
        regularizer=float(np.sum((g @ params) ** 2)),
        solver=sol.report,
        condition_number=design.condition_number,
        settings=settings,
    )
    if sol.report.status != OPTIMAL:
        raise ReconstructionError(
            f"tomography solver stopped with status {sol.report.status} "
            f"(rp={sol.report.primal_residual:.2e}, rd={sol.report.dual_residual:.2e})",
            (pi0_op, pi1_op),
            sol.report,
        )
    return pi0_op, pi1_op, report


def resample_records(records: Sequence[ProbeRecord], rng: np.random.Generator,
                     jitter: JitterModel = JitterModel()) -> list[ProbeRecord]:
    """Parametric bootstrap: binomial click counts and jittered nominal amplitudes."""
    out = []
    for r in records:
        clicks = int(rng.binomial(r.shots, r.clicks / r.shots))
        alpha = r.alpha
        if not jitter.is_zero:
            amp = 1.0 + jitter.amp_rel_sigma * rng.standard_normal()
            alpha = alpha * amp * np.exp(1j * jitter.phase_sigma * rng.standard_normal())
        out.append(ProbeRecord(complex(alpha), r.shots, clicks))
    return out


def _bootstrap_one(args):
    records, settings, seed, index, jitter = args
    rng = np.random.default_rng([seed, index])
    pi0, pi1, _ = reconstruct_povm(resample_records(records, rng, jitter), settings)
    return pi0, pi1


def bootstrap_reconstruct(records: Sequence[ProbeRecord], settings: ReconstructionSettings = ReconstructionSettings(),
                          resamples: int = 50, seed: int = 0, jitter: JitterModel = JitterModel(),
                          workers: int = 1) -> list[tuple[HermitianBanded, HermitianBanded]]:
    """Reconstruct ``resamples`` parametric-bootstrap replicas.

    Replica ``r`` draws from the generator seeded by ``(seed, r)``, so the
    ensemble is identical for any worker count.
    """
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    jobs = [(list(records), settings, seed, r, jitter) for r in range(resamples)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_bootstrap_one, jobs))
    return [_bootstrap_one(job) for job in jobs]


# --------------------------------------------------------------------------
# POVM files
# --------------------------------------------------------------------------


def povm_to_json(povm: Sequence[HermitianBanded], meta: dict | None = None) -> dict:
    dims = {p.dim for p in povm}
    if len(dims) != 1:
        raise ValueError("POVM elements must share a dimension")
    band = max(p.band for p in povm)
    elements = []
    for n, p in enumerate(povm):
        p = p.with_band(band)
        elements.append({
            "outcome": n,
            "diagonals": [[[float(z.real), float(z.imag)] for z in d] for d in p.diagonals],
        })
    return {"schema": POVM_SCHEMA, "dim": dims.pop(), "band": band, "elements": elements, "meta": meta or {}}


def povm_from_json(data: dict) -> tuple[list[HermitianBanded], dict]:
    dim, band = int(data["dim"]), int(data["band"])
    elements = sorted(data["elements"], key=lambda e: e["outcome"])
    povm = []
    for e in elements:
        diags = tuple(np.array([complex(re, im) for re, im in d], dtype=complex) for d in e["diagonals"])
        op = HermitianBanded(diags)
        if op.dim != dim or op.band != band:
            raise ValueError(f"element {e['outcome']} does not match dim={dim}, band={band}")
        povm.append(op)
    return povm, data.get("meta", {})


def save_povm(path, povm: Sequence[HermitianBanded], meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(povm_to_json(povm, meta), indent=1), encoding="utf-8")


def load_povm(path) -> tuple[list[HermitianBanded], dict]:
    return povm_from_json(json.loads(Path(path).read_text(encoding="utf-8")))

