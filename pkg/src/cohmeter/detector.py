"""Weak-field homodyne detector (WFHD) model.

The probe ``alpha`` and the local oscillator meet on a beam splitter of
reflectivity ``R``; the port reaching the APD carries
``sqrt(1-R) alpha + sqrt(R M) alpha_LO`` in the signal mode plus an
incoherent background of intensity ``R (1-M) |alpha_LO|^2`` from the part
of the LO that sits in the orthogonal mode. An APD with efficiency ``eta``
then stays silent with probability ``exp(-eta * detected_intensity)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fock import HermitianBanded, displacement_matrix

DEFAULT_DIM = 71
DEFAULT_BAND = 5
CSV_COLUMNS = ("alpha_re", "alpha_im", "shots", "clicks")


class TruncationWarning(UserWarning):
    """The truncated POVM misses operator weight above photon number dim-1."""


@dataclass(frozen=True)
class DetectorConfig:
    lo_intensity: float
    overlap: float = 0.99
    lo_phase: float = 0.0
    reflectivity: float = 0.5
    efficiency: float = 0.59
    dark_click: float = 0.0

    def __post_init__(self):
        if not (self.lo_intensity >= 0 and math.isfinite(self.lo_intensity)):
            raise ValueError(f"lo_intensity must be finite and >= 0, got {self.lo_intensity}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must lie in [0, 1], got {self.overlap}")
        if not 0.0 < self.reflectivity < 1.0:
            raise ValueError(f"reflectivity must lie in (0, 1), got {self.reflectivity}")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in (0, 1], got {self.efficiency}")
        if not 0.0 <= self.dark_click < 1.0:
            raise ValueError(f"dark_click must lie in [0, 1), got {self.dark_click}")
        if not math.isfinite(self.lo_phase):
            raise ValueError("lo_phase must be finite")

    @property
    def lo_amplitude(self) -> complex:
        return math.sqrt(self.lo_intensity) * complex(math.cos(self.lo_phase), math.sin(self.lo_phase))

    @property
    def displacement(self) -> complex:
        """Probe-side amplitude equivalent of the mode-matched LO."""
        r = self.reflectivity
        return math.sqrt(r * self.overlap / (1 - r)) * self.lo_amplitude

    @property
    def background_factor(self) -> float:
        """No-click factor from dark counts and the mode-mismatched LO."""
        r = self.reflectivity
        return (1 - self.dark_click) * math.exp(-self.efficiency * r * (1 - self.overlap) * self.lo_intensity)

    @property
    def transmission(self) -> float:
        """Per-photon no-click factor for probe photons."""
        return 1 - self.efficiency * (1 - self.reflectivity)


@dataclass(frozen=True)
class JitterModel:
    """Per-shot preparation noise on the probe amplitude."""

    amp_rel_sigma: float = 0.0
    phase_sigma: float = 0.0

    def __post_init__(self):
        if self.amp_rel_sigma < 0 or self.phase_sigma < 0:
            raise ValueError("jitter widths must be nonnegative")

    @property
    def is_zero(self) -> bool:
        return self.amp_rel_sigma == 0 and self.phase_sigma == 0


@dataclass(frozen=True)
class ProbeRecord:
    alpha: complex
    shots: int
    clicks: int

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError(f"shots must be >= 1, got {self.shots}")
        if not 0 <= self.clicks <= self.shots:
            raise ValueError(f"clicks must lie in [0, shots], got {self.clicks}/{self.shots}")

    @property
    def no_click_frequency(self) -> float:
        return 1.0 - self.clicks / self.shots


def detected_intensity(cfg: DetectorConfig, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=complex)
    r, m = cfg.reflectivity, cfg.overlap
    signal = math.sqrt(1 - r) * alpha + math.sqrt(r * m) * cfg.lo_amplitude
    return np.abs(signal) ** 2 + r * (1 - m) * cfg.lo_intensity


def no_click_probability(cfg: DetectorConfig, alpha):
    """Probability that the APD does not fire for a coherent probe ``alpha``.

    Accepts a scalar or an array of amplitudes.
    """
    p = (1 - cfg.dark_click) * np.exp(-cfg.efficiency * detected_intensity(cfg, alpha))
    return float(p) if np.ndim(p) == 0 else p


def _extended_dim(dim: int, transmission: float) -> int:
    # photon numbers beyond this carry transmission**n < 1e-20
    if transmission <= 0:
        return dim + 1
    reach = math.ceil(math.log(1e-20) / math.log(transmission)) if transmission < 1 else 4 * dim
    return max(dim + 40, min(reach, 6 * dim + 200) + 40)


def theoretical_povm_dense(cfg: DetectorConfig, dim: int = DEFAULT_DIM) -> tuple[np.ndarray, float]:
    """Dense no-click element on ``dim`` photon numbers and its truncation tail.

    ``Pi_0 = c D(-delta) T^n D(-delta)^dag`` with ``T`` the per-photon
    no-click factor and ``c`` the background factor. The tail is the largest
    matrix element lying outside the kept block.
    """
    if dim < 1:
        raise ValueError("dim must be at least 1")
    t = cfg.transmission
    big = _extended_dim(dim, t)
    disp = displacement_matrix(-cfg.displacement, big)
    weights = t ** np.arange(big)
    full = cfg.background_factor * (disp * weights) @ disp.conj().T
    full = (full + full.conj().T) / 2
    tail = float(np.abs(full[dim:, :]).max(initial=0.0)) if big > dim else 0.0
    return full[:dim, :dim], tail


def theoretical_povm(cfg: DetectorConfig, dim: int = DEFAULT_DIM, band: int | None = DEFAULT_BAND
                     ) -> tuple[HermitianBanded, HermitianBanded]:
    """Closed-form ``(Pi_0, Pi_1)`` truncated to ``dim`` and ``band``.

    ``band=None`` keeps every diagonal. Emits :class:`TruncationWarning`
    when operator weight above the cutoff exceeds 1e-6.
    """
    band = dim - 1 if band is None else min(band, dim - 1)
    dense, tail = theoretical_povm_dense(cfg, dim)
    if tail > 1e-6:
        warnings.warn(f"POVM truncation tail {tail:.2e} at dim={dim}", TruncationWarning, stacklevel=2)
    pi0 = HermitianBanded.from_dense(dense, band)
    pi1 = HermitianBanded.identity(dim, band) - pi0
    return pi0, pi1


def probe_grid(phases: int = 12, amplitudes: int = 10, min_mean: float = 0.05, max_mean: float = 40.0,
               include_vacuum: bool = False) -> list[complex]:
    """Ring probes: ``phases`` equally spaced phases times log-spaced ``|alpha|^2``."""
    means = np.geomspace(min_mean, max_mean, amplitudes)
    angles = 2 * np.pi * np.arange(phases) / phases
    out = [complex(math.sqrt(mu) * np.exp(1j * a)) for mu in means for a in angles]
    return ([0j] if include_vacuum else []) + out


def _draw_clicks(cfg: DetectorConfig, alpha: complex, shots: int, jitter: JitterModel,
                 rng: np.random.Generator) -> int:
    if jitter.is_zero:
        p_click = 1.0 - no_click_probability(cfg, alpha)
        return int(rng.binomial(shots, min(max(p_click, 0.0), 1.0)))
    amp = 1.0 + jitter.amp_rel_sigma * rng.standard_normal(shots)
    phase = jitter.phase_sigma * rng.standard_normal(shots)
    p0 = no_click_probability(cfg, alpha * amp * np.exp(1j * phase))
    return int(np.count_nonzero(rng.random(shots) >= p0))


def simulate_counts(cfg: DetectorConfig, probes: Sequence[complex], shots: int,
                    jitter: JitterModel = JitterModel(), seed: int = 0) -> list[ProbeRecord]:
    """Sample click counts for each probe.

    Probe ``i`` uses the generator seeded by ``(seed, i)``, so records do not
    depend on evaluation order. With jitter each shot sees its own perturbed
    amplitude.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    records = []
    for i, alpha in enumerate(probes):
        rng = np.random.default_rng([seed, i])
        clicks = _draw_clicks(cfg, complex(alpha), shots, jitter, rng)
        records.append(ProbeRecord(complex(alpha), shots, clicks))
    return records


def write_records_csv(records: Iterable[ProbeRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([repr(r.alpha.real), repr(r.alpha.imag), r.shots, r.clicks])


def read_records_csv(path) -> list[ProbeRecord]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(CSV_COLUMNS)}, got {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            re_, im_, shots, clicks = row
            out.append(ProbeRecord(complex(float(re_), float(im_)), int(shots), int(clicks)))
    return out
