"""Coherence-detection benchmarks for a weak-field homodyne detector.

Submodules: :mod:`fock` (truncated Fock space), :mod:`detector` (detector
model and synthetic data), :mod:`tomography` (POVM reconstruction),
:mod:`solver` (ADMM conic solver), :mod:`measures` (diamond and NSID
measures) and :mod:`cli`.
"""

__version__ = "0.1.0"

from .detector import DetectorConfig, JitterModel, ProbeRecord, no_click_probability, simulate_counts, theoretical_povm
from .fock import HermitianBanded, born_probability, coherent_amplitudes, dephase
from .measures import (
    channel_from_povm,
    dephasing_gap_lower_bound,
    diamond_measure,
    is_detection_incoherent,
    measure_with_uncertainty,
    nsid_binary,
)
from .tomography import ReconstructionSettings, bootstrap_reconstruct, build_design, reconstruct_povm

__all__ = [
    "DetectorConfig",
    "HermitianBanded",
    "JitterModel",
    "ProbeRecord",
    "ReconstructionSettings",
    "born_probability",
    "bootstrap_reconstruct",
    "build_design",
    "channel_from_povm",
    "coherent_amplitudes",
    "dephase",
    "dephasing_gap_lower_bound",
    "diamond_measure",
    "is_detection_incoherent",
    "measure_with_uncertainty",
    "no_click_probability",
    "nsid_binary",
    "reconstruct_povm",
    "simulate_counts",
    "theoretical_povm",
]
