"""Numerical tolerances shared by every module."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    eig_residual: float = 1e-9
    hermitian: float = 1e-10
    psd_slack: float = 1e-10
    prob_clamp: float = 1e-9
    trace: float = 1e-12
    completeness: float = 1e-6
    channel: float = 1e-8
    truncation_warning: float = 1e-6


TOL = Tolerances()
