import numpy as np
import pytest

from cohmeter.fock import random_density_matrix

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def random_binary_povm(dim: int, rng: np.random.Generator, band: int | None = None, real: bool = False) -> np.ndarray:
    """No-click element with spectrum spread over [0, 1], optionally banded."""
    g = rng.normal(size=(dim, dim))
    if not real:
        g = g + 1j * rng.normal(size=(dim, dim))
    h = g @ g.conj().T
    if band is not None:
        j, k = np.indices((dim, dim))
        h = np.where(np.abs(j - k) <= band, h, 0)
    w, v = np.linalg.eigh(h)
    # affine map of the spectrum into [0.05, 0.95] keeps the band structure
    lo, hi = w[0], w[-1]
    scale = 0.9 / (hi - lo) if hi > lo else 0.0
    return scale * (h - lo * np.eye(dim)) + 0.05 * np.eye(dim)


def random_povm(dim: int, outcomes: int, rng: np.random.Generator) -> list[np.ndarray]:
    parts = [random_density_matrix(dim, rng) for _ in range(outcomes)]
    total = sum(parts)
    w, v = np.linalg.eigh(total)
    inv_sqrt = (v / np.sqrt(w)) @ v.conj().T
    return [inv_sqrt @ p @ inv_sqrt for p in parts]


def binary(pi0: np.ndarray) -> list[np.ndarray]:
    return [pi0, np.eye(pi0.shape[0]) - pi0]


@pytest.fixture
def rng():
    return np.random.default_rng(20241016)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
