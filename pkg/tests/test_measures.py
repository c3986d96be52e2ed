import itertools
import warnings

import numpy as np
import pytest

from cohmeter.detector import DetectorConfig, TruncationWarning, theoretical_povm
from cohmeter.fock import HermitianBanded
from cohmeter.measures import (
    MeasureError,
    UnsupportedOutcomeCount,
    channel_from_povm,
    choi_of,
    dephased_povm,
    dephasing_gap_lower_bound,
    diamond_measure,
    is_detection_incoherent,
    measure_with_uncertainty,
    nsid_binary,
    solve_diamond,
    solve_nsid,
    summarize,
)

from conftest import binary, random_binary_povm, random_povm

QUBIT = np.array([[0.5, 0.25], [0.25, 0.5]])
FORMULATIONS = ("blocks", "full", "difference")


def choi_by_definition(povm):
    """sum_ij |i><j| (x) Theta(|i><j|) with Theta(X) = sum_n tr(X Pi_n) |n><n|."""
    d, k = povm[0].shape[0], len(povm)
    j = np.zeros((d * k, d * k), complex)
    for a, b in itertools.product(range(d), repeat=2):
        unit = np.zeros((d, d))
        unit[a, b] = 1
        out = np.diag([np.trace(unit @ p) for p in povm])
        j += np.kron(unit, out)
    return j


class TestChannel:
    def test_choi_convention(self, rng):
        povm = random_povm(3, 3, rng)
        ch = channel_from_povm(povm)
        assert np.allclose(choi_of(ch).matrix, choi_by_definition(povm))

    def test_identity_and_zero_elements(self):
        ch = channel_from_povm([np.eye(4), np.zeros((4, 4))])
        j = choi_of(ch).matrix
        proj = np.diag([1.0, 0.0])
        assert np.allclose(j, np.kron(np.eye(4), proj))
        assert np.trace(j).real == pytest.approx(4)

    def test_partial_trace_is_identity(self, rng):
        for k in (2, 3, 4):
            ch = channel_from_povm(random_povm(4, k, rng))
            assert np.allclose(choi_of(ch).partial_trace_out(), np.eye(4), atol=1e-12)

    def test_diagonal_povm_commutes_with_diagonal_unitaries(self, rng):
        pi0 = np.diag(rng.uniform(size=3))
        j = choi_of(channel_from_povm(binary(pi0))).matrix
        for _ in range(5):
            u = np.kron(np.diag(np.exp(1j * rng.uniform(0, 6, 3))), np.diag(np.exp(1j * rng.uniform(0, 6, 2))))
            assert np.allclose(u @ j, j @ u)

    def test_completeness_check(self):
        with pytest.raises(ValueError, match="incomplete"):
            channel_from_povm([np.eye(2) * 0.5, np.eye(2) * 0.49])
        channel_from_povm([np.eye(2) * 0.5, np.eye(2) * (0.5 - 5e-7)])

    def test_renormalize(self, rng):
        parts = [0.4 * np.eye(3) + 0.05 * np.ones((3, 3)), 0.55 * np.eye(3)]
        ch = channel_from_povm(parts, renormalize=True)
        assert np.allclose(sum(ch.povm), np.eye(3), atol=1e-12)

    def test_banded_input(self):
        pi0 = HermitianBanded((np.array([0.5, 0.5]), np.array([0.25])))
        ch = channel_from_povm([pi0, HermitianBanded.identity(2, 1) - pi0])
        assert np.allclose(ch.povm[0], QUBIT)


class TestIncoherence:
    def test_lo_off_is_incoherent(self):
        ok, worst = is_detection_incoherent(theoretical_povm(DetectorConfig(0.0), dim=30))
        assert ok and worst == 0.0

    def test_weak_lo_good_overlap_is_coherent(self):
        ok, worst = is_detection_incoherent(theoretical_povm(DetectorConfig(0.5, 0.99), dim=71))
        assert not ok and worst > 0.05

    def test_dephased_copy_is_incoherent(self, rng):
        povm = [HermitianBanded.from_dense(p, 2) for p in random_povm(5, 3, rng)]
        assert is_detection_incoherent(dephased_povm(povm))[0]

    def test_dense_input(self):
        ok, worst = is_detection_incoherent(binary(QUBIT))
        assert not ok and worst == 0.25


class TestDiamond:
    @pytest.mark.parametrize("formulation", FORMULATIONS)
    def test_qubit_value(self, formulation):
        assert diamond_measure(binary(QUBIT), formulation=formulation) == pytest.approx(0.5, abs=1e-5)

    @pytest.mark.parametrize("formulation", FORMULATIONS)
    def test_diagonal_povm_is_zero(self, rng, formulation):
        povm = [np.diag(np.diag(p).real) for p in random_povm(4, 3, rng)]
        assert diamond_measure(povm, formulation=formulation) <= 1e-6

    def test_formulations_agree_on_three_outcomes(self, rng):
        for _ in range(3):
            povm = random_povm(3, 3, rng)
            values = [diamond_measure(povm, formulation=f, tol=1e-8) for f in FORMULATIONS]
            assert max(values) - min(values) <= 1e-5
            assert 0 <= values[0] <= 2

    def test_formulations_agree_on_complex_binary(self, rng):
        povm = binary(random_binary_povm(4, rng))
        values = [diamond_measure(povm, formulation=f, tol=1e-8) for f in FORMULATIONS]
        assert max(values) - min(values) <= 1e-5

    def test_optimal_effects_form_diagonal_povm(self, rng):
        res = solve_diamond(random_povm(3, 3, rng))
        total = sum(res.effects)
        assert np.allclose(total, np.eye(3), atol=1e-6)
        for e in res.effects:
            assert np.count_nonzero(e - np.diag(np.diag(e))) == 0
            assert np.diag(e).min() >= -1e-6

    def test_unknown_formulation(self):
        with pytest.raises(ValueError, match="formulation"):
            solve_diamond(binary(QUBIT), formulation="primal")

    def test_iteration_cap(self, rng):
        povm = binary(random_binary_povm(5, rng))
        with pytest.raises(MeasureError) as info:
            solve_diamond(povm, max_iter=3)
        assert info.value.report.status == "max_iter"
        loose = solve_diamond(povm, max_iter=3, strict=False)
        assert loose.report.status == "max_iter"

    def test_binary_value_at_most_one(self, rng):
        for _ in range(5):
            assert diamond_measure(binary(random_binary_povm(4, rng))) <= 1 + 1e-6


class TestNsid:
    def test_qubit(self):
        res = solve_nsid(binary(QUBIT))
        assert res.value == pytest.approx(0.5, abs=1e-6)
        assert np.allclose(np.diag(res.effects[0]), [0.5, 0.5], atol=1e-4)

    def test_diagonal_is_zero(self):
        assert nsid_binary(binary(np.diag([0.1, 0.9, 0.3]))) <= 1e-7

    def test_rejects_three_outcomes(self, rng):
        with pytest.raises(UnsupportedOutcomeCount, match="two outcomes"):
            nsid_binary(random_povm(3, 3, rng))

    def test_matches_brute_force_over_diagonals(self, rng):
        pi0 = random_binary_povm(2, rng)
        grid = np.linspace(0, 1, 1001)
        d1, d2 = np.meshgrid(grid, grid, indexing="ij")
        # spectral norm of a 2x2 Hermitian matrix in closed form
        a, c, b = pi0[0, 0].real - d1, pi0[1, 1].real - d2, abs(pi0[0, 1])
        norm = np.abs((a + c) / 2) + np.sqrt(((a - c) / 2) ** 2 + b ** 2)
        assert nsid_binary(binary(pi0)) == pytest.approx(2 * norm.min(), abs=2e-3)
        assert nsid_binary(binary(pi0)) <= 2 * norm.min() + 1e-6

    def test_equals_diamond_on_random_banded(self, rng):
        for dim in (3, 5, 8):
            povm = binary(random_binary_povm(dim, rng, band=2))
            assert abs(diamond_measure(povm) - nsid_binary(povm)) <= 1e-4


class TestLowerBound:
    def test_values(self):
        assert dephasing_gap_lower_bound(binary(QUBIT)) == 0.25
        assert dephasing_gap_lower_bound(binary(np.diag([0.2, 0.4]))) == 0.0

    def test_never_exceeds_diamond(self, rng):
        for dim in (2, 3, 4, 6):
            povm = binary(random_binary_povm(dim, rng))
            assert dephasing_gap_lower_bound(povm) <= diamond_measure(povm) + 1e-6

    def test_rejects_three_outcomes(self, rng):
        with pytest.raises(UnsupportedOutcomeCount):
            dephasing_gap_lower_bound(random_povm(2, 3, rng))

    @pytest.mark.parametrize("lo", (0.5, 1.0, 2.0, 3.0, 4.0))
    def test_grows_with_mode_overlap(self, lo):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            bounds = [dephasing_gap_lower_bound(theoretical_povm(DetectorConfig(lo, m), dim=40)) for m in (0.75, 0.85, 0.99)]
        assert bounds[0] < bounds[1] < bounds[2]


class TestInvariances:
    def test_diagonal_unitary(self, rng):
        pi0 = random_binary_povm(4, rng)
        u = np.diag(np.exp(1j * rng.uniform(0, 2 * np.pi, 4)))
        a = diamond_measure(binary(pi0))
        b = diamond_measure(binary(u @ pi0 @ u.conj().T))
        assert abs(a - b) <= 1e-5

    def test_outcome_swap(self, rng):
        pi0 = random_binary_povm(4, rng)
        fwd, rev = binary(pi0), binary(pi0)[::-1]
        assert abs(diamond_measure(fwd, tol=1e-8) - diamond_measure(rev, tol=1e-8)) <= 1e-6
        assert abs(nsid_binary(fwd, tol=1e-8) - nsid_binary(rev, tol=1e-8)) <= 1e-6


class TestUncertainty:
    def test_identical_members(self):
        s = measure_with_uncertainty([binary(QUBIT)] * 3)
        assert s.std == 0.0 and s.count == 3
        assert s.mean == pytest.approx(0.5, abs=1e-5)

    def test_single_member(self):
        s = measure_with_uncertainty([binary(QUBIT)], measure=nsid_binary)
        assert s.mean == pytest.approx(nsid_binary(binary(QUBIT))) and s.std == 0.0

    def test_summary(self):
        s = summarize([1.0, 2.0, 3.0])
        assert (s.mean, s.min, s.max) == (2.0, 1.0, 3.0)
        assert s.std == pytest.approx(1.0)
        assert s.to_json()["count"] == 3

    def test_empty(self):
        with pytest.raises(ValueError):
            measure_with_uncertainty([])
