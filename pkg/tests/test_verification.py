import json

import pytest
import numpy as np

import utils.verification as verification
from utils.diagnostics import HESSIAN_WINDOW_PAD
from utils.errors import RegimeError
from utils.kernels import kernel_at_zero
from utils.verification import (SUITE_NAMES, SUITES, CheckResult, check_balanced_bandwidth, check_curl_contrast,
                                check_determinism, check_divergence_pair, check_gaussian_proportionality,
                                check_laplace_decomposition, check_quadrature_sandwich, check_occupancy_implication,
                                check_potential_ascent, check_reciprocal_self_bound, check_rk4_linear_field,
                                check_stationarity, check_w2_domination, run_suite)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def test_check_result_to_dict():
    """Test the report entry layout"""
    result = CheckResult('stationarity', 'Particles on the target atoms stay put', 0.0, 0.0, True,
                         {'extra': np.float64(1.5)})
    entry = result.to_dict()
    assert entry['pass'] is True
    assert set(entry) == {'name', 'paper_anchor', 'value', 'tolerance', 'pass', 'details'}
    json.dumps({k: v for k, v in entry.items() if k != 'details'})


def test_every_suite_is_registered():
    """Test each named suite has checks"""
    assert set(SUITES) == set(SUITE_NAMES)
    assert all(SUITES[name] for name in SUITE_NAMES)


@pytest.mark.parametrize("check", [
    check_gaussian_proportionality,
    check_laplace_decomposition,
    check_divergence_pair,
    check_curl_contrast,
    check_reciprocal_self_bound,
    check_w2_domination,
    check_balanced_bandwidth,
    check_occupancy_implication,
    check_rk4_linear_field,
    check_determinism,
    check_stationarity,
    check_potential_ascent,
])
def test_cheap_checks_pass(rng, check):
    """Test the fast identity and bound checks pass"""
    result = check(rng)
    assert result.passed, f"{result.name}: value {result.value} above tolerance {result.tolerance}"


def test_run_suite_seeding(mocker):
    """Test each check gets a reproducible stream of its own"""
    seen = []

    def record(rng):
        seen.append(rng.uniform())
        return CheckResult('record', 'stream recorder', 0.0, 0.0, True)

    mocker.patch.dict(SUITES, {'euler': [record, record]})
    run_suite('euler', 5)
    run_suite('euler', 5)
    assert seen[0] != seen[1], "Checks in one suite use different streams"
    assert seen[:2] == seen[2:], "Same seed gives the same streams"


def test_run_suite_turns_errors_into_failures(mocker):
    """Test a check raising a library error becomes a failed result"""
    def explode(rng):
        raise RegimeError("beta >= 2")

    mocker.patch.dict(SUITES, {'trend': [explode]})
    results = run_suite('trend', 0)
    assert len(results) == 1
    assert not results[0].passed
    assert results[0].details['error'] == 'RegimeError'


def test_run_suite_all_and_unknown(mocker):
    """Test 'all' runs every suite and unknown names are refused"""
    stub = lambda rng: CheckResult('stub', 'stub', 0.0, 0.0, True)
    mocker.patch.dict(SUITES, {name: [stub] for name in SUITE_NAMES})
    assert len(run_suite('all', 0)) == len(SUITE_NAMES)
    with pytest.raises(ValueError):
        run_suite('nonsense', 0)


def test_divergence_pair_checks_single_particle_term(rng):
    """Test the N = 1, d = 1, h = 1 self term is held to -1 at its own 1e-6 tolerance"""
    result = check_divergence_pair(rng)
    assert result.details['single_particle_correction'] == pytest.approx(-1.0, abs=1e-6)
    assert result.tolerance == 1.0, "Both gaps are normalised by their own tolerance"


def test_divergence_pair_fails_on_wrong_self_term(mocker, rng):
    """Test a self term off by 1e-5 fails even though the pair gap tolerance is 1e-4"""
    mocker.patch('utils.verification.self_interaction_correction', return_value=-1.0 + 1e-5)
    result = check_divergence_pair(rng)
    assert not result.passed
    assert result.value == pytest.approx(10.0, rel=1e-3)


def test_curl_contrast_check_details(rng):
    """Test the Laplace curl is at least ten times the conservative curl"""
    result = check_curl_contrast(rng)
    maxima = result.details['curl_max_abs']
    assert maxima['laplace'] >= 10 * maxima['conservative']
    assert result.details['curl_contrast_ok']


def test_quadrature_sandwich_window_pad(mocker, rng):
    """Test the Hessian sup window is padded by 3h"""
    window = mocker.spy(verification, 'default_window')
    check_quadrature_sandwich(rng)
    pads = {call.kwargs['pad'] for call in window.call_args_list if 'pad' in call.kwargs}
    assert pads == {HESSIAN_WINDOW_PAD}
    assert HESSIAN_WINDOW_PAD == 3.0


def test_self_bound_breach_fails_the_suite(mocker):
    """Test a reciprocal KDE forced above its self-bound turns into a failed check"""
    mocker.patch('utils.diagnostics.kde_density',
                 side_effect=lambda alpha, kernel, z: np.full(len(z), 0.5 * kernel_at_zero(kernel) / len(z)))
    mocker.patch.dict(SUITES, {'bounds': [SUITES['bounds'][0]]})
    results = run_suite('bounds', 0)
    assert len(results) == 1
    assert not results[0].passed
    assert results[0].details['error'] == 'InvariantViolation'
