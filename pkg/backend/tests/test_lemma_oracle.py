from __future__ import annotations

import math

import numpy as np
import pytest

from sdlyap.core import ComparisonFunction, validate_kl_function
from sdlyap.errors import DefinitionError, InputError
from sdlyap.lemma_oracle import (
    TimeSeries,
    comparison_check,
    comparison_scenario,
    sigma_from_rho,
    smallgain_envelope_check,
    smallgain_scenario,
)

LINEAR = ComparisonFunction.parse("s", "positive-definite")
QUADRATIC = ComparisonFunction.parse("s^2", "positive-definite")
GRID = [(s, t) for s in (0.1, 1.0, 10.0) for t in (0.1, 1.0, 10.0)]


@pytest.mark.parametrize("s,t", GRID)
def test_flow_of_linear_rho_is_exponential(s, t):
    assert abs(sigma_from_rho(LINEAR)(s, t) - s * math.exp(-t)) <= 1e-8


@pytest.mark.parametrize("s,t", GRID)
def test_flow_of_quadratic_rho(s, t):
    assert abs(sigma_from_rho(QUADRATIC)(s, t) - s / (1 + s * t)) <= 1e-8


def test_semigroup_and_edge_values():
    sigma = sigma_from_rho(QUADRATIC)
    for s in (0.5, 2.0):
        assert sigma(sigma(s, 0.7), 1.3) == pytest.approx(sigma(s, 2.0), abs=1e-7)
    assert sigma(3.0, 0.0) == 3.0
    assert sigma(0.0, 5.0) == 0.0
    with pytest.raises(InputError):
        sigma(-1.0, 1.0)


def test_flow_is_a_kl_function():
    assert all(check.passed for check in validate_kl_function(sigma_from_rho(LINEAR)))


def test_table_matches_pointwise_values():
    sigma = sigma_from_rho(QUADRATIC)
    table = sigma.table(np.array([0.5, 2.0]), 0.25, 8)
    assert table.shape == (2, 9)
    assert table[1, 8] == pytest.approx(2.0 / (1 + 2.0 * 2.0), abs=1e-8)


def test_negative_rho_is_rejected():
    with pytest.raises(DefinitionError):
        sigma_from_rho(ComparisonFunction.parse("-s", "positive-definite"))


def test_comparison_scenarios_pass():
    rng = np.random.default_rng(1)
    sigma = sigma_from_rho(LINEAR)
    for _ in range(100):
        y, u = comparison_scenario(rng, LINEAR, horizon=5.0, samples=101, sigma=sigma)
        report = comparison_check(y, u, LINEAR, sigma=sigma)
        assert report.status == "pass", report


def test_comparison_reports_a_violated_hypothesis():
    times = np.linspace(0.0, 1.0, 11)
    y = TimeSeries(times, 1.0 + times)
    u = TimeSeries(times, np.zeros_like(times))
    report = comparison_check(y, u, LINEAR)
    assert report.status == "hypothesis-violated"
    assert report.witness_time is not None


def test_comparison_reports_a_failed_conclusion():
    times = np.linspace(0.0, 1.0, 11)
    # derivative samples claim a fast decay the values do not show
    y = TimeSeries(times, 1.0 + times, derivative=np.full(11, -10.0))
    u = TimeSeries(times, np.zeros_like(times))
    report = comparison_check(y, u, LINEAR)
    assert report.status == "fail"
    assert report.worst_margin < 0
    assert report.witness_time is not None


def test_series_must_share_a_uniform_grid():
    with pytest.raises(InputError):
        comparison_check(
            TimeSeries([0.0, 1.0, 2.0], [1.0, 1.0, 1.0]),
            TimeSeries([0.0, 1.0, 3.0], [0.0, 0.0, 0.0]),
            LINEAR,
        )
    with pytest.raises(InputError):
        TimeSeries([0.0, 0.0], [1.0, 1.0])


def test_smallgain_scenarios_pass():
    rng = np.random.default_rng(2)
    sigma = sigma_from_rho(LINEAR)
    half = ComparisonFunction.parse("s/2", "N")
    for _ in range(20):
        y, u, M = smallgain_scenario(rng, sigma, half, horizon=5.0, samples=101)
        report = smallgain_envelope_check(y, u, sigma, half, M)
        assert report.status == "pass", report
        assert set(report.consequences) == {"bounded_by_initial_and_input", "eventual_domination"}


def test_smallgain_rejects_non_contractions_and_bad_data():
    sigma = sigma_from_rho(LINEAR)
    times = np.linspace(0.0, 1.0, 11)
    y = TimeSeries(times, np.full(11, 5.0))
    u = TimeSeries(times, np.zeros(11))
    with pytest.raises(InputError):
        smallgain_envelope_check(y, u, sigma, ComparisonFunction.parse("s", "N"), 1.0)
    report = smallgain_envelope_check(y, u, sigma, ComparisonFunction.parse("s/2", "N"), 1.0)
    assert report.status == "hypothesis-violated"
