from __future__ import annotations

from types import SimpleNamespace

import pytest

from sdlyap import masp
from sdlyap.core import Region
from sdlyap.errors import BracketError, InputError
from sdlyap.masp import (
    bisection_call_limit,
    masp_bisection,
    masp_example41_single,
    masp_example41_vector,
)
from sdlyap.schemas import SampleBudget


def test_closed_form_values():
    assert masp_example41_vector(1.1).r_star == pytest.approx(1 / 8.05, abs=1e-9)
    assert masp_example41_vector(1.1).r_star == pytest.approx(0.1242236025, abs=1e-9)
    assert masp_example41_single(1.1, 1.0).r_star == pytest.approx(1 / 14.641, abs=1e-9)
    assert masp_example41_single(1.1, 1.0).r_star == pytest.approx(0.0683013455, abs=1e-9)


@pytest.mark.parametrize("c", [1.05, 1.1, 1.3, 1.5, 1.9])
@pytest.mark.parametrize("delta", [0.05, 0.5, 1.0, 5.0])
def test_vector_bound_is_less_conservative(c, delta):
    vector = masp_example41_vector(c)
    single = masp_example41_single(c, delta)
    assert vector.r_star >= single.r_star


def test_single_bound_infeasible_without_damping():
    single = masp_example41_single(1.1, 0.0)
    assert single.status == "infeasible"
    assert single.r_star == 0.0
    assert masp_example41_vector(1.1).status == "success"


def test_closed_form_parameter_checks():
    with pytest.raises(InputError):
        masp_example41_vector(2.0)
    with pytest.raises(InputError):
        masp_example41_single(1.0, 1.0)
    with pytest.raises(InputError):
        masp_example41_single(1.1, -1.0)


def test_bisection_brackets_the_empirical_bound(ex41, vector_cert):
    budget = SampleBudget(grid_per_axis=7, mc_samples=100, seed=3)
    model = ex41.with_constant_period(1.0)
    region = Region.symmetric(2, 5.0)
    result = masp_bisection(vector_cert, model, region, budget, 0.05, 1.0, tol=0.1)
    assert result.method == "bisection"
    assert 0.05 <= result.r_star < 1.0
    assert result.bracket[0] == result.r_star
    assert result.bracket[1] - result.bracket[0] <= 0.1 * 1.0
    assert result.verifier_calls <= bisection_call_limit(0.05, 1.0, 0.1)
    assert result.bracket_calls == 2


def test_bisection_rejects_a_bad_bracket(ex41, vector_cert):
    budget = SampleBudget(grid_per_axis=5, mc_samples=50, seed=3)
    model = ex41.with_constant_period(1.0)
    with pytest.raises(BracketError):
        masp_bisection(vector_cert, model, Region.symmetric(2, 5.0), budget, 0.01, 0.02)
    with pytest.raises(InputError):
        masp_bisection(vector_cert, model, Region.symmetric(2, 5.0), budget, 0.5, 0.1)


@pytest.mark.parametrize(
    ("r_lo", "r_hi", "tol", "threshold"),
    [(0.01, 1.0, 0.01, 0.3), (0.05, 1.0, 0.1, 0.0731), (0.001, 2.0, 1e-3, 1.234)],
)
def test_bisection_call_count_stays_within_the_bound(
    monkeypatch, ex41, vector_cert, r_lo, r_hi, tol, threshold
):
    calls = []

    def fake_decrease_check(cert, model, region, r, budget):
        calls.append(r)
        return [SimpleNamespace(passed=r <= threshold, worst_margin=threshold - r)]

    monkeypatch.setattr(masp, "decrease_check", fake_decrease_check)
    result = masp_bisection(
        vector_cert, ex41, Region.symmetric(2, 1.0), None, r_lo, r_hi, tol=tol, extra_checks=0
    )
    assert calls[:2] == [r_lo, r_hi]
    assert result.verifier_calls == len(calls) - 2
    assert result.verifier_calls <= bisection_call_limit(r_lo, r_hi, tol)
    assert result.bracket[1] - result.bracket[0] <= tol * r_hi
    assert result.r_star <= threshold < result.bracket[1]


def test_call_limit_values():
    assert bisection_call_limit(0.01, 1.0, 0.01) == 8
    assert bisection_call_limit(0.5, 0.51, 0.1) == 1
