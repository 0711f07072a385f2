from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from sdlyap.catalog import (
    example41_model,
    example41_single_certificate,
    example41_vector_certificate,
    scalar_hold_certificate,
    scalar_hold_model,
)
from sdlyap.core import ComparisonFunction, Region, SystemModel
from sdlyap.errors import DefinitionError, InputError, NumericDomainError
from sdlyap.schemas import SampleBudget, VerificationReport, Witness
from sdlyap.verifier import (
    LyapunovCertificate,
    b_bound,
    b_set_members,
    check_hypotheses,
    decrease_check,
    sandwich_check,
    validate_certificate,
)

REGION = Region.symmetric(2, 5.0)


def test_vector_certificate_passes_below_the_bound(ex41, vector_cert, small_budget):
    reports = decrease_check(vector_cert, ex41, REGION, 0.11, small_budget)
    assert [rep.condition for rep in reports] == ["decrease[1]", "decrease[2]"]
    assert all(rep.passed for rep in reports)
    assert all(rep.points_checked + rep.points_vacuous == 121 for rep in reports)


def test_vector_certificate_fails_at_long_periods(vector_cert, small_budget):
    model = example41_model(0.0, 1.0, 1.0)
    reports = decrease_check(vector_cert, model, REGION, 1.0, small_budget)
    failed = [rep for rep in reports if not rep.passed]
    assert failed
    witness = failed[0].witness
    assert witness is not None and witness.x0 is not None
    assert failed[0].worst_margin < 0


def test_decrease_check_is_reproducible(ex41, vector_cert):
    budget = SampleBudget(grid_per_axis=5, mc_samples=50, seed=11)
    first = decrease_check(vector_cert, ex41, REGION, 0.11, budget)
    second = decrease_check(vector_cert, ex41, REGION, 0.11, budget)
    assert [r.model_dump() for r in first] == [r.model_dump() for r in second]


def test_r_above_model_bound_is_rejected(ex41, vector_cert, small_budget):
    with pytest.raises(InputError):
        decrease_check(vector_cert, ex41, REGION, 0.5, small_budget)


def test_single_certificate_uses_dissipation(small_budget):
    model = example41_model(1.0, 2.0, 0.06)
    cert = example41_single_certificate(1.1, 0.06)
    assert cert.uses_dissipation
    reports = decrease_check(cert, model, Region.symmetric(2, 2.0), 0.06, small_budget)
    assert reports[0].condition == "decrease-W"


def test_scalar_hold_certificate(small_budget):
    model = scalar_hold_model(0.1)
    cert = scalar_hold_certificate()
    reports = decrease_check(cert, model, Region.symmetric(1, 3.0), 0.1, small_budget)
    assert reports[0].passed


def test_sandwich(ex41, vector_cert, small_budget):
    assert sandwich_check(vector_cert, ex41, REGION, small_budget).passed
    loose = LyapunovCertificate.build(
        n=2,
        V=["x[1]^2/2", "x[2]^2/2"],
        rho=["s", "s"],
        a="s/2",
        zeta="s^2",
        a1="s^2",
        a2="s^2/2",
        g=["x[1]", "x[2]"],
    )
    report = sandwich_check(loose, ex41, REGION, small_budget)
    assert report.status == "fail"
    assert report.witness is not None


def test_b_bound_is_zero_on_the_level_zero_set(ex41, vector_cert):
    assert b_bound(vector_cert, 1, [1.0, 0.0], ex41) == 0.0
    assert b_bound(vector_cert, 1, [0.0, 1.0], ex41, SampleBudget(mc_samples=200)) > 0.0


def test_certificate_definition_errors():
    with pytest.raises(DefinitionError):
        LyapunovCertificate.build(n=1, V=["x[1]^2"], a="s/2", zeta="s", a1="s", a2="s", g=["x[1]"])
    with pytest.raises(DefinitionError):
        LyapunovCertificate.build(
            n=1,
            V=["x[1]^2", "x[1]^4"],
            rho=["s"],
            a="s/2",
            zeta="s",
            a1="s",
            a2="s",
            g=["x[1]", "x[1]"],
        )
    with pytest.raises(DefinitionError):
        LyapunovCertificate.build(
            n=1, V=["x[2]^2"], rho=["s"], a="s/2", zeta="s", a1="s", a2="s", g=["x[1]"]
        )


def test_validate_certificate(ex41, vector_cert):
    report = validate_certificate(vector_cert, ex41, REGION, budget=SampleBudget(mc_samples=200))
    assert report.passed
    names = [c.name for c in report.checks]
    assert "analytic_b[2]_dominates" in names

    no_contraction = LyapunovCertificate.build(
        n=1, V=["x[1]^2/2"], rho=["s"], a="s", zeta="s^2", a1="s^2/2", a2="s^2/2", g=["x[1]"]
    )
    assert not validate_certificate(no_contraction).passed


def test_standing_hypotheses(ex41, small_budget):
    reports = check_hypotheses(ex41, Region.symmetric(2, 2.0), small_budget)
    conditions = ["one-sided-lipschitz", "growth", "output-bound", "sampling-period"]
    assert [r.condition for r in reports] == conditions
    assert all(isinstance(r, VerificationReport) for r in reports)
    assert reports[0].estimate is not None and np.isfinite(reports[0].estimate)
    growth = ComparisonFunction.parse("s/100", "K-infinity")
    tight = check_hypotheses(ex41, Region.symmetric(2, 2.0), small_budget, growth=growth)
    assert tight[1].status == "fail"


def test_undefined_certificate_values_raise_instead_of_passing(ex41, small_budget):
    cert = LyapunovCertificate.build(
        n=2,
        V=["x[1]^2/2 + 0*sqrt(x[1])", "x[2]^2/2"],
        rho=["s/10", "s/10"],
        a="2*s",
        zeta="s^2",
        a1="s^2/4",
        a2="s^2",
        g=["x[1]", "x[2]"],
        gradV=[["x[1]", "0"], ["0", "x[2]"]],
    )
    with pytest.raises(NumericDomainError):
        sandwich_check(cert, ex41, REGION, small_budget)
    with pytest.raises(NumericDomainError):
        decrease_check(cert, ex41, REGION, 0.11, small_budget)


def test_undefined_flow_fails_the_growth_bound(small_budget):
    model = SystemModel.build(n=1, f=["-x[1] + log(x[1] + 1)"], h="0.1", r=0.1)
    growth = ComparisonFunction.parse("100*s", "K-infinity")
    reports = check_hypotheses(model, Region.symmetric(1, 2.0), small_budget, growth=growth)
    assert reports[1].condition == "growth"
    assert reports[1].status == "fail"
    assert reports[1].worst_margin == -np.inf


def test_failing_report_needs_a_witness_and_a_nonpositive_margin():
    VerificationReport(condition="c", status="fail", worst_margin=0.0, witness=Witness(x=[1.0]))
    with pytest.raises(ValidationError):
        VerificationReport(condition="c", status="fail", worst_margin=0.5, witness=Witness(x=[1.0]))
    with pytest.raises(ValidationError):
        VerificationReport(condition="c", status="fail", worst_margin=-1.0)


def test_b_sets_grow_with_the_period(vector_cert):
    rng = np.random.default_rng(21)
    for _ in range(50):
        x = rng.uniform(-5.0, 5.0, size=2)
        candidates = rng.uniform(-5.0, 5.0, size=(2, 40))
        bound = float(rng.uniform(0.0, 20.0))
        r_small, r_large = sorted(rng.uniform(0.0, 0.5, size=2))
        inner = b_set_members(vector_cert, 1, x, candidates, r_small, bound)
        outer = b_set_members(vector_cert, 1, x, candidates, r_large, bound)
        assert np.all(outer[inner])


def test_b_bound_grows_with_the_level(ex41, vector_cert):
    budget = SampleBudget(mc_samples=500, seed=4)
    levels = (0.25, 0.5, 1.0, 2.0, 4.0)
    estimates = [b_bound(vector_cert, 1, [0.0, s], ex41, budget) for s in levels]
    assert all(a <= b for a, b in zip(estimates, estimates[1:]))


def test_b_bound_stays_below_the_closed_form_bound(ex41, vector_cert):
    estimate = b_bound(vector_cert, 1, [0.0, 1.0], ex41, SampleBudget(mc_samples=2000, seed=1))
    c = 1.1
    assert 0.0 < estimate <= c**2 + c**3 + 2 * c + 0.5 + 1e-9
    assert c**2 + c**3 + 2 * c + 0.5 == pytest.approx(5.241)


def test_scalar_b_bound_matches_brute_force():
    model = scalar_hold_model(0.1)
    cert = scalar_hold_certificate()
    estimate = b_bound(cert, 0, [1.0], model, SampleBudget(mc_samples=2000, seed=3))
    # V(x) = 1/2: held states satisfy |x0| <= sqrt(2), inputs |v| <= sqrt(1/2)
    held = np.linspace(-np.sqrt(2.0), np.sqrt(2.0), 1000)
    inputs = np.linspace(-np.sqrt(0.5), np.sqrt(0.5), 1000)
    brute = float(np.abs(-2.0 * held[:, None] + inputs[None, :]).max())
    assert brute == pytest.approx(2 * np.sqrt(2.0) + np.sqrt(0.5))
    assert 0.95 * brute <= estimate <= brute * (1 + 1e-9)


@pytest.mark.parametrize("c", [1.05, 1.5, 1.95])
def test_zero_period_reduces_to_the_continuous_condition(c, small_budget):
    model = example41_model(0.0, 1.0, 0.11)
    cert = example41_vector_certificate(c, 0.0)
    reports = decrease_check(cert, model, REGION, 0.0, small_budget)
    assert all(rep.passed for rep in reports)
