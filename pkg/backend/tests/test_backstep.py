from __future__ import annotations

import pytest

from sdlyap.backstep import (
    BackstepCertificate,
    TriangularSystem,
    check_dissipation,
    check_hypothesis_P,
    find_h,
    hypothesis_p_closed_loop,
    rho_x,
    scalar_instance,
    sweep_hypothesis_P,
)
from sdlyap.catalog import EX41_F1, EX41_F2_OPEN
from sdlyap.core import Region, Termination
from sdlyap.errors import DefinitionError, InputError
from sdlyap.simulator import IntegratorConfig, simulate

PLANAR_D = [(0.0, 1.0), (-1.0, 1.0)]


def test_scalar_dissipation_holds(small_budget):
    tri, cert = scalar_instance()
    report = check_dissipation(tri, cert, Region.symmetric(1, 2.0), small_budget)
    assert report.condition == "dissipation (measurement-error)"
    assert report.status == "pass"


def test_scalar_dissipation_fails_with_too_much_margin(small_budget):
    tri, cert = scalar_instance(W="x[1]^2")
    assert check_dissipation(tri, cert, Region.symmetric(1, 2.0), small_budget).status == "fail"


def test_rho_bound_matches_hand_computation(small_budget):
    tri, cert = scalar_instance()
    # |k(x0)| over |x0| <= sqrt(2)|x|
    assert rho_x(tri, cert, [1.0], small_budget) == pytest.approx(2 * 2**0.5, rel=0.05)
    assert rho_x(tri, cert, [0.0], small_budget) == 0.0


def test_scalar_sampling_limit(small_budget):
    tri, cert = scalar_instance()
    result = find_h(tri, cert, Region.symmetric(1, 2.0), small_budget)
    assert result.feasible
    assert result.h_star == pytest.approx(0.25, rel=0.02)
    assert result.violated_above


@pytest.mark.parametrize("x0", [1.0, -1.0, 5.0, -5.0])
def test_emulated_loop_converges_below_the_limit(x0):
    tri, _ = scalar_instance()
    loop = tri.sampled_loop("-2*x[1]", 0.225)
    traj = simulate(loop, [x0], cfg=IntegratorConfig(t_final=30.0))
    assert traj.termination is Termination.COMPLETED
    assert abs(traj.states[-1, 0]) < 1e-3


def test_triangular_shape_errors():
    with pytest.raises(DefinitionError):
        TriangularSystem.build(phi=[["0"], ["0"]], g=["1", "1"])
    with pytest.raises(DefinitionError):
        # row 1 may not depend on x[2]
        TriangularSystem.build(phi=[["x[2]"], ["0", "0"]], g=["1", "1"])


def test_gain_positivity(small_budget):
    tri = TriangularSystem.build(phi=[["0"], ["0", "0"]], g=["1 + x[1]^2", "2"])
    assert tri.validate_gains(Region.symmetric(2, 1.0)).passed
    bad = TriangularSystem.build(phi=[["0"]], g=["x[1]"])
    assert not bad.validate_gains(Region.symmetric(1, 1.0)).passed


def test_actuator_variant_needs_differentiable_feedback():
    with pytest.raises(DefinitionError):
        BackstepCertificate.build(
            n=1,
            V="x[1]^2/2",
            k="-2*abs(x[1])",
            W="x[1]^2",
            zeta="s^2",
            a="s/2",
            variant="actuator-error",
        )


def test_feedback_must_vanish_at_origin():
    with pytest.raises(DefinitionError):
        BackstepCertificate.build(
            n=1, V="x[1]^2/2", k="1 - 2*x[1]", W="x[1]^2", zeta="s^2", a="s/2"
        )


def test_certificate_validation():
    _, cert = scalar_instance()
    checks = {c.name: c.passed for c in cert.validate(Region.symmetric(1, 2.0))}
    assert checks["V_positive_definite"] and checks["W_positive_definite"]
    assert checks["a_class"] and checks["zeta_class"]


def test_planar_hypothesis_passes(small_budget):
    stable, gain = check_hypothesis_P(
        EX41_F1, EX41_F2_OPEN, c=1.5, a=0.0, L=10.0, gamma=6.0,
        region=Region.symmetric(1, 3.0), budget=small_budget, D=PLANAR_D,
    )
    assert stable.condition == "P-stable" and stable.status == "pass"
    assert gain.condition == "P-gain" and gain.status == "pass"


def test_planar_stability_condition_fails_for_unstable_first_row(small_budget):
    stable, _ = check_hypothesis_P(
        "x[1]", EX41_F2_OPEN, c=1.5, a=0.0, L=10.0, gamma=6.0,
        region=Region.symmetric(1, 3.0), budget=small_budget, D=PLANAR_D,
    )
    assert stable.status == "fail"
    assert stable.worst_margin < 0


def test_planar_stability_condition_is_strict(small_budget):
    stable, _ = check_hypothesis_P(
        "0*x[1]", EX41_F2_OPEN, c=1.5, a=0.0, L=10.0, gamma=6.0,
        region=Region.symmetric(1, 3.0), budget=small_budget, D=PLANAR_D,
    )
    assert stable.status == "fail"
    assert stable.worst_margin == 0.0
    assert stable.witness is not None


def test_planar_parameter_errors(small_budget):
    unit = Region.symmetric(1, 1.0)
    with pytest.raises(InputError):
        check_hypothesis_P(EX41_F1, EX41_F2_OPEN, 1.0, 0.0, 1.0, 1.0, unit, small_budget, PLANAR_D)
    with pytest.raises(InputError):
        check_hypothesis_P(EX41_F1, EX41_F2_OPEN, 1.5, 0.0, -1.0, 1.0, unit, small_budget, PLANAR_D)


def test_planar_sweep_finds_a_passing_pair(small_budget):
    found = sweep_hypothesis_P(
        EX41_F1, EX41_F2_OPEN, 1.5, 0.0, Region.symmetric(1, 3.0),
        [0, 1, 2, 5, 10, 20], [1, 2, 4, 6, 8, 10], small_budget, PLANAR_D,
    )
    assert found is not None
    L, gamma = found
    assert gamma <= 6.0


def test_planar_closed_loop_model():
    model = hypothesis_p_closed_loop(EX41_F1, EX41_F2_OPEN, a=0.0, R=4.0, r=0.05, D=PLANAR_D)
    assert model.n == 2 and model.r == 0.05
    traj = simulate(model, [0.5, -0.5], cfg=IntegratorConfig(t_final=10.0))
    assert traj.termination is Termination.COMPLETED
    assert abs(traj.states[-1]).max() < 1e-2
