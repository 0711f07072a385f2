from __future__ import annotations

import math

import numpy as np
import pytest

from sdlyap.core import (
    ClosedFormKL,
    ComparisonFunction,
    ExponentialKL,
    FunctionClass,
    PlantModel,
    Region,
    Signal,
    SignalKind,
    SystemModel,
    compose_gain,
    invert_nondecreasing,
    parse_signal,
    validate_comparison_fn,
    validate_kl_function,
    validate_model,
)
from sdlyap.errors import DefinitionError, InputError, InversionError


def test_comparison_function_classes():
    cube = ComparisonFunction.parse("s^3", "K-infinity")
    report = validate_comparison_fn(cube, 201)
    assert report.passed and report.class_passed

    flat = ComparisonFunction.parse("min(s, 1)", "K")
    report = validate_comparison_fn(flat, 201)
    assert not report.passed
    assert report.check("strictly_increasing").witness_s is not None

    shifted = ComparisonFunction.parse("s + 1", "N")
    assert not validate_comparison_fn(shifted, 51).check("zero_at_zero").passed


def test_contraction_check():
    half = ComparisonFunction.parse("s/2", "N")
    assert validate_comparison_fn(half, 101, require_contraction=True).passed
    identity = ComparisonFunction.parse("s", "N")
    report = validate_comparison_fn(identity, 101, require_contraction=True)
    assert report.class_passed and not report.passed


def test_comparison_function_rejects_other_variables():
    with pytest.raises(DefinitionError):
        ComparisonFunction.parse("s + x[1]", "K")


def test_inverse_and_gain_composition():
    a1 = ComparisonFunction.parse("s^2/2", "K-infinity")
    assert a1.inverse(2.0) == pytest.approx(2.0, abs=1e-9)
    zeta = ComparisonFunction.parse("2*s^2", "K-infinity")
    gamma = compose_gain(a1, zeta)
    assert gamma(1.0) == pytest.approx(2.0, abs=1e-9)
    # vector certificate: a1 = s^2/4 gives gain 2*sqrt(2)
    gamma_vec = compose_gain(ComparisonFunction.parse("s^2/4", "K-infinity"), zeta)
    assert gamma_vec(1.0) == pytest.approx(2 * math.sqrt(2), abs=1e-9)


def test_generalized_inverse_of_flat_function():
    assert invert_nondecreasing(lambda s: min(s, 1.0), 0.5) == pytest.approx(0.5, abs=1e-9)
    with pytest.raises(InversionError):
        invert_nondecreasing(lambda s: min(s, 1.0), 2.0)
    with pytest.raises(InversionError):
        invert_nondecreasing(lambda s: s + 1.0, 0.5)


def test_kl_functions():
    closed = ClosedFormKL("s*exp(-t)")
    assert closed(2.0, 0.0) == pytest.approx(2.0)
    assert all(c.passed for c in validate_kl_function(closed))
    fitted = ExponentialKL(1.5, 0.5)
    assert fitted(2.0, 2.0) == pytest.approx(3.0 * math.exp(-1.0))
    assert all(c.passed for c in validate_kl_function(fitted))
    growing = ClosedFormKL("s*(1 + t)")
    names = {c.name: c.passed for c in validate_kl_function(growing)}
    assert not names["nonincreasing_in_t"]


def test_signals():
    pwc = Signal.piecewise([0.0, 1.0, 2.0], [[1.0], [-1.0], [0.5]])
    assert pwc.at(0.99) == (1.0,)
    assert pwc.at(1.0) == (-1.0,)
    assert pwc.breakpoints_between(0.0, 2.0) == [1.0]
    shifted = pwc.shifted(0.5)
    assert shifted.at(0.0) == (1.0,)
    assert shifted.at(0.5) == (-1.0,)
    expr = Signal.expression(["sin(t)"])
    assert expr.at(math.pi / 2) == pytest.approx((1.0,))
    assert expr.shifted(math.pi / 2).at(0.0) == pytest.approx((1.0,))
    with pytest.raises(InputError):
        Signal.constant([2.0], box=[(0.0, 1.0)])
    with pytest.raises(InputError):
        pwc.at(-1.0)


def test_random_signals_are_seeded():
    a = Signal.random_piecewise(np.random.default_rng(3), [(0.0, 1.0)], 0.3, 5.0)
    b = Signal.random_piecewise(np.random.default_rng(3), [(0.0, 1.0)], 0.3, 5.0)
    assert a == b
    amp = Signal.random_amplitude(np.random.default_rng(3), 2, 0.5, 0.3, 5.0)
    assert all(math.isclose(np.linalg.norm(v), 0.5) for v in amp.values)
    with pytest.raises(InputError):
        Signal.random_piecewise(np.random.default_rng(0), [(0.0, math.inf)], 0.3, 5.0)


def test_signal_notation():
    rng = np.random.default_rng(0)
    unbounded = ((-np.inf, np.inf),) * 2
    assert parse_signal("const:0.5", 2, unbounded, 10.0, rng).at(3.0) == (0.5, 0.5)
    late = parse_signal("pwc:1,2;3,4", 1, unbounded[:1], 10.0, rng)
    assert late.kind is SignalKind.PIECEWISE_CONSTANT
    assert late.at(0.5) == (0.0,) and late.at(2.0) == (2.0,) and late.at(5.0) == (4.0,)
    rand = parse_signal("rand:pwc,amplitude=0.3,dwell=0.5", 2, unbounded, 10.0, rng)
    assert all(abs(v) <= 0.3 for v in rand.at(1.7))
    with pytest.raises(InputError):
        parse_signal("wave:1", 1, unbounded[:1], 10.0, rng)
    with pytest.raises(InputError):
        parse_signal("rand:pwc,speed=2", 1, unbounded[:1], 10.0, rng)
    with pytest.raises(InputError):
        parse_signal("const:1,2,3", 2, unbounded, 10.0, rng)


def test_system_model_definition_errors():
    with pytest.raises(DefinitionError):
        SystemModel.build(n=2, f=["x[1]"], h=0.1, r=0.1)
    with pytest.raises(DefinitionError):
        SystemModel.build(n=1, f=["x[2]"], h=0.1, r=0.1)
    with pytest.raises(DefinitionError):
        SystemModel.build(n=1, f=["-x[1] + v[1]"], h=0.1, r=0.1, U=[(1.0, 2.0)])
    with pytest.raises(DefinitionError):
        PlantModel.build(n=1, f_open=["u[1]"], k=["1 - x[1]"])


def test_validate_model(ex41):
    checks = {c.name: c for c in validate_model(ex41, Region.symmetric(2, 2.0))}
    assert checks["sampling_period_bounds"].passed
    assert checks["equilibrium_at_origin"].passed
    drift = SystemModel.build(n=1, f=["1 - x[1]"], h=0.1, r=0.1)
    assert not {c.name: c for c in validate_model(drift)}["equilibrium_at_origin"].passed


def test_region_grid_excludes_origin_ball():
    region = Region(((-1.0, 1.0), (-1.0, 1.0)), exclude_origin_radius=0.2)
    points = region.grid(5)
    assert points.shape[1] == 2
    assert len(points) == 24
    with pytest.raises(DefinitionError):
        Region(((0.0, math.inf),))
