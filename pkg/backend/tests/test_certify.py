from __future__ import annotations

import math

import numpy as np
import pytest

from sdlyap.catalog import scalar_hold_certificate
from sdlyap.certify import (
    envelope_check,
    kl_coverage,
    kl_fit,
    trajectory_razumikhin_check,
    uiss_gain_check,
)
from sdlyap.core import Signal, SystemModel
from sdlyap.errors import InputError, InsufficientDataError
from sdlyap.schemas import SampleBudget
from sdlyap.simulator import IntegratorConfig, SimulationInputs, simulate


def _unforced_run(model, x0, seed, t_final=40.0):
    rng = np.random.default_rng(seed)
    d = Signal.random_piecewise(rng, model.D_box, 0.3, t_final)
    dtilde = Signal.random_piecewise(rng, [(0.0, 1.0)], 0.3, t_final)
    inputs = SimulationInputs(d, Signal.zero(model.m), dtilde)
    return simulate(model, x0, inputs, IntegratorConfig(t_final=t_final))


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_envelope_holds_and_state_decays(ex41, vector_cert, seed):
    traj = _unforced_run(ex41, [3.0, -2.0], seed)
    report = envelope_check(traj, vector_cert, Signal.zero(1))
    assert report.passed
    assert report.samples == len(traj.times)
    assert np.linalg.norm(traj.final_state) < 1e-3
    assert trajectory_razumikhin_check(traj, vector_cert, Signal.zero(1)).passed


def test_envelope_includes_the_input_term(ex41, vector_cert):
    v = Signal.constant([0.5])
    inputs = SimulationInputs(Signal.zero(2), v, Signal.zero(1))
    traj = simulate(ex41, [0.0, 0.0], inputs, IntegratorConfig(t_final=5.0))
    assert traj.states[-1, 1] != 0.0
    assert envelope_check(traj, vector_cert, v).passed
    # without the input term the same run leaves V(0) = 0
    assert not envelope_check(traj, vector_cert, Signal.zero(1)).passed


def test_envelope_rejects_blown_up_runs():
    model = SystemModel.build(n=1, f=["x[1]^2"], h=0.5, r=0.5)
    traj = simulate(model, [1.0], cfg=IntegratorConfig(t_final=5.0))
    with pytest.raises(InputError):
        envelope_check(traj, scalar_hold_certificate(), Signal.zero(0))


@pytest.mark.slow
def test_gain_bound_holds_with_zero_schedule_gain(ex41, vector_cert):
    estimate = uiss_gain_check(
        ex41,
        vector_cert,
        [0.1, 0.5],
        SampleBudget(mc_samples=20, seed=5),
        t_final=30.0,
        dtilde_levels=[0.0, 3.0],
    )
    assert estimate.passed, estimate.violations
    assert estimate.declared_gain == pytest.approx(2 * math.sqrt(2), abs=1e-9)
    for amp, sup in zip(estimate.amplitudes, estimate.tail_sup):
        assert sup <= 2 * math.sqrt(2) * amp + 1e-3
    assert set(estimate.tail_sup_by_dtilde) == {"0", "3"}
    assert estimate.t_tail == pytest.approx(20.0)
    assert estimate.csv_rows()[0][0] == 0.1


def test_gain_check_parameter_errors(ex41, vector_cert):
    with pytest.raises(InputError):
        uiss_gain_check(ex41, vector_cert, [-0.1], SampleBudget(mc_samples=1), t_final=5.0)
    with pytest.raises(InputError):
        uiss_gain_check(
            ex41, vector_cert, [0.1], SampleBudget(mc_samples=1), T_tail=6.0, t_final=5.0
        )


def test_kl_fit_covers_the_runs(ex41, vector_cert):
    starts = [[3, -2], [-1, 2], [2, 2], [0.5, -0.5]]
    runs = [_unforced_run(ex41, x0, j, t_final=10.0) for j, x0 in enumerate(starts)]
    kl, fit = kl_fit(runs, vector_cert)
    assert fit.lam > 0
    assert fit.C_inflated >= fit.C
    assert fit.trajectories_used == 4
    assert fit.coverage_inflated >= 0.99
    assert kl_coverage(kl, runs) == pytest.approx(fit.coverage_inflated)
    with pytest.raises(InsufficientDataError):
        kl_fit(runs[:2])
