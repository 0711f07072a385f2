from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np
import pytest

from sdlyap.catalog import scalar_hold_model
from sdlyap.core import PlantModel, Signal, SystemModel
from sdlyap.errors import InputError
from sdlyap.exprlang import to_text
from sdlyap.simulator import (
    IntegratorConfig,
    SimulationInputs,
    check_time_invariance,
    emulate_feedback,
    simulate,
)

GOLDEN = Path(__file__).parent / "golden"


def _random_inputs(model, seed, t_final, dtilde_box=((0.0, 1.0),)):
    rng = np.random.default_rng(seed)
    d = Signal.random_piecewise(rng, model.D_box, 0.3, t_final)
    dtilde = Signal.random_piecewise(rng, dtilde_box, 0.45, t_final)
    return SimulationInputs(d, Signal.zero(model.m), dtilde)


def test_zero_state_stays_at_origin(ex41):
    traj = simulate(ex41, [0.0, 0.0], cfg=IntegratorConfig(t_final=10.0))
    assert traj.completed
    assert np.all(traj.states == 0.0)
    assert traj.times[-1] == pytest.approx(10.0)


def test_rk4_order():
    decay = SystemModel.build(n=1, f=["-x[1]"], h=1.0, r=1.0)
    errors = []
    for step in (0.1, 0.05, 0.025, 0.0125):
        traj = simulate(decay, [1.0], cfg=IntegratorConfig(t_final=1.0, max_step=step))
        errors.append(abs(traj.final_state[0] - math.exp(-1.0)))
    for coarse, fine in zip(errors, errors[1:]):
        assert coarse / fine >= 12


def test_held_feedback_is_exact_for_scalar_hold():
    model = scalar_hold_model(0.1)
    traj = simulate(model, [1.0], cfg=IntegratorConfig(t_final=1.0))
    assert traj.final_state[0] == pytest.approx(0.8**10, rel=1e-10)
    assert len(traj.sampling_instants) == 10
    assert np.allclose(traj.held_states[:, 0], 0.8 ** np.arange(10))


def test_schedule_perturbation_shrinks_intervals():
    model = scalar_hold_model(0.1)
    inputs = SimulationInputs(Signal.zero(0), Signal.zero(1), Signal.constant([math.log(2.0)]))
    traj = simulate(model, [1.0], inputs, IntegratorConfig(t_final=1.0))
    assert np.allclose(traj.schedule_gaps, 0.05)
    assert len(traj.sampling_instants) == 20


def test_blow_up_is_reported():
    model = SystemModel.build(n=1, f=["x[1]^2"], h=0.5, r=0.5)
    traj = simulate(model, [1.0], cfg=IntegratorConfig(t_final=5.0))
    assert not traj.completed
    assert traj.blowup_time is not None and traj.blowup_time < 2.0


def test_inputs_must_respect_boxes(ex41):
    inputs = SimulationInputs(Signal.constant([2.0, 0.0]), Signal.zero(1), Signal.zero(1))
    with pytest.raises(InputError):
        simulate(ex41, [1.0, 1.0], inputs)
    with pytest.raises(InputError):
        simulate(ex41, [1.0], None)
    negative = SimulationInputs(Signal.zero(2), Signal.zero(1), Signal.constant([-1.0]))
    with pytest.raises(InputError):
        simulate(ex41, [1.0, 1.0], negative)


def test_time_invariance(ex41):
    d = Signal.piecewise([0.0, 0.35, 1.3, 2.05], [[0.2, -0.5], [1.0, 1.0], [0.0, -1.0], [0.6, 0.3]])
    inputs = SimulationInputs(d, Signal.zero(1), Signal.zero(1))
    deviation = check_time_invariance(ex41, [3.0, -2.0], inputs, 0.7, IntegratorConfig(t_final=5.0))
    assert deviation <= 1e-9


def test_emulation_builds_the_held_loop():
    plant = PlantModel.build(n=1, f_open=["u[1]"], k=["-2*x[1]"])
    loop = emulate_feedback(plant, 0.1, 0.1)
    assert to_text(loop.f[0]) == "-2 * xs[1] + v[1]"
    assert loop.U_box == ((-math.inf, math.inf),)

    sensed = PlantModel.build(
        n=1, f_open=["u[1]"], k=["-2*x[1]"], measurement_error=True, actuator_error=False
    )
    loop = emulate_feedback(sensed, 0.1, 0.1)
    assert to_text(loop.f[0]) == "-2 * (xs[1] + vs[1])"


def test_trajectory_csv_header(ex41):
    traj = simulate(ex41, [1.0, 0.0], cfg=IntegratorConfig(t_final=0.5))
    lines = traj.to_csv().splitlines()
    assert lines[0] == "t,x1,x2,y1,y2,interval_index,sampling_instant"
    assert lines[1].endswith(",0,1")
    assert len(lines) == len(traj.times) + 1


def test_trajectory_csv_matches_golden(tmp_path):
    model = SystemModel.build(n=1, f=["-xs[1]"], h=0.75, r=0.75)
    traj = simulate(model, [1.0], cfg=IntegratorConfig(t_final=1.5, max_step=0.75))
    out = tmp_path / "decay.csv"
    traj.write_csv(out)
    golden = (GOLDEN / "held_decay_trajectory.csv").read_text(encoding="utf-8")
    expected = list(csv.reader(io.StringIO(golden)))
    assert list(csv.reader(io.StringIO(out.read_text(encoding="utf-8")))) == expected


def test_sampling_schedule_law():
    model = SystemModel.build(
        n=1, f=["-xs[1] + d[1]*x[1]"], h="0.05 + 0.05/(1 + x[1]^2)", r=0.1, D=[(-0.5, 0.5)]
    )
    inputs = _random_inputs(model, 4, 8.0)
    traj = simulate(model, [2.0], inputs, IntegratorConfig(t_final=8.0))
    assert traj.completed
    taus = traj.sampling_instants
    for k in range(len(taus) - 1):
        stretch = math.exp(-inputs.dtilde.at(taus[k])[0])
        expected = stretch * model.sampling_period(traj.held_states[k])
        assert abs((taus[k + 1] - taus[k]) - expected) <= 1e-12 * model.r
        assert taus[k + 1] - taus[k] <= model.r
    assert np.array_equal(traj.held_states[:, 0], [traj.state_at(t)[0] for t in taus])


def test_identical_runs_are_bit_identical(ex41):
    cfg = IntegratorConfig(t_final=6.0)
    first = simulate(ex41, [3.0, -2.0], _random_inputs(ex41, 9, 6.0), cfg)
    second = simulate(ex41, [3.0, -2.0], _random_inputs(ex41, 9, 6.0), cfg)
    assert np.array_equal(first.times, second.times)
    assert np.array_equal(first.states, second.states)
    assert np.array_equal(first.sampling_instants, second.sampling_instants)
    assert first.to_csv() == second.to_csv()


def test_small_data_keep_the_state_small(ex41):
    # |x0| + sup|v| + sup dtilde stays below 1e-6
    inputs = _random_inputs(ex41, 2, 10.0, dtilde_box=((0.0, 3e-7),))
    inputs = SimulationInputs(inputs.d, Signal.constant([3e-7]), inputs.dtilde)
    traj = simulate(ex41, [2.5e-7, -2.5e-7], inputs, IntegratorConfig(t_final=10.0))
    assert traj.completed
    assert np.linalg.norm(traj.states, axis=1).max() <= 1e-4
