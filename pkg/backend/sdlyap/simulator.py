from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .core import (
    Box,
    PlantModel,
    Signal,
    SystemModel,
    Termination,
    Trajectory,
    as_expression,
    in_box,
)
from .errors import DefinitionError, InputError, NumericDomainError, SimulationError
from .exprlang import Expression, Var, add, substitute, variable_key

logger = logging.getLogger(__name__)

# Restart points closer than this to a segment end are merged into it
_MERGE_TOL = 1e-12


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step classical RK4 settings."""

    t_final: float
    max_step: float | None = None
    blowup_threshold: float = 1e8
    t0: float = 0.0

    def __post_init__(self) -> None:
        if self.max_step is not None and not self.max_step > 0:
            raise InputError("max_step must be positive")
        if not self.blowup_threshold > 0:
            raise InputError("blowup_threshold must be positive")
        if self.t0 < 0 or self.t_final < self.t0:
            raise InputError(f"need 0 <= t0 <= t_final, got t0={self.t0}, t_final={self.t_final}")

    def step_for(self, r: float) -> float:
        return self.max_step if self.max_step is not None else min(r / 50.0, 1e-2)


@dataclass(frozen=True)
class SimulationInputs:
    d: Signal
    v: Signal
    dtilde: Signal

    @classmethod
    def zeros(cls, model: SystemModel) -> "SimulationInputs":
        return cls(Signal.zero(model.l), Signal.zero(model.m), Signal.zero(1))

    def shifted(self, theta: float) -> "SimulationInputs":
        return SimulationInputs(
            self.d.shifted(theta), self.v.shifted(theta), self.dtilde.shifted(theta)
        )


def _check_inputs(model: SystemModel, inputs: SimulationInputs) -> None:
    for label, sig, dim, box in (
        ("d", inputs.d, model.l, model.D_box),
        ("v", inputs.v, model.m, model.U_box),
    ):
        if sig.dim != dim:
            raise InputError(f"{label} has dimension {sig.dim}, model expects {dim}")
        if not sig.within(box):
            raise InputError(f"{label} leaves its declared box {list(box)}")
    if inputs.dtilde.dim != 1:
        raise InputError("dtilde must be scalar")
    if not inputs.dtilde.within(((0.0, math.inf),)):
        raise InputError("dtilde must be nonnegative")


def _sampler(sig: Signal, box: Box, label: str) -> Callable[[float], tuple[float, ...]]:
    if sig.codomain_box is not None or not sig.time_varying:
        return sig.at

    def checked(t: float) -> tuple[float, ...]:
        value = sig.at(t)
        if not in_box(value, box):
            raise InputError(f"{label}({t}) = {list(value)} outside {list(box)}")
        return value

    return checked


def _rk4_step(
    rhs: Callable[[float, tuple[float, ...]], tuple[float, ...]],
    t: float,
    x: tuple[float, ...],
    h: float,
) -> tuple[float, ...]:
    k1 = rhs(t, x)
    k2 = rhs(t + h / 2, tuple(xi + h / 2 * ki for xi, ki in zip(x, k1)))
    k3 = rhs(t + h / 2, tuple(xi + h / 2 * ki for xi, ki in zip(x, k2)))
    k4 = rhs(t + h, tuple(xi + h * ki for xi, ki in zip(x, k3)))
    return tuple(
        xi + h / 6 * (a + 2 * b + 2 * c + d) for xi, a, b, c, d in zip(x, k1, k2, k3, k4)
    )


def _restart_points(inputs: SimulationInputs, a: float, b: float) -> list[float]:
    found = set(inputs.d.breakpoints_between(a, b)) | set(inputs.v.breakpoints_between(a, b))
    points = sorted(found)
    return [p for p in points if p - a > _MERGE_TOL and b - p > _MERGE_TOL]


def simulate(
    model: SystemModel,
    x0: Sequence[float],
    inputs: SimulationInputs | None = None,
    cfg: IntegratorConfig | None = None,
) -> Trajectory:
    """Run the sample-and-hold algorithm from `cfg.t0` to `cfg.t_final` or blow-up."""
    inputs = inputs or SimulationInputs.zeros(model)
    cfg = cfg or IntegratorConfig(t_final=10.0)
    x = tuple(float(v) for v in x0)
    if len(x) != model.n:
        raise InputError(f"x0 has {len(x)} components, model has n={model.n}")
    if not all(math.isfinite(v) for v in x):
        raise InputError("x0 must be finite")
    _check_inputs(model, inputs)

    d_at = _sampler(inputs.d, model.D_box, "d")
    v_at = _sampler(inputs.v, model.U_box, "v")
    max_step = cfg.step_for(model.r)
    x_max = cfg.blowup_threshold

    t = cfg.t0
    times = [t]
    states = [x]
    interval_index = [0]
    instants: list[float] = []
    held_states: list[tuple[float, ...]] = []
    held_inputs: list[tuple[float, ...]] = []
    gaps: list[float] = []
    termination = Termination.COMPLETED
    blowup_time: float | None = None
    i = 0

    while t < cfg.t_final and termination is Termination.COMPLETED:
        xs = x
        vs = v_at(t)
        dtilde = inputs.dtilde.at(t)[0]
        if dtilde < 0:
            raise InputError(f"dtilde({t}) = {dtilde} is negative")
        period = model.sampling_period(xs)
        if not 0 < period <= model.r * (1 + 1e-12):
            raise DefinitionError(f"h(x) = {period} at x = {list(xs)} is outside (0, {model.r}]")
        gap = math.exp(-dtilde) * period
        tau_next = t + gap
        instants.append(t)
        held_states.append(xs)
        held_inputs.append(vs)
        gaps.append(gap)
        # a remainder below the merge tolerance joins the last interval
        merge_from = cfg.t_final - _MERGE_TOL * max(1.0, cfg.t_final)
        seg_end = cfg.t_final if tau_next >= merge_from else tau_next

        cuts = [t, *_restart_points(inputs, t, seg_end), seg_end]
        for a, b in zip(cuts, cuts[1:]):
            mid = 0.5 * (a + b)
            d_const = None if inputs.d.time_varying else d_at(mid)
            v_const = None if inputs.v.time_varying else v_at(mid)

            def rhs(s: float, z: tuple[float, ...]) -> tuple[float, ...]:
                d_val = d_const if d_const is not None else d_at(s)
                v_val = v_const if v_const is not None else v_at(s)
                return model.rhs(z, xs, d_val, v_val, vs)

            steps = max(1, math.ceil((b - a) / max_step - 1e-9))
            h = (b - a) / steps
            for k in range(1, steps + 1):
                s_prev = a + (k - 1) * h
                s_next = b if k == steps else a + k * h
                try:
                    x_new = _rk4_step(rhs, s_prev, x, s_next - s_prev)
                except NumericDomainError:
                    x_new = (math.inf,) * model.n
                finite = all(math.isfinite(v) for v in x_new)
                if not finite or math.sqrt(sum(v * v for v in x_new)) > x_max:
                    termination = Termination.BLOW_UP
                    blowup_time = s_next
                    if finite:
                        times.append(s_next)
                        states.append(x_new)
                        interval_index.append(i)
                    break
                x = x_new
                times.append(s_next)
                states.append(x)
                interval_index.append(i)
            if termination is Termination.BLOW_UP:
                break
        t = seg_end
        i += 1

    state_arr = np.array(states, dtype=float).reshape(len(states), model.n)
    outputs = model.outputs(state_arr.T, strict=False).T
    trajectory = Trajectory(
        times=np.array(times),
        states=state_arr,
        outputs=outputs,
        interval_index=np.array(interval_index, dtype=int),
        sampling_instants=np.array(instants),
        held_states=np.array(held_states, dtype=float).reshape(len(held_states), model.n),
        held_inputs=np.array(held_inputs, dtype=float).reshape(len(held_inputs), model.m),
        schedule_gaps=np.array(gaps),
        termination=termination,
        blowup_time=blowup_time,
    )
    if termination is Termination.BLOW_UP:
        logger.info("simulate %s: blow-up at t=%.6g", model.name, blowup_time)
    else:
        logger.debug(
            "simulate %s: %d steps, %d sampling intervals",
            model.name,
            len(times) - 1,
            len(instants),
        )
    return trajectory


def emulate_feedback(
    plant: PlantModel,
    h: str | float | Expression,
    r: float,
    name: str | None = None,
) -> SystemModel:
    """Closed loop x' = f_open(x, k(xs + e_held) + v, d) as a SystemModel.

    v stacks the actuator error (m components, when enabled) before the
    measurement error (n components, when enabled); the measurement error
    only enters through its held value vs.
    """
    if not r > 0:
        raise InputError("r must be positive")
    m_act = plant.m if plant.actuator_error else 0
    measured: dict[str, Expression] = {}
    for j in range(1, plant.n + 1):
        held: Expression = Var("xs", j)
        if plant.measurement_error:
            held = add(held, Var("vs", m_act + j))
        measured[variable_key("x", j)] = held
    feedback = [substitute(expr, measured) for expr in plant.k]

    controls: dict[str, Expression] = {}
    for i, law in enumerate(feedback, start=1):
        controls[variable_key("u", i)] = add(law, Var("v", i)) if plant.actuator_error else law
    f = tuple(substitute(expr, controls) for expr in plant.f_open)

    U: list[tuple[float, float]] = []
    if plant.actuator_error:
        U.extend(plant.V_box or [(-math.inf, math.inf)] * plant.m)
    if plant.measurement_error:
        U.extend(plant.E_box or [(-math.inf, math.inf)] * plant.n)
    return SystemModel.build(
        n=plant.n,
        f=f,
        h=as_expression(h),
        r=r,
        D=plant.D_box,
        U=U,
        H=plant.H,
        name=name or f"{plant.name}-sampled",
    )


def check_time_invariance(
    model: SystemModel,
    x0: Sequence[float],
    inputs: SimulationInputs,
    theta: float,
    cfg: IntegratorConfig,
) -> float:
    """Max state deviation between a run started at theta and one fed P_theta inputs from 0."""
    if theta < 0:
        raise InputError("theta must be nonnegative")
    horizon = cfg.t_final - cfg.t0
    late = simulate(model, x0, inputs, replace(cfg, t0=theta, t_final=theta + horizon))
    early = simulate(model, x0, inputs.shifted(theta), replace(cfg, t0=0.0, t_final=horizon))
    if late.states.shape != early.states.shape:
        raise SimulationError(
            f"runs produced {len(late.times)} and {len(early.times)} samples; "
            "step sequences diverged"
        )
    deviation = float(np.abs(late.states - early.states).max()) if late.states.size else 0.0
    logger.debug("time invariance theta=%g deviation=%.3e", theta, deviation)
    return deviation
