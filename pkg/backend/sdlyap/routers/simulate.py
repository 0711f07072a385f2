from __future__ import annotations

import math

import numpy as np
from fastapi import APIRouter

from ..core import parse_signal
from ..schemas import SimulateRequest, SimulateResponse
from ..simulator import IntegratorConfig, SimulationInputs, simulate
from .common import resolve_target

router = APIRouter(tags=["simulate"])


@router.post("/simulate", response_model=SimulateResponse)
def run_simulation(payload: SimulateRequest) -> SimulateResponse:
    model, _, _ = resolve_target(payload.builtin, payload.spec, payload.r)
    rng = np.random.default_rng(payload.seed)
    inputs = SimulationInputs(
        d=parse_signal(payload.d, model.l, model.D_box, payload.t_final, rng),
        v=parse_signal(payload.v, model.m, model.U_box, payload.t_final, rng),
        dtilde=parse_signal(
            payload.dtilde, 1, ((0.0, math.inf),), payload.t_final, rng, nonnegative=True
        ),
    )
    traj = simulate(model, payload.x0, inputs, IntegratorConfig(t_final=payload.t_final))
    # thin to at most max_points samples, keeping both ends
    count = len(traj.times)
    idx = np.unique(np.linspace(0, count - 1, min(payload.max_points, count)).astype(int))
    return SimulateResponse(
        termination=traj.termination.value,
        blowup_time=traj.blowup_time,
        sampling_instants=int(len(traj.sampling_instants)),
        final_state=traj.final_state.tolist(),
        times=traj.times[idx].tolist(),
        states=traj.states[idx].tolist(),
    )
