from __future__ import annotations

from fastapi import APIRouter

from ..masp import masp_bisection, masp_example41_single, masp_example41_vector
from ..schemas import BisectionRequest, ClosedFormRequest, MASPResult
from .common import resolve_target, to_region

router = APIRouter(prefix="/masp", tags=["masp"])


@router.post("/closed-form", response_model=MASPResult)
def closed_form(payload: ClosedFormRequest) -> MASPResult:
    if payload.kind == "single":
        return masp_example41_single(payload.c, payload.delta)
    return masp_example41_vector(payload.c)


@router.post("/bisection", response_model=MASPResult)
def bisection(payload: BisectionRequest) -> MASPResult:
    model, cert, _ = resolve_target(payload.builtin, payload.spec, None, need_certificate=True)
    lo, hi = payload.bracket
    model = model.with_constant_period(hi)
    region = to_region(payload.region, model.n)
    return masp_bisection(cert, model, region, payload.budget, lo, hi, payload.tol)
