from __future__ import annotations

from fastapi import APIRouter

from ..schemas import VerificationReport, VerifyRequest
from ..verifier import decrease_check, sandwich_check
from .common import resolve_target, to_region

router = APIRouter(tags=["verify"])


@router.post("/verify", response_model=list[VerificationReport])
def verify(payload: VerifyRequest) -> list[VerificationReport]:
    model, cert, _ = resolve_target(payload.builtin, payload.spec, payload.r, need_certificate=True)
    region = to_region(payload.region, model.n)
    reports = decrease_check(cert, model, region, model.r, payload.budget)
    if payload.sandwich:
        reports.append(sandwich_check(cert, model, region, payload.budget))
    return reports
