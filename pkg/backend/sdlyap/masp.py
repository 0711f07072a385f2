from __future__ import annotations

import logging
import math

from .core import Region, SystemModel
from .errors import BracketError, InputError
from .schemas import MASPResult, SampleBudget, VerificationReport
from .verifier import LyapunovCertificate, decrease_check

logger = logging.getLogger(__name__)

EMPIRICAL_LABEL = "empirical MASP under budget"


def masp_example41_single(c: float, delta: float) -> MASPResult:
    """Sampling bound for the planar example with the single quadratic V.

    r < 7/(40c^2 + 8) and r <= c^-3 min(1/11, delta/5); no positive r when delta = 0.
    """
    if not c > 1:
        raise InputError(f"c must exceed 1, got {c}")
    if delta < 0:
        raise InputError(f"delta must be nonnegative, got {delta}")
    open_bound = 7.0 / (40.0 * c**2 + 8.0)
    closed_bound = c**-3 * min(1.0 / 11.0, delta / 5.0)
    label = f"single V, c={c}, delta={delta}"
    if closed_bound <= 0.0:
        logger.info("closed-form single: infeasible at delta=%g", delta)
        return MASPResult(
            r_star=0.0,
            method="closed-form-single",
            status="infeasible",
            margins={"constraint_1": open_bound, "constraint_2": closed_bound},
            label=label,
        )
    r_star = min(open_bound, closed_bound)
    return MASPResult(
        r_star=r_star,
        method="closed-form-single",
        open_endpoint=open_bound <= closed_bound,
        margins={"constraint_1": open_bound - r_star, "constraint_2": closed_bound - r_star},
        label=label,
    )


def masp_example41_vector(c: float) -> MASPResult:
    """Sampling bound for the planar example with V1 = x1^2/2, V2 = x2^2/2.

    r < 1/(5c^2 + 2) and r <= 1/(6c^3), for 1 < c < 2; independent of delta.
    """
    if not 1 < c < 2:
        raise InputError(f"c must lie in (1, 2), got {c}")
    open_bound = 1.0 / (5.0 * c**2 + 2.0)
    closed_bound = 1.0 / (6.0 * c**3)
    r_star = min(open_bound, closed_bound)
    return MASPResult(
        r_star=r_star,
        method="closed-form-vector",
        open_endpoint=open_bound <= closed_bound,
        margins={"constraint_1": open_bound - r_star, "constraint_2": closed_bound - r_star},
        label=f"vector V, c={c}",
    )


def bisection_call_limit(r_lo: float, r_hi: float, tol: float) -> int:
    return max(math.ceil(math.log2((r_hi - r_lo) / (tol * r_hi))), 0) + 1


def masp_bisection(
    cert: LyapunovCertificate,
    model: SystemModel,
    region: Region,
    budget: SampleBudget | None,
    r_lo: float,
    r_hi: float,
    tol: float = 1e-2,
    extra_checks: int = 2,
) -> MASPResult:
    """Largest r passing decrease_check, by bisection on a pass/fail bracket.

    The boundary is empirical: it holds for the given budget and seed only.
    The bracket is narrowed until it is at most tol*r_hi wide.
    `extra_checks` further checks between the final failing r and r_hi look for passes
    above a failure.
    """
    budget = budget or SampleBudget()
    if not 0 < r_lo < r_hi:
        raise InputError(f"need 0 < r_lo < r_hi, got [{r_lo}, {r_hi}]")
    if not tol > 0:
        raise InputError("tol must be positive")

    def verify(r: float) -> tuple[bool, float]:
        reports: list[VerificationReport] = decrease_check(
            cert, model.with_constant_period(r), region, r, budget
        )
        return all(rep.passed for rep in reports), min(rep.worst_margin for rep in reports)

    lo_ok, lo_margin = verify(r_lo)
    if not lo_ok:
        raise BracketError(f"decrease check already fails at r_lo={r_lo}")
    hi_ok, hi_margin = verify(r_hi)
    if hi_ok:
        raise BracketError(f"decrease check still passes at r_hi={r_hi}")

    lo, hi = r_lo, r_hi
    calls = 0
    while hi - lo > tol * r_hi:
        mid = 0.5 * (lo + hi)
        ok, margin = verify(mid)
        calls += 1
        logger.debug("bisection r=%.6g %s (margin %.3e)", mid, "pass" if ok else "fail", margin)
        if ok:
            lo, lo_margin = mid, margin
        else:
            hi, hi_margin = mid, margin

    non_monotone: list[float] = []
    extra_calls = 0
    for j in range(1, extra_checks + 1):
        r = hi * (r_hi / hi) ** (j / (extra_checks + 1))
        if r >= r_hi:
            continue
        extra_calls += 1
        if verify(r)[0]:
            non_monotone.append(r)
    if non_monotone:
        logger.warning("pass above a failure at r=%s: pass/fail is not monotone in r", non_monotone)

    result = MASPResult(
        r_star=lo,
        method="bisection",
        margins={"at_r_lo": lo_margin, "at_r_hi": hi_margin},
        bracket=[lo, hi],
        verifier_calls=calls,
        bracket_calls=2,
        extra_calls=extra_calls,
        non_monotone=non_monotone,
        label=EMPIRICAL_LABEL,
    )
    logger.info("r* = %.6g (bracket [%.6g, %.6g], %d verifier calls)", lo, lo, hi, calls)
    return result
