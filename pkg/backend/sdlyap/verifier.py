from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    ComparisonFunction,
    FunctionClass,
    Region,
    SystemModel,
    as_expression,
    check_variables,
    validate_comparison_fn,
)
from .errors import DefinitionError, InputError, SamplingError
from .exprlang import CompiledVector, Expression, compile_vector, gradient
from .sampling import (
    SublevelSampler,
    generalized_inverse,
    margin_tolerance,
    run_points,
    sample_ball,
    sample_disturbances,
    within_level,
)
from .schemas import (
    CertificateValidationReport,
    PropertyCheck,
    SampleBudget,
    VerificationReport,
    Witness,
)

logger = logging.getLogger(__name__)

FALSIFICATION_NOTE = "falsification-based: grid plus Monte Carlo under the stated budget"
B_SET_NOTE = "held states checked over B_i^g(r, x), a superset of the reachable set"


@dataclass(frozen=True)
class LyapunovCertificate:
    """Vector Lyapunov data {V_i, grad V_i, rho_i} with comparison functions a, zeta, a1, a2.

    A single function (k == 1) may replace rho by a positive-definite W(x).
    """

    n: int
    V: tuple[Expression, ...]
    rho: tuple[Optional[ComparisonFunction], ...]
    a: ComparisonFunction
    zeta: ComparisonFunction
    a1: ComparisonFunction
    a2: ComparisonFunction
    g: tuple[Expression, ...]
    gradV: tuple[tuple[Expression, ...], ...] = ()
    analytic_b: tuple[Optional[Expression], ...] = ()
    W: Optional[Expression] = None
    label: str = "certificate"
    _compiled: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        k = len(self.V)
        if k == 0:
            raise DefinitionError("a certificate needs at least one V")
        if len(self.rho) != k or len(self.g) != k:
            raise DefinitionError(f"rho and g need {k} entries, one per V")
        if any(r is None for r in self.rho) and not (k == 1 and self.W is not None):
            raise DefinitionError("rho is required unless a single V comes with W")
        if not self.gradV:
            object.__setattr__(self, "gradV", tuple(gradient(v, "x", self.n) for v in self.V))
        if len(self.gradV) != k or any(len(row) != self.n for row in self.gradV):
            raise DefinitionError(f"gradV must be {k} rows of {self.n} expressions")
        if not self.analytic_b:
            object.__setattr__(self, "analytic_b", (None,) * k)
        if len(self.analytic_b) != k:
            raise DefinitionError(f"analytic_b needs {k} entries")

        dims = {"x": self.n}
        check_variables(self.V, dims, "V")
        check_variables(self.g, dims, "g")
        check_variables([e for row in self.gradV for e in row], dims, "gradV")
        check_variables([b for b in self.analytic_b if b is not None], dims, "analytic_b")
        if self.W is not None:
            check_variables([self.W], dims, "W")

        def vec(exprs: Sequence[Expression]) -> CompiledVector:
            return compile_vector(exprs, ["x"], vectorized=True)

        self._compiled["V"] = vec(self.V)
        self._compiled["g"] = vec(self.g)
        self._compiled["gradV"] = [vec(row) for row in self.gradV]
        self._compiled["gradg"] = [vec(gradient(gi, "x", self.n)) for gi in self.g]
        self._compiled["b"] = [vec([b]) if b is not None else None for b in self.analytic_b]
        self._compiled["W"] = vec([self.W]) if self.W is not None else None

    @classmethod
    def build(
        cls,
        n: int,
        V: Sequence[str | Expression],
        a: str,
        zeta: str,
        a1: str,
        a2: str,
        g: Sequence[str | Expression],
        rho: Sequence[str | None] | None = None,
        gradV: Sequence[Sequence[str | Expression]] | None = None,
        analytic_b: Sequence[str | Expression | None] | None = None,
        W: str | Expression | None = None,
        label: str = "certificate",
    ) -> "LyapunovCertificate":
        k = len(V)
        rho_fns = tuple(
            ComparisonFunction.parse(text, FunctionClass.POSITIVE_DEFINITE, label=f"rho{i + 1}")
            if text is not None
            else None
            for i, text in enumerate(rho or [None] * k)
        )
        return cls(
            n=n,
            V=tuple(as_expression(v) for v in V),
            rho=rho_fns,
            a=ComparisonFunction.parse(a, FunctionClass.N, label="a"),
            zeta=ComparisonFunction.parse(zeta, FunctionClass.N, label="zeta"),
            a1=ComparisonFunction.parse(a1, FunctionClass.K_INF, label="a1"),
            a2=ComparisonFunction.parse(a2, FunctionClass.K_INF, label="a2"),
            g=tuple(as_expression(e) for e in g),
            gradV=tuple(tuple(as_expression(e) for e in row) for row in gradV) if gradV else (),
            analytic_b=tuple(as_expression(b) if b is not None else None for b in analytic_b)
            if analytic_b
            else (),
            W=as_expression(W) if W is not None else None,
            label=label,
        )

    @property
    def k(self) -> int:
        return len(self.V)

    @property
    def uses_dissipation(self) -> bool:
        """Single-function variant: decrease measured against -W(x)."""
        return self.k == 1 and self.W is not None

    def values(self, z: np.ndarray) -> np.ndarray:
        """V_i at points of shape (n, N); returns (k, N)."""
        return self._compiled["V"](z, size=z.shape[1])

    def v_max(self, z: np.ndarray) -> np.ndarray:
        return self.values(z).max(axis=0)

    def grad(self, i: int, x: np.ndarray) -> np.ndarray:
        return self._compiled["gradV"][i](x[:, None], size=1)[:, 0]

    def g_values(self, i: int, z: np.ndarray) -> np.ndarray:
        return self._compiled["g"](z, size=z.shape[1])[i]

    def grad_g(self, i: int, z: np.ndarray) -> np.ndarray:
        return self._compiled["gradg"][i](z, size=z.shape[1])

    def analytic_bound(self, i: int, x: np.ndarray) -> float | None:
        fn = self._compiled["b"][i]
        return None if fn is None else float(fn(x[:, None], size=1)[0, 0])

    def w_values(self, z: np.ndarray) -> np.ndarray:
        fn = self._compiled["W"]
        if fn is None:
            raise DefinitionError("certificate has no W")
        return fn(z, size=z.shape[1])[0]

    def decrease_rate(self, i: int, x: np.ndarray, level: float) -> float:
        if self.uses_dissipation:
            return float(self.w_values(x[:, None])[0])
        rho = self.rho[i]
        assert rho is not None
        return rho(level)

    def sublevel(self, level: float) -> SublevelSampler:
        return SublevelSampler(self.v_max, self.a, self.a2, self.n, level)


def _fill(points: np.ndarray, count: int) -> np.ndarray:
    """Repeat columns cyclically up to `count` (the first columns stay in place)."""
    if points.shape[1] >= count:
        return points[:, :count]
    return points[:, np.arange(count) % points.shape[1]]


def _as_list(values: np.ndarray) -> list[float]:
    return [float(v) for v in np.ravel(values)]


def b_bound(
    cert: LyapunovCertificate,
    i: int,
    x: Sequence[float],
    model: SystemModel,
    budget: SampleBudget | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Sampled estimate of b_i^g(x), the largest rate |grad g_i . f| over the constraint sets."""
    budget = budget or SampleBudget()
    rng = rng if rng is not None else np.random.default_rng(budget.seed)
    x_arr = np.asarray(x, dtype=float)
    level = float(cert.values(x_arr[:, None])[i, 0])
    if level <= 0.0:
        logger.debug("b_bound: V_%d(x) = 0, constraint sets collapse", i + 1)
        return 0.0
    sampler = cert.sublevel(level)
    count = budget.mc_samples
    seeds = [np.zeros((cert.n, 1))]
    if sampler.contains(x_arr[:, None])[0]:
        seeds.append(x_arr[:, None])
    xi = sampler.draw(rng, count)
    x0 = sampler.draw(rng, count)
    xi = _fill(np.concatenate([*seeds, xi], axis=1), count)
    x0 = _fill(np.concatenate([*reversed(seeds), x0], axis=1), count)
    radius = generalized_inverse(cert.zeta, level)
    v = sample_ball(rng, radius, model.U_box, count)
    v0 = sample_ball(rng, radius, model.U_box, count)
    d = sample_disturbances(rng, model.D_box, count)
    rates = np.einsum("ij,ij->j", cert.grad_g(i, xi), model.rhs_batch(xi, x0, d, v, v0))
    finite = np.isfinite(rates)
    if not finite.any():
        raise SamplingError(f"no finite rate sampled at x={_as_list(x_arr)}")
    return float(np.abs(rates[finite]).max())


def b_set_members(
    cert: LyapunovCertificate,
    i: int,
    x: Sequence[float],
    candidates: np.ndarray,
    r: float,
    bound: float,
) -> np.ndarray:
    """Which columns z of `candidates` satisfy |g_i(z) - g_i(x)| <= r * bound."""
    width = r * bound
    gx = float(cert.g_values(i, np.asarray(x, dtype=float)[:, None])[0])
    return np.abs(cert.g_values(i, candidates) - gx) <= width + margin_tolerance(width)


@dataclass
class _PointOutcome:
    margin: float = math.inf
    violated: bool = False
    witness: Optional[Witness] = None
    samples: int = 0
    vacuous: bool = False


def _decrease_at(
    cert: LyapunovCertificate,
    model: SystemModel,
    i: int,
    x: np.ndarray,
    r: float,
    mc: int,
    rng: np.random.Generator,
) -> _PointOutcome:
    n = cert.n
    xcol = x[:, None]
    values = cert.values(xcol)[:, 0]
    level = float(values[i])
    if not within_level(np.array([cert.a(float(values.max()))]), level)[0]:
        return _PointOutcome(vacuous=True)

    rate = cert.decrease_rate(i, x, level)
    grad = cert.grad(i, x)
    if level > 0.0:
        bound = cert.analytic_bound(i, x)
        if bound is None:
            bound = b_bound(cert, i, x, model, SampleBudget(mc_samples=mc), rng)

        def in_b_set(z: np.ndarray) -> np.ndarray:
            return b_set_members(cert, i, x, z, r, bound)

        held = cert.sublevel(level).draw(rng, mc, accept=in_b_set)
        held = np.concatenate([xcol, held], axis=1)
        radius = generalized_inverse(cert.zeta, level)
    else:
        held = xcol
        radius = 0.0
    held = _fill(held, mc)
    d = sample_disturbances(rng, model.D_box, mc)
    v = sample_ball(rng, radius, model.U_box, mc)
    v0 = sample_ball(rng, radius, model.U_box, mc)
    states = np.broadcast_to(xcol, (n, mc))
    lhs = grad @ model.rhs_batch(states, held, d, v, v0)
    margins = np.where(np.isfinite(lhs), -rate - lhs, -math.inf)
    violated = margins < -margin_tolerance(np.maximum(abs(rate), np.abs(np.nan_to_num(lhs))))
    j = int(np.argmin(margins))
    witness = Witness(
        x=_as_list(x),
        x0=_as_list(held[:, j]),
        d=_as_list(d[:, j]),
        v=_as_list(v[:, j]),
        v0=_as_list(v0[:, j]),
    )
    return _PointOutcome(float(margins[j]), bool(violated.any()), witness, mc)


def decrease_check(
    cert: LyapunovCertificate,
    model: SystemModel,
    region: Region,
    r: float,
    budget: SampleBudget | None = None,
) -> list[VerificationReport]:
    """Sampled check of grad V_i . f <= -rho_i(V_i) with held states in B_i^g(r, x).

    One report per component i.
    """
    budget = budget or SampleBudget()
    if region.n != cert.n or model.n != cert.n:
        raise InputError("region, model and certificate dimensions differ")
    if not 0 <= r <= model.r * (1 + 1e-12):
        raise InputError(f"r={r} must lie in [0, model.r={model.r}]")
    points = region.grid(budget.grid_per_axis)

    def task(x: np.ndarray, rng: np.random.Generator) -> list[_PointOutcome]:
        return [_decrease_at(cert, model, i, x, r, budget.mc_samples, rng) for i in range(cert.k)]

    outcomes = run_points(task, points, budget.seed)
    reports = []
    for i in range(cert.k):
        per_point = [row[i] for row in outcomes]
        checked = [o for o in per_point if not o.vacuous]
        worst = min(checked, key=lambda o: o.margin, default=None)
        failed = any(o.violated for o in checked)
        condition = "decrease-W" if cert.uses_dissipation else f"decrease[{i + 1}]"
        report = VerificationReport(
            condition=condition,
            status="fail" if failed else "pass",
            worst_margin=worst.margin if worst else 0.0,
            witness=worst.witness if worst else None,
            budget=budget,
            samples_used=sum(o.samples for o in checked),
            points_checked=len(checked),
            points_vacuous=len(per_point) - len(checked),
            region=region.as_lists(),
            notes=[FALSIFICATION_NOTE, B_SET_NOTE, f"r={r}"],
        )
        logger.info(
            "%s: %s worst_margin=%.3e points=%d vacuous=%d",
            condition,
            report.status,
            report.worst_margin,
            report.points_checked,
            report.points_vacuous,
        )
        reports.append(report)
    return reports


def sandwich_check(
    cert: LyapunovCertificate,
    model: SystemModel,
    region: Region,
    budget: SampleBudget | None = None,
) -> VerificationReport:
    """a1(|H(x)|) <= max_i V_i(x) <= a2(|x|) on the region grid."""
    budget = budget or SampleBudget()
    points = region.grid(budget.grid_per_axis).T
    middle = cert.v_max(points)
    lower = cert.a1.batch(np.linalg.norm(model.outputs(points), axis=0))
    upper = cert.a2.batch(np.linalg.norm(points, axis=0))
    margins = np.minimum(middle - lower, upper - middle)
    scale = np.maximum(np.abs(middle), np.maximum(np.abs(lower), np.abs(upper)))
    violated = margins < -margin_tolerance(scale)
    j = int(np.argmin(margins))
    report = VerificationReport(
        condition="sandwich",
        status="fail" if violated.any() else "pass",
        worst_margin=float(margins[j]),
        witness=Witness(x=_as_list(points[:, j])),
        budget=budget,
        samples_used=points.shape[1],
        points_checked=points.shape[1],
        region=region.as_lists(),
        notes=[FALSIFICATION_NOTE],
    )
    logger.info("sandwich: %s worst_margin=%.3e", report.status, report.worst_margin)
    return report


def _region_draws(rng: np.random.Generator, region: Region, count: int) -> np.ndarray:
    lo = np.array([b[0] for b in region.box])[:, None]
    hi = np.array([b[1] for b in region.box])[:, None]
    return lo + (hi - lo) * rng.random((region.n, count))


def check_hypotheses(
    model: SystemModel,
    region: Region,
    budget: SampleBudget | None = None,
    growth: ComparisonFunction | None = None,
    output_offset: float | None = None,
    output_gain: ComparisonFunction | None = None,
    input_radius: float = 1.0,
) -> list[VerificationReport]:
    """Sampled checks of the standing hypotheses on the loop.

    The growth check needs `growth` and the output bound needs `output_offset`/`output_gain`;
    without them the empirical envelope is reported instead. Inputs are drawn from U within
    `input_radius` of the origin.
    """
    budget = budget or SampleBudget()
    rng = np.random.default_rng(budget.seed)
    mc = budget.mc_samples
    reports: list[VerificationReport] = []

    # one-sided Lipschitz estimate over pairs sharing the remaining arguments
    x = _region_draws(rng, region, mc)
    y = _region_draws(rng, region, mc)
    held = _region_draws(rng, region, mc)
    d = sample_disturbances(rng, model.D_box, mc)
    v = sample_ball(rng, input_radius, model.U_box, mc)
    v0 = sample_ball(rng, input_radius, model.U_box, mc)
    diff = x - y
    gap = np.einsum("ij,ij->j", diff, diff)
    keep = gap > 0
    slope = np.einsum(
        "ij,ij->j", diff, model.rhs_batch(x, held, d, v, v0) - model.rhs_batch(y, held, d, v, v0)
    )[keep] / gap[keep]
    estimate = float(max(slope.max(initial=0.0), 0.0))
    finite = math.isfinite(estimate)
    reports.append(
        VerificationReport(
            condition="one-sided-lipschitz",
            status="pass" if finite else "fail",
            worst_margin=0.0 if finite else -math.inf,
            witness=None if finite else Witness(x=_as_list(x[:, 0])),
            budget=budget,
            samples_used=int(keep.sum()),
            estimate=estimate,
            region=region.as_lists(),
            notes=["estimated one-sided Lipschitz constant L"],
        )
    )

    # growth bound |f| <= a(|x| + |x0| + |v| + |v0|)
    size = (
        np.linalg.norm(x, axis=0)
        + np.linalg.norm(held, axis=0)
        + np.linalg.norm(v, axis=0)
        + np.linalg.norm(v0, axis=0)
    )
    flow = np.linalg.norm(model.rhs_batch(x, held, d, v, v0), axis=0)
    if growth is None:
        reports.append(
            VerificationReport(
                condition="growth",
                status="pass",
                worst_margin=0.0,
                budget=budget,
                samples_used=mc,
                estimate=float(flow.max()),
                region=region.as_lists(),
                notes=["no growth candidate given: envelope max |f| reported"],
            )
        )
    else:
        defined = np.isfinite(flow)
        flow = np.where(defined, flow, 0.0)
        margins = np.where(defined, growth.batch(size) - flow, -math.inf)
        j = int(np.argmin(margins))
        reports.append(
            VerificationReport(
                condition="growth",
                status="fail" if (margins < -margin_tolerance(flow)).any() else "pass",
                worst_margin=float(margins[j]),
                witness=Witness(
                    x=_as_list(x[:, j]),
                    x0=_as_list(held[:, j]),
                    d=_as_list(d[:, j]),
                    v=_as_list(v[:, j]),
                    v0=_as_list(v0[:, j]),
                ),
                budget=budget,
                samples_used=mc,
                region=region.as_lists(),
            )
        )

    # output bound |x| <= R + p(|H(x)|)
    grid = region.grid(budget.grid_per_axis).T
    state_norm = np.linalg.norm(grid, axis=0)
    output_norm = np.linalg.norm(model.outputs(grid), axis=0)
    if output_offset is None or output_gain is None:
        reports.append(
            VerificationReport(
                condition="output-bound",
                status="pass",
                worst_margin=0.0,
                budget=budget,
                samples_used=grid.shape[1],
                points_checked=grid.shape[1],
                estimate=float((state_norm - output_norm).max()),
                region=region.as_lists(),
                notes=["no candidates given: smallest R for p = identity reported"],
            )
        )
    else:
        margins = output_offset + output_gain.batch(output_norm) - state_norm
        j = int(np.argmin(margins))
        reports.append(
            VerificationReport(
                condition="output-bound",
                status="fail" if (margins < -margin_tolerance(state_norm)).any() else "pass",
                worst_margin=float(margins[j]),
                witness=Witness(x=_as_list(grid[:, j])),
                budget=budget,
                samples_used=grid.shape[1],
                points_checked=grid.shape[1],
                region=region.as_lists(),
            )
        )

    # sampling period 0 < h(x) <= r
    periods = model.sampling_periods(grid)
    margins = np.minimum(periods, model.r - periods)
    j = int(np.argmin(margins))
    bad = (periods <= 0) | (periods > model.r + margin_tolerance(model.r))
    reports.append(
        VerificationReport(
            condition="sampling-period",
            status="fail" if bad.any() else "pass",
            worst_margin=float(margins[j]),
            witness=Witness(x=_as_list(grid[:, j])),
            budget=budget,
            samples_used=grid.shape[1],
            points_checked=grid.shape[1],
            region=region.as_lists(),
        )
    )
    for report in reports:
        logger.debug("%s: %s estimate=%s", report.condition, report.status, report.estimate)
    return reports


def validate_certificate(
    cert: LyapunovCertificate,
    model: SystemModel | None = None,
    region: Region | None = None,
    grid_points: int = 201,
    s_max: float = 10.0,
    budget: SampleBudget | None = None,
) -> CertificateValidationReport:
    """Class checks of the comparison functions, positivity of V and W, analytic_b domination."""
    functions = [
        validate_comparison_fn(rho, grid_points, s_max) for rho in cert.rho if rho is not None
    ]
    functions.append(validate_comparison_fn(cert.a, grid_points, s_max, require_contraction=True))
    for fn in (cert.zeta, cert.a1, cert.a2):
        functions.append(validate_comparison_fn(fn, grid_points, s_max))

    region = region or Region.symmetric(cert.n, 5.0)
    grid = region.grid(11).T
    nonzero = np.linalg.norm(grid, axis=0) > 0
    checks: list[PropertyCheck] = []
    values = cert.values(grid)
    worst_v = float(values.min())
    checks.append(
        PropertyCheck(
            name="V_nonnegative", passed=worst_v >= -margin_tolerance(0.0), worst_margin=worst_v
        )
    )
    if cert.W is not None:
        w = cert.w_values(grid)
        at_origin = float(cert.w_values(np.zeros((cert.n, 1)))[0])
        worst_w = float(w[nonzero].min()) if nonzero.any() else 0.0
        checks.append(
            PropertyCheck(
                name="W_positive_definite",
                passed=worst_w > 0 and abs(at_origin) <= margin_tolerance(0.0),
                worst_margin=min(worst_w, -abs(at_origin)),
            )
        )
    if model is not None:
        budget = budget or SampleBudget(mc_samples=500)
        test_points = region.grid(5)
        test_points = test_points[np.linalg.norm(test_points, axis=1) > 0]
        for i, expr in enumerate(cert.analytic_b):
            if expr is None:
                continue
            rng = np.random.default_rng(budget.seed)
            worst = math.inf
            for x in test_points:
                analytic = cert.analytic_bound(i, x)
                numeric = b_bound(cert, i, x, model, budget, rng)
                worst = min(worst, analytic * (1 + 1e-9) + margin_tolerance(analytic) - numeric)
            checks.append(
                PropertyCheck(
                    name=f"analytic_b[{i + 1}]_dominates", passed=worst >= 0, worst_margin=worst
                )
            )

    passed = all(f.passed for f in functions) and all(c.passed for c in checks)
    logger.info("certificate %s validation: %s", cert.label, "pass" if passed else "fail")
    return CertificateValidationReport(functions=functions, checks=checks, passed=passed)
