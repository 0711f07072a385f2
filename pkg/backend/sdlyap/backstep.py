from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    Box,
    ComparisonFunction,
    FunctionClass,
    PlantModel,
    Region,
    SystemModel,
    as_box,
    as_expression,
    check_variables,
    validate_comparison_fn,
)
from .errors import DefinitionError, InputError, NotDifferentiableError, SamplingError
from .exprlang import CompiledVector, Expression, Num, Var, add, compile_vector, gradient, mul, neg
from .sampling import (
    SublevelSampler,
    generalized_inverse,
    margin_tolerance,
    run_points,
    sample_ball,
    sample_box,
    sample_disturbances,
    within_level,
)
from .schemas import FindHResult, PropertyCheck, SampleBudget, VerificationReport, Witness
from .simulator import emulate_feedback

logger = logging.getLogger(__name__)

REGION_NOTE = "checked on the stated region plus origin rays"
RAY_DECADES = 6
H_CAP = 1e6


@dataclass(frozen=True)
class TriangularSystem:
    """x_i' = sum_{j<=i} x_j phi_ij + g_i x_{i+1} (i < n), x_n' = sum_j x_j phi_nj + g_n u.

    Row i of `phi` and g_i depend on x_1..x_i and d only.
    """

    n: int
    phi: tuple[tuple[Expression, ...], ...]
    g: tuple[Expression, ...]
    D_box: Box = ()
    name: str = "triangular"
    F: tuple[Expression, ...] = field(init=False)
    G: tuple[Expression, ...] = field(init=False)
    _compiled: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.phi) != self.n or len(self.g) != self.n:
            raise DefinitionError(f"phi and g need {self.n} rows")
        for i, row in enumerate(self.phi, start=1):
            if len(row) != i:
                raise DefinitionError(f"phi row {i} needs {i} entries, got {len(row)}")
            check_variables(row, {"x": i, "d": len(self.D_box)}, f"phi[{i}]")
            check_variables([self.g[i - 1]], {"x": i, "d": len(self.D_box)}, "g")

        F: list[Expression] = []
        for i, row in enumerate(self.phi, start=1):
            total: Expression = Num(0.0)
            for j, coeff in enumerate(row, start=1):
                total = add(total, mul(Var("x", j), coeff))
            if i < self.n:
                total = add(total, mul(self.g[i - 1], Var("x", i + 1)))
            F.append(total)
        G = [Num(0.0)] * (self.n - 1) + [self.g[-1]]
        object.__setattr__(self, "F", tuple(F))
        object.__setattr__(self, "G", tuple(G))
        self._compiled["F"] = compile_vector(F, ["x", "d"], vectorized=True)
        self._compiled["g"] = compile_vector(self.g, ["x", "d"], vectorized=True)

    @classmethod
    def build(
        cls,
        phi: Sequence[Sequence[str | Expression]],
        g: Sequence[str | Expression],
        D: Iterable[Sequence[float]] = (),
        name: str = "triangular",
    ) -> "TriangularSystem":
        return cls(
            n=len(g),
            phi=tuple(tuple(as_expression(e) for e in row) for row in phi),
            g=tuple(as_expression(e) for e in g),
            D_box=as_box(D),
            name=name,
        )

    def drift(self, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        return self._compiled["F"](x, d, size=x.shape[1], strict=False)

    def input_gain(self, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        """g_n(x, d), the only nonzero entry of G."""
        return self._compiled["g"](x, d, size=x.shape[1], strict=False)[-1]

    def flow(self, x: np.ndarray, d: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = self.drift(x, d)
        out[-1] += self.input_gain(x, d) * u
        return out

    def validate_gains(
        self, region: Region, points_per_axis: int = 11, seed: int = 0
    ) -> PropertyCheck:
        """Sampled positivity of every g_i over region x D."""
        grid = region.grid(points_per_axis).T
        rng = np.random.default_rng(seed)
        ds = sample_disturbances(rng, self.D_box, 16)
        worst = math.inf
        for j in range(ds.shape[1]):
            d = np.repeat(ds[:, j : j + 1], grid.shape[1], axis=1)
            worst = min(worst, float(self._compiled["g"](grid, d, size=grid.shape[1]).min()))
        return PropertyCheck(name="g_positive", passed=worst > 0, worst_margin=worst)

    def to_plant(
        self, k: str | Expression, measurement_error: bool = False, actuator_error: bool = True
    ) -> PlantModel:
        f_open = list(self.F)
        f_open[-1] = add(f_open[-1], mul(self.g[-1], Var("u", 1)))
        return PlantModel.build(
            n=self.n,
            f_open=f_open,
            k=[k],
            D=self.D_box,
            measurement_error=measurement_error,
            actuator_error=actuator_error,
            name=self.name,
        )

    def sampled_loop(self, k: str | Expression, h: float, name: str | None = None) -> SystemModel:
        """Constant-period emulation u = k(x(tau_i)), tau_{i+1} = tau_i + h*exp(-dtilde)."""
        plant = self.to_plant(k, measurement_error=False, actuator_error=False)
        return emulate_feedback(plant, h, h, name=name or f"{self.name}-sampled")


class ErrorVariant(str, Enum):
    MEASUREMENT = "measurement-error"
    ACTUATOR = "actuator-error"


@dataclass(frozen=True)
class BackstepCertificate:
    """V, feedback k and dissipation W, robust to errors with zeta(|.|) <= V.

    The error is e on the measurement or v on the actuator, per `variant`.
    """

    n: int
    V: Expression
    k: Expression
    W: Expression
    zeta: ComparisonFunction
    a: ComparisonFunction
    variant: ErrorVariant = ErrorVariant.MEASUREMENT
    a2: Optional[ComparisonFunction] = None
    label: str = "backstepping certificate"
    _compiled: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        dims = {"x": self.n}
        check_variables([self.V, self.k, self.W], dims, "certificate")
        scalar_k = compile_vector([self.k], ["x"])
        if abs(scalar_k([0.0] * self.n)[0]) > 1e-9:
            raise DefinitionError("k(0) must vanish")

        def vec(exprs: Sequence[Expression]) -> CompiledVector:
            return compile_vector(exprs, ["x"], vectorized=True)

        self._compiled["V"] = vec([self.V])
        self._compiled["gradV"] = vec(gradient(self.V, "x", self.n))
        self._compiled["k"] = vec([self.k])
        self._compiled["W"] = vec([self.W])
        if self.variant is ErrorVariant.ACTUATOR:
            try:
                self._compiled["gradk"] = vec(gradient(self.k, "x", self.n))
            except NotDifferentiableError as exc:
                raise DefinitionError(
                    f"actuator-error variant needs a differentiable k: {exc}"
                ) from exc

    @classmethod
    def build(
        cls,
        n: int,
        V: str | Expression,
        k: str | Expression,
        W: str | Expression,
        zeta: str,
        a: str,
        variant: ErrorVariant | str = ErrorVariant.MEASUREMENT,
        a2: str | None = None,
        label: str = "backstepping certificate",
    ) -> "BackstepCertificate":
        return cls(
            n=n,
            V=as_expression(V),
            k=as_expression(k),
            W=as_expression(W),
            zeta=ComparisonFunction.parse(zeta, FunctionClass.N, label="zeta"),
            a=ComparisonFunction.parse(a, FunctionClass.N, label="a"),
            variant=ErrorVariant(variant),
            a2=ComparisonFunction.parse(a2, FunctionClass.K_INF, label="a2") if a2 else None,
            label=label,
        )

    def values(self, z: np.ndarray) -> np.ndarray:
        return self._compiled["V"](z, size=z.shape[1])[0]

    def grad(self, z: np.ndarray) -> np.ndarray:
        return self._compiled["gradV"](z, size=z.shape[1])

    def feedback(self, z: np.ndarray) -> np.ndarray:
        return self._compiled["k"](z, size=z.shape[1])[0]

    def grad_feedback(self, z: np.ndarray) -> np.ndarray:
        return self._compiled["gradk"](z, size=z.shape[1])

    def w_values(self, z: np.ndarray) -> np.ndarray:
        return self._compiled["W"](z, size=z.shape[1])[0]

    def sublevel(self, level: float, start_half_width: float = 1.0) -> SublevelSampler:
        return SublevelSampler(self.values, self.a, self.a2, self.n, level, start_half_width)

    def validate(self, region: Region, points_per_axis: int = 11) -> list[PropertyCheck]:
        grid = region.grid(points_per_axis).T
        nonzero = np.linalg.norm(grid, axis=0) > 0
        checks = []
        named = (
            ("V_positive_definite", self.values(grid)),
            ("W_positive_definite", self.w_values(grid)),
        )
        for name, values in named:
            worst = float(values[nonzero].min()) if nonzero.any() else 0.0
            checks.append(PropertyCheck(name=name, passed=worst > 0, worst_margin=worst))
        for report in (
            validate_comparison_fn(self.a, 201, require_contraction=True),
            validate_comparison_fn(self.zeta, 201),
        ):
            checks.append(
                PropertyCheck(
                    name=f"{report.label}_class",
                    passed=report.passed,
                    worst_margin=min(c.worst_margin for c in report.checks),
                )
            )
        return checks


UNBOUNDED = ((-math.inf, math.inf),)


def _dissipation_at(
    tri: TriangularSystem,
    cert: BackstepCertificate,
    x: np.ndarray,
    mc: int,
    rng: np.random.Generator,
) -> tuple[float, bool, Witness]:
    xcol = x[:, None]
    level = float(cert.values(xcol)[0])
    radius = generalized_inverse(cert.zeta, level) if level > 0 else 0.0
    states = np.repeat(xcol, mc, axis=1)
    d = sample_disturbances(rng, tri.D_box, mc)
    if cert.variant is ErrorVariant.MEASUREMENT:
        err = sample_ball(rng, radius, UNBOUNDED * tri.n, mc)
        u = cert.feedback(states + err)
    else:
        err = sample_ball(rng, radius, UNBOUNDED, mc)
        u = cert.feedback(states) + err[0]
    lhs = cert.grad(xcol)[:, 0] @ tri.flow(states, d, u)
    w = float(cert.w_values(xcol)[0])
    margins = np.where(np.isfinite(lhs), -w - lhs, -math.inf)
    violated = margins < -margin_tolerance(np.maximum(abs(w), np.abs(np.nan_to_num(lhs))))
    j = int(np.argmin(margins))
    witness = Witness(x=x.tolist(), d=d[:, j].tolist(), v=err[:, j].tolist())
    return float(margins[j]), bool(violated.any()), witness


def check_dissipation(
    tri: TriangularSystem,
    cert: BackstepCertificate,
    region: Region,
    budget: SampleBudget | None = None,
) -> VerificationReport:
    """grad V . (F + G k(x + e)) <= -W(x) for zeta(|e|) <= V(x).

    The actuator variant uses G k(x) + G v in place of G k(x + e).
    """
    budget = budget or SampleBudget()
    if tri.n != cert.n or region.n != tri.n:
        raise InputError("system, certificate and region dimensions differ")
    points = region.grid(budget.grid_per_axis)
    def task(x: np.ndarray, rng: np.random.Generator) -> tuple[float, bool, Witness]:
        return _dissipation_at(tri, cert, x, budget.mc_samples, rng)

    outcomes = run_points(task, points, budget.seed)
    margin, _, witness = min(outcomes, key=lambda o: o[0])
    failed = any(o[1] for o in outcomes)
    report = VerificationReport(
        condition=f"dissipation ({cert.variant.value})",
        status="fail" if failed else "pass",
        worst_margin=margin,
        witness=witness,
        budget=budget,
        samples_used=budget.mc_samples * len(points),
        points_checked=len(points),
        region=region.as_lists(),
    )
    logger.info("%s: %s worst_margin=%.3e", report.condition, report.status, margin)
    return report


def rho_x(
    tri: TriangularSystem,
    cert: BackstepCertificate,
    x: Sequence[float],
    budget: SampleBudget | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Sampled bound on the rate of the held quantity over {a(max{V(xi), V(x0)}) <= V(x)}.

    Measurement variant: |F(xi, d) + G(xi, d) k(x0)|. Actuator variant:
    |grad k(xi) . (F(xi, d) + G(xi, d) k(x0))|.
    """
    budget = budget or SampleBudget()
    rng = rng if rng is not None else np.random.default_rng(budget.seed)
    x_arr = np.asarray(x, dtype=float)
    level = float(cert.values(x_arr[:, None])[0])
    if level <= 0.0:
        return 0.0
    mc = budget.mc_samples
    sampler = cert.sublevel(level, start_half_width=float(np.abs(x_arr).max()))
    seeds = [np.zeros((tri.n, 1))]
    if sampler.contains(x_arr[:, None])[0]:
        seeds.append(x_arr[:, None])
    xi = np.concatenate([*seeds, sampler.draw(rng, mc)], axis=1)
    x0 = np.concatenate([*reversed(seeds), sampler.draw(rng, mc)], axis=1)
    count = min(xi.shape[1], x0.shape[1])
    if count <= 1 and len(seeds) == 1:
        raise SamplingError(f"no sublevel samples around x={x_arr.tolist()}")
    xi, x0 = xi[:, :count], x0[:, :count]
    d = sample_disturbances(rng, tri.D_box, count)
    motion = tri.flow(xi, d, cert.feedback(x0))
    if cert.variant is ErrorVariant.MEASUREMENT:
        rates = np.linalg.norm(motion, axis=0)
    else:
        rates = np.abs(np.einsum("ij,ij->j", cert.grad_feedback(xi), motion))
    rates = rates[np.isfinite(rates)]
    if rates.size == 0:
        raise SamplingError(f"no finite rate sampled at x={x_arr.tolist()}")
    return float(rates.max())


def _largest_h(cert: BackstepCertificate, rho: float, level: float) -> float:
    if rho <= 0.0:
        return math.inf
    return generalized_inverse(cert.zeta, level) / rho


def _ray_points(region: Region) -> np.ndarray:
    n = region.n
    scale = min(min(abs(lo), abs(hi)) for lo, hi in region.box) or 1.0
    directions = np.concatenate([np.eye(n), -np.eye(n), np.ones((n, 1)) / math.sqrt(n)], axis=1)
    radii = scale * 10.0 ** -np.arange(1, RAY_DECADES + 1)
    return np.concatenate([directions * t for t in radii], axis=1).T


def find_h(
    tri: TriangularSystem,
    cert: BackstepCertificate,
    region: Region,
    budget: SampleBudget | None = None,
    rel_tol: float = 1e-6,
) -> FindHResult:
    """Largest constant period h with zeta(h*rho(x)) <= V(x) on the grid, by bisection.

    Points along origin rays detect periods that must shrink to 0 near the origin.
    """
    budget = budget or SampleBudget()
    if region.n != tri.n:
        raise InputError("region and system dimensions differ")

    def rho_at(x: np.ndarray, rng: np.random.Generator) -> float:
        return rho_x(tri, cert, x, budget, rng)

    points = region.grid(budget.grid_per_axis)
    points = points[np.linalg.norm(points, axis=1) > 0]
    rhos = np.array(run_points(rho_at, points, budget.seed))
    levels = cert.values(points.T)
    lists = region.as_lists()

    def holds(h: float) -> bool:
        return bool(within_level(cert.zeta.batch(h * rhos) - levels, 0.0).all())

    blocked = (levels <= 0) & (rhos > 0)
    if blocked.any():
        j = int(np.flatnonzero(blocked)[0])
        return FindHResult(
            h_star=0.0,
            feasible=False,
            obstruction_point=points[j].tolist(),
            region=lists,
            points_checked=len(points),
            worst_margin=float(-rhos[j]),
            violated_above=True,
        )

    hi = 1.0
    while holds(hi):
        hi *= 2.0
        if hi > H_CAP:
            raise InputError(f"no sampling limit found below h={H_CAP}: rho vanishes on the region")
    lo = 0.0
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if holds(mid) else (lo, mid)
    h_star = lo
    margins = levels - cert.zeta.batch(h_star * rhos)

    ray_points = _ray_points(region)
    ray_rhos = run_points(rho_at, ray_points, budget.seed + 1)
    ray_h = np.array(
        [
            _largest_h(cert, rho, float(cert.values(p[:, None])[0]))
            for p, rho in zip(ray_points, ray_rhos)
        ]
    )
    j = int(np.argmin(ray_h))
    feasible = bool(ray_h[j] >= 1e-2 * h_star)
    result = FindHResult(
        h_star=h_star if feasible else 0.0,
        feasible=feasible,
        obstruction_point=None if feasible else ray_points[j].tolist(),
        region=lists,
        points_checked=len(points) + len(ray_points),
        worst_margin=float(margins.min()),
        violated_above=not holds(1.1 * h_star),
        note=FindHResult.model_fields["note"].default + " " + REGION_NOTE,
    )
    logger.info("h* = %.6g (feasible=%s)", result.h_star, feasible)
    return result


# --- planar hypothesis ----------------------------------------------------


@dataclass
class _PlanarTerms:
    z: np.ndarray
    stable_max: np.ndarray
    stable_witness: list[Witness]
    spread: np.ndarray
    drift: np.ndarray


def _planar_terms(
    f1: Expression,
    f2: Expression,
    c: float,
    a: float,
    region: Region,
    budget: SampleBudget,
    D: Box,
) -> _PlanarTerms:
    check_variables([f1, f2], {"x": 2, "d": len(D)}, "planar system")
    fns = compile_vector([f1, f2], ["x", "d"], vectorized=True)
    grid = region.grid(budget.grid_per_axis)[:, 0]
    grid = np.unique(grid[np.abs(grid) > 1e-12])
    mc = max(budget.mc_samples, 4)

    def at(z: np.ndarray, rng: np.random.Generator) -> tuple[float, Witness, float, float]:
        z = float(z[0])
        width = c * abs(z)
        d = sample_disturbances(rng, D, mc)
        # first condition at x1 = z: x1 f1(x1, -a x1 + xi, d), |xi| <= c|x1|
        xi = np.concatenate([[-width, width], sample_box(rng, width, 1, mc - 2)[0]])
        pts = np.stack([np.full(mc, z), -a * z + xi])
        stable = z * fns(pts, d, size=mc)[0]
        j = int(np.argmax(stable))
        witness = Witness(x=pts[:, j].tolist(), d=d[:, j].tolist())
        # second condition: max(|x1|, |xi|) <= c|z| and |x1| <= c|z|
        box = sample_box(rng, width, 2, mc)
        box[:, :4] = np.array([[-width, -width, width, width], [-width, width, -width, width]])
        inner = np.stack([box[0], -a * box[0] + box[1]])
        vals = fns(inner, d, size=mc)
        spread = abs(z) * float(np.abs(vals[1] + a * vals[0]).max())
        x1 = box[0]
        along = np.stack([x1, -a * x1 + z])
        vals = fns(along, d, size=mc)
        drift = float((z * vals[1] + a * z * vals[0]).max())
        return float(stable[j]), witness, spread, drift

    rows = run_points(at, grid[:, None], budget.seed)
    return _PlanarTerms(
        z=grid,
        stable_max=np.array([r[0] for r in rows]),
        stable_witness=[r[1] for r in rows],
        spread=np.array([r[2] for r in rows]),
        drift=np.array([r[3] for r in rows]),
    )


def _second_condition_margins(terms: _PlanarTerms, L: float, gamma: float) -> np.ndarray:
    return gamma * terms.z**2 - terms.spread - L * terms.drift


def check_hypothesis_P(
    f1: str | Expression,
    f2: str | Expression,
    c: float,
    a: float,
    L: float,
    gamma: float,
    region: Region,
    budget: SampleBudget | None = None,
    D: Iterable[Sequence[float]] = (),
) -> list[VerificationReport]:
    """Both planar conditions for x1' = f1(x1, x2, d), x2' = f2(x1, x2, d) + u.

    `region` is one-dimensional and supplies the sampled x1 (first condition) and z
    (second condition). Returns the reports "P-stable" and "P-gain".
    """
    if not c > 1:
        raise InputError(f"c must exceed 1, got {c}")
    if L < 0 or gamma < 0:
        raise InputError("L and gamma must be nonnegative")
    budget = budget or SampleBudget()
    box = as_box(D)
    terms = _planar_terms(as_expression(f1), as_expression(f2), c, a, region, budget, box)
    lists = region.as_lists()
    notes = [f"c={c}", f"a={a}"]

    stable = -terms.stable_max
    j = int(np.argmin(stable))
    first = VerificationReport(
        condition="P-stable",
        status="fail" if stable[j] <= 0 else "pass",
        worst_margin=float(stable[j]),
        witness=terms.stable_witness[j],
        budget=budget,
        samples_used=budget.mc_samples * len(terms.z),
        points_checked=len(terms.z),
        region=lists,
        notes=notes,
    )

    margins = _second_condition_margins(terms, L, gamma)
    k = int(np.argmin(margins))
    failed = margins[k] < -margin_tolerance(gamma * terms.z[k] ** 2)
    second = VerificationReport(
        condition="P-gain",
        status="fail" if failed else "pass",
        worst_margin=float(margins[k]),
        witness=Witness(x=[float(terms.z[k])]),
        budget=budget,
        samples_used=2 * budget.mc_samples * len(terms.z),
        points_checked=len(terms.z),
        region=lists,
        notes=notes + [f"L={L}", f"gamma={gamma}"],
    )
    for report in (first, second):
        logger.info(
            "%s: %s worst_margin=%.3e", report.condition, report.status, report.worst_margin
        )
    return [first, second]


def sweep_hypothesis_P(
    f1: str | Expression,
    f2: str | Expression,
    c: float,
    a: float,
    region: Region,
    L_grid: Sequence[float],
    gamma_grid: Sequence[float],
    budget: SampleBudget | None = None,
    D: Iterable[Sequence[float]] = (),
) -> Optional[tuple[float, float]]:
    """Smallest gamma (then smallest L) on the grids for which the second condition passes."""
    budget = budget or SampleBudget()
    terms = _planar_terms(as_expression(f1), as_expression(f2), c, a, region, budget, as_box(D))
    for gamma in sorted(gamma_grid):
        for L in sorted(L_grid):
            margins = _second_condition_margins(terms, L, gamma)
            if np.all(margins >= -margin_tolerance(gamma * terms.z**2)):
                logger.info("planar sweep: L=%g gamma=%g", L, gamma)
                return float(L), float(gamma)
    logger.info("planar sweep: no (L, gamma) on the grid")
    return None


def hypothesis_p_closed_loop(
    f1: str | Expression,
    f2: str | Expression,
    a: float,
    R: float,
    r: float,
    D: Iterable[Sequence[float]] = (),
    name: str = "planar-linear-feedback",
) -> SystemModel:
    """x1' = f1, x2' = f2 - R (x2(tau_i) + a x1(tau_i)), sampled with period r."""
    law = neg(mul(Num(float(R)), add(Var("xs", 2), mul(Num(float(a)), Var("xs", 1)))))
    return SystemModel.build(
        n=2,
        f=[as_expression(f1), add(as_expression(f2), law)],
        h=r,
        r=r,
        D=D,
        name=name,
    )


def scalar_instance(
    W: str = "(2 - sqrt(2))*x[1]^2",
) -> tuple[TriangularSystem, BackstepCertificate]:
    """x' = u with k = -2x, V = x^2/2, zeta(s) = s^2, a(s) = s/2."""
    tri = TriangularSystem.build(phi=[["0"]], g=["1"], name="backstep-scalar")
    cert = BackstepCertificate.build(
        n=1,
        V="x[1]^2/2",
        k="-2*x[1]",
        W=W,
        zeta="s^2",
        a="s/2",
        a2="s^2/2",
        label="backstep-scalar",
    )
    return tri, cert
