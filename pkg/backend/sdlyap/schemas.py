from __future__ import annotations

import math
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

MONTE_CARLO_NOTE = (
    "Monte Carlo can only falsify: a pass is evidence under the stated budget, not a proof."
)


class PropertyCheck(BaseModel):
    name: str
    passed: bool
    worst_margin: float
    witness_s: Optional[float] = Field(
        default=None, description="First grid point where the check fails"
    )


class FunctionValidationReport(BaseModel):
    label: str
    declared_class: str
    grid_points: int
    s_max: float
    checks: list[PropertyCheck]
    class_passed: bool
    passed: bool

    def check(self, name: str) -> PropertyCheck:
        for item in self.checks:
            if item.name == name:
                return item
        raise KeyError(name)


class CertificateValidationReport(BaseModel):
    functions: list[FunctionValidationReport]
    checks: list[PropertyCheck] = Field(default_factory=list)
    passed: bool


class SampleBudget(BaseModel):
    grid_per_axis: int = Field(41, gt=0)
    mc_samples: int = Field(2000, gt=0)
    seed: int = Field(7, ge=0, lt=2**64)

    model_config = ConfigDict(frozen=True)


class Witness(BaseModel):
    x: list[float]
    x0: Optional[list[float]] = None
    d: Optional[list[float]] = None
    v: Optional[list[float]] = None
    v0: Optional[list[float]] = None


class VerificationReport(BaseModel):
    condition: str
    status: Literal["pass", "fail"]
    worst_margin: float
    witness: Optional[Witness] = None
    budget: Optional[SampleBudget] = None
    samples_used: int = 0
    points_checked: int = 0
    points_vacuous: int = 0
    estimate: Optional[float] = Field(
        default=None, description="Quantity estimated by envelope-style checks"
    )
    region: Optional[list[list[float]]] = None
    notes: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _fail_has_witness(self) -> "VerificationReport":
        if self.status == "fail" and (self.witness is None or not self.worst_margin <= 0):
            raise ValueError("a failing report needs a witness and a nonpositive margin")
        return self

    @property
    def passed(self) -> bool:
        return self.status == "pass"


class MASPResult(BaseModel):
    r_star: float
    method: Literal["closed-form-single", "closed-form-vector", "bisection"]
    status: Literal["success", "infeasible"] = "success"
    open_endpoint: bool = False
    margins: dict[str, float] = Field(default_factory=dict)
    bracket: Optional[list[float]] = None
    verifier_calls: int = 0
    bracket_calls: int = 0
    extra_calls: int = 0
    non_monotone: list[float] = Field(default_factory=list)
    label: Optional[str] = None

    @model_validator(mode="after")
    def _positive_on_success(self) -> "MASPResult":
        if self.status == "success" and not self.r_star > 0:
            raise ValueError("r_star must be positive on success")
        return self


class EnvelopeReport(BaseModel):
    passed: bool
    worst_margin: float
    violation_time: Optional[float] = None
    samples: int
    tol: float


class GainViolation(BaseModel):
    amplitude: float
    dtilde_level: float
    seed: int
    tail_sup: Optional[float]
    bound: float
    reason: str
    x0: list[float]


class GainEstimate(BaseModel):
    amplitudes: list[float]
    tail_sup: list[float]
    gamma_bound: list[float]
    fitted_gain: Optional[float]
    declared_gain: Optional[float] = None
    dtilde_levels: list[float]
    tail_sup_by_dtilde: dict[str, list[float]] = Field(default_factory=dict)
    runs: int
    t_tail: float
    t_final: float
    tol: float
    monotone: bool
    passed: bool
    violations: list[GainViolation] = Field(default_factory=list)
    note: str = MONTE_CARLO_NOTE

    def csv_rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.amplitudes, self.tail_sup, self.gamma_bound))


class KLFitResult(BaseModel):
    C: float
    lam: float
    residual_factor: float
    C_inflated: float
    coverage: float
    coverage_inflated: float
    trajectories_used: int
    trajectories_excluded: int
    samples: int
    note: str = "Exponential fit is diagnostic only."


class LemmaReport(BaseModel):
    check: Literal["comparison", "smallgain"]
    status: Literal["pass", "fail", "hypothesis-violated"]
    worst_margin: float
    witness_time: Optional[float] = None
    witness_xi: Optional[float] = None
    hypothesis_margin: Optional[float] = None
    consequences: dict[str, bool] = Field(default_factory=dict)
    samples: int = 0
    notes: list[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"


class FindHResult(BaseModel):
    h_star: float
    feasible: bool
    obstruction_point: Optional[list[float]] = None
    region: list[list[float]]
    points_checked: int
    worst_margin: float
    violated_above: bool = Field(
        description="Whether 1.1*h_star violates the condition at some grid point"
    )
    note: str = (
        "With h <= h_star the emulated sampled feedback is expected to be UISS with zero gain "
        "from the sampling schedule; confirm by simulation at 0.9*h_star."
    )


# --- spec files ----------------------------------------------------------

Bound = Optional[float | str]


def _to_float_bound(value: Any, default: float) -> float:
    if value is None:
        return default
    if isinstance(value, str):
        return float(value.strip().lower().replace("infinity", "inf"))
    return float(value)


def parse_intervals(raw: list[Any]) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for item in raw:
        lo, hi = item
        out.append((_to_float_bound(lo, -math.inf), _to_float_bound(hi, math.inf)))
    return out


class PlantSpec(BaseModel):
    f_open: list[str]
    k: list[str]
    H: Optional[list[str]] = None
    measurement_error: bool = False
    actuator_error: bool = True
    E: Optional[list[list[Bound]]] = None


class LyapunovSpec(BaseModel):
    V: list[str]
    rho: Optional[list[Optional[str]]] = None
    a: str
    zeta: str
    g: list[str]
    a1: str
    a2: str
    gradV: Optional[list[list[str]]] = None
    analytic_b: Optional[list[Optional[str]]] = None
    W: Optional[str] = None

    @model_validator(mode="after")
    def _lengths(self) -> "LyapunovSpec":
        k = len(self.V)
        for name in ("rho", "g", "analytic_b", "gradV"):
            value = getattr(self, name)
            if value is not None and len(value) != k:
                raise ValueError(f"{name} has {len(value)} entries, expected {k} (one per V)")
        if self.rho is None and not (k == 1 and self.W):
            raise ValueError("rho is required unless a single V comes with W")
        return self


class SystemSpecFile(BaseModel):
    name: Optional[str] = None
    n: int = Field(gt=0)
    f: Optional[list[str]] = None
    H: Optional[list[str]] = None
    h: float | str
    r: float = Field(gt=0)
    D: list[list[Bound]] = Field(default_factory=list)
    U: list[list[Bound]] = Field(default_factory=list)
    plant: Optional[PlantSpec] = None
    lyapunov: Optional[LyapunovSpec] = None

    model_config = ConfigDict(extra="forbid")

    @field_validator("D", "U")
    @classmethod
    def _pairs(cls, value: list[list[Bound]]) -> list[list[Bound]]:
        for item in value:
            if len(item) != 2:
                raise ValueError("each interval must be [lo, hi]")
        return value

    @model_validator(mode="after")
    def _dimensions(self) -> "SystemSpecFile":
        if self.f is None and self.plant is None:
            raise ValueError("either f or plant is required")
        if self.f is not None and len(self.f) != self.n:
            raise ValueError(f"f has {len(self.f)} entries, expected n={self.n}")
        if self.plant is not None and len(self.plant.f_open) != self.n:
            count = len(self.plant.f_open)
            raise ValueError(f"plant.f_open has {count} entries, expected n={self.n}")
        return self


class BackstepCertificateSpec(BaseModel):
    V: str
    k: str
    W: str
    zeta: str
    a: str
    variant: Literal["measurement-error", "actuator-error"] = "measurement-error"
    a2: Optional[str] = None

    model_config = ConfigDict(extra="forbid")


class BackstepSpecFile(BaseModel):
    """Triangular system x_i' = sum_j x_j phi_ij + g_i x_{i+1} with a feedback certificate."""

    name: Optional[str] = None
    phi: list[list[str]] = Field(min_length=1)
    g: list[str]
    D: list[list[Bound]] = Field(default_factory=list)
    certificate: BackstepCertificateSpec

    model_config = ConfigDict(extra="forbid")

    @field_validator("D")
    @classmethod
    def _pairs(cls, value: list[list[Bound]]) -> list[list[Bound]]:
        for item in value:
            if len(item) != 2:
                raise ValueError("each interval must be [lo, hi]")
        return value

    @model_validator(mode="after")
    def _triangular(self) -> "BackstepSpecFile":
        if len(self.g) != len(self.phi):
            raise ValueError(
                f"g has {len(self.g)} entries, expected one per phi row ({len(self.phi)})"
            )
        for i, row in enumerate(self.phi, start=1):
            if len(row) != i:
                raise ValueError(f"phi row {i} needs {i} entries, got {len(row)}")
        return self


# --- API bodies ----------------------------------------------------------


class ClosedFormRequest(BaseModel):
    kind: Literal["single", "vector"]
    c: float
    delta: float = 1.0


class RegionBody(BaseModel):
    box: list[list[float]] = Field(default_factory=lambda: [[-5.0, 5.0], [-5.0, 5.0]])
    exclude_origin_radius: float = 0.0


class VerifyRequest(BaseModel):
    builtin: Optional[str] = Field(default="ex41-vector", description="Catalog entry to verify")
    spec: Optional[SystemSpecFile] = None
    r: Optional[float] = None
    region: RegionBody = Field(default_factory=RegionBody)
    budget: SampleBudget = Field(
        default_factory=lambda: SampleBudget(grid_per_axis=21, mc_samples=300)
    )
    sandwich: bool = True


class BisectionRequest(VerifyRequest):
    bracket: tuple[float, float] = (0.01, 1.0)
    tol: float = Field(1e-2, gt=0)


class SimulateRequest(BaseModel):
    builtin: Optional[str] = "ex41"
    spec: Optional[SystemSpecFile] = None
    x0: list[float]
    r: Optional[float] = None
    t_final: float = Field(10.0, gt=0)
    d: str = "const:0"
    v: str = "const:0"
    dtilde: str = "const:0"
    seed: int = 0
    max_points: int = Field(500, gt=1)


class SimulateResponse(BaseModel):
    termination: str
    blowup_time: Optional[float]
    sampling_instants: int
    final_state: list[float]
    times: list[float]
    states: list[list[float]]
