from __future__ import annotations

import csv
import io
import logging
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence, TextIO

import numpy as np

from .config import get_settings, load_defaults
from .errors import DefinitionError, InputError, InversionError, NumericDomainError
from .exprlang import (
    CompiledVector,
    Expression,
    Num,
    Var,
    children,
    compile_vector,
    parse,
    substitute,
    to_text,
)
from .schemas import FunctionValidationReport, PropertyCheck

logger = logging.getLogger(__name__)

Box = tuple[tuple[float, float], ...]


# --- helpers -------------------------------------------------------------


def as_expression(value: str | float | int | Expression) -> Expression:
    if isinstance(value, Expression):
        return value
    if isinstance(value, (int, float)):
        return Num(float(value))
    return parse(value)


def iter_variables(node: Expression) -> Iterator[Var]:
    if isinstance(node, Var):
        yield node
        return
    for child in children(node):
        yield from iter_variables(child)


def check_variables(
    exprs: Iterable[Expression], allowed: Mapping[str, int | None], where: str
) -> None:
    """Every variable must belong to an allowed namespace, with an index in range.

    `allowed` maps a namespace to its dimension, or to None for an unindexed scalar.
    """
    for i, expr in enumerate(exprs):
        for var in iter_variables(expr):
            if var.name not in allowed:
                raise DefinitionError(
                    f"{where}[{i}]: variable {var.key} not allowed here "
                    f"(expected one of {sorted(allowed)})"
                )
            dim = allowed[var.name]
            if dim is None and var.index is not None:
                raise DefinitionError(f"{where}[{i}]: {var.name} takes no index")
            if dim is not None and (var.index is None or var.index > dim):
                raise DefinitionError(f"{where}[{i}]: {var.key} out of range 1..{dim}")


def as_box(intervals: Iterable[Sequence[float]]) -> Box:
    box = tuple((float(lo), float(hi)) for lo, hi in intervals)
    for lo, hi in box:
        if math.isnan(lo) or math.isnan(hi) or lo > hi:
            raise DefinitionError(f"invalid interval [{lo}, {hi}]")
    return box


def in_box(value: Sequence[float], box: Box, tol: float = 1e-12) -> bool:
    return all(lo - tol <= x <= hi + tol for x, (lo, hi) in zip(value, box))


def box_corners(box: Box) -> np.ndarray:
    """All 2^l corners as an array of shape (l, 2^l)."""
    if not box:
        return np.zeros((0, 1))
    grids = np.meshgrid(*[np.array(b, dtype=float) for b in box], indexing="ij")
    return np.stack([g.ravel() for g in grids])


def invert_nondecreasing(
    fn: Callable[[float], float],
    y: float,
    tol: float | None = None,
    max_iter: int | None = None,
    cap: float = 1e12,
) -> float:
    """sup{s >= 0 : fn(s) <= y} by bracket expansion then bisection."""
    cfg = get_settings()
    tol = cfg.inversion_tol if tol is None else tol
    max_iter = cfg.inversion_max_iter if max_iter is None else max_iter
    if fn(0.0) > y:
        raise InversionError(f"level {y} is below the value at 0")
    hi = 1.0
    while fn(hi) <= y:
        hi *= 2.0
        if hi > cap:
            raise InversionError(f"function stays below {y} up to {cap}")
    lo = 0.0
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if fn(mid) <= y:
            lo = mid
        else:
            hi = mid
    return lo


# --- comparison functions ------------------------------------------------


class FunctionClass(str, Enum):
    K = "K"
    K_INF = "K-infinity"
    N = "N"
    POSITIVE_DEFINITE = "positive-definite"
    K_PLUS = "K-plus"


_ZERO_AT_ZERO = {
    FunctionClass.K,
    FunctionClass.K_INF,
    FunctionClass.N,
    FunctionClass.POSITIVE_DEFINITE,
}
_MONOTONE = {FunctionClass.K, FunctionClass.K_INF, FunctionClass.N}
_STRICT = {FunctionClass.K, FunctionClass.K_INF}
_POSITIVE = {FunctionClass.K, FunctionClass.K_INF, FunctionClass.POSITIVE_DEFINITE}


@dataclass(frozen=True)
class ComparisonFunction:
    """A scalar function of `s` declared to belong to a comparison class."""

    declared_class: FunctionClass
    label: str
    body: Optional[Expression] = None
    scalar_fn: Callable[[float], float] = field(  # type: ignore[assignment]
        default=None, repr=False, compare=False
    )
    vector_fn: Optional[Callable[[np.ndarray], np.ndarray]] = field(
        default=None, repr=False, compare=False
    )

    @classmethod
    def parse(
        cls, text: str | Expression, declared_class: FunctionClass | str, label: str | None = None
    ) -> "ComparisonFunction":
        body = as_expression(text)
        check_variables([body], {"s": None}, label or "comparison function")
        scalar = compile_vector([body], ["s"])
        vector = compile_vector([body], ["s"], vectorized=True)

        def scalar_fn(s: float, _c: CompiledVector = scalar) -> float:
            return float(_c(s)[0])

        def vector_fn(s: np.ndarray, _c: CompiledVector = vector) -> np.ndarray:
            return _c(s, strict=False)[0]

        return cls(
            declared_class=FunctionClass(declared_class),
            label=label or to_text(body),
            body=body,
            scalar_fn=scalar_fn,
            vector_fn=vector_fn,
        )

    @classmethod
    def from_callable(
        cls,
        fn: Callable[[float], float],
        declared_class: FunctionClass | str,
        label: str,
        vector_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> "ComparisonFunction":
        return cls(FunctionClass(declared_class), label, None, fn, vector_fn)

    @property
    def text(self) -> str:
        return to_text(self.body) if self.body is not None else self.label

    def __call__(self, s: float) -> float:
        return self.scalar_fn(float(s))

    def batch(self, s: np.ndarray | Sequence[float], strict: bool = True) -> np.ndarray:
        arr = np.asarray(s, dtype=float)
        if self.vector_fn is not None:
            out = self.vector_fn(arr)
        else:
            out = np.array([self.scalar_fn(float(v)) for v in arr.ravel()]).reshape(arr.shape)
        out = np.broadcast_to(out, arr.shape).astype(float, copy=True)
        if strict and not np.isfinite(out).all():
            bad = arr.ravel()[np.flatnonzero(~np.isfinite(out.ravel()))[0]]
            raise NumericDomainError(f"{self.label} is not finite at s={bad:g}")
        return out

    def inverse(self, y: float) -> float:
        """Generalized inverse sup{s : fn(s) <= y}; the inverse for strictly increasing fn."""
        return invert_nondecreasing(self, y)


def _first_violation(grid: np.ndarray, ok: np.ndarray) -> float | None:
    bad = np.flatnonzero(~ok)
    return float(grid[bad[0]]) if bad.size else None


def validate_comparison_fn(
    fn: ComparisonFunction,
    grid_points: int,
    s_max: float = 10.0,
    require_contraction: bool = False,
) -> FunctionValidationReport:
    """Sampled class checks on [0, s_max]; passing is falsification-based only."""
    if grid_points < 2:
        raise InputError("grid_points must be at least 2")
    grid = np.linspace(0.0, s_max, grid_points)
    try:
        values = fn.batch(grid, strict=False)
    except NumericDomainError as exc:
        raise DefinitionError(f"{fn.label}: {exc}") from exc
    cls = fn.declared_class
    checks: list[PropertyCheck] = []

    def record(name: str, ok: np.ndarray, margin: float, where: np.ndarray) -> None:
        checks.append(
            PropertyCheck(
                name=name,
                passed=bool(ok.all()),
                worst_margin=margin,
                witness_s=_first_violation(where, ok),
            )
        )

    finite = np.isfinite(values)
    record("finite", finite, 0.0 if finite.all() else -math.inf, grid)
    values = np.where(finite, values, -math.inf)

    if cls in _ZERO_AT_ZERO:
        margin = -abs(float(values[0]))
        record("zero_at_zero", np.array([margin >= -1e-12]), margin, grid[:1])
    if cls is FunctionClass.K_PLUS:
        record("positive", values > 0, float(values.min()), grid)
    else:
        record("nonnegative", values >= -1e-12, float(values.min()), grid)
    if cls in _POSITIVE:
        pos = values[1:]
        record("positive_for_positive_s", pos > 0, float(pos.min()), grid[1:])
    if cls in _MONOTONE:
        diffs = np.diff(values)
        ok = diffs >= -1e-12 * np.maximum(1.0, np.abs(values[1:]))
        record("nondecreasing", ok, float(diffs.min()), grid[1:])
    if cls in _STRICT:
        diffs = np.diff(values)
        record("strictly_increasing", diffs > 0, float(diffs.min()), grid[1:])

    class_passed = all(c.passed for c in checks)
    if require_contraction:
        gap = grid[1:] - values[1:]
        record("contraction", gap > 0, float(gap.min()), grid[1:])

    report = FunctionValidationReport(
        label=fn.label,
        declared_class=cls.value,
        grid_points=grid_points,
        s_max=s_max,
        checks=checks,
        class_passed=class_passed,
        passed=all(c.passed for c in checks),
    )
    logger.debug("validate fn=%s class=%s passed=%s", fn.label, cls.value, report.passed)
    return report


def compose_gain(
    a1: ComparisonFunction,
    zeta: ComparisonFunction,
    grid_max: float = 100.0,
    grid_points: int = 1001,
) -> ComparisonFunction:
    """gamma = a1^-1 o zeta, with a1^-1 by bisection."""
    grid = np.linspace(0.0, grid_max, grid_points)
    if not np.all(np.diff(a1.batch(grid)) > 0):
        raise InversionError(
            f"cannot invert {a1.label}: not strictly increasing on [0, {grid_max}]"
        )

    def gamma(s: float) -> float:
        return a1.inverse(zeta(s))

    return ComparisonFunction.from_callable(
        gamma, FunctionClass.N, label=f"inv({a1.text}) o ({zeta.text})"
    )


# --- KL functions --------------------------------------------------------


class KLRepresentation(str, Enum):
    CLOSED_FORM = "closed-form"
    FLOW_OF_RHO = "flow-of-rho"
    FITTED_EXPONENTIAL = "fitted-exponential"


class KLFunction:
    """sigma(s, t): nondecreasing in s, nonincreasing to 0 in t."""

    representation: KLRepresentation
    label: str

    def __call__(self, s: float, t: float) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def batch(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        s_arr, t_arr = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
        flat = [self(a, b) for a, b in zip(s_arr.ravel(), t_arr.ravel())]
        return np.array(flat).reshape(s_arr.shape)

    def table(self, s_values: np.ndarray, dt: float, steps: int) -> np.ndarray:
        """Values sigma(s_j, m*dt) as an array of shape (len(s_values), steps + 1)."""
        times = dt * np.arange(steps + 1)
        return self.batch(np.asarray(s_values, float)[:, None], times[None, :])


class ClosedFormKL(KLFunction):
    representation = KLRepresentation.CLOSED_FORM

    def __init__(self, body: str | Expression, label: str | None = None) -> None:
        self.body = as_expression(body)
        check_variables([self.body], {"s": None, "t": None}, "KL function")
        self.label = label or to_text(self.body)
        self._scalar = compile_vector([self.body], ["s", "t"])
        self._vector = compile_vector([self.body], ["s", "t"], vectorized=True)

    def __call__(self, s: float, t: float) -> float:
        return float(self._scalar(float(s), float(t))[0])

    def batch(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        s_arr, t_arr = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
        return np.broadcast_to(self._vector(s_arr, t_arr)[0], s_arr.shape).copy()


class ExponentialKL(KLFunction):
    representation = KLRepresentation.FITTED_EXPONENTIAL

    def __init__(self, C: float, lam: float) -> None:
        self.C = float(C)
        self.lam = float(lam)
        self.label = f"{self.C:.6g}*s*exp(-{self.lam:.6g}*t)"

    def __call__(self, s: float, t: float) -> float:
        return self.C * s * math.exp(-self.lam * t)

    def batch(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.C * np.asarray(s, float) * np.exp(-self.lam * np.asarray(t, float))


def validate_kl_function(
    kl: KLFunction,
    s_grid: Sequence[float] = (0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0),
    t_grid: Sequence[float] = (0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0),
    t_large: float = 1e3,
    tol: float = 1e-6,
) -> list[PropertyCheck]:
    s_arr = np.asarray(s_grid, float)
    t_arr = np.asarray(t_grid, float)
    table = kl.batch(s_arr[:, None], t_arr[None, :])
    checks = []
    ds = np.diff(table, axis=0)
    checks.append(
        PropertyCheck(
            name="nondecreasing_in_s",
            passed=bool((ds >= -tol).all()),
            worst_margin=float(ds.min()) if ds.size else 0.0,
        )
    )
    dt = -np.diff(table, axis=1)
    checks.append(
        PropertyCheck(
            name="nonincreasing_in_t",
            passed=bool((dt >= -tol).all()),
            worst_margin=float(dt.min()) if dt.size else 0.0,
        )
    )
    tail = kl.batch(s_arr, np.full_like(s_arr, t_large))
    vanishes = tail <= tol * np.maximum(1.0, s_arr)
    checks.append(
        PropertyCheck(
            name="vanishes_at_large_t", passed=bool(vanishes.all()), worst_margin=float(-tail.max())
        )
    )
    if kl.representation is KLRepresentation.FLOW_OF_RHO:
        at_zero = kl.batch(s_arr, np.zeros_like(s_arr))
        gap = -np.abs(at_zero - s_arr)
        checks.append(
            PropertyCheck(
                name="identity_at_t0", passed=bool((gap == 0).all()), worst_margin=float(gap.min())
            )
        )
    return checks


# --- signals -------------------------------------------------------------


class SignalKind(str, Enum):
    CONSTANT = "constant"
    PIECEWISE_CONSTANT = "piecewise-constant"
    EXPRESSION = "expression"


@dataclass(frozen=True)
class Signal:
    """A time function t -> R^dim; piecewise-constant signals are right-continuous."""

    kind: SignalKind
    dim: int
    value: tuple[float, ...] = ()
    breakpoints: tuple[float, ...] = ()
    values: tuple[tuple[float, ...], ...] = ()
    exprs: tuple[Expression, ...] = ()
    codomain_box: Optional[Box] = None
    _compiled: Optional[CompiledVector] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind is SignalKind.CONSTANT:
            if len(self.value) != self.dim:
                raise DefinitionError("constant signal has wrong dimension")
            self._check_box(self.value)
        elif self.kind is SignalKind.PIECEWISE_CONSTANT:
            if not self.breakpoints or len(self.breakpoints) != len(self.values):
                raise DefinitionError("piecewise-constant signal needs one value per breakpoint")
            if any(b2 <= b1 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
                raise DefinitionError("breakpoints must be strictly increasing")
            for item in self.values:
                if len(item) != self.dim:
                    raise DefinitionError("piecewise-constant value has wrong dimension")
                self._check_box(item)
        else:
            if len(self.exprs) != self.dim:
                raise DefinitionError("expression signal has wrong dimension")
            check_variables(self.exprs, {"t": None}, "signal")
            object.__setattr__(self, "_compiled", compile_vector(self.exprs, ["t"]))
        if self.codomain_box is not None and len(self.codomain_box) != self.dim:
            raise DefinitionError("codomain box has wrong dimension")

    def _check_box(self, item: Sequence[float]) -> None:
        if self.codomain_box is not None and not in_box(item, self.codomain_box):
            raise InputError(f"signal value {list(item)} outside its codomain box")

    @classmethod
    def constant(
        cls, value: Sequence[float], box: Iterable[Sequence[float]] | None = None
    ) -> "Signal":
        return cls(
            SignalKind.CONSTANT,
            len(value),
            value=tuple(float(v) for v in value),
            codomain_box=as_box(box) if box is not None else None,
        )

    @classmethod
    def zero(cls, dim: int) -> "Signal":
        return cls.constant([0.0] * dim)

    @classmethod
    def piecewise(
        cls,
        breakpoints: Sequence[float],
        values: Sequence[Sequence[float]],
        box: Iterable[Sequence[float]] | None = None,
    ) -> "Signal":
        vals = tuple(tuple(float(v) for v in item) for item in values)
        dim = len(vals[0]) if vals else 0
        return cls(
            SignalKind.PIECEWISE_CONSTANT,
            dim,
            breakpoints=tuple(float(b) for b in breakpoints),
            values=vals,
            codomain_box=as_box(box) if box is not None else None,
        )

    @classmethod
    def expression(
        cls, exprs: Sequence[str | Expression], box: Iterable[Sequence[float]] | None = None
    ) -> "Signal":
        parsed = tuple(as_expression(e) for e in exprs)
        return cls(
            SignalKind.EXPRESSION,
            len(parsed),
            exprs=parsed,
            codomain_box=as_box(box) if box is not None else None,
        )

    @classmethod
    def random_piecewise(
        cls,
        rng: np.random.Generator,
        box: Iterable[Sequence[float]],
        dwell: float,
        t_final: float,
        t0: float = 0.0,
    ) -> "Signal":
        """Values drawn uniformly in a bounded box, switching every `dwell` seconds."""
        bx = as_box(box)
        lo = np.array([b[0] for b in bx])
        hi = np.array([b[1] for b in bx])
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise InputError("random signals need a bounded box")
        count = max(1, int(math.ceil((t_final - t0) / dwell)) + 1)
        draws = rng.uniform(lo, hi, size=(count, len(bx)))
        return cls.piecewise([t0 + k * dwell for k in range(count)], draws.tolist(), box=bx)

    @classmethod
    def random_amplitude(
        cls,
        rng: np.random.Generator,
        dim: int,
        amplitude: float,
        dwell: float,
        t_final: float,
        t0: float = 0.0,
    ) -> "Signal":
        """Piecewise-constant values of norm exactly `amplitude` in random directions."""
        count = max(1, int(math.ceil((t_final - t0) / dwell)) + 1)
        directions = rng.standard_normal((count, dim))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        draws = amplitude * directions / norms
        return cls.piecewise([t0 + k * dwell for k in range(count)], draws.tolist())

    @property
    def time_varying(self) -> bool:
        return self.kind is SignalKind.EXPRESSION

    def at(self, t: float) -> tuple[float, ...]:
        if t < 0:
            raise InputError(f"signals are defined for t >= 0, got {t}")
        if self.kind is SignalKind.CONSTANT:
            return self.value
        if self.kind is SignalKind.PIECEWISE_CONSTANT:
            k = max(bisect_right(self.breakpoints, t) - 1, 0)
            return self.values[k]
        values = tuple(float(v) for v in self._compiled(t))  # type: ignore[misc]
        self._check_box(values)
        return values

    def __call__(self, t: float) -> np.ndarray:
        return np.array(self.at(t), dtype=float)

    def breakpoints_between(self, a: float, b: float) -> list[float]:
        if self.kind is not SignalKind.PIECEWISE_CONSTANT:
            return []
        lo = bisect_right(self.breakpoints, a)
        hi = bisect_left(self.breakpoints, b)
        return list(self.breakpoints[lo:hi])

    def shifted(self, theta: float) -> "Signal":
        """P_theta: t -> self(t + theta)."""
        if theta < 0:
            raise InputError("shift must be nonnegative")
        if theta == 0 or self.kind is SignalKind.CONSTANT:
            return self
        if self.kind is SignalKind.EXPRESSION:
            shift = {"t": _shift_expr(theta)}
            exprs = tuple(substitute(e, shift) for e in self.exprs)
            return replace(self, exprs=exprs, _compiled=None)
        start = max(bisect_right(self.breakpoints, theta) - 1, 0)
        breakpoints = [0.0] + [b - theta for b in self.breakpoints[start + 1 :]]
        return replace(self, breakpoints=tuple(breakpoints), values=self.values[start:])

    def within(self, box: Box) -> bool:
        if self.kind is SignalKind.CONSTANT:
            return in_box(self.value, box)
        if self.kind is SignalKind.PIECEWISE_CONSTANT:
            return all(in_box(v, box) for v in self.values)
        return self.codomain_box is None or all(
            blo - 1e-12 <= lo and hi <= bhi + 1e-12
            for (lo, hi), (blo, bhi) in zip(self.codomain_box, box)
        )


def _shift_expr(theta: float) -> Expression:
    from .exprlang import add

    return add(Var("t"), Num(theta))


def eval_signal(sig: Signal, t: float) -> np.ndarray:
    return sig(t)


# --- signal notation -----------------------------------------------------


def parse_floats(text: str) -> list[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from None


def _signal_options(items: Sequence[str]) -> dict[str, float]:
    options: dict[str, float] = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise InputError(f"signal option {item!r} must look like key=value")
        try:
            options[key.strip()] = float(value)
        except ValueError:
            raise InputError(f"signal option {key!r} needs a number") from None
    unknown = set(options) - {"amplitude", "dwell"}
    if unknown:
        raise InputError(f"unknown signal options: {', '.join(sorted(unknown))}")
    return options


def parse_signal(
    text: str,
    dim: int,
    box: Box,
    t_final: float,
    rng: np.random.Generator,
    nonnegative: bool = False,
) -> Signal:
    """Build a signal from `const:`, `pwc:`, `expr:` or `rand:pwc` notation.

    `const` and `pwc` values with one component are broadcast to `dim`.
    """
    kind, sep, body = text.partition(":")
    if not sep:
        raise InputError(f"signal {text!r} needs a kind prefix (const, pwc, expr, rand)")
    kind = kind.strip()
    if kind == "const":
        values = parse_floats(body)
        if dim == 0:
            if any(values):
                raise InputError("this model has no such input")
            return Signal.zero(0)
        return Signal.constant(_broadcast(values, dim))
    if dim == 0:
        raise InputError("this model has no such input")
    if kind == "pwc":
        breakpoints, values = [], []
        for pair in body.split(";"):
            numbers = parse_floats(pair)
            if len(numbers) < 2:
                raise InputError(f"pwc entry {pair!r} needs a time and a value")
            breakpoints.append(numbers[0])
            values.append(_broadcast(numbers[1:], dim))
        if breakpoints[0] > 0:
            breakpoints.insert(0, 0.0)
            values.insert(0, [0.0] * dim)
        return Signal.piecewise(breakpoints, values)
    if kind == "expr":
        components = [part for part in body.split(";") if part.strip()]
        return Signal.expression(components * dim if len(components) == 1 else components)
    if kind == "rand":
        shape, *rest = body.split(",")
        if shape.strip() != "pwc":
            raise InputError(f"random signals are piecewise constant, got {shape!r}")
        options = _signal_options(rest)
        dwell = options.get("dwell", float(load_defaults()["certify"]["dwell"]))
        if not dwell > 0:
            raise InputError("dwell must be positive")
        amplitude = options.get("amplitude")
        if amplitude is None:
            return Signal.random_piecewise(rng, box, dwell, t_final)
        if nonnegative:
            return Signal.random_piecewise(rng, [(0.0, amplitude)] * dim, dwell, t_final)
        return Signal.random_amplitude(rng, dim, amplitude, dwell, t_final)
    raise InputError(f"unknown signal kind {kind!r}")


def _broadcast(values: list[float], dim: int) -> list[float]:
    if len(values) == 1:
        return values * dim
    if len(values) != dim:
        raise InputError(f"expected {dim} components, got {len(values)}")
    return values


# --- models --------------------------------------------------------------

SYSTEM_NAMESPACES = ("x", "xs", "d", "v", "vs")


@dataclass(frozen=True)
class SystemModel:
    """Sampled-data dynamics x' = f(x, x(tau_i), d, v, v(tau_i)) with sampling law h."""

    n: int
    f: tuple[Expression, ...]
    H: tuple[Expression, ...]
    h: Expression
    r: float
    D_box: Box = ()
    U_box: Box = ()
    equilibrium_at_origin: bool = True
    name: str = "system"

    def __post_init__(self) -> None:
        if len(self.f) != self.n:
            raise DefinitionError(f"f has {len(self.f)} components, expected n={self.n}")
        if not self.H:
            raise DefinitionError("H needs at least one component")
        if not self.r > 0:
            raise DefinitionError("r must be positive")
        if any(not (math.isfinite(lo) and math.isfinite(hi)) for lo, hi in self.D_box):
            raise DefinitionError("D must be a bounded box")
        if not in_box([0.0] * self.m, self.U_box):
            raise DefinitionError("U must contain 0")
        dims = {"x": self.n, "xs": self.n, "d": self.l, "v": self.m, "vs": self.m}
        check_variables(self.f, dims, "f")
        check_variables(self.H, {"x": self.n}, "H")
        check_variables([self.h], {"x": self.n}, "h")
        object.__setattr__(self, "_rhs", compile_vector(self.f, SYSTEM_NAMESPACES))
        object.__setattr__(
            self, "_rhs_batch", compile_vector(self.f, SYSTEM_NAMESPACES, vectorized=True)
        )
        object.__setattr__(self, "_out_batch", compile_vector(self.H, ["x"], vectorized=True))
        object.__setattr__(self, "_h", compile_vector([self.h], ["x"]))
        object.__setattr__(self, "_h_batch", compile_vector([self.h], ["x"], vectorized=True))

    @classmethod
    def build(
        cls,
        n: int,
        f: Sequence[str | Expression],
        h: str | float | Expression,
        r: float,
        D: Iterable[Sequence[float]] = (),
        U: Iterable[Sequence[float]] = (),
        H: Sequence[str | Expression] | None = None,
        name: str = "system",
        equilibrium_at_origin: bool = True,
    ) -> "SystemModel":
        outputs = H if H is not None else [f"x[{i}]" for i in range(1, n + 1)]
        return cls(
            n=n,
            f=tuple(as_expression(e) for e in f),
            H=tuple(as_expression(e) for e in outputs),
            h=as_expression(h),
            r=float(r),
            D_box=as_box(D),
            U_box=as_box(U),
            equilibrium_at_origin=equilibrium_at_origin,
            name=name,
        )

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.D_box)

    @property
    def m(self) -> int:
        return len(self.U_box)

    @property
    def p(self) -> int:
        return len(self.H)

    def rhs(
        self,
        x: Sequence[float],
        xs: Sequence[float],
        d: Sequence[float],
        v: Sequence[float],
        vs: Sequence[float],
    ) -> tuple[float, ...]:
        return self._rhs(x, xs, d, v, vs)  # type: ignore[attr-defined]

    def rhs_batch(
        self, x: np.ndarray, xs: np.ndarray, d: np.ndarray, v: np.ndarray, vs: np.ndarray
    ) -> np.ndarray:
        """f over columns.

        Undefined entries come back as NaN or inf for callers to count as violations.
        """
        size = np.shape(x)[-1] if np.ndim(x) > 1 else None
        rhs = self._rhs_batch  # type: ignore[attr-defined]
        return rhs(x, xs, d, v, vs, size=size, strict=False)

    def outputs(self, states: np.ndarray, strict: bool = True) -> np.ndarray:
        """H applied to states of shape (n, N); returns (p, N)."""
        out = self._out_batch  # type: ignore[attr-defined]
        return out(states, size=states.shape[1], strict=strict)

    def sampling_period(self, x: Sequence[float]) -> float:
        return float(self._h(x)[0])  # type: ignore[attr-defined]

    def sampling_periods(self, states: np.ndarray) -> np.ndarray:
        return self._h_batch(states, size=states.shape[1])[0]  # type: ignore[attr-defined]

    def with_constant_period(self, r: float) -> "SystemModel":
        return replace(self, h=Num(float(r)), r=float(r))


def validate_model(
    model: SystemModel,
    region: "Region | None" = None,
    points_per_axis: int = 11,
    seed: int = 0,
    tol: float = 1e-9,
) -> list[PropertyCheck]:
    region = region or Region.symmetric(model.n, 1.0)
    grid = region.grid(points_per_axis).T
    periods = model.sampling_periods(grid)
    worst = float(np.minimum(periods, model.r - periods).min())
    checks = [
        PropertyCheck(
            name="sampling_period_bounds",
            passed=bool((periods > 0).all() and (periods <= model.r * (1 + 1e-12)).all()),
            worst_margin=worst,
        )
    ]
    if model.equilibrium_at_origin:
        rng = np.random.default_rng(seed)
        corners = box_corners(model.D_box)
        lo = np.array([b[0] for b in model.D_box]).reshape(-1, 1)
        hi = np.array([b[1] for b in model.D_box]).reshape(-1, 1)
        ds = np.concatenate([corners, lo + (hi - lo) * rng.random((model.l, 32))], axis=1)
        count = ds.shape[1]
        zeros_n = np.zeros((model.n, count))
        zeros_m = np.zeros((model.m, count))
        values = model.rhs_batch(zeros_n, zeros_n, ds, zeros_m, zeros_m)
        size = float(np.abs(values).max()) if values.size else 0.0
        checks.append(
            PropertyCheck(name="equilibrium_at_origin", passed=size <= tol, worst_margin=-size)
        )
    return checks


@dataclass(frozen=True)
class PlantModel:
    """Open-loop plant x' = f_open(x, u, d) with feedback u = k(x)."""

    n: int
    m: int
    l: int  # noqa: E741
    f_open: tuple[Expression, ...]
    H: tuple[Expression, ...]
    k: tuple[Expression, ...]
    D_box: Box = ()
    measurement_error: bool = False
    actuator_error: bool = True
    E_box: Optional[Box] = None
    V_box: Optional[Box] = None
    name: str = "plant"

    def __post_init__(self) -> None:
        if len(self.f_open) != self.n:
            raise DefinitionError(f"f_open has {len(self.f_open)} components, expected n={self.n}")
        if len(self.k) != self.m:
            raise DefinitionError(f"k has {len(self.k)} components but u has dimension {self.m}")
        if len(self.D_box) != self.l:
            raise DefinitionError("D has wrong dimension")
        check_variables(self.f_open, {"x": self.n, "u": self.m, "d": self.l}, "f_open")
        check_variables(self.k, {"x": self.n}, "k")
        check_variables(self.H, {"x": self.n}, "H")
        at_zero = compile_vector(self.k, ["x"])([0.0] * self.n)
        if any(abs(v) > 1e-9 for v in at_zero):
            raise DefinitionError(f"k(0) must vanish, got {list(at_zero)}")

    @classmethod
    def build(
        cls,
        n: int,
        f_open: Sequence[str | Expression],
        k: Sequence[str | Expression],
        D: Iterable[Sequence[float]] = (),
        H: Sequence[str | Expression] | None = None,
        measurement_error: bool = False,
        actuator_error: bool = True,
        E: Iterable[Sequence[float]] | None = None,
        V: Iterable[Sequence[float]] | None = None,
        name: str = "plant",
    ) -> "PlantModel":
        D_box = as_box(D)
        outputs = H if H is not None else [f"x[{i}]" for i in range(1, n + 1)]
        return cls(
            n=n,
            m=len(k),
            l=len(D_box),
            f_open=tuple(as_expression(e) for e in f_open),
            H=tuple(as_expression(e) for e in outputs),
            k=tuple(as_expression(e) for e in k),
            D_box=D_box,
            measurement_error=measurement_error,
            actuator_error=actuator_error,
            E_box=as_box(E) if E is not None else None,
            V_box=as_box(V) if V is not None else None,
            name=name,
        )


@dataclass(frozen=True)
class Region:
    box: Box
    exclude_origin_radius: float = 0.0

    def __post_init__(self) -> None:
        if not self.box:
            raise DefinitionError("region needs at least one axis")
        half_widths = []
        for lo, hi in self.box:
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
                raise DefinitionError(f"region interval [{lo}, {hi}] is empty or unbounded")
            half_widths.append((hi - lo) / 2)
        if self.exclude_origin_radius < 0 or self.exclude_origin_radius >= min(half_widths):
            raise DefinitionError("exclude_origin_radius must be below the smallest half-width")

    @classmethod
    def symmetric(cls, n: int, half_width: float, exclude_origin_radius: float = 0.0) -> "Region":
        return cls(tuple((-half_width, half_width) for _ in range(n)), exclude_origin_radius)

    @property
    def n(self) -> int:
        return len(self.box)

    def grid(self, points_per_axis: int) -> np.ndarray:
        """Grid points of shape (N, n), skipping the excluded origin ball."""
        axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in self.box]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=1)
        if self.exclude_origin_radius > 0:
            points = points[np.linalg.norm(points, axis=1) >= self.exclude_origin_radius]
        return points

    def as_lists(self) -> list[list[float]]:
        return [[lo, hi] for lo, hi in self.box]


# --- trajectories --------------------------------------------------------


class Termination(str, Enum):
    COMPLETED = "completed"
    BLOW_UP = "blow-up"


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (K, n)
    outputs: np.ndarray  # (K, p)
    interval_index: np.ndarray  # (K,)
    sampling_instants: np.ndarray
    held_states: np.ndarray  # (I, n)
    held_inputs: np.ndarray  # (I, m)
    schedule_gaps: np.ndarray  # exp(-dtilde(tau_i)) * h(x(tau_i)) per interval
    termination: Termination = Termination.COMPLETED
    blowup_time: Optional[float] = None

    @property
    def completed(self) -> bool:
        return self.termination is Termination.COMPLETED

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def is_sampling_instant(self) -> np.ndarray:
        return np.isin(self.times, self.sampling_instants)

    def state_at(self, t: float) -> np.ndarray:
        """State at a stored time (the left limit at a sampling instant equals the stored value)."""
        k = int(np.searchsorted(self.times, t))
        if k >= len(self.times) or self.times[k] != t:
            raise InputError(f"{t} is not a stored time")
        return self.states[k]

    def csv_header(self) -> list[str]:
        n = self.states.shape[1]
        p = self.outputs.shape[1]
        return [
            "t",
            *[f"x{i}" for i in range(1, n + 1)],
            *[f"y{j}" for j in range(1, p + 1)],
            "interval_index",
            "sampling_instant",
        ]

    def write_csv(self, target: str | Path | TextIO) -> None:
        if isinstance(target, (str, Path)):
            with open(target, "w", encoding="utf-8", newline="") as f:
                self.write_csv(f)
            return
        writer = csv.writer(target)
        writer.writerow(self.csv_header())
        flags = self.is_sampling_instant()
        for k in range(len(self.times)):
            writer.writerow(
                [
                    repr(float(self.times[k])),
                    *(repr(float(v)) for v in self.states[k]),
                    *(repr(float(v)) for v in self.outputs[k]),
                    int(self.interval_index[k]),
                    int(flags[k]),
                ]
            )

    def to_csv(self) -> str:
        buffer = io.StringIO()
        self.write_csv(buffer)
        return buffer.getvalue()
