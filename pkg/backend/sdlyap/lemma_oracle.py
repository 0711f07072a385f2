"""Scalar comparison machinery.

`FlowKL` builds a KL function from a positive-definite rho by integrating
y' = -rho(y). The checks take sampled pairs (y, u) on a uniform time grid and
report pass, fail or a violated hypothesis.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ComparisonFunction, KLFunction, KLRepresentation
from .errors import DefinitionError, InputError
from .schemas import LemmaReport

logger = logging.getLogger(__name__)

FLOW_AGREEMENT = 1e-10
MAX_REFINEMENTS = 16
SMALLGAIN_NOTE = "only necessary consequences of the small-gain conclusion are checked"


@dataclass(frozen=True)
class TimeSeries:
    """Samples of a scalar function on a time grid, with optional exact derivatives."""

    times: np.ndarray
    values: np.ndarray
    derivative: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if times.ndim != 1 or times.shape != values.shape or times.size < 2:
            raise InputError("time series needs matching 1-D times and values (at least 2)")
        if np.any(np.diff(times) <= 0):
            raise InputError("time series times must be strictly increasing")
        if self.derivative is not None:
            deriv = np.asarray(self.derivative, dtype=float)
            if deriv.shape != values.shape:
                raise InputError("derivative samples must match values")
            object.__setattr__(self, "derivative", deriv)

    def uniform_step(self) -> float:
        steps = np.diff(self.times)
        dt = float(steps.mean())
        if np.abs(steps - dt).max() > 1e-9 * max(dt, 1.0):
            raise InputError("checks need a uniform time grid")
        return dt

    def derivative_estimate(self) -> np.ndarray:
        if self.derivative is not None:
            return self.derivative
        return np.gradient(self.values, self.times)


class FlowKL(KLFunction):
    """sigma(s, t) = y(t) with y' = -rho(y), y(0) = s; s*exp(-t) for t < 0."""

    representation = KLRepresentation.FLOW_OF_RHO

    def __init__(
        self, rho: ComparisonFunction, grid_max: float = 100.0, grid_points: int = 1001
    ) -> None:
        grid = np.linspace(0.0, grid_max, grid_points)
        values = rho.batch(grid, strict=False)
        if not np.all(np.isfinite(values)) or np.any(values < -1e-12):
            bad = grid[np.flatnonzero(~(values >= -1e-12))[0]]
            raise DefinitionError(f"{rho.label} is negative or undefined at s={bad:g}")
        self.rho = rho
        self.label = f"flow of {rho.text}"
        self._memo: dict[tuple[float, float], float] = {}

    def _rate(self, y: np.ndarray) -> np.ndarray:
        return -self.rho.batch(np.maximum(y, 0.0))

    def _integrate(self, s: np.ndarray, t: float, steps: int) -> np.ndarray:
        h = t / steps
        y = np.array(s, dtype=float)
        for _ in range(steps):
            k1 = self._rate(y)
            k2 = self._rate(y + 0.5 * h * k1)
            k3 = self._rate(y + 0.5 * h * k2)
            k4 = self._rate(y + h * k3)
            y = np.maximum(y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)
        return y

    def _integrate_scalar(self, s: float, t: float, steps: int) -> float:
        rho = self.rho
        h = t / steps
        y = s
        for _ in range(steps):
            k1 = -rho(max(y, 0.0))
            k2 = -rho(max(y + 0.5 * h * k1, 0.0))
            k3 = -rho(max(y + 0.5 * h * k2, 0.0))
            k4 = -rho(max(y + h * k3, 0.0))
            y = max(y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)
        return y

    def _refined(self, s: float, t: float, steps: int) -> float:
        coarse = self._integrate_scalar(s, t, steps)
        for _ in range(MAX_REFINEMENTS):
            steps *= 2
            fine = self._integrate_scalar(s, t, steps)
            if abs(fine - coarse) <= FLOW_AGREEMENT * max(1.0, s):
                return fine
            coarse = fine
        logger.debug("flow of %s: no agreement after %d steps", self.rho.label, steps)
        return coarse

    def __call__(self, s: float, t: float) -> float:
        s, t = float(s), float(t)
        if s < 0:
            raise InputError(f"sigma takes s >= 0, got {s}")
        if t == 0.0 or s == 0.0:
            return s
        if t < 0.0:
            return s * math.exp(-t)
        key = (round(s, 12), round(t, 12))
        if key not in self._memo:
            steps = max(4, math.ceil(t / 0.05))
            self._memo[key] = self._refined(s, t, steps)
        return self._memo[key]

    def table(self, s_values: np.ndarray, dt: float, steps: int) -> np.ndarray:
        """Whole rows sigma(s_j, m*dt) integrated together, one refinement level for all."""
        s = np.asarray(s_values, dtype=float)
        out = np.empty((s.size, steps + 1))
        out[:, 0] = s
        if steps == 0 or s.size == 0:
            return out
        sub = max(2, math.ceil(dt / 0.01))
        while True:
            coarse = self._integrate(s, dt, sub)
            fine = self._integrate(s, dt, 2 * sub)
            agree = np.all(np.abs(fine - coarse) <= FLOW_AGREEMENT * np.maximum(1.0, s))
            if agree or sub > 2**MAX_REFINEMENTS:
                break
            sub *= 2
        y = s
        for m in range(1, steps + 1):
            y = self._integrate(y, dt, 2 * sub)
            out[:, m] = y
        return out


def sigma_from_rho(rho: ComparisonFunction) -> FlowKL:
    return FlowKL(rho)


def _pair(y: TimeSeries, u: TimeSeries) -> float:
    if y.times.shape != u.times.shape or np.abs(y.times - u.times).max() > 1e-12:
        raise InputError("y and u must share one time grid")
    return y.uniform_step()


def comparison_check(
    y: TimeSeries,
    u: TimeSeries,
    rho: ComparisonFunction,
    tol: float = 1e-6,
    sigma: KLFunction | None = None,
) -> LemmaReport:
    """Where y >= u, y' <= -rho(y).

    Then y(t) <= max{sigma(y(t0), t - t0), sup_s sigma(u(s), t - s)}.

    The conclusion is evaluated only when the hypothesis holds on the samples.
    """
    dt = _pair(y, u)
    sigma = sigma or sigma_from_rho(rho)
    values, inputs, times = y.values, u.values, y.times
    deriv = y.derivative_estimate()

    active = values >= inputs
    hyp = np.where(active, -rho.batch(np.maximum(values, 0.0)) - deriv, math.inf)
    hyp_margin = float(hyp.min())
    if hyp_margin < -tol:
        k = int(np.argmin(hyp))
        logger.debug("comparison: hypothesis violated at t=%g", times[k])
        return LemmaReport(
            check="comparison",
            status="hypothesis-violated",
            worst_margin=hyp_margin,
            witness_time=float(times[k]),
            hypothesis_margin=hyp_margin,
            samples=values.size,
        )

    count = values.size
    # left limits count at each node for inputs with jumps on the grid
    upper = np.maximum(inputs, np.concatenate([inputs[:1], inputs[:-1]]))
    start = max(values[0], 0.0)
    levels, index = np.unique(np.append(np.maximum(upper, 0.0), start), return_inverse=True)
    table = sigma.table(levels, dt, count - 1)
    own = table[index[-1]]
    index = index[:-1]
    k_idx, j_idx = np.indices((count, count))
    lag = np.clip(k_idx - j_idx, 0, None)
    driven = np.where(j_idx <= k_idx, table[index[j_idx], lag], -math.inf).max(axis=1)

    margins = np.maximum(own, driven) - values
    k = int(np.argmin(margins))
    worst = float(margins[k])
    report = LemmaReport(
        check="comparison",
        status="pass" if worst >= -tol else "fail",
        worst_margin=worst,
        witness_time=None if worst >= -tol else float(times[k]),
        hypothesis_margin=None if math.isinf(hyp_margin) else hyp_margin,
        samples=count,
    )
    logger.debug("comparison: %s worst=%.3e", report.status, worst)
    return report


def comparison_scenario(
    rng: np.random.Generator,
    rho: ComparisonFunction,
    horizon: float = 10.0,
    samples: int = 401,
    slope_cap: float = 5.0,
    sigma: FlowKL | None = None,
) -> tuple[TimeSeries, TimeSeries]:
    """A pair (y, u) satisfying the comparison hypothesis by construction.

    u is piecewise constant on the grid; y follows the flow of rho while y >= u
    and rises towards u (never reaching it within a step) otherwise.
    """
    sigma = sigma or sigma_from_rho(rho)
    times = np.linspace(0.0, horizon, samples)
    dt = times[1] - times[0]
    n_jumps = min(samples - 1, int(rng.integers(1, 12)))
    jumps = np.sort(rng.choice(np.arange(1, samples), size=n_jumps, replace=False))
    levels = rng.uniform(0.0, 2.0, size=jumps.size + 1)
    u = levels[np.searchsorted(jumps, np.arange(samples), side="right")]
    y = np.empty(samples)
    deriv = np.empty(samples)
    y[0] = rng.uniform(0.0, 3.0)
    for k in range(samples):
        if y[k] >= u[k]:
            deriv[k] = -rho(y[k])
            nxt = sigma(y[k], dt)
        else:
            deriv[k] = min(rho(u[k]), slope_cap, (u[k] - y[k]) / (2 * dt))
            nxt = y[k] + deriv[k] * dt
        if k + 1 < samples:
            y[k + 1] = nxt
    return TimeSeries(times, y, deriv), TimeSeries(times, u)


def smallgain_envelope_check(
    y: TimeSeries,
    u: TimeSeries,
    sigma: KLFunction,
    a: ComparisonFunction,
    M: float,
    tol: float = 1e-6,
) -> LemmaReport:
    """Hypothesis y(t) <= max{sigma(M, t - xi), a(sup_[xi,t] y), u(t)} for all xi <= t on the grid.

    Then checks (i) y(t) <= max{sigma(M, 0), sup_[t0,t] u} and (ii) the final tenth of
    y stays below max{a(sup y), sup u}.
    """
    dt = _pair(y, u)
    values, inputs, times = y.values, u.values, y.times
    levels = np.linspace(0.0, max(1.0, 2.0 * float(values.max())), 101)[1:]
    if np.any(a.batch(levels) >= levels):
        raise InputError(f"{a.label} must satisfy a(s) < s")
    count = values.size
    decay = sigma.table(np.array([M]), dt, count - 1)[0]

    worst_hyp, witness = math.inf, (0.0, 0.0)
    for i in range(count):
        tail = values[i:]
        gained = a.batch(np.maximum.accumulate(tail))
        bound = np.maximum(np.maximum(decay[: count - i], gained), inputs[i:])
        margins = bound - tail
        k = int(np.argmin(margins))
        if margins[k] < worst_hyp:
            worst_hyp, witness = float(margins[k]), (float(times[i]), float(times[i + k]))
    if worst_hyp < -tol:
        return LemmaReport(
            check="smallgain",
            status="hypothesis-violated",
            worst_margin=worst_hyp,
            witness_xi=witness[0],
            witness_time=witness[1],
            hypothesis_margin=worst_hyp,
            samples=count,
            notes=[SMALLGAIN_NOTE],
        )

    first = np.maximum(sigma(M, 0.0), np.maximum.accumulate(inputs)) - values
    k = int(np.argmin(first))
    final = values[int(0.9 * count) :]
    second = max(a(float(values.max())), float(inputs.max())) - float(final.max())
    consequences = {
        "bounded_by_initial_and_input": bool(first[k] >= -tol),
        "eventual_domination": second >= -tol,
    }
    worst = min(float(first[k]), second)
    report = LemmaReport(
        check="smallgain",
        status="pass" if all(consequences.values()) else "fail",
        worst_margin=worst,
        witness_time=float(times[k]) if first[k] < -tol else None,
        hypothesis_margin=worst_hyp,
        consequences=consequences,
        samples=count,
        notes=[SMALLGAIN_NOTE],
    )
    logger.debug("smallgain: %s worst=%.3e", report.status, worst)
    return report


def smallgain_scenario(
    rng: np.random.Generator,
    sigma: KLFunction,
    a: ComparisonFunction,
    horizon: float = 10.0,
    samples: int = 401,
) -> tuple[TimeSeries, TimeSeries, float]:
    """(y, u, M) built forward so the small-gain hypothesis holds at every grid pair."""
    M = float(rng.uniform(0.5, 2.0))
    times = np.linspace(0.0, horizon, samples)
    jumps = np.sort(rng.choice(np.arange(1, samples), size=int(rng.integers(1, 10)), replace=False))
    levels = rng.uniform(0.0, 1.0, size=jumps.size + 1)
    u = levels[np.searchsorted(jumps, np.arange(samples), side="right")]
    weights = rng.uniform(0.5, 1.0, size=(samples, 3))
    top = sigma(M, 0.0)
    y = np.empty(samples)
    y[0] = max(top * weights[0, 0], u[0] * weights[0, 1])
    for k in range(1, samples):
        y[k] = max(
            sigma(M, times[k]) * weights[k, 0],
            u[k] * weights[k, 1],
            min(a(y[k - 1]) * weights[k, 2], top),
        )
    return TimeSeries(times, y), TimeSeries(times, u), M
