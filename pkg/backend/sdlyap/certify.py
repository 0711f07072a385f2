from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from .config import get_settings, load_defaults
from .core import ExponentialKL, Signal, SystemModel, Trajectory, compose_gain
from .errors import InputError, InsufficientDataError
from .schemas import (
    EnvelopeReport,
    GainEstimate,
    GainViolation,
    KLFitResult,
    SampleBudget,
)
from .simulator import IntegratorConfig, SimulationInputs, simulate
from .verifier import LyapunovCertificate

logger = logging.getLogger(__name__)

# Samples below this fraction of |x0| are numerical noise for the KL fit
KL_FLOOR = 1e-9
KL_MAX_POINTS = 200


def _running_input_sup(traj: Trajectory, cert: LyapunovCertificate, v: Signal) -> np.ndarray:
    """sup_{t0 <= s <= t} zeta(|v(s)|) at each stored time, breakpoints of v included."""
    times = traj.times
    events = np.union1d(times, v.breakpoints_between(times[0], times[-1]))
    norms = np.array([np.linalg.norm(v(t)) if v.dim else 0.0 for t in events])
    running = np.maximum.accumulate(cert.zeta.batch(norms))
    return running[np.searchsorted(events, times, side="right") - 1]


def _require_completed(traj: Trajectory) -> None:
    if not traj.completed:
        raise InputError(f"trajectory blew up at t={traj.blowup_time}; envelope undefined")


def envelope_check(
    traj: Trajectory,
    cert: LyapunovCertificate,
    v: Signal,
    tol: float = 1e-6,
) -> EnvelopeReport:
    """V(t) <= max{V(0), sup_{s <= t} zeta(|v(s)|)} at every stored time."""
    _require_completed(traj)
    values = cert.v_max(traj.states.T)
    bound = np.maximum(values[0], _running_input_sup(traj, cert, v))
    margins = bound - values
    bad = np.flatnonzero(margins < -tol)
    report = EnvelopeReport(
        passed=bad.size == 0,
        worst_margin=float(margins.min()),
        violation_time=float(traj.times[bad[0]]) if bad.size else None,
        samples=len(values),
        tol=tol,
    )
    logger.debug("envelope: passed=%s worst=%.3e", report.passed, report.worst_margin)
    return report


def trajectory_razumikhin_check(
    traj: Trajectory,
    cert: LyapunovCertificate,
    v: Signal,
    tol: float = 1e-6,
) -> EnvelopeReport:
    """V(t) <= max{V(0), a(sup_{s <= t} V(s)), sup_{s <= t} zeta(|v(s)|)} along a run."""
    _require_completed(traj)
    values = cert.v_max(traj.states.T)
    history = cert.a.batch(np.maximum.accumulate(values))
    bound = np.maximum(np.maximum(values[0], history), _running_input_sup(traj, cert, v))
    margins = bound - values
    bad = np.flatnonzero(margins < -tol)
    return EnvelopeReport(
        passed=bad.size == 0,
        worst_margin=float(margins.min()),
        violation_time=float(traj.times[bad[0]]) if bad.size else None,
        samples=len(values),
        tol=tol,
    )


def _sphere_point(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal(n)
    norm = np.linalg.norm(direction)
    return radius * (direction / norm if norm > 0 else np.eye(n)[0])


def uiss_gain_check(
    model: SystemModel,
    cert: LyapunovCertificate,
    amplitudes: Sequence[float],
    mc: SampleBudget | None = None,
    T_tail: float | None = None,
    t_final: float | None = None,
    dtilde_levels: Sequence[float] | None = None,
    x0_radius: float | None = None,
    dwell: float | None = None,
    tol: float = 1e-3,
    max_step: float | None = None,
) -> GainEstimate:
    """Tail sup of |H(x)| under random inputs of sup-norm v_bar, against gamma = a1^-1 o zeta.

    `mc.mc_samples` runs per (amplitude, dtilde level); run j uses the same seed
    for every amplitude and level, so only the input amplitude changes.
    """
    defaults = load_defaults()["certify"]
    mc = mc or SampleBudget(mc_samples=int(defaults["runs"]))
    t_final = float(t_final if t_final is not None else defaults["t_final"])
    T_tail = float(T_tail if T_tail is not None else t_final * 2.0 / 3.0)
    if dtilde_levels is None:
        dtilde_levels = defaults["dtilde_levels"]
    levels = [float(v) for v in dtilde_levels]
    x0_radius = float(x0_radius if x0_radius is not None else defaults["x0_radius"])
    dwell = float(dwell if dwell is not None else defaults["dwell"])
    if not 0 <= T_tail < t_final:
        raise InputError(f"tail window start {T_tail} must lie in [0, {t_final})")
    if any(a < 0 for a in amplitudes):
        raise InputError("amplitudes must be nonnegative")
    if any(level < 0 for level in levels):
        raise InputError("dtilde levels must be nonnegative")

    gamma = compose_gain(cert.a1, cert.zeta)
    cfg = IntegratorConfig(t_final=t_final, max_step=max_step)
    amps = sorted(float(a) for a in amplitudes)
    bounds = [gamma(a) for a in amps]
    tail_sup = [0.0] * len(amps)
    by_level: dict[str, list[float]] = {f"{lvl:g}": [0.0] * len(amps) for lvl in levels}
    violations: list[GainViolation] = []

    for j in range(mc.mc_samples):
        seed = mc.seed + j
        for ai, amp in enumerate(amps):
            for level in levels:
                rng = np.random.default_rng(seed)
                x0 = _sphere_point(rng, model.n, x0_radius)
                d = (
                    Signal.random_piecewise(rng, model.D_box, dwell, t_final)
                    if model.l
                    else Signal.zero(0)
                )
                v = (
                    Signal.random_amplitude(rng, model.m, amp, dwell, t_final)
                    if model.m
                    else Signal.zero(0)
                )
                dtilde = (
                    Signal.random_piecewise(rng, [(0.0, level)], dwell, t_final)
                    if level > 0
                    else Signal.zero(1)
                )
                traj = simulate(model, x0, SimulationInputs(d, v, dtilde), cfg)
                if not traj.completed:
                    violations.append(
                        GainViolation(
                            amplitude=amp,
                            dtilde_level=level,
                            seed=seed,
                            tail_sup=None,
                            bound=bounds[ai],
                            reason=f"blow-up at t={traj.blowup_time}",
                            x0=x0.tolist(),
                        )
                    )
                    continue
                window = traj.times >= T_tail
                sup = float(np.linalg.norm(traj.outputs[window], axis=1).max())
                tail_sup[ai] = max(tail_sup[ai], sup)
                key = f"{level:g}"
                by_level[key][ai] = max(by_level[key][ai], sup)
                if sup > bounds[ai] + tol:
                    violations.append(
                        GainViolation(
                            amplitude=amp,
                            dtilde_level=level,
                            seed=seed,
                            tail_sup=sup,
                            bound=bounds[ai],
                            reason="tail sup above gain bound",
                            x0=x0.tolist(),
                        )
                    )

    positive = [(a, s) for a, s in zip(amps, tail_sup) if a > 0]
    fitted = (
        sum(a * s for a, s in positive) / sum(a * a for a, _ in positive) if positive else None
    )
    monotone = all(s2 >= s1 - tol for s1, s2 in zip(tail_sup, tail_sup[1:]))
    estimate = GainEstimate(
        amplitudes=amps,
        tail_sup=tail_sup,
        gamma_bound=bounds,
        fitted_gain=fitted,
        declared_gain=gamma(1.0),
        dtilde_levels=levels,
        tail_sup_by_dtilde=by_level,
        runs=mc.mc_samples,
        t_tail=T_tail,
        t_final=t_final,
        tol=tol,
        monotone=monotone,
        passed=not violations,
        violations=violations,
    )
    logger.info(
        "gain check: %s (fitted K=%s, declared K=%.6g, %d violations)",
        "pass" if estimate.passed else "fail",
        f"{fitted:.6g}" if fitted is not None else "n/a",
        estimate.declared_gain,
        len(violations),
    )
    return estimate


def _fit_samples(
    trajectories: Sequence[Trajectory], cert: LyapunovCertificate | None
) -> tuple[list[tuple[np.ndarray, np.ndarray, float]], int]:
    """Per trajectory: (times since start, bound samples, |x0|), and the number excluded."""
    samples = []
    excluded = 0
    for traj in trajectories:
        x0_norm = float(np.linalg.norm(traj.states[0]))
        if x0_norm == 0.0 or not traj.completed:
            excluded += 1
            continue
        count = len(traj.times)
        idx = np.unique(np.linspace(0, count - 1, min(KL_MAX_POINTS, count)).astype(int))
        if cert is None:
            values = np.linalg.norm(traj.outputs[idx], axis=1)
        else:
            levels = cert.v_max(traj.states[idx].T)
            values = np.array([cert.a1.inverse(float(level)) for level in levels])
        keep = values > KL_FLOOR * x0_norm
        samples.append((traj.times[idx][keep] - traj.times[0], values[keep], x0_norm))
    return samples, excluded


def kl_coverage(kl: ExponentialKL, trajectories: Sequence[Trajectory]) -> float:
    """Fraction of stored samples with |H(x(t))| <= sigma(|x0|, t), above the numerical floor."""
    covered = total = 0
    for traj in trajectories:
        x0_norm = float(np.linalg.norm(traj.states[0]))
        if x0_norm == 0.0:
            continue
        norms = np.linalg.norm(traj.outputs, axis=1)
        keep = norms > KL_FLOOR * x0_norm
        bound = kl.batch(np.full(int(keep.sum()), x0_norm), traj.times[keep] - traj.times[0])
        covered += int((norms[keep] <= bound * (1 + 1e-12)).sum())
        total += int(keep.sum())
    return covered / total if total else 1.0


def kl_fit(
    trajectories: Sequence[Trajectory],
    cert: LyapunovCertificate | None = None,
    headroom: float | None = None,
) -> tuple[ExponentialKL, KLFitResult]:
    """Least-squares fit of C*s*exp(-lam*t) to log envelopes, s = |x0|.

    With a certificate the envelope is a1^-1(max_i V_i(x(t))), which bounds |H(x(t))|;
    otherwise |H(x(t))| itself. The returned function uses the inflated C.
    """
    headroom = get_settings().kl_headroom if headroom is None else headroom
    samples, excluded = _fit_samples(trajectories, cert)
    if len(samples) < 3:
        raise InsufficientDataError(f"need at least 3 nonzero trajectories, got {len(samples)}")
    t = np.concatenate([s[0] for s in samples])
    y = np.concatenate([np.log(s[1] / s[2]) for s in samples])
    design = np.stack([np.ones_like(t), -t], axis=1)
    (log_c, lam), *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = float(np.exp(max(0.0, float((y - design @ np.array([log_c, lam])).max()))))
    C = float(math.exp(log_c))
    fitted = ExponentialKL(C, float(lam))
    inflated = ExponentialKL(C * residual * headroom, float(lam))
    result = KLFitResult(
        C=C,
        lam=float(lam),
        residual_factor=residual,
        C_inflated=inflated.C,
        coverage=kl_coverage(fitted, trajectories),
        coverage_inflated=kl_coverage(inflated, trajectories),
        trajectories_used=len(samples),
        trajectories_excluded=excluded,
        samples=int(t.size),
    )
    logger.info("KL fit: C=%.4g lam=%.4g coverage=%.3f", C, lam, result.coverage_inflated)
    return inflated, result
