"""Command-line front end.

stdout carries JSON (or CSV) only; logging goes to stderr. Exit codes:
0 when every check passed, 1 when a check was falsified, 2 on usage or input errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from . import __version__
from .backstep import check_dissipation, check_hypothesis_P, find_h, sweep_hypothesis_P
from .catalog import BUILTINS, EX41_F1, EX41_F2_OPEN, get_builtin
from .certify import envelope_check, kl_fit, trajectory_razumikhin_check, uiss_gain_check
from .config import get_settings, load_defaults
from .core import (
    ComparisonFunction,
    FunctionClass,
    Region,
    Signal,
    SystemModel,
    parse_floats,
    parse_signal,
)
from .errors import InputError, SdlyapError
from .lemma_oracle import (
    comparison_check,
    comparison_scenario,
    sigma_from_rho,
    smallgain_envelope_check,
    smallgain_scenario,
)
from .masp import masp_bisection, masp_example41_single, masp_example41_vector
from .schemas import SampleBudget
from .simulator import IntegratorConfig, SimulationInputs, simulate
from .specfile import load_backstep_spec, load_system_spec
from .verifier import LyapunovCertificate, check_hypotheses, decrease_check, sandwich_check

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FALSIFIED = 1
EXIT_USAGE = 2

# Lemma failures listed in full; the rest are only counted
MAX_LISTED_FAILURES = 5

BUDGET_FLAGS = {"grid_per_axis": "--grid", "mc_samples": "--mc", "seed": "--seed"}


# --- argument helpers ----------------------------------------------------


def nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def parse_interval(text: str) -> tuple[float, float]:
    values = parse_floats(text)
    if len(values) != 2:
        raise InputError(f"expected lo,hi, got {text!r}")
    return values[0], values[1]


def parse_box(text: str) -> list[tuple[float, float]]:
    """`lo,hi;lo,hi` with one interval per axis; the empty string is the empty box."""
    return [parse_interval(part) for part in text.split(";") if part.strip()]


@dataclass
class Target:
    model: SystemModel
    certificate: Optional[LyapunovCertificate]
    label: str


def load_target(args: argparse.Namespace, default_builtin: str | None = None) -> Target:
    """Model and certificate from --system or --builtin, with --r applied as a constant period."""
    r = getattr(args, "r", None)
    if r is not None and not r > 0:
        raise InputError("--r must be positive")
    if args.system:
        loaded = load_system_spec(args.system)
        model = loaded.model.with_constant_period(r) if r is not None else loaded.model
        return Target(model, loaded.certificate, loaded.source)
    name = args.builtin or default_builtin
    if name is None:
        raise InputError("choose a system with --system PATH or --builtin NAME")
    entry = get_builtin(name)
    cert = entry.certificate() if entry.certificate else None
    return Target(entry.build_model(r), cert, name)


def _require_certificate(target: Target) -> LyapunovCertificate:
    if target.certificate is None:
        raise InputError(f"{target.label} carries no Lyapunov certificate")
    return target.certificate


def _budget(args: argparse.Namespace) -> SampleBudget:
    defaults = load_defaults()["verify"]
    try:
        return SampleBudget(
            grid_per_axis=args.grid if args.grid is not None else int(defaults["grid_per_axis"]),
            mc_samples=args.mc if args.mc is not None else int(defaults["mc_samples"]),
            seed=args.seed if args.seed is not None else int(defaults["seed"]),
        )
    except ValidationError as exc:
        first = exc.errors()[0]
        field = BUDGET_FLAGS.get(str(first["loc"][0]), "budget")
        raise InputError(f"{field}: {first['msg']}") from exc


def _region(args: argparse.Namespace, n: int) -> Region:
    defaults = load_defaults()["verify"]
    lo, hi = parse_interval(args.region) if args.region else tuple(defaults["region"])
    exclude = args.exclude_origin
    if exclude is None:
        exclude = float(defaults["exclude_origin_radius"])
    return Region(tuple((float(lo), float(hi)) for _ in range(n)), exclude)


def emit(payload: Any) -> None:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    print(json.dumps(payload, indent=2, default=_jsonable))


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


# --- subcommands ---------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    target = load_target(args)
    model = target.model
    t_final = args.t_final
    if t_final is None:
        t_final = float(load_defaults()["simulate"]["t_final"])
    x0 = parse_floats(args.x0)
    rng = np.random.default_rng(args.seed)
    inputs = SimulationInputs(
        d=parse_signal(args.d, model.l, model.D_box, t_final, rng),
        v=parse_signal(args.v, model.m, model.U_box, t_final, rng),
        dtilde=parse_signal(args.dtilde, 1, ((0.0, math.inf),), t_final, rng, nonnegative=True),
    )
    traj = simulate(model, x0, inputs, IntegratorConfig(t_final=t_final, max_step=args.max_step))
    if args.out:
        traj.write_csv(args.out)
        logger.info("wrote %d samples to %s", len(traj.times), args.out)
    emit(
        {
            "system": target.label,
            "termination": traj.termination.value,
            "blowup_time": traj.blowup_time,
            "sampling_instants": int(len(traj.sampling_instants)),
            "samples": int(len(traj.times)),
            "final_time": float(traj.times[-1]),
            "final_state": traj.final_state.tolist(),
            "out": args.out,
        }
    )
    return EXIT_OK if traj.completed else EXIT_FALSIFIED


def cmd_verify(args: argparse.Namespace) -> int:
    target = load_target(args)
    cert = _require_certificate(target)
    model = target.model
    region = _region(args, model.n)
    budget = _budget(args)
    reports = decrease_check(cert, model, region, model.r, budget)
    if not args.no_sandwich:
        reports.append(sandwich_check(cert, model, region, budget))
    if args.hypotheses:
        reports.extend(check_hypotheses(model, region, budget))
    emit({"system": target.label, "r": model.r, "reports": reports})
    return EXIT_OK if all(rep.passed for rep in reports) else EXIT_FALSIFIED


def cmd_masp(args: argparse.Namespace) -> int:
    if args.closed_form == "single":
        result = masp_example41_single(args.c, args.delta)
    elif args.closed_form == "vector":
        result = masp_example41_vector(args.c)
    else:
        defaults = load_defaults()["masp"]
        target = load_target(args, default_builtin="ex41-vector")
        cert = _require_certificate(target)
        lo, hi = parse_interval(args.bracket) if args.bracket else tuple(defaults["bracket"])
        model = target.model.with_constant_period(hi)
        result = masp_bisection(
            cert,
            model,
            _region(args, model.n),
            _budget(args),
            float(lo),
            float(hi),
            tol=args.tol if args.tol is not None else float(defaults["tol"]),
            extra_checks=int(defaults["monotonicity_checks"]),
        )
    emit(result)
    return EXIT_OK if result.status == "success" else EXIT_FALSIFIED


def _random_x0(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal(n)
    return radius * direction / max(float(np.linalg.norm(direction)), 1e-300)


def cmd_certify(args: argparse.Namespace) -> int:
    defaults = load_defaults()["certify"]
    target = load_target(args)
    cert = _require_certificate(target)
    model = target.model
    runs = args.runs if args.runs is not None else int(defaults["runs"])
    seed = args.seed if args.seed is not None else 0
    t_final = args.t_final if args.t_final is not None else float(defaults["t_final"])
    if args.dtilde_levels:
        levels = parse_floats(args.dtilde_levels)
    else:
        levels = [float(v) for v in defaults["dtilde_levels"]]
    x0_radius = args.x0_radius if args.x0_radius is not None else float(defaults["x0_radius"])
    dwell = float(defaults["dwell"])
    gain = uiss_gain_check(
        model,
        cert,
        parse_floats(args.amplitudes)
        if args.amplitudes
        else [float(a) for a in defaults["amplitudes"]],
        SampleBudget(mc_samples=runs, seed=seed),
        T_tail=args.tail,
        t_final=t_final,
        dtilde_levels=levels,
        x0_radius=x0_radius,
        dwell=dwell,
    )

    # unforced runs for the envelope and the KL fit
    cfg = IntegratorConfig(t_final=t_final)
    trajectories = []
    envelope_ok = razumikhin_ok = True
    worst = math.inf
    zero_v = Signal.zero(model.m)
    for j in range(runs):
        rng = np.random.default_rng(seed + j)
        d = (
            Signal.random_piecewise(rng, model.D_box, dwell, t_final)
            if model.l
            else Signal.zero(0)
        )
        level = max(levels, default=0.0)
        dtilde = (
            Signal.random_piecewise(rng, [(0.0, level)], dwell, t_final)
            if level > 0
            else Signal.zero(1)
        )
        x0 = _random_x0(rng, model.n, x0_radius)
        traj = simulate(model, x0, SimulationInputs(d, zero_v, dtilde), cfg)
        if not traj.completed:
            envelope_ok = razumikhin_ok = False
            logger.warning("unforced run %d blew up at t=%s", j, traj.blowup_time)
            continue
        trajectories.append(traj)
        env = envelope_check(traj, cert, zero_v)
        envelope_ok &= env.passed
        razumikhin_ok &= trajectory_razumikhin_check(traj, cert, zero_v).passed
        worst = min(worst, env.worst_margin)

    payload: dict[str, Any] = {
        "system": target.label,
        "gain": gain,
        "envelope": {
            "runs": runs,
            "passed": envelope_ok,
            "razumikhin_passed": razumikhin_ok,
            "worst_margin": worst if math.isfinite(worst) else None,
        },
    }
    if args.kl:
        _, fit = kl_fit(trajectories, cert)
        payload["kl"] = fit
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["amplitude", "tail_sup", "gamma_bound"])
            writer.writerows(gain.csv_rows())
    emit(payload)
    return EXIT_OK if gain.passed and envelope_ok and razumikhin_ok else EXIT_FALSIFIED


def cmd_lemma(args: argparse.Namespace) -> int:
    defaults = load_defaults()["lemma"]
    scenarios = args.scenarios if args.scenarios is not None else int(defaults["scenarios"])
    samples = args.samples if args.samples is not None else int(defaults["samples"])
    horizon = args.horizon if args.horizon is not None else float(defaults["horizon"])
    rho = ComparisonFunction.parse(args.rho, FunctionClass.POSITIVE_DEFINITE, label="rho")
    sigma = sigma_from_rho(rho)
    rng = np.random.default_rng(args.seed)
    gain = None
    if args.check == "smallgain":
        gain = ComparisonFunction.parse(args.a, FunctionClass.N, label="a")

    reports = []
    for _ in range(scenarios):
        if gain is None:
            y, u = comparison_scenario(rng, rho, horizon, samples, sigma=sigma)
            reports.append(comparison_check(y, u, rho, sigma=sigma))
        else:
            y, u, M = smallgain_scenario(rng, sigma, gain, horizon, samples)
            reports.append(smallgain_envelope_check(y, u, sigma, gain, M))
    failures = [rep for rep in reports if not rep.passed]
    emit(
        {
            "check": args.check,
            "rho": rho.text,
            "scenarios": scenarios,
            "passed": len(reports) - len(failures),
            "worst_margin": min((rep.worst_margin for rep in reports), default=None),
            "failures": failures[:MAX_LISTED_FAILURES],
        }
    )
    return EXIT_OK if not failures else EXIT_FALSIFIED


def cmd_backstep(args: argparse.Namespace) -> int:
    budget = _budget(args)
    if args.check == "hypothesis-p":
        lo, hi = parse_interval(args.region) if args.region else (-5.0, 5.0)
        region = Region(((lo, hi),))
        D = parse_box(args.D)
        L, gamma = args.L, args.gamma
        if L is None or gamma is None:
            found = sweep_hypothesis_P(
                args.f1,
                args.f2,
                args.c,
                args.a,
                region,
                [0, 1, 2, 5, 10, 20],
                [1, 2, 4, 6, 8, 10],
                budget,
                D,
            )
            if found is None:
                raise InputError("no (L, gamma) on the sweep grid; pass --L and --gamma")
            L, gamma = found
        reports = check_hypothesis_P(args.f1, args.f2, args.c, args.a, L, gamma, region, budget, D)
        emit({"L": L, "gamma": gamma, "reports": reports})
        return EXIT_OK if all(rep.passed for rep in reports) else EXIT_FALSIFIED

    if args.system:
        loaded = load_backstep_spec(args.system)
        tri, cert = loaded.system, loaded.certificate
    else:
        entry = get_builtin(args.builtin or "backstep-scalar")
        if entry.backstep is None:
            raise InputError(f"{entry.name} is not a backstepping instance")
        tri, cert = entry.backstep()
    region = _region(args, tri.n)
    if args.check == "dissipation":
        report = check_dissipation(tri, cert, region, budget)
        emit(report)
        return EXIT_OK if report.passed else EXIT_FALSIFIED

    result = find_h(tri, cert, region, budget)
    payload: dict[str, Any] = {"find_h": result}
    if result.feasible and args.x0:
        h = 0.9 * result.h_star
        loop = tri.sampled_loop(cert.k, h)
        traj = simulate(loop, parse_floats(args.x0), cfg=IntegratorConfig(t_final=args.t_final))
        payload["loop"] = {
            "h": h,
            "termination": traj.termination.value,
            "final_norm": float(np.linalg.norm(traj.final_state)),
        }
    emit(payload)
    return EXIT_OK if result.feasible else EXIT_FALSIFIED


def cmd_plot_data(args: argparse.Namespace) -> int:
    source = Path(args.input)
    if not source.exists():
        raise InputError(f"no such file: {source}")
    with open(source, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise InputError(f"{source} has no data rows")
    columns = [c.strip() for c in args.columns.split(",") if c.strip()]
    missing = [c for c in [args.x, *columns] if c not in rows[0]]
    if missing:
        raise InputError(f"unknown columns: {', '.join(missing)}; have {', '.join(rows[0])}")
    out_dir = Path(args.out_dir) if args.out_dir else source.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for column in columns:
        path = out_dir / f"{source.stem}_{args.x}_{column}.dat"
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# {args.x} {column}\n")
            for row in rows:
                f.write(f"{row[args.x]} {row[column]}\n")
        written.append(str(path))
    emit({"files": written})
    return EXIT_OK


# --- parser --------------------------------------------------------------


def _add_target(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--system", type=str, help="JSON system spec file")
    choices = ", ".join(sorted(BUILTINS))
    group.add_argument("--builtin", type=str, help=f"Builtin system ({choices})")
    parser.add_argument("--r", type=float, default=None, help="Constant sampling period")


def _add_budget(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--region", type=str, default=None, help="lo,hi applied to every axis, e.g. --region=-5,5"
    )
    parser.add_argument(
        "--exclude-origin", type=float, default=None, help="Radius of the skipped origin ball"
    )
    parser.add_argument("--grid", type=int, default=None, help="Grid points per axis")
    parser.add_argument("--mc", type=int, default=None, help="Monte Carlo samples per grid point")
    parser.add_argument("--seed", type=nonnegative_int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdlyap", description="Sampled-data Lyapunov verification toolkit"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Run the sample-and-hold execution")
    _add_target(p)
    p.add_argument("--x0", type=str, required=True, help="Initial state, comma-separated")
    p.add_argument("--t-final", type=float, default=None)
    p.add_argument("--max-step", type=float, default=None)
    p.add_argument("--seed", type=nonnegative_int, default=0)
    p.add_argument("--d", type=str, default="const:0", help="Disturbance signal")
    p.add_argument("--v", type=str, default="const:0", help="Input signal")
    p.add_argument("--dtilde", type=str, default="const:0", help="Schedule perturbation signal")
    p.add_argument("--out", type=str, default=None, help="Trajectory CSV path")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("verify", help="Sampled Lyapunov condition checks")
    _add_target(p)
    _add_budget(p)
    p.add_argument("--no-sandwich", action="store_true")
    p.add_argument("--hypotheses", action="store_true", help="Also check the standing hypotheses")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("masp", help="Maximum allowable sampling period")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--closed-form", choices=["single", "vector"])
    mode.add_argument("--bisect", action="store_true")
    p.add_argument("--c", type=float, default=1.1)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--bracket", type=str, default=None, help="lo,hi")
    p.add_argument("--tol", type=float, default=None)
    _add_target(p)
    _add_budget(p)
    p.set_defaults(handler=cmd_masp)

    p = sub.add_parser("certify", help="Trajectory-based gain, envelope and KL certification")
    _add_target(p)
    p.add_argument("--amplitudes", type=str, default=None)
    p.add_argument("--runs", type=positive_int, default=None)
    p.add_argument("--tail", type=float, default=None, help="Start of the tail window")
    p.add_argument("--t-final", type=float, default=None)
    p.add_argument("--dtilde-levels", type=str, default=None)
    p.add_argument("--x0-radius", type=float, default=None)
    p.add_argument("--seed", type=nonnegative_int, default=None)
    p.add_argument("--kl", action="store_true", help="Fit an exponential KL bound to unforced runs")
    p.add_argument("--csv", type=str, default=None, help="Write amplitude/tail sup/bound rows")
    p.set_defaults(handler=cmd_certify)

    p = sub.add_parser("lemma", help="Comparison and small-gain oracles on generated scenarios")
    p.add_argument("--rho", type=str, default="s")
    p.add_argument("--a", type=str, default="s/2", help="Gain for the small-gain check")
    p.add_argument("--check", choices=["comparison", "smallgain"], default="comparison")
    p.add_argument("--scenarios", type=positive_int, default=None)
    p.add_argument("--samples", type=positive_int, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--seed", type=nonnegative_int, default=0)
    p.set_defaults(handler=cmd_lemma)

    p = sub.add_parser("backstep", help="Backstepping emulation checks")
    p.add_argument("--check", choices=["dissipation", "h", "hypothesis-p"], required=True)
    target = p.add_mutually_exclusive_group()
    target.add_argument(
        "--system", type=str, default=None, help="JSON triangular system and certificate"
    )
    target.add_argument("--builtin", type=str, default=None)
    _add_budget(p)
    p.add_argument(
        "--x0", type=str, default=None, help="Simulate the loop at 0.9*h* from this state"
    )
    p.add_argument("--t-final", type=float, default=30.0)
    p.add_argument("--f1", type=str, default=EX41_F1)
    p.add_argument("--f2", type=str, default=EX41_F2_OPEN)
    p.add_argument("--c", type=float, default=1.5)
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--L", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--D", type=str, default="0,1;-1,1", help="Disturbance box lo,hi;lo,hi")
    p.set_defaults(handler=cmd_backstep)

    p = sub.add_parser("plot-data", help="Two-column data files from a trajectory CSV")
    p.add_argument("--in", dest="input", type=str, required=True)
    p.add_argument("--columns", type=str, required=True, help="Comma-separated y columns")
    p.add_argument("--x", type=str, default="t", help="x column")
    p.add_argument("--out-dir", type=str, default=None)
    p.set_defaults(handler=cmd_plot_data)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else get_settings().log_level.upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.handler(args)
    except (SdlyapError, ValidationError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
