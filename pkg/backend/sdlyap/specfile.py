from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from pydantic import ValidationError

from .backstep import BackstepCertificate, TriangularSystem
from .core import PlantModel, SystemModel
from .errors import DefinitionError, ParseError, SpecError
from .exprlang import Expression, parse
from .schemas import BackstepSpecFile, LyapunovSpec, SystemSpecFile, parse_intervals
from .simulator import emulate_feedback
from .verifier import LyapunovCertificate, validate_certificate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoadedSpec:
    model: SystemModel
    plant: Optional[PlantModel] = None
    certificate: Optional[LyapunovCertificate] = None
    source: str = "<inline>"


def _expr(text: str, path: str) -> Expression:
    try:
        return parse(text)
    except ParseError as exc:
        raise SpecError(str(exc), path) from exc


def _exprs(items: list[str], path: str) -> list[Expression]:
    return [_expr(item, f"{path}[{i}]") for i, item in enumerate(items)]


def _certificate(spec: LyapunovSpec, n: int) -> LyapunovCertificate:
    for name in ("a", "zeta", "a1", "a2"):
        _expr(getattr(spec, name), f"lyapunov.{name}")
    try:
        cert = LyapunovCertificate.build(
            n=n,
            V=_exprs(spec.V, "lyapunov.V"),
            rho=spec.rho,
            a=spec.a,
            zeta=spec.zeta,
            a1=spec.a1,
            a2=spec.a2,
            g=_exprs(spec.g, "lyapunov.g"),
            gradV=[_exprs(row, f"lyapunov.gradV[{i}]") for i, row in enumerate(spec.gradV)]
            if spec.gradV
            else None,
            analytic_b=[
                _expr(b, f"lyapunov.analytic_b[{i}]") if b is not None else None
                for i, b in enumerate(spec.analytic_b)
            ]
            if spec.analytic_b
            else None,
            W=_expr(spec.W, "lyapunov.W") if spec.W else None,
        )
    except DefinitionError as exc:
        raise SpecError(str(exc), "lyapunov") from exc
    report = validate_certificate(cert)
    failed = [f"{f.label}:{c.name}" for f in report.functions for c in f.checks if not c.passed]
    failed += [c.name for c in report.checks if not c.passed]
    if failed:
        raise SpecError(f"certificate checks failed: {', '.join(failed)}", "lyapunov")
    return cert


def build_from_spec(spec: SystemSpecFile, source: str = "<inline>") -> LoadedSpec:
    """Model, direct or emulated from a plant, and optional certificate from a document."""
    h = spec.h if isinstance(spec.h, (int, float)) else _expr(spec.h, "h")
    plant = None
    try:
        if spec.f is not None:
            model = SystemModel.build(
                n=spec.n,
                f=_exprs(spec.f, "f"),
                h=h,
                r=spec.r,
                D=parse_intervals(spec.D),
                U=parse_intervals(spec.U),
                H=_exprs(spec.H, "H") if spec.H else None,
                name=spec.name or Path(source).stem,
            )
        else:
            assert spec.plant is not None
            plant = PlantModel.build(
                n=spec.n,
                f_open=_exprs(spec.plant.f_open, "plant.f_open"),
                k=_exprs(spec.plant.k, "plant.k"),
                D=parse_intervals(spec.D),
                H=_exprs(spec.plant.H or spec.H or [], "plant.H") or None,
                measurement_error=spec.plant.measurement_error,
                actuator_error=spec.plant.actuator_error,
                E=parse_intervals(spec.plant.E) if spec.plant.E else None,
                V=parse_intervals(spec.U) if spec.U else None,
                name=spec.name or Path(source).stem,
            )
            model = emulate_feedback(plant, h, spec.r)
    except SpecError:
        raise
    except DefinitionError as exc:
        raise SpecError(str(exc), "plant" if spec.f is None else "") from exc
    cert = _certificate(spec.lyapunov, spec.n) if spec.lyapunov else None
    logger.debug("loaded %s (n=%d, certificate=%s)", model.name, model.n, cert is not None)
    return LoadedSpec(model=model, plant=plant, certificate=cert, source=source)


def _field_path(loc: tuple[Any, ...]) -> str:
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out


def parse_system_spec(data: Any, source: str = "<inline>") -> LoadedSpec:
    try:
        spec = SystemSpecFile.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise SpecError(first["msg"], _field_path(first["loc"])) from exc
    return build_from_spec(spec, source)


def _read_json(path: str | Path) -> Any:
    target = Path(path)
    if not target.exists():
        raise SpecError(f"no such file: {target}")
    try:
        return json.loads(target.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from exc


def load_system_spec(path: str | Path) -> LoadedSpec:
    return parse_system_spec(_read_json(path), str(path))


@dataclass(frozen=True)
class LoadedBackstep:
    system: TriangularSystem
    certificate: BackstepCertificate
    source: str = "<inline>"


def parse_backstep_spec(data: Any, source: str = "<inline>") -> LoadedBackstep:
    """Triangular system and feedback certificate from a JSON document."""
    try:
        spec = BackstepSpecFile.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise SpecError(first["msg"], _field_path(first["loc"])) from exc
    name = spec.name or Path(source).stem
    try:
        system = TriangularSystem.build(
            phi=[_exprs(row, f"phi[{i}]") for i, row in enumerate(spec.phi)],
            g=_exprs(spec.g, "g"),
            D=parse_intervals(spec.D),
            name=name,
        )
    except DefinitionError as exc:
        raise SpecError(str(exc), "phi") from exc
    cs = spec.certificate
    for field_name in ("V", "k", "W", "zeta", "a", "a2"):
        if getattr(cs, field_name) is not None:
            _expr(getattr(cs, field_name), f"certificate.{field_name}")
    try:
        cert = BackstepCertificate.build(
            n=system.n,
            V=cs.V,
            k=cs.k,
            W=cs.W,
            zeta=cs.zeta,
            a=cs.a,
            variant=cs.variant,
            a2=cs.a2,
            label=name,
        )
    except DefinitionError as exc:
        raise SpecError(str(exc), "certificate") from exc
    logger.debug("loaded triangular system %s (n=%d)", name, system.n)
    return LoadedBackstep(system=system, certificate=cert, source=source)


def load_backstep_spec(path: str | Path) -> LoadedBackstep:
    return parse_backstep_spec(_read_json(path), str(path))
