from __future__ import annotations

from typing import Optional

from ..catalog import get_builtin
from ..core import Region, SystemModel
from ..errors import InputError
from ..schemas import RegionBody, SystemSpecFile
from ..specfile import build_from_spec
from ..verifier import LyapunovCertificate


def resolve_target(
    builtin: Optional[str],
    spec: Optional[SystemSpecFile],
    r: Optional[float],
    need_certificate: bool = False,
) -> tuple[SystemModel, Optional[LyapunovCertificate], str]:
    """An inline spec wins over the builtin name."""
    if r is not None and not r > 0:
        raise InputError("r must be positive")
    if spec is not None:
        loaded = build_from_spec(spec, "<request>")
        model = loaded.model.with_constant_period(r) if r is not None else loaded.model
        cert, label = loaded.certificate, model.name
    elif builtin:
        entry = get_builtin(builtin)
        model = entry.build_model(r)
        cert, label = (entry.certificate() if entry.certificate else None), entry.name
    else:
        raise InputError("request needs a builtin name or an inline spec")
    if need_certificate and cert is None:
        raise InputError(f"{label} carries no Lyapunov certificate")
    return model, cert, label


def to_region(body: RegionBody, n: int) -> Region:
    if len(body.box) != n:
        raise InputError(f"region has {len(body.box)} axes, system has n={n}")
    return Region(tuple((float(lo), float(hi)) for lo, hi in body.box), body.exclude_origin_radius)
