"""Built-in systems and certificates, selectable by name from the CLI and the API."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .backstep import (
    BackstepCertificate,
    TriangularSystem,
    hypothesis_p_closed_loop,
    scalar_instance,
)
from .config import DATA_DIR
from .core import SystemModel
from .errors import InputError
from .verifier import LyapunovCertificate

EX41_F1 = "-2*x[1] - d[1]*x[1]^3 + x[2]"
EX41_F2_OPEN = "d[2]*x[2]^2 - x[2]^3"
UNBOUNDED = (-math.inf, math.inf)


def example41_model(delta: float = 0.0, Delta: float = 1.0, r: float = 0.11) -> SystemModel:
    """The planar loop with held feedback u = -2 x2(tau_i) + v."""
    if not 0 <= delta <= Delta:
        raise InputError(f"need 0 <= delta <= Delta, got [{delta}, {Delta}]")
    return SystemModel.build(
        n=2,
        f=[EX41_F1, f"{EX41_F2_OPEN} - 2*xs[2] + v[1]"],
        h=r,
        r=r,
        D=[(delta, Delta), (-1.0, 1.0)],
        U=[UNBOUNDED],
        name="ex41",
    )


def example41_single_certificate(c: float = 1.1, r: float = 0.06) -> LyapunovCertificate:
    mu = (7.0 - 40.0 * c**2 * r - 8.0 * r) / 8.0
    if not mu > 0:
        raise InputError(f"W vanishes for c={c}, r={r}: mu={mu}")
    norm2 = "(x[1]^2 + x[2]^2)"
    return LyapunovCertificate.build(
        n=2,
        V=[f"{norm2}/2"],
        W=f"{mu!r}*{norm2}",
        a=f"s/{c**2!r}",
        zeta="2*s^2",
        a1="s^2/2",
        a2="s^2/2",
        g=["x[2]"],
        analytic_b=[f"{c**2!r}*{norm2} + {c**3!r}*{norm2}^1.5 + {2 * c + 0.5!r}*sqrt{norm2}"],
        label=f"ex41-single(c={c}, r={r})",
    )


def example41_vector_certificate(c: float = 1.1, r: float = 0.11) -> LyapunovCertificate:
    rate2 = (1.0 - 2.0 * r - 5.0 * c**2 * r) / 2.0
    if not 1 < c < 2 or not rate2 > 0:
        raise InputError(
            f"vector certificate needs 1 < c < 2 and a positive rho2, got c={c}, r={r}"
        )
    return LyapunovCertificate.build(
        n=2,
        V=["x[1]^2/2", "x[2]^2/2"],
        rho=[f"{(2.0 - c) / 2.0!r}*s", f"{rate2!r}*s"],
        a=f"s/{c**2!r}",
        zeta="2*s^2",
        a1="s^2/4",
        a2="s^2/2",
        g=["x[2]", "x[2]"],
        analytic_b=[None, f"{c**2!r}*x[2]^2 + {c**3!r}*abs(x[2])^3 + {2 * c + 0.5!r}*abs(x[2])"],
        label=f"ex41-vector(c={c}, r={r})",
    )


def scalar_hold_model(r: float = 0.1) -> SystemModel:
    return SystemModel.build(
        n=1, f=["-2*xs[1] + v[1]"], h=r, r=r, U=[UNBOUNDED], name="scalar-hold"
    )


def scalar_hold_certificate() -> LyapunovCertificate:
    return LyapunovCertificate.build(
        n=1,
        V=["x[1]^2/2"],
        rho=["0.2*s"],
        a="s/2",
        zeta="s^2",
        a1="s^2/2",
        a2="s^2/2",
        g=["x[1]"],
        label="scalar-hold",
    )


def scalar_hold_bound() -> float:
    """Hand bound on the held period for the scalar certificate."""
    root2 = math.sqrt(2.0)
    return (2.0 - 1.0 / root2 - 0.1) / (2.0 * (2.0 * root2 + 1.0 / root2))


def example412_model(a: float = 0.0, R: float = 2.0, r: float = 0.11) -> SystemModel:
    return hypothesis_p_closed_loop(
        EX41_F1, EX41_F2_OPEN, a, R, r, D=[(0.0, 1.0), (-1.0, 1.0)], name="ex412"
    )


def backstep_scalar_model(r: float = 0.225) -> SystemModel:
    """Emulated scalar loop held for a constant period r."""
    tri, cert = scalar_instance()
    return tri.sampled_loop(cert.k, r)


@dataclass(frozen=True)
class Builtin:
    name: str
    description: str
    model: Callable[..., SystemModel]
    default_r: float
    certificate: Optional[Callable[[], LyapunovCertificate]] = None
    backstep: Optional[Callable[[], tuple[TriangularSystem, BackstepCertificate]]] = None

    def build_model(self, r: float | None = None) -> SystemModel:
        return self.model(r=r if r is not None else self.default_r)


BUILTINS: dict[str, Builtin] = {
    b.name: b
    for b in (
        Builtin(
            "ex41",
            "planar loop, delta=0, Delta=1",
            example41_model,
            0.11,
            example41_vector_certificate,
        ),
        Builtin(
            "ex41-single",
            "planar loop with the single quadratic certificate (delta=1, Delta=2)",
            lambda r: example41_model(1.0, 2.0, r),
            0.06,
            lambda: example41_single_certificate(1.1, 0.06),
        ),
        Builtin(
            "ex41-vector",
            "planar loop with the vector certificate",
            example41_model,
            0.11,
            lambda: example41_vector_certificate(1.1, 0.11),
        ),
        Builtin(
            "scalar-hold",
            "x' = -2 x(tau_i) + v",
            scalar_hold_model,
            0.1,
            scalar_hold_certificate,
        ),
        Builtin(
            "ex412",
            "planar hypothesis loop with linear held feedback",
            example412_model,
            0.11,
            lambda: example41_vector_certificate(1.1, 0.11),
        ),
        Builtin(
            "backstep-scalar",
            "x' = u with emulated k = -2x",
            backstep_scalar_model,
            0.225,
            backstep=scalar_instance,
        ),
    )
}


def get_builtin(name: str) -> Builtin:
    try:
        return BUILTINS[name]
    except KeyError:
        choices = ", ".join(sorted(BUILTINS))
        raise InputError(f"unknown builtin {name!r}; choose from {choices}") from None


def bundled_spec(name: str) -> Path:
    path = DATA_DIR / name
    if not path.exists():
        raise InputError(f"no bundled spec {name!r}")
    return path
