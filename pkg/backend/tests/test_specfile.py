from __future__ import annotations

import json

import pytest

from sdlyap.backstep import check_dissipation, scalar_instance
from sdlyap.catalog import bundled_spec
from sdlyap.core import Region
from sdlyap.errors import SpecError
from sdlyap.specfile import (
    load_backstep_spec,
    load_system_spec,
    parse_backstep_spec,
    parse_system_spec,
)

MINIMAL = {"n": 1, "f": ["-x[1] + v[1]"], "h": 0.1, "r": 0.1, "U": [["-inf", "inf"]]}


def test_minimal_spec_loads():
    loaded = parse_system_spec(MINIMAL)
    assert loaded.model.n == 1 and loaded.model.m == 1
    assert loaded.certificate is None
    assert loaded.plant is None


def test_bundled_vector_spec_carries_a_certificate():
    loaded = load_system_spec(bundled_spec("ex41_vector.json"))
    assert loaded.model.name == "ex41-vector"
    assert loaded.certificate is not None
    assert len(loaded.certificate.V) == 2


def test_plant_spec_is_emulated():
    loaded = load_system_spec(bundled_spec("scalar_hold.json"))
    assert loaded.plant is not None
    assert loaded.model.m == 1


@pytest.mark.parametrize(
    "patch,path",
    [
        ({"f": ["-x[1] +"]}, "f[0]"),
        ({"r": -1.0}, "r"),
        ({"extra_key": 1}, "extra_key"),
        ({"D": [[0.0]]}, "D"),
    ],
)
def test_errors_carry_the_field_path(patch, path):
    with pytest.raises(SpecError) as info:
        parse_system_spec({**MINIMAL, **patch})
    assert info.value.path == path


def test_dimension_mismatch_is_rejected():
    with pytest.raises(SpecError, match="expected n=2"):
        parse_system_spec({**MINIMAL, "n": 2})


def test_unknown_variable_is_rejected():
    with pytest.raises(SpecError):
        parse_system_spec({**MINIMAL, "f": ["-y[1]"]})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(SpecError, match="no such file"):
        load_system_spec(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(SpecError, match="invalid JSON"):
        load_system_spec(broken)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(MINIMAL), encoding="utf-8")
    assert load_system_spec(good).model.name == "good"


def test_bundled_backstep_spec_matches_the_builtin(small_budget):
    loaded = load_backstep_spec(bundled_spec("backstep_scalar.json"))
    tri, cert = scalar_instance()
    assert loaded.system.n == tri.n == 1
    assert loaded.system.name == "backstep-scalar"
    assert loaded.certificate.k == cert.k
    assert loaded.certificate.W == cert.W
    region = Region.symmetric(1, 2.0)
    assert check_dissipation(loaded.system, loaded.certificate, region, small_budget).passed


BACKSTEP = {
    "phi": [["0"], ["x[1]", "1"]],
    "g": ["1", "1"],
    "certificate": {
        "V": "(x[1]^2 + x[2]^2)/2",
        "k": "-x[1] - 2*x[2]",
        "W": "x[1]^2",
        "zeta": "s^2",
        "a": "s/2",
    },
}


def test_triangular_spec_loads():
    loaded = parse_backstep_spec(BACKSTEP, "chain.json")
    assert loaded.system.n == 2
    assert loaded.system.name == "chain"
    assert loaded.certificate.variant.value == "measurement-error"


@pytest.mark.parametrize(
    "patch,path",
    [
        ({"phi": [["0"], ["x[1]"]]}, ""),
        ({"g": ["1"]}, ""),
        ({"phi": [["x[2]"], ["x[1]", "1"]]}, "phi"),
        ({"certificate": {**BACKSTEP["certificate"], "V": "x[1] +"}}, "certificate.V"),
        ({"certificate": {**BACKSTEP["certificate"], "k": "1 + x[1]"}}, "certificate"),
        ({"extra": 1}, "extra"),
    ],
)
def test_triangular_spec_errors_carry_the_field_path(patch, path):
    with pytest.raises(SpecError) as info:
        parse_backstep_spec({**BACKSTEP, **patch})
    assert info.value.path == path
