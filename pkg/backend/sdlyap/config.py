from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path
from typing import Any

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

REPO_ROOT = Path(__file__).resolve().parents[2]
DATA_DIR = Path(__file__).resolve().parent / "data"


class Settings(BaseSettings):
    """Environment-driven configuration shared by the CLI, the API and the library."""

    # Parallelism: 0 means one worker per CPU
    threads: int = Field(0, ge=0)
    log_level: str = Field("INFO")

    # A sampled inequality counts as violated only below -(atol + rtol*scale)
    margin_atol: float = Field(1e-12, ge=0.0)
    margin_rtol: float = Field(1e-9, ge=0.0)

    # Bisection used to invert comparison functions
    inversion_tol: float = Field(1e-12, gt=0.0)
    inversion_max_iter: int = Field(200, gt=0)

    kl_headroom: float = Field(1.1, ge=1.0)

    defaults_file: Path = Field(REPO_ROOT / "configs" / "defaults.yaml")

    model_config = SettingsConfigDict(
        env_prefix="SDLYAP_",
        env_file=None if os.getenv("SDLYAP_DISABLE_ENV_FILE") == "1" else ".env.sdlyap",
        case_sensitive=False,
        extra="ignore",
    )

    def worker_count(self) -> int:
        return self.threads or (os.cpu_count() or 1)


@lru_cache()
def get_settings() -> Settings:
    return Settings()


settings = get_settings()


_BUILTIN_DEFAULTS: dict[str, Any] = {
    "verify": {
        "grid_per_axis": 41,
        "mc_samples": 2000,
        "seed": 7,
        "region": [-5.0, 5.0],
        "exclude_origin_radius": 0.0,
    },
    "simulate": {"t_final": 10.0, "blowup_threshold": 1e8},
    "masp": {"bracket": [0.01, 1.0], "tol": 1e-2, "monotonicity_checks": 2},
    "certify": {
        "amplitudes": [0.1, 0.5],
        "runs": 20,
        "t_final": 30.0,
        "dtilde_levels": [0.0, 1.0, 3.0],
        "x0_radius": 3.0,
        "dwell": 0.3,
    },
    "lemma": {"scenarios": 100, "samples": 401, "horizon": 10.0},
}


@lru_cache()
def load_defaults(path: str | None = None) -> dict[str, Any]:
    """Run defaults from YAML, falling back to built-in values per section."""
    import yaml

    target = Path(path) if path else get_settings().defaults_file
    merged = {section: dict(values) for section, values in _BUILTIN_DEFAULTS.items()}
    if not target.exists():
        return merged
    with open(target, "r", encoding="utf-8") as f:
        cfg = yaml.safe_load(f) or {}
    for section, values in cfg.items():
        merged.setdefault(section, {}).update(values or {})
    return merged
