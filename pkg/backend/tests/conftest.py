from __future__ import annotations

import os

os.environ.setdefault("SDLYAP_DISABLE_ENV_FILE", "1")

import pytest  # noqa: E402

from sdlyap.catalog import example41_model, example41_vector_certificate  # noqa: E402
from sdlyap.schemas import SampleBudget  # noqa: E402


@pytest.fixture
def small_budget() -> SampleBudget:
    return SampleBudget(grid_per_axis=11, mc_samples=200, seed=7)


@pytest.fixture
def ex41():
    return example41_model(0.0, 1.0, 0.11)


@pytest.fixture
def vector_cert():
    return example41_vector_certificate(1.1, 0.11)
