import functools

import pytest
from hypothesis import HealthCheck, settings

from mashvco import mash

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def _cached(config: mash.SimConfig):
    return mash.simulate(config)


@pytest.fixture(scope="session")
def run_sim():
    """Memoized ``simulate`` shared by every test module in the session."""
    return _cached


@pytest.fixture(autouse=True)
def _output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("MASHVCO_OUTPUT_ROOT", str(tmp_path / "runs"))
