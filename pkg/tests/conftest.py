import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from phasesep.audio_io import AudioClip
from phasesep.dataset import SynthSpec, generate_synthetic_song

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_clip(rng):
    def make(channels=2, length=8000, rate=8000, scale=0.3):
        return AudioClip(scale * rng.standard_normal((channels, length)), rate)
    return make


@pytest.fixture(scope="session")
def short_song():
    return generate_synthetic_song(SynthSpec(duration=1.0), seed=3)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""
    table = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n, passed, detail):
        table[n] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_ACCEPTANCE, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        passed, detail = table[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
