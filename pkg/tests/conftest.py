import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> (title, passed, detail, seconds); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def model_cache(request):
    """Trained desk models shared by every run in the session (and across sessions)."""
    path = os.environ.get("HRSLAB_TEST_CACHE")
    if path:
        os.makedirs(path, exist_ok=True)
        return path
    return str(request.config.cache.mkdir("hrslab-models"))


@pytest.fixture(scope="session")
def desk(model_cache):
    """``desk(preset, parts, workers)`` -> ReportBundle, memoised for the session."""
    from hrslab import config
    from hrslab.experiment import run_experiment

    memo = {}

    def run(preset, parts=("attacks", "des", "gradstd", "reprogram"), workers=1):
        key = (preset, tuple(parts), workers)
        if key not in memo:
            memo[key] = run_experiment(config.bundled(preset), cache_dir=model_cache,
                                       parts=parts, workers=workers)
        return memo[key]

    return run


@pytest.fixture(scope="session")
def desk_models(model_cache):
    """``desk_models(preset)`` -> trained models and data for a bundled preset."""
    from hrslab import config
    from hrslab.experiment import prepare

    memo = {}

    def get(preset):
        if preset not in memo:
            memo[preset] = prepare(config.bundled(preset), cache_dir=model_cache)
        return memo[preset]

    return get


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail, secs = ACCEPTANCE[n]
        terminalreporter.write_line(
            f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{secs:.1f}s]")
