import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# trained components must come from this run, not a stale cache
os.environ.pop("SBPROBE_CACHE_DIR", None)

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_cfg():
    from sbprobe.config import make_config
    return make_config({})


@pytest.fixture(scope="session")
def toy_components(toy_cfg):
    from sbprobe.harness import build_components
    return build_components(toy_cfg)


def _run(cfg, comp, name):
    from sbprobe.harness import build_plan, run_robustness_experiment
    return run_robustness_experiment(build_plan(cfg, privacy_model=name, components=comp))


@pytest.fixture(scope="session")
def fgsm_result(toy_cfg, toy_components):
    return _run(toy_cfg, toy_components, "fgsm")


@pytest.fixture(scope="session")
def san_result(toy_cfg, toy_components):
    return _run(toy_cfg, toy_components, "san")


@pytest.fixture(scope="session")
def identity_result(toy_cfg, toy_components):
    return _run(toy_cfg, toy_components, "identity")


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line and asserts ``ok``."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n: int, ok: bool, detail: str) -> None:
        lines[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
