import os
from pathlib import Path

import pytest

from assistbench.mock.profiles import ModelProfile, ServerConfig, load_profiles
from assistbench.synthetic import generate_events
from assistbench.trace_model import sessions_from_events

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def synthetic_events():
    return generate_events(0)


@pytest.fixture(scope="session")
def sessions(synthetic_events):
    return sessions_from_events(synthetic_events)


@pytest.fixture(scope="session")
def book():
    return load_profiles()


@pytest.fixture
def toy_config():
    """1 GPU, 10 ms base, 1 ms per running sequence, no prefill to speak of."""
    return ServerConfig(ModelProfile("toy", 1e-9, 10.0, 1.0, 100), max_concurrent_requests=1000, gpu_count=1,
                        idle_power=270.0, per_gpu_active_power=200.0, step_quantum=1.0)


@pytest.fixture(scope="session")
def real_dataset():
    path = os.environ.get("ASSISTANT_TRACES")
    if not path or not Path(path).exists():
        pytest.skip("set ASSISTANT_TRACES to the AssistantTraces dump to run this test")
    return Path(path)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    # a criterion fails if any phase fails; it is skipped only when it never ran
    if report.when == "call" or report.outcome != "passed":
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        item.config.stash.setdefault(_ACCEPTANCE, {})[str(marker.args[0])] = (verdict, marker.args[1])


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(k.split("-")[0]), k)):
        verdict, title = results[key]
        terminalreporter.write_line(f"{verdict} criterion {key}: {title}")
