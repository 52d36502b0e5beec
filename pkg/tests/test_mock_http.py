import socket
import time

import httpx
import pytest

from assistbench.config import SimulationConfig, StreamingMode
from assistbench.engine import RequestStatus, execute_http, max_in_flight_per_developer
from assistbench.mock.app import MockServerThread, free_port
from assistbench.mock.profiles import ModelProfile, ServerConfig
from assistbench.mock.simulator import SeqState
from assistbench.planner import ReplayPlan, ScheduledRequest

SCALE = 0.05  # simulated time runs 20x faster than the wall clock


def config(max_concurrent=1000):
    return ServerConfig(ModelProfile("toy", 1e-9, 10.0, 1.0, 100), max_concurrent_requests=max_concurrent,
                        gpu_count=1, idle_power=270.0, per_gpu_active_power=200.0, step_quantum=1.0)


@pytest.fixture
def mock():
    """Real-time mock admitting one request; a 400-token generation holds it for 4.4 s."""
    with MockServerThread(config(max_concurrent=1), time_scale=1.0) as m:
        yield m


def test_non_streaming_body(mock):
    r = httpx.post(mock.url + "/v1/generate", json={"prompt": "x", "max_new_tokens": 50, "stream": False,
                                                   "output_tokens": 3}, timeout=10)
    assert r.status_code == 200
    assert r.json() == {"text": "tok tok tok", "tokens": 3}


def test_streaming_frames_are_exact(mock):
    body = {"prompt": "x", "max_new_tokens": 50, "stream": True, "output_tokens": 4}
    with httpx.stream("POST", mock.url + "/v1/generate", json=body, timeout=10) as r:
        assert r.headers["content-type"].startswith("text/event-stream")
        raw = r.read().decode()
    frames = [block for block in raw.split("\n\n") if block]
    assert frames == [f'data: {{"token":"tok","index":{i}}}' for i in range(4)] + ['data: {"done":true,"tokens":4}']


def test_overload_is_429_with_error_body(mock):
    body = {"prompt": "x", "max_new_tokens": 500, "stream": True, "output_tokens": 400}
    with httpx.Client(timeout=10) as c:
        with c.stream("POST", mock.url + "/v1/generate", json=body) as first:
            next(first.iter_lines())  # admitted and generating
            r = c.post(mock.url + "/v1/generate", json={"prompt": "y", "max_new_tokens": 5, "stream": False})
            assert r.status_code == 429
            assert r.json() == {"error": "overloaded"}


def test_invalid_request_rejected(mock):
    r = httpx.post(mock.url + "/v1/generate", json={"prompt": "x", "max_new_tokens": 0}, timeout=10)
    assert r.status_code == 422


def test_power_idle_then_active(mock):
    assert httpx.get(mock.url + "/v1/power", timeout=10).json() == {"watts": 270.0}
    body = {"prompt": "x", "max_new_tokens": 500, "stream": True, "output_tokens": 400}
    with httpx.Client(timeout=10) as c, c.stream("POST", mock.url + "/v1/generate", json=body) as s:
        next(s.iter_lines())
        # one running sequence out of a running capacity of 24
        assert c.get(mock.url + "/v1/power").json()["watts"] == pytest.approx(270.0 + 200.0 / 24)


def test_cancel_mid_stream_stops_within_one_step(mock):
    body = {"prompt": "x", "max_new_tokens": 500, "stream": True, "output_tokens": 400}
    with httpx.stream("POST", mock.url + "/v1/generate", json=body, timeout=10) as r:
        for line in r.iter_lines():
            if line.startswith('data: {"token":"tok","index":5}'):
                break
    deadline = time.monotonic() + 5
    server = mock.service.server
    (seq,) = server.sequences.values()
    while seq.state is not SeqState.CANCELED and time.monotonic() < deadline:
        time.sleep(0.01)
    assert seq.state is SeqState.CANCELED
    assert seq.generated < 400
    # the last step holding the sequence ended no later than one step after the cancel
    last_busy = max(seg.end for seg in server.step_log if seg.batch_size > 0)
    assert last_busy <= seq.canceled_at + 11.0 + 1e-9
    csv_text = httpx.get(mock.url + "/v1/steplog", timeout=10).text
    assert csv_text.splitlines()[0].startswith("start_ms")


def test_port_busy_is_startup_error():
    port = free_port()
    with socket.socket() as s:
        s.bind(("127.0.0.1", port))
        s.listen()
        with pytest.raises(OSError, match="busy"):
            MockServerThread(config(), port=port)


def plan(stream):
    mode = StreamingMode.STREAM_WITH_CANCEL if stream else StreamingMode.NO_STREAM
    sched = (ScheduledRequest(0, "a", 0.0, False, "p", 200, 100),
             ScheduledRequest(0, "b", 100.0, stream, "p", 200, 100))
    return ReplayPlan(SimulationConfig(developers=1, streaming=mode), 0, sched)


def test_replay_over_http_cancels_in_streaming_mode():
    with MockServerThread(config(), time_scale=SCALE) as m:
        run = execute_http(plan(stream=True), m.url, time_scale=SCALE)
    first, second = run.records
    assert first.status is RequestStatus.CANCELED
    assert second.status is RequestStatus.COMPLETED and second.tokens_generated == 100
    assert max_in_flight_per_developer(run.records) <= 1
    assert run.aborted is None


def test_replay_over_http_no_stream_completes_both():
    with MockServerThread(config(), time_scale=SCALE) as m:
        run = execute_http(plan(stream=False), m.url, time_scale=SCALE)
    assert [r.status for r in run.records] == [RequestStatus.COMPLETED] * 2
    assert [r.tokens_generated for r in run.records] == [100, 100]


def test_replay_against_admission_cap_records_rejection():
    sched = tuple(ScheduledRequest(d, f"r{d}", 0.0, False, "p", 200, 50) for d in range(3))
    p = ReplayPlan(SimulationConfig(developers=3, streaming=StreamingMode.NO_STREAM), 0, sched)
    with MockServerThread(config(max_concurrent=1), time_scale=SCALE) as m:
        run = execute_http(p, m.url, time_scale=SCALE)
    counts = run.status_counts()
    assert counts[RequestStatus.REJECTED] >= 1
    assert counts[RequestStatus.REJECTED] + counts[RequestStatus.COMPLETED] == 3


def test_unreachable_endpoint_aborts_run():
    run = execute_http(plan(stream=False), f"http://127.0.0.1:{free_port()}", time_scale=SCALE)
    assert run.aborted
    assert all(r.status is RequestStatus.FAILED for r in run.records)
