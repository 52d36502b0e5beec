import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assistbench.config import ConfigError, SimulationConfig, StreamingMode, TriggerMode
from assistbench.planner import (
    HOUR_MS,
    EmptyPlanError,
    PlanError,
    ReplayPlan,
    align_sessions,
    build_plan,
    build_plans,
    expand_developers,
    filter_trigger,
    round_count,
)
from assistbench.trace_model import DeveloperSession, GenerationRequest, RequestOutcome

MIN = 60_000.0
O = RequestOutcome


def session(dev, minutes, times=None, outcomes=None):
    times = times if times is not None else [0.0, minutes * MIN / 2, minutes * MIN - 1]
    outcomes = outcomes or [O.ACCEPTED] * len(times)
    reqs = tuple(
        GenerationRequest(f"{dev}-r{i}", dev, t, "prompt", 64, o, suggestion="s" if o.displayed else None)
        for i, (t, o) in enumerate(zip(times, outcomes))
    )
    return DeveloperSession(dev, reqs, minutes * MIN)


def cfg(**kw):
    base = dict(developers=1, streaming=StreamingMode.NO_STREAM, trigger=TriggerMode.AUTOMATIC)
    base.update(kw)
    return SimulationConfig(**base)


def twenty():
    return [session(f"d{i:02d}", 40 + i) for i in range(20)]


# alignment

@pytest.mark.parametrize("minutes,start", [(60, 0), (50, 5), (40, 10)])
def test_midpoint_alignment(minutes, start):
    (a,) = align_sessions([session("d", minutes)])
    assert a.start == start * MIN
    assert (a.start + a.end) / 2 == 30 * MIN
    assert a.requests[0].issue_time == start * MIN


def test_long_sessions_truncated_to_window():
    (a,) = align_sessions([session("d", 90, times=[0, 30 * MIN, 61 * MIN, 89 * MIN])])
    assert (a.start, a.end) == (0.0, HOUR_MS)
    assert [r.issue_time for r in a.requests] == [0, 30 * MIN]


def test_session_without_requests_in_window_dropped(caplog):
    out = align_sessions([session("late", 90, times=[70 * MIN]), session("ok", 10)])
    assert [a.developer_id for a in out] == ["ok"]
    assert "dropped" in caplog.text


def test_window_must_be_positive():
    with pytest.raises(PlanError):
        align_sessions([session("d", 10)], window=0)


# expansion

def test_two_developers_ten_rounds_cover_all():
    rounds = expand_developers(align_sessions(twenty()), 2, seed=7)
    assert len(rounds) == 10
    assert all(len(r) == 2 for r in rounds)
    sources = sorted(vs.session.developer_id for r in rounds for vs in r)
    assert sources == sorted(f"d{i:02d}" for i in range(20))


def test_all_twenty_is_identity():
    aligned = align_sessions(twenty())
    (only,) = expand_developers(aligned, 20, seed=1)
    assert [vs.session for vs in only] == aligned
    assert all(vs.offset == 0 and not vs.duplicate for vs in only)


def test_thirty_developers_duplicates_deterministic():
    aligned = align_sessions(twenty())
    a = expand_developers(aligned, 30, seed=42)
    b = expand_developers(aligned, 30, seed=42)
    assert a == b
    (members,) = a
    assert len(members) == 30
    originals = [vs for vs in members if not vs.duplicate]
    dups = [vs for vs in members if vs.duplicate]
    assert sorted(vs.session.developer_id for vs in originals) == sorted(s.developer_id for s in aligned)
    assert len(dups) == 10
    assert all(0 <= vs.offset <= 30_000 for vs in dups)
    assert expand_developers(aligned, 30, seed=43) != a


def test_short_last_round_padded_from_other_rounds():
    rounds = expand_developers(align_sessions(twenty()), 3, seed=0)
    assert len(rounds) == round_count(20, 3) == 7
    last = rounds[-1]
    assert len(last) == 3
    originals = {vs.session.developer_id for vs in last if not vs.duplicate}
    assert len(originals) == 2
    assert not originals & {vs.session.developer_id for vs in last if vs.duplicate}


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**63 - 1))
def test_coverage_exactly_once(n, seed):
    rounds = expand_developers(align_sessions(twenty()), n, seed)
    originals = [vs.session.developer_id for r in rounds for vs in r if not vs.duplicate]
    assert sorted(originals) == sorted(f"d{i:02d}" for i in range(20))
    assert all(len(r) == n for r in rounds)


# trigger filter

def test_manual_keeps_displayed_only_with_original_times():
    s = session("d", 10, times=[1.0, 2.0, 3.0], outcomes=[O.CANCELED, O.EMPTY, O.ACCEPTED])
    (f,) = filter_trigger([s], TriggerMode.MANUAL_EMULATED)
    assert [(r.outcome, r.issue_time) for r in f.requests] == [(O.ACCEPTED, 3.0)]
    assert filter_trigger([s], TriggerMode.AUTOMATIC) == [s]


def test_manual_schedule_is_subset_of_automatic(sessions):
    auto = build_plans(sessions, cfg(developers=20), seed=3)[0]
    manual = build_plans(sessions, cfg(developers=20, trigger=TriggerMode.MANUAL_EMULATED), seed=3)[0]
    key = lambda r: (r.virtual_developer_id, r.source_request_id, r.fire_offset)
    assert {key(r) for r in manual.schedule} <= {key(r) for r in auto.schedule}
    assert len(manual.schedule) < len(auto.schedule)


# plans

def test_single_developer_schedule_equals_aligned_trace():
    s = session("d", 50, times=[0.0, 1234.5, 40 * MIN])
    plan = build_plan([s], cfg(), seed=0)
    assert [r.fire_offset for r in plan.schedule] == [5 * MIN, 5 * MIN + 1234.5, 45 * MIN]
    assert not any(r.cancels_previous for r in plan.schedule)


def test_overlap_starts_at_later_session_start():
    plan = build_plan([session("a", 60), session("b", 50)], cfg(developers=2), seed=0)
    assert plan.overlap_window == (5 * MIN, 55 * MIN)


def test_cancels_previous_only_when_streaming():
    s = session("d", 10)
    streamed = build_plan([s], cfg(streaming=StreamingMode.STREAM_WITH_CANCEL), seed=0)
    assert [r.cancels_previous for r in streamed.schedule] == [False, True, True]
    assert not any(r.cancels_previous for r in build_plan([s], cfg(), seed=0).schedule)


def test_plan_sorted_and_in_window(sessions):
    for plan in build_plans(sessions, cfg(developers=30), seed=5):
        keys = [r.sort_key for r in plan.schedule]
        assert keys == sorted(keys)
        assert all(0 <= r.fire_offset < plan.window for r in plan.schedule)
        assert {r.virtual_developer_id for r in plan.schedule} == set(range(30))


def test_plan_is_byte_identical_and_roundtrips(sessions):
    a = build_plans(sessions, cfg(developers=5), seed=11)
    b = build_plans(sessions, cfg(developers=5), seed=11)
    assert [p.to_json() for p in a] == [p.to_json() for p in b]
    assert [(p.round_index, p.round_count) for p in a] == [(i, 4) for i in range(4)]
    for p in a:
        assert ReplayPlan.from_json(p.to_json()) == p


def test_empty_plan_raises():
    s = session("d", 10, times=[1.0], outcomes=[O.CANCELED])
    with pytest.raises(EmptyPlanError):
        build_plan([s], cfg(trigger=TriggerMode.MANUAL_EMULATED), seed=0)


def test_round_index_out_of_range():
    with pytest.raises(PlanError):
        build_plan([session("d", 10)], cfg(), seed=0, round_index=3)


def test_unsupported_plan_version():
    d = build_plan([session("d", 10)], cfg(), seed=0).to_dict()
    d["format_version"] = 99
    with pytest.raises(PlanError):
        ReplayPlan.from_dict(d)


def test_invalid_config():
    with pytest.raises(ConfigError):
        cfg(developers=0)
    with pytest.raises(ConfigError):
        cfg(gpu_count=3)
    with pytest.raises(ValueError):
        cfg(streaming="sometimes")
    with pytest.raises(ConfigError):
        SimulationConfig.from_dict({"developers": 1, "colour": "red"})
