import asyncio
import json
import struct

import pytest
from hypothesis import given, settings, strategies as st

from h2scope.coordinator import (
    CoverageMismatch, EmptyInput, ReportOutcome, SchedulerState, UnknownTask, WorkerHealth, WorkerReport,
    chunk_targets, handle_report, next_task, reassign_stragglers,
)
from h2scope.coordinator.simulate import simulate, synthetic_record
from h2scope.coordinator.store import ResultStore
from h2scope.coordinator.wire import PROTOCOL_VERSION, WireError, decode, encode, message, recv

HOSTS = [f"h{i}.test" for i in range(250)]


def healthy(wid="w1", cpu=5.0, mem=2048):
    return WorkerHealth(wid, mem, cpu)


def report_for(task, wid, at):
    return WorkerReport(task.task_id, wid, [synthetic_record(h) for h in task.hosts], at)


# --- chunking -------------------------------------------------------------

def test_chunk_sizes():
    assert [len(t.hosts) for t in chunk_targets(HOSTS, 100)] == [100, 100, 50]
    assert [len(t.hosts) for t in chunk_targets(HOSTS[:100], 100)] == [100]
    with pytest.raises(EmptyInput):
        chunk_targets([], 100)
    with pytest.raises(ValueError):
        chunk_targets(["a", "a"])
    with pytest.raises(ValueError):
        chunk_targets(["a"], 0)


@given(st.integers(1, 600), st.integers(1, 150))
def test_chunks_partition_input_in_order(n, size):
    hosts = [f"x{i}" for i in range(n)]
    tasks = chunk_targets(hosts, size)
    assert [h for t in tasks for h in t.hosts] == hosts
    assert all(1 <= len(t.hosts) <= size for t in tasks)
    assert len({t.task_id for t in tasks}) == len(tasks)


# --- assignment -----------------------------------------------------------

def test_worker_health_gate():
    state = SchedulerState.from_hosts(HOSTS)
    assert next_task(healthy(cpu=45.0), state, 0.0) is None
    assert next_task(healthy(mem=100), state, 0.0) is None
    assert next_task(WorkerHealth("w", 2048, 5.0, reachable=False), state, 0.0) is None
    assert next_task(healthy(cpu=30.0), state, 0.0) is None
    task = next_task(healthy(cpu=29.9), state, 0.0)
    assert task is not None and task.task_id in state.in_flight


def test_no_task_when_pending_empty():
    state = SchedulerState.from_hosts(HOSTS[:10])
    assert next_task(healthy(), state, 0.0) is not None
    assert next_task(healthy("w2"), state, 1.0) is None


def test_report_flow():
    state = SchedulerState.from_hosts(HOSTS)
    task = next_task(healthy(), state, 10.0)
    assert handle_report(report_for(task, "w1", 70.0), state) is ReportOutcome.ACCEPTED
    assert state.completed == {task.task_id} and task.task_id not in state.in_flight
    assert state.completion_durations == [60.0]
    assert handle_report(report_for(task, "w1", 71.0), state) is ReportOutcome.DUPLICATE
    assert state.duplicates == 1 and state.completion_durations == [60.0]


def test_report_rejections():
    state = SchedulerState.from_hosts(HOSTS)
    task = next_task(healthy(), state, 0.0)
    short = WorkerReport(task.task_id, "w1", [synthetic_record(h) for h in task.hosts[:-1]], 5.0)
    with pytest.raises(CoverageMismatch):
        handle_report(short, state)
    assert task.task_id in state.in_flight
    with pytest.raises(UnknownTask):
        handle_report(report_for(task, "stranger", 5.0), state)
    with pytest.raises(UnknownTask):
        handle_report(WorkerReport("nope", "w1", [], 5.0), state)


def test_straggler_reassignment_at_timeout():
    state = SchedulerState.from_hosts(HOSTS)
    first = next_task(healthy("w1"), state, 0.0)
    handle_report(report_for(first, "w1", 60.0), state)
    assert state.timeout == 60.0
    task = next_task(healthy("w2"), state, 100.0)
    assert reassign_stragglers(159.0, state) == []
    moved = reassign_stragglers(161.0, state)
    assert [t.task_id for t in moved] == [task.task_id]
    assert state.pending[0] == task.task_id and task.task_id not in state.in_flight
    assert state.history[task.task_id][-1].worker_id == "w2"
    assert state.history[task.task_id][-1].superseded
    # another worker gets the requeued task first; the original holder is steered elsewhere
    again = next_task(healthy("w2"), state, 162.0)
    assert again.task_id != task.task_id
    retry = next_task(healthy("w3"), state, 162.0)
    assert retry.task_id == task.task_id and retry.attempt == 2


def test_late_report_from_superseded_attempt_wins_first():
    state = SchedulerState.from_hosts(HOSTS[:100], bootstrap_t=10.0)
    task = next_task(healthy("slow"), state, 0.0)
    reassign_stragglers(11.0, state)
    next_task(healthy("fast"), state, 12.0)
    assert handle_report(report_for(task, "slow", 20.0), state) is ReportOutcome.ACCEPTED
    assert handle_report(report_for(task, "fast", 21.0), state) is ReportOutcome.DUPLICATE
    assert state.done


def test_timeout_bootstrap_floor_and_convergence():
    state = SchedulerState.from_hosts(HOSTS[:50], chunk_size=5)
    assert state.timeout == 300.0
    state.completion_durations.append(5.0)
    assert state.timeout == 30.0
    state.completion_durations.clear()
    now = 0.0
    for _ in range(5):
        task = next_task(healthy(), state, now)
        now += 60.0
        handle_report(report_for(task, "w1", now), state)
    assert state.timeout == 60.0


ops = st.lists(st.tuples(st.sampled_from(["next", "report", "reassign", "tick"]), st.integers(0, 3)),
               max_size=60)


@settings(max_examples=60, deadline=None)
@given(ops)
def test_hosts_are_conserved(sequence):
    state = SchedulerState.from_hosts(HOSTS[:40], chunk_size=7, bootstrap_t=50.0)
    total = 40
    now = 0.0
    for op, arg in sequence:
        wid = f"w{arg}"
        if op == "next":
            next_task(healthy(wid), state, now)
        elif op == "report":
            for tid in sorted(state.in_flight):
                task = state.tasks[tid]
                if task.worker_id == wid:
                    handle_report(report_for(task, wid, now), state)
                    break
        elif op == "reassign":
            reassign_stragglers(now, state)
        else:
            now += 20.0 * (arg + 1)
        p, f, c = state.host_counts()
        assert p + f + c == total
        assert not (set(state.pending) & state.in_flight or state.in_flight & state.completed
                    or set(state.pending) & state.completed)
        assert len(state.pending) == len(set(state.pending))


def test_state_round_trip():
    state = SchedulerState.from_hosts(HOSTS)
    next_task(healthy(), state, 1.0)
    reassign_stragglers(1000.0, state)
    doc = json.loads(json.dumps(state.to_dict()))
    assert SchedulerState.from_dict(doc) == state


# --- store ----------------------------------------------------------------

def test_store_recovers_and_drops_torn_line(tmp_path):
    store = ResultStore(tmp_path, snapshot_every=1000)
    state = store.open(HOSTS, 100)
    a = next_task(healthy("w1"), state, 0.0)
    b = next_task(healthy("w2"), state, 0.0)
    handle_report(report_for(a, "w1", 40.0), state)
    store.append_result(a.task_id, "w1", [{"host": h} for h in a.hosts], 40.0, 40.0)
    store._fh.write('{"schema_version": 1, "task_id": "t0000')
    store._fh.flush()
    # crash without snapshot: b is in flight, a only in the log
    recovered = ResultStore(tmp_path).open(HOSTS, 100)
    assert recovered.completed == {a.task_id}
    assert recovered.pending[0] == b.task_id and not recovered.in_flight
    assert recovered.completion_durations == [40.0]
    assert (tmp_path / "results.ndjson").read_text().endswith("\n")
    with pytest.raises(ValueError):
        ResultStore(tmp_path).open(HOSTS[:10], 100)


def test_store_requeues_in_flight_tasks_from_snapshot(tmp_path):
    store = ResultStore(tmp_path)
    state = store.open(HOSTS, 100)
    b = next_task(healthy("w2"), state, 5.0)
    store.snapshot(state)
    recovered = ResultStore(tmp_path).open(HOSTS, 100)
    assert recovered.pending[0] == b.task_id and not recovered.in_flight
    stale = recovered.history[b.task_id][-1]
    assert stale.worker_id == "w2" and stale.superseded and stale.issued_at == 5.0
    # the stale holder's late report is still accepted
    assert handle_report(report_for(b, "w2", 50.0), recovered) is ReportOutcome.ACCEPTED


# --- wire -----------------------------------------------------------------

def test_wire_round_trip_and_errors():
    msg = message("hello", "w1", health={"cpu_load_pct": 1.0})
    frame = encode(msg)
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4
    assert decode(frame[4:]) == msg and msg["protocol_version"] == PROTOCOL_VERSION
    with pytest.raises(WireError):
        message("shout", "w1")
    with pytest.raises(WireError):
        decode(b"not json")
    with pytest.raises(WireError):
        decode(json.dumps({"kind": "hello", "protocol_version": 99, "worker_id": "w"}).encode())
    with pytest.raises(WireError):
        decode(json.dumps({"kind": "hello", "protocol_version": 1}).encode())


def test_wire_stream_framing():
    async def go():
        reader = asyncio.StreamReader()
        reader.feed_data(encode(message("bye", "w1", reason="done")))
        reader.feed_data(b"\x00\x00")
        reader.feed_eof()
        first = await recv(reader)
        with pytest.raises(WireError):
            await recv(reader)
        empty = asyncio.StreamReader()
        empty.feed_eof()
        return first, await recv(empty)

    first, eof = asyncio.run(go())
    assert first["reason"] == "done" and eof is None


# --- cluster --------------------------------------------------------------

def test_small_cluster_with_faults(tmp_path):
    result = \
        simulate(n_hosts=120, n_workers=3, out_dir=tmp_path, seed=3)
    assert result.exactly_once and result.lost == 0
    assert any(stale == "w0" for _, _, stale in result.reassigned)
