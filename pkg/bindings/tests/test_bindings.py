from __future__ import annotations

import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest

import churncomm
from churncomm.sharedstate import simplehash
from churncomm_bindings import BoundCommunicator, UsageError, connect

sys.path.insert(0, str(Path(__file__).resolve().parents[2] / "tests"))
from harness import LocalCluster, grow_world, lockstep  # noqa: E402


@pytest.fixture()
def cluster():
    with LocalCluster() as c:
        yield c


def _bound(cluster, **kw) -> BoundCommunicator:
    comm = cluster.spawn(**kw)
    return BoundCommunicator(comm, debug=True)


def test_single_peer_avg_unchanged(cluster):
    bound = _bound(cluster)
    bound.update_topology()
    buf = np.array([42.5], dtype=np.float32)
    result = bound.all_reduce(buf, tag=1, op="avg")
    assert result.completed
    assert buf[0] == 42.5


def test_two_bound_peers_sum(cluster):
    a, b = _bound(cluster), _bound(cluster)
    a.update_topology()
    grow_world([a._comm, b._comm], 2)
    bufs = {a.peer_id: np.array([1.0], dtype=np.float32), b.peer_id: np.array([2.0], dtype=np.float32)}

    def step(i, comm):
        bound = a if comm is a._comm else b
        return bound.all_reduce(bufs[bound.peer_id], tag=1, op="sum")

    results = lockstep([a._comm, b._comm], step)
    assert all(r.completed for r in results)
    assert bufs[a.peer_id][0] == bufs[b.peer_id][0] == 3.0


def test_memoryview_and_bytearray_inputs(cluster):
    bound = _bound(cluster)
    bound.update_topology()
    raw = bytearray(np.arange(8, dtype=np.float32).tobytes())
    view = memoryview(raw).cast("f")
    result = bound.all_reduce(view, tag=2, op="sum")
    assert result.completed
    assert np.frombuffer(raw, dtype=np.float32)[3] == 3.0


def test_non_contiguous_view_rejected_before_native_call(cluster):
    bound = _bound(cluster)
    bound.update_topology()
    arr = np.arange(16, dtype=np.float32)[::2]
    attempts_before = bound._comm.stats.reduce_attempts
    with pytest.raises(UsageError):
        bound.all_reduce_async(arr, tag=3)
    assert bound._comm.stats.reduce_attempts == attempts_before


def test_readonly_view_rejected(cluster):
    bound = _bound(cluster)
    bound.update_topology()
    arr = np.arange(4, dtype=np.float32)
    arr.setflags(write=False)
    with pytest.raises(UsageError):
        bound.all_reduce_async(arr, tag=3)


def test_unknown_strategy_string_is_usage_error(cluster):
    bound = _bound(cluster)
    bound.update_topology()
    bound.register_state("w", np.zeros(4, dtype=np.float32))
    with pytest.raises(UsageError):
        bound.sync_shared_state("mostPopular")


def test_identical_entries_sync_in_sync_zero_payload(cluster):
    a, b = _bound(cluster), _bound(cluster)
    a.update_topology()
    grow_world([a._comm, b._comm], 2)
    for bound in (a, b):
        bound.register_state("w", np.arange(32, dtype=np.float32), revision=1)

    results = lockstep(
        [a._comm, b._comm],
        lambda i, c: (a if c is a._comm else b).sync_shared_state("enforcePopular"),
    )
    assert all(r.status.value == "in_sync" for r in results)
    assert a._comm.stats.sync_payload_rx == 0
    assert b._comm.stats.sync_payload_rx == 0


def test_diverged_entry_mutated_in_place_to_donor_bytes(cluster):
    a, b = _bound(cluster), _bound(cluster)
    a.update_topology()
    grow_world([a._comm, b._comm], 2)
    donor_bytes = (np.arange(64, dtype=np.float32) * 0.25).tobytes()
    views = {
        a.peer_id: np.frombuffer(bytearray(donor_bytes), dtype=np.float32),
        b.peer_id: np.zeros(64, dtype=np.float32),
    }
    a.register_state("w", views[a.peer_id], revision=5)
    b.register_state("w", views[b.peer_id], revision=0)

    results = lockstep(
        [a._comm, b._comm],
        lambda i, c: (a if c is a._comm else b).sync_shared_state("enforcePopular"),
    )
    assert views[b.peer_id].tobytes() == donor_bytes
    assert b.state_revision("w") == 5
    statuses = {r.status.value for r in results}
    assert statuses == {"in_sync", "updated"}


def test_error_mapping_preserves_native_error(cluster):
    bound = _bound(cluster)
    bound.update_topology()
    buf = np.ones(4, dtype=np.float32)
    h = bound.all_reduce_async(buf, tag=9)
    bound.await_async_reduce(h)
    with pytest.raises(UsageError) as info:
        bound.await_async_reduce(h)
    assert isinstance(info.value.native, churncomm.UsageError)


# -- cross-boundary equivalence (secondary acceptance) -------------------------


def _native_w2_sum_scenario(cluster, seed: int) -> list[int]:
    comms = [cluster.spawn() for _ in range(2)]
    comms[0].update_topology()
    grow_world(comms, 2)
    digests = []
    rng = np.random.default_rng(seed)
    shards = {c.peer_id: rng.normal(0, 1, 256).astype(np.float32) for c in comms}

    def step(i, comm):
        buf = shards[comm.peer_id].copy()
        for t in range(5):
            r = comm.all_reduce(buf, tag=1, op=churncomm.ReduceOp.SUM)
            assert r.completed
        return simplehash(buf)

    return lockstep(comms, step)


def _bound_w2_sum_scenario(cluster, seed: int) -> list[int]:
    bounds = [_bound(cluster) for _ in range(2)]
    bounds[0].update_topology()
    grow_world([b._comm for b in bounds], 2)
    rng = np.random.default_rng(seed)
    shards = {b.peer_id: rng.normal(0, 1, 256).astype(np.float32) for b in bounds}

    def step(i, comm):
        bound = bounds[0] if comm is bounds[0]._comm else bounds[1]
        buf = shards[bound.peer_id].copy()
        for t in range(5):
            r = bound.all_reduce(buf, tag=1, op="sum")
            assert r.completed
        return simplehash(buf)

    return lockstep([b._comm for b in bounds], step)


def test_acceptance_w2_sum_digests_match_native():
    with LocalCluster() as c1:
        native = _native_w2_sum_scenario(c1, seed=505)
    with LocalCluster() as c2:
        bound = _bound_w2_sum_scenario(c2, seed=505)
    assert set(native) == set(bound)
    assert len(set(native)) == 1
    print(f"[ACCEPTANCE] bindings W=2 sum equivalence: PASS digest={native[0]:016x}")


def _churn_scenario(make_peer, spawn_second, seed: int, stop_rev: int = 14) -> list[tuple[int, int]]:
    """One veteran trains; a newcomer joins mid-run; both stop at the same
    group revision. Returns the veteran's per-revision digest log.
    make_peer/spawn_second abstract over native and bound surfaces."""
    veteran = make_peer()
    veteran["update"]()
    rng = np.random.default_rng(seed)
    state = rng.normal(0, 1, 128).astype(np.float32)
    veteran["register"](state, 0)
    log = []
    joined = {}
    allow_join = threading.Event()
    registered = threading.Event()

    def train(peer, arr, until: int) -> None:
        # the state sync pulls a fresh joiner up to the group revision, so
        # a revision-based stop is uniform across both peers
        for _ in range(200):
            if peer["revision"]() >= until:
                return
            peer["update"]()
            peer["sync"]()
            buf = arr.copy()
            r = peer["reduce"](buf, 1)
            if not r.completed:
                continue
            arr -= np.float32(0.01) * buf
            peer["advance"]()
            if peer is veteran:
                log.append((peer["revision"](), simplehash(arr)))
        raise AssertionError("never reached the stop revision")

    def run_newcomer():
        allow_join.wait(30)
        peer = spawn_second()  # connect registers with the master
        registered.set()
        fresh = np.zeros(128, dtype=np.float32)
        peer["register"](fresh, 0)
        train(peer, fresh, stop_rev)
        joined["done"] = True

    worker = threading.Thread(target=run_newcomer)
    worker.start()
    train(veteran, state, 3)  # a few solo revisions before the join
    allow_join.set()
    assert registered.wait(30)
    train(veteran, state, stop_rev)
    worker.join(timeout=120)
    assert joined.get("done")
    return log


def test_acceptance_churn_digests_match_native():
    seed = 606

    def native_factories(cluster):
        def make(comm):
            entry_box = {}

            def register(arr, rev):
                entry_box["entry"] = churncomm.SharedStateEntry(
                    "w", churncomm.wire.DType.F32, arr, revision=rev
                )

            return {
                "update": comm.update_topology,
                "register": register,
                "sync": lambda: comm.sync_shared_state([entry_box["entry"]]),
                "reduce": lambda buf, tag: comm.all_reduce(buf, tag, churncomm.ReduceOp.AVG),
                "advance": lambda: setattr(
                    entry_box["entry"], "revision", entry_box["entry"].revision + 1
                ),
                "revision": lambda: entry_box["entry"].revision,
            }

        return (lambda: make(cluster.spawn())), (lambda: make(cluster.spawn()))

    def bound_factories(cluster):
        def make(bound):
            def register(arr, rev):
                bound.register_state("w", arr, revision=rev)

            return {
                "update": bound.update_topology,
                "register": register,
                "sync": lambda: bound.sync_shared_state("enforcePopular"),
                "reduce": lambda buf, tag: bound.all_reduce(buf, tag, "avg"),
                "advance": bound.advance_state,
                "revision": lambda: bound.state_revision("w"),
            }

        return (lambda: make(_bound(cluster))), (lambda: make(_bound(cluster)))

    with LocalCluster() as c1:
        first, second = native_factories(c1)
        native_log = _churn_scenario(first, second, seed)
    with LocalCluster() as c2:
        first, second = bound_factories(c2)
        bound_log = _churn_scenario(first, second, seed)
    native_map = dict(native_log)
    bound_map = dict(bound_log)
    shared = set(native_map) & set(bound_map)
    assert shared, "no comparable revisions"
    assert all(native_map[r] == bound_map[r] for r in shared)
    print(f"[ACCEPTANCE] bindings churn equivalence: PASS revisions={sorted(shared)}")
