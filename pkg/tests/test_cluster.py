from __future__ import annotations

import socket
import threading
import time

import numpy as np
import pytest

from churncomm import wire
from churncomm.client import ConnectError, MasterLostError, UsageError
from churncomm.collective import ReduceOp
from churncomm.sharedstate import SharedStateEntry, SyncStatus, simplehash
from churncomm.wire import DType, SyncStrategy

from harness import LocalCluster, grow_world, lockstep
from oracles import ring_allreduce_oracle


@pytest.fixture()
def cluster():
    with LocalCluster() as c:
        yield c


def test_connect_and_solo_accept(cluster):
    comm = cluster.spawn()
    assert comm.peer_id == 1
    assert not comm.view.accepted
    result = comm.update_topology()
    assert result.accepted
    assert result.world == 1
    assert comm.get_world_size() == 1


def test_connect_wrong_port_fails_fast():
    sink = socket.create_server(("127.0.0.1", 0))
    port = sink.getsockname()[1]
    sink.close()
    with pytest.raises(ConnectError):
        from churncomm.client import connect

        connect(f"127.0.0.1:{port}", connect_timeout=2.0)


def test_version_mismatch_rejected(cluster):
    sock = socket.create_connection(("127.0.0.1", cluster.server.port))
    conn = wire.FrameConn(sock)
    conn.send_message(
        wire.MessageType.JOIN_REQUEST, wire.ClientHello(99, "127.0.0.1", 1)
    )
    msg_type, payload = conn.recv_frame(timeout=5.0)
    assert msg_type == wire.MessageType.JOIN_ASSIGN
    assert wire.JoinAssign.unpack(bytes(payload)).status == wire.JoinStatus.VERSION_MISMATCH
    conn.close()


def test_two_peers_grow_world(cluster):
    a = cluster.spawn()
    a.update_topology()
    b = cluster.spawn()
    grow_world([a, b], 2)
    assert a.get_world_size() == b.get_world_size() == 2
    assert a.view.ring == b.view.ring


def test_reduce_two_peers_hand_example(cluster):
    a = cluster.spawn()
    a.update_topology()
    b = cluster.spawn()
    grow_world([a, b], 2)
    bufs = [
        np.array([1.0, 2.0, 3.0], dtype=np.float32),
        np.array([10.0, 20.0, 30.0], dtype=np.float32),
    ]

    def step(i, comm):
        return comm.all_reduce(bufs[i], tag=1, op=ReduceOp.SUM)

    results = lockstep([a, b], step)
    assert all(r.completed for r in results)
    for buf in bufs:
        assert list(buf) == [11.0, 22.0, 33.0]


def test_reduce_matches_oracle_three_peers(cluster):
    comms = [cluster.spawn() for _ in range(3)]
    comms[0].update_topology()
    grow_world(comms, 3)
    rng = np.random.default_rng(42)
    inputs = [rng.normal(0, 5, 1000).astype(np.float32) for _ in range(3)]
    bufs = [x.copy() for x in inputs]

    def step(i, comm):
        return comm.all_reduce(bufs[i], tag=3, op=ReduceOp.AVG)

    results = lockstep(comms, step)
    assert all(r.completed for r in results)
    # ring order is the committed one, not necessarily join order
    ring = comms[0].view.ring
    by_peer = {c.peer_id: inputs[i] for i, c in enumerate(comms)}
    expected = ring_allreduce_oracle([by_peer[p] for p in ring], ReduceOp.AVG)
    got_by_peer = {c.peer_id: bufs[i] for i, c in enumerate(comms)}
    for rank, p in enumerate(ring):
        assert got_by_peer[p].tobytes() == expected[rank].tobytes()


def test_tag_reuse_and_double_enqueue(cluster):
    a = cluster.spawn()
    a.update_topology()
    buf = np.ones(8, dtype=np.float32)
    h = a.all_reduce_async(buf, tag=7, op=ReduceOp.SUM)
    with pytest.raises(UsageError):
        a.all_reduce_async(buf, tag=7, op=ReduceOp.SUM)
    assert a.await_async_reduce(h).completed
    with pytest.raises(UsageError):
        a.await_async_reduce(h)
    # tag free again after resolution
    assert a.all_reduce(buf, tag=7, op=ReduceOp.SUM).completed


def test_major_op_rejected_while_handle_pending(cluster):
    a = cluster.spawn()
    a.update_topology()
    b = cluster.spawn()
    grow_world([a, b], 2)

    bufs = [np.ones(200_000, dtype=np.float32) for _ in range(2)]

    def step(i, comm):
        h = comm.all_reduce_async(bufs[i], tag=9)
        if i == 0:
            with pytest.raises(UsageError):
                comm.update_topology()
        return comm.await_async_reduce(h)

    results = lockstep([a, b], step)
    assert all(r.completed for r in results)


def test_sync_identical_is_noop(cluster):
    a = cluster.spawn()
    a.update_topology()
    b = cluster.spawn()
    grow_world([a, b], 2)

    def step(i, comm):
        entry = SharedStateEntry("w", DType.F32, np.arange(64, dtype=np.float32), revision=1)
        return comm.sync_shared_state([entry])

    outcomes = lockstep([a, b], step)
    assert all(o.status is SyncStatus.IN_SYNC for o in outcomes)
    assert a.stats.sync_payload_rx == 0
    assert b.stats.sync_payload_rx == 0


def test_sync_newcomer_receives_all(cluster):
    a = cluster.spawn()
    a.update_topology()
    b = cluster.spawn()
    grow_world([a, b], 2)
    veteran = np.arange(256, dtype=np.float32) * 0.5
    fresh = np.zeros(256, dtype=np.float32)
    entries = {
        a.peer_id: SharedStateEntry("w", DType.F32, veteran.copy(), revision=7),
        b.peer_id: SharedStateEntry("w", DType.F32, fresh.copy(), revision=0),
    }

    def step(i, comm):
        return comm.sync_shared_state([entries[comm.peer_id]])

    outcomes = lockstep([a, b], step)
    by_peer = {c.peer_id: o for c, o in zip([a, b], outcomes)}
    assert by_peer[a.peer_id].status is SyncStatus.IN_SYNC
    assert by_peer[b.peer_id].status is SyncStatus.UPDATED
    assert by_peer[b.peer_id].updated_keys == ["w"]
    got = entries[b.peer_id]
    assert np.frombuffer(got.readonly_view(), dtype=np.float32).tobytes() == veteran.tobytes()
    assert got.revision == 7


def test_sync_send_only_veterans_beat_majority(cluster):
    comms = [cluster.spawn() for _ in range(3)]
    comms[0].update_topology()
    grow_world(comms, 3)
    veteran_state = np.full(128, 3.25, dtype=np.float32)
    fresh_state = np.full(128, -1.0, dtype=np.float32)
    roles = {comms[0].peer_id: "veteran", comms[1].peer_id: "new", comms[2].peer_id: "new"}
    entries = {}

    def step(i, comm):
        if roles[comm.peer_id] == "veteran":
            entry = SharedStateEntry("w", DType.F32, veteran_state.copy(), revision=4)
            strategy = SyncStrategy.SEND_ONLY
        else:
            entry = SharedStateEntry("w", DType.F32, fresh_state.copy(), revision=4)
            strategy = SyncStrategy.RECEIVE_ONLY
        entries[comm.peer_id] = entry
        return comm.sync_shared_state([entry], strategy)

    outcomes = lockstep(comms, step)
    for comm in comms:
        got = np.frombuffer(entries[comm.peer_id].readonly_view(), dtype=np.float32)
        assert got.tobytes() == veteran_state.tobytes()
    statuses = {roles[c.peer_id]: o.status for c, o in zip(comms, outcomes)}
    assert statuses["veteran"] is SyncStatus.IN_SYNC


def test_sync_key_mismatch_errors_everywhere(cluster):
    a = cluster.spawn()
    a.update_topology()
    b = cluster.spawn()
    grow_world([a, b], 2)

    def step(i, comm):
        key = "w" if i == 0 else "different"
        entry = SharedStateEntry(key, DType.F32, np.zeros(16, dtype=np.float32))
        return comm.sync_shared_state([entry])

    outcomes = lockstep([a, b], step)
    assert all(o.status is SyncStatus.ERROR for o in outcomes)


def test_pending_peers_uniform_and_overlappable(cluster):
    comms = [cluster.spawn() for _ in range(2)]
    comms[0].update_topology()
    grow_world(comms, 2)
    answers = lockstep(comms, lambda i, c: c.are_peers_pending())
    assert answers == [False, False]
    cluster.spawn()  # registers only

    bufs = [np.ones(400_000, dtype=np.float32) for _ in range(2)]

    def step(i, comm):
        h = comm.all_reduce_async(bufs[i], tag=2)
        pending = comm.are_peers_pending()  # overlaps the running collective
        r = comm.await_async_reduce(h)
        return pending, r.completed

    results = lockstep(comms, step)
    assert all(p is True and done for p, done in results)


def test_world_size_uniform_after_growth(cluster):
    comms = [cluster.spawn() for _ in range(2)]
    comms[0].update_topology()
    grow_world(comms, 2)
    c3 = cluster.spawn()
    comms.append(c3)
    grow_world(comms, 3)
    assert {c.get_world_size() for c in comms} == {3}
    rings = {tuple(c.view.ring) for c in comms}
    assert len(rings) == 1


def test_kill_mid_reduce_survivors_restore_and_retry(cluster):
    comms = [cluster.spawn() for _ in range(3)]
    comms[0].update_topology()
    grow_world(comms, 3)
    rng = np.random.default_rng(7)
    inputs = [rng.normal(0, 1, 300_000).astype(np.float32) for _ in range(3)]
    bufs = [x.copy() for x in inputs]
    victim = 2

    def die_mid_stage(side, index):
        # the victim vanishes abruptly once its data phase is under way
        if side == "rx" and index == 2:
            comms[victim]._kill()
            raise IOError("process killed")

    comms[victim].config.fault_hook = die_mid_stage

    def step(i, comm):
        h = comm.all_reduce_async(bufs[i], tag=4)
        t0 = time.monotonic()
        r = comm.await_async_reduce(h, timeout=30.0)
        elapsed = time.monotonic() - t0
        return r, elapsed

    results = lockstep(comms, step, timeout=60)
    survivors = [i for i in range(3) if i != victim]
    for i in survivors:
        r, elapsed = results[i]
        assert not r.completed
        assert elapsed < 5.0, f"abort took {elapsed:.1f}s"
        assert bufs[i].tobytes() == inputs[i].tobytes(), "buffer not restored"
    # world shrank without an explicit topology call
    for i in survivors:
        assert comms[i].get_world_size() == 2

    # immediate retry with the same tag completes at W-1 semantics
    def retry(j, comm):
        i = survivors[j]
        return comm.all_reduce(bufs[i], tag=4, op=ReduceOp.SUM)

    retry_results = lockstep([comms[i] for i in survivors], retry)
    assert all(r.completed for r in retry_results)
    ring = comms[survivors[0]].view.ring
    by_peer = {comms[i].peer_id: inputs[i] for i in survivors}
    expected = ring_allreduce_oracle([by_peer[p] for p in ring], ReduceOp.SUM)
    got = {comms[i].peer_id: bufs[i] for i in survivors}
    for rank, p in enumerate(ring):
        assert got[p].tobytes() == expected[rank].tobytes()
    # lockstep recovery: the survivors observed the same sequence of
    # (operation, outcome) events through the failure and the retry
    logs = [comms[i].event_log[-2:] for i in survivors]
    assert logs[0] == logs[1] == [("reduce", "tag=4 aborted"), ("reduce", "tag=4 completed")]


def test_master_restart_old_peer_errors_new_epoch(cluster):
    comm = cluster.spawn()
    comm.update_topology()
    old_epoch = comm.run_epoch
    port = cluster.server.port
    cluster.server.stop()
    time.sleep(0.1)
    with pytest.raises(MasterLostError):
        comm.update_topology()
        comm.update_topology()  # first call may consume the in-flight close
    from churncomm.master import MasterServer

    for attempt in range(40):
        try:
            cluster.server = MasterServer("127.0.0.1", port, cluster.master_config).start()
            break
        except OSError:
            time.sleep(0.25)  # linger until the old listener's port frees up
    else:
        pytest.fail("could not rebind master port")
    fresh = cluster.spawn()
    assert fresh.run_epoch != old_epoch
    assert fresh.update_topology().accepted


def test_fifty_concurrent_connects(cluster):
    from churncomm.client import connect
    from churncomm.config import ClientConfig

    comms = [None] * 50
    errors = []

    def join(i):
        try:
            cfg = ClientConfig(master_addr=cluster.addr, pool_size=1)
            comms[i] = connect(config=cfg)
        except BaseException as e:
            errors.append(e)

    threads = [threading.Thread(target=join, args=(i,)) for i in range(50)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
        assert not t.is_alive(), "connect hung"
    assert not errors
    ids = {c.peer_id for c in comms}
    assert len(ids) == 50
    for c in comms:
        c.close()
