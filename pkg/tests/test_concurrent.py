from __future__ import annotations

import numpy as np
import pytest

from churncomm.collective import ReduceOp

from harness import LocalCluster, grow_world, lockstep
from oracles import ring_allreduce_oracle


def _expected(comms, inputs, op):
    ring = comms[0].view.ring
    by_peer = {c.peer_id: inputs[i] for i, c in enumerate(comms)}
    return ring, ring_allreduce_oracle([by_peer[p] for p in ring], op)


def test_eight_tags_use_distinct_pool_connections():
    with LocalCluster(pool_size=8) as cluster:
        comms = [cluster.spawn(pool_size=8) for _ in range(2)]
        comms[0].update_topology()
        grow_world(comms, 2)
        n = 4096
        rng = np.random.default_rng(1)
        inputs = {i: [rng.normal(0, 1, n).astype(np.float32) for _ in range(2)] for i in range(8)}
        bufs = {i: [x.copy() for x in inputs[i]] for i in range(8)}

        def step(p, comm):
            handles = [comm.all_reduce_async(bufs[tag][p], tag=tag) for tag in range(8)]
            return [comm.await_async_reduce(h) for h in handles]

        results = lockstep(comms, step)
        assert all(r.completed for rs in results for r in rs)
        # each tag landed on its own pool slot and produced the oracle sum
        used_slots = {tag % 8 for tag in range(8)}
        assert len(used_slots) == 8
        for tag in range(8):
            ring, expected = _expected(comms, inputs[tag], ReduceOp.SUM)
            got = {c.peer_id: bufs[tag][i] for i, c in enumerate(comms)}
            for rank, peer in enumerate(ring):
                assert got[peer].tobytes() == expected[rank].tobytes()
        # distinct connections actually carried traffic
        for comm in comms:
            touched = {
                (peer, slot)
                for (peer, slot), conn in comm.p2p.outbound.items()
                if conn.tx_bytes > 0
            }
            assert len({slot for _, slot in touched}) == 8


def test_two_tags_pool_one_serialize_and_match_oracle():
    with LocalCluster(pool_size=1) as cluster:
        comms = [cluster.spawn(pool_size=1) for _ in range(2)]
        comms[0].update_topology()
        grow_world(comms, 2)
        rng = np.random.default_rng(5)
        inputs = {t: [rng.normal(0, 1, 2048).astype(np.float32) for _ in range(2)] for t in (0, 1)}
        bufs = {t: [x.copy() for x in inputs[t]] for t in (0, 1)}

        def step(p, comm):
            h0 = comm.all_reduce_async(bufs[0][p], tag=0)
            h1 = comm.all_reduce_async(bufs[1][p], tag=1)
            return comm.await_async_reduce(h0), comm.await_async_reduce(h1)

        results = lockstep(comms, step)
        assert all(r.completed for rs in results for r in rs)
        for t in (0, 1):
            ring, expected = _expected(comms, inputs[t], ReduceOp.SUM)
            got = {c.peer_id: bufs[t][i] for i, c in enumerate(comms)}
            for rank, peer in enumerate(ring):
                assert got[peer].tobytes() == expected[rank].tobytes()


def test_one_tag_aborts_other_completes():
    with LocalCluster(pool_size=2) as cluster:
        comms = [cluster.spawn(pool_size=2) for _ in range(2)]
        comms[0].update_topology()
        grow_world(comms, 2)
        rng = np.random.default_rng(9)
        inputs = {t: [rng.normal(0, 1, 65536).astype(np.float32) for _ in range(2)] for t in (0, 1)}
        bufs = {t: [x.copy() for x in inputs[t]] for t in (0, 1)}

        # tag 1 runs on slot 1; fail only that slot's receive on peer 0
        import threading as _threading

        def fault(side, index):
            on_slot_one = _threading.current_thread().name.endswith("-1")
            if on_slot_one and side == "rx" and index == 1:
                raise IOError("injected slot fault")

        comms[0].config.fault_hook = fault

        def step(p, comm):
            h0 = comm.all_reduce_async(bufs[0][p], tag=0)
            h1 = comm.all_reduce_async(bufs[1][p], tag=1)
            return comm.await_async_reduce(h0, timeout=30), comm.await_async_reduce(h1, timeout=30)

        results = lockstep(comms, step)
        # tag 1 aborted on at least the injecting peer; buffers restored
        statuses = {(p, t): results[p][t].completed for p in (0, 1) for t in (0, 1)}
        assert not statuses[(0, 1)]
        for p in (0, 1):
            if not statuses[(p, 1)]:
                assert bufs[1][p].tobytes() == inputs[1][p].tobytes()
        # tag 0 completed everywhere with the right result
        assert statuses[(0, 0)] and statuses[(1, 0)]
        ring, expected = _expected(comms, inputs[0], ReduceOp.SUM)
        got = {c.peer_id: bufs[0][i] for i, c in enumerate(comms)}
        for rank, peer in enumerate(ring):
            assert got[peer].tobytes() == expected[rank].tobytes()
