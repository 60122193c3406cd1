from __future__ import annotations

import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from churncomm import topology as topo
from churncomm.topology import (
    CostMatrix,
    ExactSolveDeclined,
    TopologyError,
    nearest_neighbor_tour,
    solve_exact,
    solve_quick,
    tour_cost,
)
from churncomm.wire import FrameConn, MessageType, ProbeRequest

from oracles import brute_force_tour, nearest_neighbor_cost


def _random_matrix(n: int, seed: int) -> CostMatrix:
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0.1, 10.0, size=(n, n))
    np.fill_diagonal(cost, 0.0)
    return CostMatrix(list(range(1, n + 1)), cost)


def test_two_nodes_single_tour():
    m = CostMatrix([5, 9], np.array([[0.0, 2.0], [3.0, 0.0]]))
    ring = solve_quick(m)
    assert sorted(ring.order) == [5, 9]
    assert ring.cost == 5.0
    exact = solve_exact(m)
    assert exact.cost == 5.0


def test_symmetric_four_node_known_optimum():
    # a square: perimeter 4, any diagonal costs 10
    c = np.array(
        [
            [0.0, 1.0, 10.0, 1.0],
            [1.0, 0.0, 1.0, 10.0],
            [10.0, 1.0, 0.0, 1.0],
            [1.0, 10.0, 1.0, 0.0],
        ]
    )
    m = CostMatrix([1, 2, 3, 4], c)
    _, best_cost = brute_force_tour(c)
    ring = solve_quick(m)
    assert ring.cost == pytest.approx(best_cost)
    assert ring.cost == pytest.approx(4.0)


def test_quick_never_worse_than_nearest_neighbor():
    for seed in range(30):
        m = _random_matrix(8, seed)
        ring = solve_quick(m)
        best_nn = min(nearest_neighbor_cost(m.cost, s) for s in range(8))
        assert ring.cost <= best_nn + 1e-9


def test_exact_matches_brute_force_n5():
    for seed in range(20):
        m = _random_matrix(5, 100 + seed)
        ring = solve_exact(m)
        _, best = brute_force_tour(m.cost)
        assert ring.cost == pytest.approx(best, abs=1e-9)


def test_exact_dominates_quick():
    for seed in range(15):
        m = _random_matrix(7, 200 + seed)
        assert solve_exact(m).cost <= solve_quick(m).cost + 1e-9


def test_exact_declines_large_worlds():
    m = _random_matrix(14, 3)
    with pytest.raises(ExactSolveDeclined):
        solve_exact(m)


def test_quick_requires_measured_matrix():
    m = CostMatrix.empty([1, 2, 3])
    with pytest.raises(TopologyError):
        solve_quick(m)
    with pytest.raises(TopologyError):
        solve_quick(CostMatrix([1], np.zeros((1, 1))))


def test_tours_are_valid_permutations():
    for seed in range(10):
        m = _random_matrix(9, 300 + seed)
        ring = solve_quick(m)
        assert sorted(ring.order) == m.ids
        exact = solve_exact(m)
        assert sorted(exact.order) == m.ids


def test_quick_deterministic_and_canonical():
    m = _random_matrix(8, 77)
    a = solve_quick(m)
    b = solve_quick(m)
    assert a.order == b.order
    assert a.order[0] == min(m.ids)


@given(n=st.integers(3, 8), seed=st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_monotone_pipeline_property(n, seed):
    m = _random_matrix(n, seed)
    nn = min(nearest_neighbor_cost(m.cost, s) for s in range(n))
    quick = solve_quick(m).cost
    exact = solve_exact(m).cost
    assert exact <= quick + 1e-9 <= nn + 2e-9
    _, brute = brute_force_tour(m.cost)
    assert exact == pytest.approx(brute, abs=1e-9)


def test_nearest_neighbor_tie_break_lowest_index():
    c = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    assert nearest_neighbor_tour(c, 0) == [0, 1, 2]


def test_tour_cost_definition():
    c = np.arange(9, dtype=float).reshape(3, 3)
    assert tour_cost(c, [0, 1, 2]) == c[0, 1] + c[1, 2] + c[2, 0]


# -- bandwidth probes ---------------------------------------------------------


def _probe_pair():
    server = socket.create_server(("127.0.0.1", 0))
    port = server.getsockname()[1]
    results = {}

    def serve():
        sock, _ = server.accept()
        conn = FrameConn(sock)
        try:
            msg_type, payload = conn.recv_frame(timeout=10.0)
            assert msg_type == MessageType.BANDWIDTH_PROBE_REQUEST
            topo.serve_probe(conn, ProbeRequest.unpack(bytes(payload)))
        except Exception:
            pass
        finally:
            conn.close()

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    client = FrameConn(socket.create_connection(("127.0.0.1", port)))
    return server, client, t


def test_loopback_probe_exceeds_floor():
    server, client, t = _probe_pair()
    scratch = memoryview(bytearray(1 << 20))
    rate = topo.run_probe(client, 4 * 1024 * 1024, scratch)
    t.join(timeout=10)
    client.close()
    server.close()
    assert rate > 100e6, f"loopback measured only {rate/1e6:.1f} MB/s"


def test_probe_rejects_small_payload():
    server, client, t = _probe_pair()
    with pytest.raises(TopologyError):
        topo.run_probe(client, 1024, memoryview(bytearray(1024)))
    client.close()
    server.close()


def test_repeated_measurement_keeps_most_recent():
    from churncomm.master import EvFrame, EvJoin, MasterConfig, MasterCore, _TopoPhase
    from churncomm import wire as w

    core = MasterCore(MasterConfig(probe_bytes=1 << 20))
    for i in (1, 2):
        core.handle(EvJoin(i, w.ClientHello(1, "127.0.0.1", 9000 + i)))
    core.matrix[(1, 2)] = 99.0
    # a fresh report overwrites the cached pair
    core.phase = _TopoPhase(stage="probe", admitted=set(), expected_reports={1})
    core.handle(EvFrame(1, MessageType.BANDWIDTH_PROBE_REPORT, w.ProbeReport([(2, True, 2e6)])))
    assert core.matrix[(1, 2)] == pytest.approx((1 << 20) / 2e6)
