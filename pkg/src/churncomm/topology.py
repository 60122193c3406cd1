"""Ring-order optimization from directed bandwidth measurements.

The master keeps a directed cost matrix (seconds to move the probe
payload from i to j) and solves an asymmetric traveling-salesman problem
over it: a time-boxed quick pass (multi-start nearest-neighbor followed
by Or-opt segment relocation, which never reverses segments and is
therefore safe for asymmetric costs) plus an optional exact background
solve (Held-Karp) for small worlds. Objective: sum of directed edge
costs around the cycle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .wire import ChunkHeader, FrameConn, MessageType, ProbeRequest, ChunkAck, decode_body

UNMEASURED = float("inf")
EXACT_MAX_NODES = 13
_EPS = 1e-12


class TopologyError(Exception):
    pass


class ExactSolveDeclined(TopologyError):
    """World too large for the exact solver; the quick result stands."""


@dataclass
class CostMatrix:
    """Directed seconds-per-payload between accepted peers.

    cost[i][j] is the measured transfer time from ids[i] to ids[j];
    unmeasured pairs hold +inf and are rejected by the solvers.
    """

    ids: list[int]
    cost: np.ndarray

    @classmethod
    def empty(cls, ids: list[int]) -> "CostMatrix":
        n = len(ids)
        cost = np.full((n, n), UNMEASURED, dtype=np.float64)
        np.fill_diagonal(cost, 0.0)
        return cls(list(ids), cost)

    @property
    def n(self) -> int:
        return len(self.ids)

    def fully_measured(self) -> bool:
        off_diag = ~np.eye(self.n, dtype=bool)
        return bool(np.all(np.isfinite(self.cost[off_diag])))

    def to_json(self) -> dict:
        return {
            "ids": self.ids,
            "cost": [[None if not np.isfinite(c) else c for c in row] for row in self.cost],
        }


@dataclass
class RingTopology:
    """A Hamiltonian cycle over the accepted peers, plus its tour cost."""

    order: list[int]
    cost: float

    def canonical(self) -> "RingTopology":
        """Rotate so the smallest peer id comes first (deterministic form)."""
        if not self.order:
            return self
        k = self.order.index(min(self.order))
        return RingTopology(self.order[k:] + self.order[:k], self.cost)


def tour_cost(cost: np.ndarray, tour: list[int]) -> float:
    total = 0.0
    n = len(tour)
    for k in range(n):
        total += cost[tour[k], tour[(k + 1) % n]]
    return float(total)


def nearest_neighbor_tour(cost: np.ndarray, start: int) -> list[int]:
    """Greedy tour: repeatedly hop to the cheapest unvisited node
    (lowest index on ties)."""
    n = cost.shape[0]
    unvisited = list(range(n))
    unvisited.remove(start)
    tour = [start]
    here = start
    while unvisited:
        best = min(unvisited, key=lambda j: (cost[here, j], j))
        unvisited.remove(best)
        tour.append(best)
        here = best
    return tour


def _or_opt_pass(cost: np.ndarray, tour: list[int]) -> float:
    """One first-improvement sweep of segment relocations (lengths 1-3).

    Returns the total cost change (<= 0). Segments keep their direction,
    so the move is valid for asymmetric costs, and an accepted move never
    increases the cost.
    """
    n = len(tour)
    improved = 0.0
    for seg_len in (1, 2, 3):
        if seg_len >= n - 1:
            continue
        i = 0
        while i + seg_len <= n:
            pred = tour[i - 1]
            s0 = tour[i]
            s_last = tour[i + seg_len - 1]
            succ = tour[(i + seg_len) % n]
            gain_remove = cost[pred, succ] - cost[pred, s0] - cost[s_last, succ]
            rest = tour[i + seg_len :] + tour[:i] if i else tour[seg_len:]
            # rest is the reduced cycle written linearly starting at succ
            applied = False
            for j in range(len(rest) - 1):
                a, b = rest[j], rest[j + 1]
                delta = gain_remove + cost[a, s0] + cost[s_last, b] - cost[a, b]
                if delta < -_EPS:
                    segment = tour[i : i + seg_len]
                    new_tour = rest[: j + 1] + segment + rest[j + 1 :]
                    assert sorted(new_tour) == list(range(n))
                    new_cost_check = tour_cost(cost, new_tour)
                    old_cost_check = tour_cost(cost, tour)
                    assert new_cost_check <= old_cost_check + 1e-9
                    tour[:] = new_tour
                    improved += delta
                    applied = True
                    break
            if applied:
                i = 0
            else:
                i += 1
    return improved


def _require_solvable(matrix: CostMatrix, min_n: int = 2) -> None:
    if matrix.n < min_n:
        raise TopologyError(f"need at least {min_n} peers, have {matrix.n}")
    if not matrix.fully_measured():
        raise TopologyError("cost matrix has unmeasured pairs")


def solve_quick(matrix: CostMatrix, time_limit: float = 0.25) -> RingTopology:
    """Multi-start nearest-neighbor plus Or-opt, bounded by time_limit.

    Deterministic for a given matrix; never worse than the best plain
    nearest-neighbor tour.
    """
    _require_solvable(matrix)
    n = matrix.n
    cost = matrix.cost
    deadline = time.monotonic() + time_limit

    starts = sorted(
        range(n), key=lambda s: (tour_cost(cost, nearest_neighbor_tour(cost, s)), s)
    )
    best_tour = nearest_neighbor_tour(cost, starts[0])
    best_cost = tour_cost(cost, best_tour)

    for s in starts:
        tour = nearest_neighbor_tour(cost, s)
        while _or_opt_pass(cost, tour) < 0 and time.monotonic() < deadline:
            pass
        c = tour_cost(cost, tour)
        if c < best_cost - _EPS:
            best_cost = c
            best_tour = tour
        if time.monotonic() >= deadline:
            break

    order = [matrix.ids[i] for i in best_tour]
    return RingTopology(order, best_cost).canonical()


def solve_exact(matrix: CostMatrix) -> RingTopology:
    """Held-Karp dynamic program; globally optimal, n <= 13."""
    _require_solvable(matrix)
    n = matrix.n
    if n > EXACT_MAX_NODES:
        raise ExactSolveDeclined(f"{n} peers exceeds exact-solve budget of {EXACT_MAX_NODES}")
    cost = matrix.cost
    if n == 2:
        order = [matrix.ids[0], matrix.ids[1]]
        return RingTopology(order, float(cost[0, 1] + cost[1, 0])).canonical()

    size = 1 << (n - 1)  # subsets of {1..n-1}; node 0 is the fixed start
    inf = float("inf")
    dp = [[inf] * (n - 1) for _ in range(size)]
    parent = [[-1] * (n - 1) for _ in range(size)]
    for j in range(n - 1):
        dp[1 << j][j] = float(cost[0, j + 1])
    for mask in range(size):
        row = dp[mask]
        for j in range(n - 1):
            base = row[j]
            if base == inf or not (mask >> j) & 1:
                continue
            cj = cost[j + 1]
            for k in range(n - 1):
                if (mask >> k) & 1:
                    continue
                nxt = mask | (1 << k)
                cand = base + cj[k + 1]
                if cand < dp[nxt][k]:
                    dp[nxt][k] = cand
                    parent[nxt][k] = j
    full = size - 1
    best_j, best_cost = min(
        ((j, dp[full][j] + cost[j + 1, 0]) for j in range(n - 1)), key=lambda t: (t[1], t[0])
    )
    tour = [best_j]
    mask = full
    j = best_j
    while parent[mask][j] != -1:
        pj = parent[mask][j]
        mask ^= 1 << j
        tour.append(pj)
        j = pj
    tour.append(-1)  # start node
    tour = [t + 1 for t in reversed(tour)]
    order = [matrix.ids[i] for i in tour]
    return RingTopology(order, float(best_cost)).canonical()


# ---------------------------------------------------------------------------
# Bandwidth probing over an established p2p connection
# ---------------------------------------------------------------------------

PROBE_MIN_BYTES = 64 * 1024
_PROBE_CHUNK = 1 << 20


def run_probe(conn: FrameConn, payload_bytes: int, scratch: memoryview) -> float:
    """Timed one-directional transfer; returns throughput in bytes/second.

    The clock stops when the receiver acknowledges the full payload, so
    buffered-but-undelivered bytes do not inflate the measurement.
    """
    if payload_bytes < PROBE_MIN_BYTES:
        raise TopologyError(f"probe payload below {PROBE_MIN_BYTES} bytes")
    if len(scratch) < min(payload_bytes, _PROBE_CHUNK):
        raise TopologyError("probe scratch buffer too small")
    conn.send_message(MessageType.BANDWIDTH_PROBE_REQUEST, ProbeRequest(payload_bytes))
    start = time.perf_counter()
    sent = 0
    index = 0
    while sent < payload_bytes:
        n = min(_PROBE_CHUNK, payload_bytes - sent)
        header = ChunkHeader(tag=0, seq_nr=0, chunk_index=index, byte_offset=sent, byte_len=n)
        conn.send_frame(MessageType.CHUNK_DATA, header.pack(), scratch[:n])
        sent += n
        index += 1
    msg_type, payload = conn.recv_frame(timeout=60.0)
    if msg_type != MessageType.CHUNK_ACK:
        raise TopologyError(f"expected probe ack, got {msg_type.name}")
    elapsed = time.perf_counter() - start
    return payload_bytes / max(elapsed, 1e-9)


def serve_probe(conn: FrameConn, request: ProbeRequest) -> None:
    """Passive side of one probe: drain the payload, then acknowledge."""
    received = 0
    while received < request.payload_bytes:
        msg_type, payload = conn.recv_frame(timeout=60.0)
        if msg_type != MessageType.CHUNK_DATA:
            raise TopologyError(f"expected probe data, got {msg_type.name}")
        header, data = decode_body(msg_type, payload)
        received += len(data)
    conn.send_message(MessageType.CHUNK_ACK, ChunkAck(received))
