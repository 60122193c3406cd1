"""The coordinator: tracks peer membership, tallies unanimous votes,
commits group state transitions, propagates aborts, and orchestrates
topology updates and shared-state sync plans.

The master never touches payload data. It is a single logical decision
thread: per-peer socket readers deliver events into one queue, and all
state mutation happens in the state-machine thread, which makes the
finite state machine auditable (every transition lands in an in-memory
log and as a JSON line on stderr).

Group rule: at most one major operation (accepting peers, shared-state
sync, or the collective ensemble) is active at a time; multiple tagged
collectives may run concurrently inside the collective state, each
advancing only by unanimous vote.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import sys
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from . import topology as topo
from . import wire
from .wire import (
    AbortNotify,
    AbortScope,
    CastPhase,
    ClientHello,
    CollectiveCompleteCommit,
    CollectiveInitCommit,
    FetchItem,
    JoinAssign,
    JoinStatus,
    MessageType,
    PeerAddr,
    ProbeRequest,
    SharedStatePlan,
    SyncOutcome,
    SyncResult,
    SyncStrategy,
    TopologyAssign,
    TopologyConnect,
    VoteKind,
)

log = logging.getLogger("churncomm.master")


class PeerPhase(Enum):
    REGISTERED = "registered"
    ACCEPTED = "accepted"


class ConnState(Enum):
    IDLE = "idle"
    VOTE_ACCEPT_NEW_PEERS = "vote_accept_new_peers"
    CONNECTING_P2P = "connecting_p2p"
    OPTIMIZING_TOPOLOGY = "optimizing_topology"
    SYNC_SHARED_STATE = "sync_shared_state"
    COLLECTIVE_COMMS_RUNNING = "collective_comms_running"


class TagPhase(Enum):
    VOTE_INITIATE = "vote_initiate"
    PERFORM = "perform"
    VOTE_COMPLETE = "vote_complete"


@dataclass
class PeerRecord:
    peer_id: int
    phase: PeerPhase
    host: str
    port: int
    last_seen: float
    topo_vote_seq: int = 0  # nonzero while a topology vote is outstanding


@dataclass
class VoteTally:
    """One unanimous-consent decision: commit only when every expected
    voter said yes; any no or voter loss aborts."""

    transition_id: int
    expected: set[int]
    received: dict[int, bool] = field(default_factory=dict)

    class Result(Enum):
        PENDING = "pending"
        COMMIT = "commit"
        ABORT = "abort"

    def cast(self, peer_id: int, yes: bool) -> "VoteTally.Result":
        if peer_id not in self.expected:
            raise wire.ProtocolError(f"vote from unexpected peer {peer_id}")
        if peer_id in self.received:
            raise wire.ProtocolError(f"duplicate vote from peer {peer_id}")
        self.received[peer_id] = yes
        return self.result()

    def drop_voter(self, peer_id: int) -> "VoteTally.Result":
        self.expected.discard(peer_id)
        self.received.pop(peer_id, None)
        return VoteTally.Result.ABORT  # voter loss aborts the transition

    def result(self) -> "VoteTally.Result":
        if any(not yes for yes in self.received.values()):
            return VoteTally.Result.ABORT
        if set(self.received) == self.expected:
            return VoteTally.Result.COMMIT
        return VoteTally.Result.PENDING


@dataclass
class TagState:
    tag: int
    phase: TagPhase = TagPhase.VOTE_INITIATE
    attempts: int = 0
    seq_nr: int = 0
    params: tuple | None = None  # (count, dtype, op, quantize) agreed at init
    init_votes: dict[int, tuple] = field(default_factory=dict)
    tally: "VoteTally | None" = None
    participants: set[int] = field(default_factory=set)
    traffic: dict[int, tuple] = field(default_factory=dict)

    def complete_tally(self, core: "MasterCore") -> "VoteTally":
        if self.tally is None:
            self.tally = VoteTally(self.seq_nr, set(self.participants))
        return self.tally


@dataclass
class _TopoPhase:
    stage: str  # "connect" | "probe"
    admitted: set[int]
    rejected: set[int] = field(default_factory=set)
    expected_casts: set[int] = field(default_factory=set)
    cast_ok: dict[int, bool] = field(default_factory=dict)
    expected_reports: set[int] = field(default_factory=set)
    deadline: float = 0.0


@dataclass
class _SyncPhase:
    reports: dict[int, wire.SharedStateReport]
    expected_done: set[int] = field(default_factory=set)
    done_digests: dict[int, list] = field(default_factory=dict)
    fetch_keys: dict[int, list] = field(default_factory=dict)
    donors: set[int] = field(default_factory=set)
    deadline: float = 0.0


# -- events into the core ----------------------------------------------------


@dataclass
class EvJoin:
    conn_key: int
    hello: ClientHello


@dataclass
class EvFrame:
    peer_id: int
    msg_type: MessageType
    body: object


@dataclass
class EvPeerLost:
    peer_id: int
    reason: str


@dataclass
class EvMoonshot:
    epoch: int
    ring: topo.RingTopology


@dataclass
class EvTick:
    now: float


# -- actions out of the core -------------------------------------------------


@dataclass
class Send:
    peer_id: int
    msg_type: MessageType
    body: object


@dataclass
class AssignPeerId:
    conn_key: int
    peer_id: int
    body: JoinAssign


@dataclass
class Kick:
    peer_id: int
    reason: str


@dataclass
class StartMoonshot:
    epoch: int
    matrix: topo.CostMatrix


class MasterConfig:
    def __init__(
        self,
        pool_size: int = 4,
        probe_bytes: int = 4 * 1024 * 1024,
        vote_timeout: float = 30.0,
        quick_time_limit: float = 0.25,
        state_log_path: str | None = None,
    ):
        self.pool_size = pool_size
        self.probe_bytes = probe_bytes
        self.vote_timeout = vote_timeout
        self.quick_time_limit = quick_time_limit
        self.state_log_path = state_log_path


class MasterCore:
    """Pure state machine: consumes events, returns actions. All group
    state lives here and is only touched by the state-machine thread."""

    def __init__(self, config: MasterConfig | None = None, now: float = 0.0):
        self.config = config or MasterConfig()
        self.peers: dict[int, PeerRecord] = {}
        self.next_peer_id = 1
        self.epoch = 0
        self.run_epoch = int(time.time() * 1000)  # distinguishes restarts
        self.conn_state = ConnState.IDLE
        self.ring: list[int] = []
        self.ring_cost = float("inf")
        self.matrix: dict[tuple[int, int], float] = {}
        self.topo_requests: dict[int, int] = {}  # peer -> vote_seq
        self.sync_reports: dict[int, wire.SharedStateReport] = {}
        self.tags: dict[int, TagState] = {}
        self.phase: _TopoPhase | _SyncPhase | None = None
        self.query_answers: dict[int, bool] = {}
        self.highest_query_round = 0
        self.committed_state: dict[str, tuple[int, int]] = {}  # key -> (rev, hash)
        self.committed_revision = 0
        self.last_solved_matrix: dict[tuple[int, int], float] = {}
        self.moonshot_ring: topo.RingTopology | None = None
        self.transition_log: list[dict] = []
        self.transition_counter = 0
        self.now = now

    # -- bookkeeping ---------------------------------------------------------

    def accepted(self) -> set[int]:
        return {p for p, rec in self.peers.items() if rec.phase is PeerPhase.ACCEPTED}

    def registered(self) -> set[int]:
        return {p for p, rec in self.peers.items() if rec.phase is PeerPhase.REGISTERED}

    def _log(self, event: str, **fields) -> dict:
        entry = {"event": event, "state": self.conn_state.value, "epoch": self.epoch, **fields}
        self.transition_log.append(entry)
        log.info(json.dumps(entry, default=str))
        return entry

    def _set_state(self, new: ConnState, why: str) -> None:
        old = self.conn_state
        self.conn_state = new
        self._log("transition", frm=old.value, to=new.value, why=why)

    def _roster(self, members: set[int]) -> list[PeerAddr]:
        return [
            PeerAddr(p, self.peers[p].host, self.peers[p].port)
            for p in sorted(members)
        ]

    # -- event entry point ----------------------------------------------------

    def handle(self, event) -> list:
        self.now = getattr(event, "now", self.now)
        actions: list = []
        if isinstance(event, EvJoin):
            self._on_join(event, actions)
        elif isinstance(event, EvFrame):
            if event.peer_id in self.peers:
                self.peers[event.peer_id].last_seen = self.now
                try:
                    self._on_frame(event, actions)
                except wire.ProtocolError as e:
                    self._log("protocol_error", peer=event.peer_id, error=str(e))
                    actions.append(
                        Send(
                            event.peer_id,
                            MessageType.ABORT_NOTIFY,
                            AbortNotify(AbortScope.PROTOCOL, 0, 0, str(e)),
                        )
                    )
        elif isinstance(event, EvPeerLost):
            self._on_peer_lost(event.peer_id, event.reason, actions)
        elif isinstance(event, EvMoonshot):
            self._on_moonshot(event, actions)
        elif isinstance(event, EvTick):
            self._on_tick(actions)
        return actions

    # -- join ------------------------------------------------------------------

    def _on_join(self, ev: EvJoin, actions: list) -> None:
        peer_id = self.next_peer_id
        self.next_peer_id += 1
        self.peers[peer_id] = PeerRecord(
            peer_id, PeerPhase.REGISTERED, ev.hello.p2p_host, ev.hello.p2p_port, self.now
        )
        self._log("peer_registered", peer=peer_id, endpoint=f"{ev.hello.p2p_host}:{ev.hello.p2p_port}")
        actions.append(
            AssignPeerId(
                ev.conn_key,
                peer_id,
                JoinAssign(JoinStatus.OK, peer_id, self.run_epoch, self.highest_query_round + 1),
            )
        )

    # -- frame dispatch ----------------------------------------------------------

    def _on_frame(self, ev: EvFrame, actions: list) -> None:
        body = ev.body
        t = ev.msg_type
        if t == MessageType.VOTE_REQUEST:
            if body.kind != VoteKind.TOPOLOGY:
                raise wire.ProtocolError(f"unknown vote kind {body.kind}")
            self.topo_requests[ev.peer_id] = body.vote_seq
            self.peers[ev.peer_id].topo_vote_seq = body.vote_seq
            self._try_start_major(actions)
        elif t == MessageType.SHARED_STATE_REPORT:
            if self.peers[ev.peer_id].phase is not PeerPhase.ACCEPTED:
                raise wire.ProtocolError("sync vote from non-accepted peer")
            self.sync_reports[ev.peer_id] = body
            self._try_start_major(actions)
        elif t == MessageType.COLLECTIVE_INIT_VOTE:
            self._on_init_vote(ev.peer_id, body, actions)
        elif t == MessageType.COLLECTIVE_COMPLETE_VOTE:
            self._on_complete_vote(ev.peer_id, body, actions)
        elif t == MessageType.ABORT_NOTIFY:
            self._on_abort_report(ev.peer_id, body, actions)
        elif t == MessageType.VOTE_CAST:
            self._on_vote_cast(ev.peer_id, body, actions)
        elif t == MessageType.BANDWIDTH_PROBE_REPORT:
            self._on_probe_report(ev.peer_id, body, actions)
        elif t == MessageType.PENDING_PEERS_QUERY:
            self._on_pending_query(ev.peer_id, body, actions)
        elif t == MessageType.BYE:
            self._on_peer_lost(ev.peer_id, "graceful departure", actions)
            actions.append(Kick(ev.peer_id, "bye"))
        else:
            raise wire.ProtocolError(f"unexpected {t.name} at master")

    # -- pending-peers query -----------------------------------------------------

    def _on_pending_query(self, peer_id: int, body: wire.PendingPeersQuery, actions: list) -> None:
        round_ = body.round
        if round_ not in self.query_answers:
            # the registered set is snapshotted once per round; every peer
            # asking for this round gets the identical answer
            self.query_answers[round_] = bool(self.registered())
            self.highest_query_round = max(self.highest_query_round, round_)
        actions.append(
            Send(
                peer_id,
                MessageType.PENDING_PEERS_ANSWER,
                wire.PendingPeersAnswer(round_, self.query_answers[round_]),
            )
        )

    # -- collectives ---------------------------------------------------------------

    def _on_init_vote(self, peer_id: int, body: wire.CollectiveInitVote, actions: list) -> None:
        if self.peers[peer_id].phase is not PeerPhase.ACCEPTED:
            raise wire.ProtocolError("collective vote from non-accepted peer")
        ts = self.tags.setdefault(body.tag, TagState(body.tag))
        if ts.phase is not TagPhase.VOTE_INITIATE:
            raise wire.ProtocolError(f"tag {body.tag} already in flight")
        ts.init_votes[peer_id] = (body.element_count, body.dtype, body.op, body.quantize)
        self._try_commit_inits(actions)

    def _try_commit_inits(self, actions: list) -> None:
        if self.conn_state not in (ConnState.IDLE, ConnState.COLLECTIVE_COMMS_RUNNING):
            return
        acc = self.accepted()
        if not acc:
            return
        for ts in list(self.tags.values()):
            if ts.phase is not TagPhase.VOTE_INITIATE or not acc <= set(ts.init_votes):
                continue
            params = {ts.init_votes[p] for p in acc}
            if len(params) != 1:
                self._log("init_mismatch", tag=ts.tag, params=sorted(map(str, params)))
                for p in acc:
                    actions.append(
                        Send(
                            p,
                            MessageType.ABORT_NOTIFY,
                            self._abort_body(ts.tag, ts.seq_nr + 1, "buffer parameters differ across peers"),
                        )
                    )
                ts.init_votes.clear()
                continue
            ts.attempts += 1
            ts.seq_nr = ts.attempts
            ts.params = params.pop()
            ts.phase = TagPhase.PERFORM
            ts.participants = set(acc)
            ts.init_votes.clear()
            ts.tally = None
            if self.conn_state is ConnState.IDLE:
                self._set_state(ConnState.COLLECTIVE_COMMS_RUNNING, f"tag {ts.tag} initiated")
            self._log("collective_init", tag=ts.tag, seq=ts.seq_nr, world=len(acc))
            commit = CollectiveInitCommit(ts.tag, ts.seq_nr, self.epoch, list(self.ring))
            for p in sorted(acc):
                actions.append(Send(p, MessageType.TRANSITION_COMMIT, commit))

    def _on_complete_vote(self, peer_id: int, body, actions: list) -> None:
        ts = self.tags.get(body.tag)
        if ts is None or ts.seq_nr != body.seq_nr or ts.phase is TagPhase.VOTE_INITIATE:
            self._log("stale_complete_vote", peer=peer_id, tag=body.tag, seq=body.seq_nr)
            return
        ts.phase = TagPhase.VOTE_COMPLETE
        ts.traffic[peer_id] = (body.tx_bytes, body.rx_bytes)
        result = ts.complete_tally(self).cast(peer_id, body.ok)
        if result is VoteTally.Result.ABORT:
            self.propagate_abort(body.tag, "peer voted no on completion", actions, failed_peer=0)
            return
        if result is VoteTally.Result.COMMIT:
            self._log(
                "collective_complete",
                tag=ts.tag,
                seq=ts.seq_nr,
                traffic={str(p): v for p, v in ts.traffic.items()},
            )
            commit = CollectiveCompleteCommit(ts.tag, ts.seq_nr)
            for p in sorted(ts.participants):
                actions.append(Send(p, MessageType.TRANSITION_COMMIT, commit))
            self._reset_tag(ts)
            self._maybe_leave_collective(actions)

    def _reset_tag(self, ts: TagState) -> None:
        ts.phase = TagPhase.VOTE_INITIATE
        ts.participants = set()
        ts.tally = None
        ts.traffic.clear()
        ts.params = None

    def _maybe_leave_collective(self, actions: list) -> None:
        if self.conn_state is ConnState.COLLECTIVE_COMMS_RUNNING and not any(
            ts.phase is not TagPhase.VOTE_INITIATE for ts in self.tags.values()
        ):
            self._set_state(ConnState.IDLE, "all collectives settled")
            self._try_start_major(actions)

    def _abort_body(self, tag: int, seq: int, reason: str, failed_peer: int = 0) -> AbortNotify:
        acc = self.accepted()
        return AbortNotify(
            AbortScope.COLLECTIVE,
            tag,
            seq,
            reason,
            failed_peer=failed_peer,
            epoch=self.epoch,
            ring=list(self.ring),
            roster=self._roster(acc),
            has_view=True,
        )

    def _on_abort_report(self, peer_id: int, body: AbortNotify, actions: list) -> None:
        ts = self.tags.get(body.tag)
        if ts is None or ts.phase is TagPhase.VOTE_INITIATE or ts.seq_nr != body.seq_nr:
            self._log("stale_abort_report", peer=peer_id, tag=body.tag, seq=body.seq_nr)
            return
        self.propagate_abort(body.tag, body.reason, actions, failed_peer=body.failed_peer)

    def propagate_abort(
        self, tag: int, reason: str, actions: list, failed_peer: int = 0
    ) -> None:
        """Cancel one in-flight tag: every accepted peer gets the abort
        with the current group view; the tag machine resets for a retry."""
        ts = self.tags.get(tag)
        if ts is None or ts.phase is TagPhase.VOTE_INITIATE:
            self._log("abort_unknown_tag", tag=tag)
            return
        self._log("abort", tag=tag, seq=ts.seq_nr, reason=reason, failed_peer=failed_peer)
        body = self._abort_body(tag, ts.seq_nr, reason, failed_peer)
        for p in sorted(self.accepted()):
            actions.append(Send(p, MessageType.ABORT_NOTIFY, body))
        self._reset_tag(ts)
        self._maybe_leave_collective(actions)

    # -- major operations ---------------------------------------------------------

    def _try_start_major(self, actions: list) -> None:
        if self.conn_state is not ConnState.IDLE or self.phase is not None:
            return
        acc = self.accepted()
        if acc and acc <= set(self.topo_requests) or (not acc and self.topo_requests):
            self._start_topology(actions)
            return
        if acc and acc <= set(self.sync_reports):
            self._start_sync(actions)
            return
        self._try_commit_inits(actions)

    # -- topology -------------------------------------------------------------------

    def _start_topology(self, actions: list) -> None:
        acc = self.accepted()
        admitted = {p for p in self.registered() if p in self.topo_requests}
        self._log("topology_vote_committed", voters=sorted(self.topo_requests), admitted=sorted(admitted))
        if not admitted and self.moonshot_ring is None and set(self.ring) == acc:
            # no-op fast path: nothing to admit, ring already current
            self._finish_topology(actions, set(), set())
            return
        if not acc and len(admitted) == 1:
            # solo bootstrap: no connections or probes to make
            self._finish_topology(actions, admitted, set())
            return
        self._set_state(ConnState.VOTE_ACCEPT_NEW_PEERS, "unanimous topology vote")
        members = acc | admitted
        self.phase = _TopoPhase(
            stage="connect",
            admitted=admitted,
            expected_casts=set(members),
            deadline=self.now + self.config.vote_timeout,
        )
        self._set_state(ConnState.CONNECTING_P2P, "roster distributed")
        roster = [
            PeerAddr(p, self.peers[p].host, self.peers[p].port, is_new=(p in admitted))
            for p in sorted(members)
        ]
        commit = TopologyConnect(roster, self.config.pool_size)
        for p in sorted(members):
            actions.append(Send(p, MessageType.TRANSITION_COMMIT, commit))

    def _on_vote_cast(self, peer_id: int, body: wire.VoteCast, actions: list) -> None:
        if body.phase == CastPhase.P2P_CONNECT:
            ph = self.phase
            if not isinstance(ph, _TopoPhase) or ph.stage != "connect":
                raise wire.ProtocolError("unexpected p2p-connect report")
            if peer_id not in ph.expected_casts:
                raise wire.ProtocolError("p2p-connect report from unexpected peer")
            ph.cast_ok[peer_id] = body.ok
            for failed in body.failed_peers:
                if failed in ph.admitted:
                    ph.rejected.add(failed)
                elif failed in self.accepted():
                    # unreachable veteran pair: reject this round's newcomers
                    # and keep the previous ring; the callers retry
                    self._log("veteran_connect_failure", frm=peer_id, to=failed)
                    ph.rejected |= ph.admitted
            if not body.ok and peer_id in ph.admitted:
                ph.rejected.add(peer_id)
            if set(ph.cast_ok) >= ph.expected_casts:
                self._begin_probe_or_finish(actions)
        elif body.phase == CastPhase.SYNC_DONE:
            self._on_sync_done(peer_id, body, actions)
        else:
            raise wire.ProtocolError(f"unknown cast phase {body.phase}")

    def _begin_probe_or_finish(self, actions: list) -> None:
        ph = self.phase
        members = (self.accepted() | ph.admitted) - ph.rejected
        pairs = [
            (i, j)
            for i in sorted(members)
            for j in sorted(members)
            if i != j and (i, j) not in self.matrix
        ]
        if not pairs:
            self._finish_topology(actions, ph.admitted - ph.rejected, ph.rejected)
            return
        self._set_state(ConnState.OPTIMIZING_TOPOLOGY, "probing new pairs")
        ph.stage = "probe"
        by_source: dict[int, list] = {}
        for i, j in pairs:
            by_source.setdefault(i, []).append(j)
        ph.expected_reports = set(by_source)
        ph.deadline = self.now + self.config.vote_timeout
        for src, targets in by_source.items():
            req = ProbeRequest(
                self.config.probe_bytes,
                [PeerAddr(j, self.peers[j].host, self.peers[j].port) for j in targets],
            )
            actions.append(Send(src, MessageType.BANDWIDTH_PROBE_REQUEST, req))

    def _on_probe_report(self, peer_id: int, body: wire.ProbeReport, actions: list) -> None:
        ph = self.phase
        if not isinstance(ph, _TopoPhase) or ph.stage != "probe":
            raise wire.ProtocolError("unexpected probe report")
        for to_peer, ok, rate in body.results:
            if ok and rate > 0:
                # most recent measurement wins
                self.matrix[(peer_id, to_peer)] = self.config.probe_bytes / rate
            elif to_peer in ph.admitted:
                ph.rejected.add(to_peer)
            else:
                self._log("probe_failure_veteran_pair", frm=peer_id, to=to_peer)
                self.matrix.setdefault((peer_id, to_peer), 1e6)
        ph.expected_reports.discard(peer_id)
        if not ph.expected_reports:
            self._finish_topology(actions, ph.admitted - ph.rejected, ph.rejected)

    def _members_matrix(self, members: set[int]) -> topo.CostMatrix:
        ids = sorted(members)
        m = topo.CostMatrix.empty(ids)
        for i, a in enumerate(ids):
            for j, b in enumerate(ids):
                if a != b:
                    m.cost[i, j] = self.matrix.get((a, b), topo.UNMEASURED)
        return m

    def _solve_ring(self, members: set[int]) -> topo.RingTopology:
        if len(members) == 1:
            return topo.RingTopology(sorted(members), 0.0)
        if self.moonshot_ring is not None and set(self.moonshot_ring.order) == members:
            ring = self.moonshot_ring
            self.moonshot_ring = None
            self._log("moonshot_adopted", cost=ring.cost)
            return ring
        return topo.solve_quick(self._members_matrix(members), self.config.quick_time_limit)

    def _finish_topology(self, actions: list, promoted: set[int], rejected: set[int]) -> None:
        for p in promoted:
            self.peers[p].phase = PeerPhase.ACCEPTED
            self._log("peer_accepted", peer=p)
        acc = self.accepted()
        ring_changed = set(self.ring) != acc
        if acc and (ring_changed or promoted or self.moonshot_ring is not None):
            new_ring = self._solve_ring(acc)
            self.ring = list(new_ring.order)
            self.ring_cost = new_ring.cost
            self.epoch += 1
            self.last_solved_matrix = {
                k: v for k, v in self.matrix.items() if k[0] in acc and k[1] in acc
            }
        roster = self._roster(acc)
        # conclude only this transition's participants; a registered peer
        # whose vote arrived mid-phase keeps it pending and is admitted by
        # the next transition instead of bouncing back unaccepted
        participants = acc | promoted | rejected
        voters = {p: s for p, s in self.topo_requests.items() if p in participants}
        for p in voters:
            del self.topo_requests[p]
        for p in sorted(set(voters) | acc):
            rec = self.peers.get(p)
            if rec is None:
                continue
            acked = voters.get(p, 0)
            rec.topo_vote_seq = 0
            actions.append(
                Send(
                    p,
                    MessageType.TOPOLOGY_ASSIGN,
                    TopologyAssign(
                        epoch=self.epoch,
                        ring=list(self.ring),
                        roster=roster,
                        you_accepted=(rec.phase is PeerPhase.ACCEPTED),
                        added=len(promoted),
                        removed=0,
                        query_round=self.highest_query_round + 1,
                        acked_vote_seq=acked,
                    ),
                )
            )
        self.phase = None
        if self.conn_state is not ConnState.IDLE:
            self._set_state(ConnState.IDLE, "topology installed")
        self._log("topology_installed", ring=list(self.ring), promoted=sorted(promoted), rejected=sorted(rejected))
        if (promoted or ring_changed) and 4 <= len(acc) <= topo.EXACT_MAX_NODES:
            m = self._members_matrix(acc)
            if m.fully_measured():
                actions.append(StartMoonshot(self.epoch, m))
        self._try_start_major(actions)

    def _on_moonshot(self, ev: EvMoonshot, actions: list) -> None:
        if ev.epoch != self.epoch or set(ev.ring.order) != self.accepted():
            self._log("moonshot_stale", solved_epoch=ev.epoch)
            return
        if ev.ring.cost < self.ring_cost - 1e-12:
            self.moonshot_ring = ev.ring
            self._log("moonshot_improvement", cost=ev.ring.cost, current=self.ring_cost)

    # -- shared state sync -------------------------------------------------------

    def _start_sync(self, actions: list) -> None:
        acc = self.accepted()
        reports = {p: self.sync_reports[p] for p in acc}
        self.sync_reports.clear()
        self._log("sync_vote_committed", voters=sorted(reports))
        key_lists = {p: tuple((e.key, e.dtype, e.nbytes) for e in r.entries) for p, r in reports.items()}
        if len(set(key_lists.values())) != 1:
            self._log("sync_key_mismatch")
            for p in sorted(acc):
                actions.append(
                    Send(p, MessageType.TRANSITION_COMMIT, SyncResult(SyncOutcome.FAILED, [], "key sets differ across peers"))
                )
            return
        plan_or_error = select_sync_plan(reports, self.committed_state)
        if isinstance(plan_or_error, str):
            self._log("sync_plan_error", reason=plan_or_error)
            for p in sorted(acc):
                actions.append(
                    Send(p, MessageType.TRANSITION_COMMIT, SyncResult(SyncOutcome.FAILED, [], plan_or_error))
                )
            return
        plan = plan_or_error
        for items in plan.values():
            for f in items:
                donor = self.peers[f.donor_peer]
                f.donor_host, f.donor_port = donor.host, donor.port
        if not any(plan.values()):
            # digests agree everywhere: no payload moves at all
            self._record_committed(reports)
            self._log("sync_noop", revision=self.committed_revision)
            for p in sorted(acc):
                actions.append(Send(p, MessageType.TRANSITION_COMMIT, SyncResult(SyncOutcome.IN_SYNC)))
            return
        self._set_state(ConnState.SYNC_SHARED_STATE, "digests diverge")
        self.phase = _SyncPhase(
            reports=reports,
            expected_done=set(acc),
            fetch_keys={p: [f.key for f in items] for p, items in plan.items()},
            donors={f.donor_peer for items in plan.values() for f in items},
            deadline=self.now + self.config.vote_timeout,
        )
        for p in sorted(acc):
            actions.append(Send(p, MessageType.SHARED_STATE_PLAN, SharedStatePlan(plan.get(p, []))))

    def _on_sync_done(self, peer_id: int, body: wire.VoteCast, actions: list) -> None:
        ph = self.phase
        if not isinstance(ph, _SyncPhase):
            raise wire.ProtocolError("unexpected sync-done report")
        if peer_id not in ph.expected_done:
            raise wire.ProtocolError("sync-done from unexpected peer")
        if not body.ok:
            self._fail_sync(actions, f"peer {peer_id} could not apply the plan")
            return
        ph.done_digests[peer_id] = list(body.entries)
        self._maybe_commit_sync(actions)

    def _maybe_commit_sync(self, actions: list) -> None:
        ph = self.phase
        if not isinstance(ph, _SyncPhase) or not ph.expected_done:
            return
        if not set(ph.done_digests) >= ph.expected_done:
            return
        digests = {tuple(map(tuple, d)) for d in ph.done_digests.values()}
        if len(digests) != 1:
            self._fail_sync(actions, "post-sync digests diverge")
            return
        final = next(iter(ph.done_digests.values()))
        self.committed_state = {k: (rev, h) for k, rev, h in final}
        self.committed_revision = max((rev for _, rev, _ in final), default=0)
        self._log(
            "sync_committed",
            revision=self.committed_revision,
            digest={k: [rev, f"{h:016x}"] for k, rev, h in final},
        )
        for p in sorted(ph.expected_done):
            keys = ph.fetch_keys.get(p, [])
            outcome = SyncOutcome.UPDATED if keys else SyncOutcome.IN_SYNC
            actions.append(Send(p, MessageType.TRANSITION_COMMIT, SyncResult(outcome, keys)))
        self.phase = None
        self._set_state(ConnState.IDLE, "sync committed")
        self._try_start_major(actions)

    def _fail_sync(self, actions: list, reason: str) -> None:
        ph = self.phase
        self._log("sync_failed", reason=reason)
        for p in sorted(ph.expected_done):
            actions.append(
                Send(p, MessageType.TRANSITION_COMMIT, SyncResult(SyncOutcome.FAILED, [], reason))
            )
        self.phase = None
        self._set_state(ConnState.IDLE, "sync failed")
        self._try_start_major(actions)

    def _record_committed(self, reports: dict[int, wire.SharedStateReport]) -> None:
        any_report = next(iter(reports.values()))
        self.committed_state = {e.key: (e.revision, e.hash) for e in any_report.entries}
        self.committed_revision = max((e.revision for e in any_report.entries), default=0)

    # -- peer loss ---------------------------------------------------------------

    def _on_peer_lost(self, peer_id: int, reason: str, actions: list) -> None:
        rec = self.peers.pop(peer_id, None)
        if rec is None:
            return
        self._log("peer_lost", peer=peer_id, reason=reason, was=rec.phase.value)
        self.topo_requests.pop(peer_id, None)
        self.sync_reports.pop(peer_id, None)
        was_accepted = rec.phase is PeerPhase.ACCEPTED
        if was_accepted and peer_id in self.ring:
            self.ring = [p for p in self.ring if p != peer_id]
            self.epoch += 1
            self.ring_cost = float("inf")  # spliced ring cost unknown; resolved next solve
        self.matrix = {k: v for k, v in self.matrix.items() if peer_id not in k}
        self.moonshot_ring = None

        if was_accepted:
            for ts in list(self.tags.values()):
                if ts.phase is TagPhase.VOTE_INITIATE:
                    ts.init_votes.pop(peer_id, None)
                    continue
                if peer_id in ts.participants:
                    ts.participants.discard(peer_id)
                    self.propagate_abort(
                        ts.tag, f"peer {peer_id} lost mid-collective", actions, failed_peer=peer_id
                    )
        ph = self.phase
        if isinstance(ph, _TopoPhase):
            ph.admitted.discard(peer_id)
            ph.expected_casts.discard(peer_id)
            ph.cast_ok.pop(peer_id, None)
            ph.expected_reports.discard(peer_id)
            if ph.stage == "connect" and set(ph.cast_ok) >= ph.expected_casts:
                self._begin_probe_or_finish(actions)
            elif ph.stage == "probe" and not ph.expected_reports:
                self._finish_topology(actions, ph.admitted - ph.rejected, ph.rejected)
        elif isinstance(ph, _SyncPhase):
            ph.expected_done.discard(peer_id)
            ph.done_digests.pop(peer_id, None)
            if peer_id in ph.donors:
                self._fail_sync(actions, f"donor {peer_id} lost mid-sync")
            elif ph.expected_done:
                self._maybe_commit_sync(actions)
            else:
                self.phase = None
                self._set_state(ConnState.IDLE, "all sync participants lost")
        elif was_accepted and self.accepted():
            # survivors learn the shrunk world through an unsolicited assign
            roster = self._roster(self.accepted())
            for p in sorted(self.accepted()):
                actions.append(
                    Send(
                        p,
                        MessageType.TOPOLOGY_ASSIGN,
                        TopologyAssign(
                            epoch=self.epoch,
                            ring=list(self.ring),
                            roster=roster,
                            you_accepted=True,
                            added=0,
                            removed=1,
                            query_round=self.highest_query_round + 1,
                            acked_vote_seq=0,
                        ),
                    )
                )
        self._try_start_major(actions)

    # -- timeouts -----------------------------------------------------------------

    def _on_tick(self, actions: list) -> None:
        ph = self.phase
        if ph is not None and self.now > ph.deadline:
            if isinstance(ph, _TopoPhase):
                missing = (
                    ph.expected_casts - set(ph.cast_ok)
                    if ph.stage == "connect"
                    else ph.expected_reports
                )
            else:
                missing = ph.expected_done - set(ph.done_digests)
            for p in sorted(missing):
                self._log("phase_timeout_kick", peer=p)
                actions.append(Kick(p, "phase timeout"))
                self._on_peer_lost(p, "phase timeout", actions)
        # an accepted peer sitting out a vote its group-mates already cast
        # is treated as lost once the vote timeout elapses; votes from
        # registered newcomers never start this clock
        acc = self.accepted()
        for votes in (set(self.topo_requests), set(self.sync_reports)):
            if self.conn_state is not ConnState.IDLE:
                continue
            started = [self.peers[p].last_seen for p in votes & acc if p in self.peers]
            if not started:
                continue
            missing = acc - votes
            if missing and self.now - min(started) > self.config.vote_timeout:
                for p in sorted(missing):
                    self._log("vote_timeout_kick", peer=p)
                    actions.append(Kick(p, "vote timeout"))
                    self._on_peer_lost(p, "vote timeout", actions)


def select_sync_plan(
    reports: dict[int, wire.SharedStateReport],
    committed: dict[str, tuple[int, int]] | None = None,
) -> dict[int, list[FetchItem]] | str:
    """Choose one donor per entry and the receivers that must fetch it.

    Donor candidates honor per-peer strategy flags: if any peer declared
    send-only, only those peers may donate; receive-only peers never
    donate. A peer with an out-of-date revision is never a donor, so the
    popularity rule runs among the highest-revision candidates: the most
    frequent content hash wins (tie-break: numerically smallest hash,
    then smallest peer id). When a committed floor is known, a donor at
    the committed revision must match the committed hash, so a cold
    restart can only resume from the exact state the group last agreed
    on. Returns peer -> fetch list, or an error string when no donor is
    eligible.

    The endpoint fields of the fetch items are filled by the caller.
    """
    committed = committed or {}
    send_only = {p for p, r in reports.items() if r.strategy == SyncStrategy.SEND_ONLY}
    recv_only = {p for p, r in reports.items() if r.strategy == SyncStrategy.RECEIVE_ONLY}
    plan: dict[int, list[FetchItem]] = {p: [] for p in reports}
    keys = [e.key for e in next(iter(reports.values())).entries]
    for idx, key in enumerate(keys):
        state = {p: r.entries[idx] for p, r in reports.items()}
        candidates = set(send_only) if send_only else set(reports) - recv_only
        if not candidates:
            return f"no eligible donor for {key!r}: every peer is receive-only"
        floor = committed.get(key)
        if floor is not None:
            rev_f, hash_f = floor
            eligible = {
                p
                for p in candidates
                if state[p].revision > rev_f
                or (state[p].revision == rev_f and state[p].hash == hash_f)
            }
            if not eligible:
                return (
                    f"no donor for {key!r} holds the last committed state "
                    f"(revision {rev_f}); resumption requires it"
                )
        else:
            eligible = candidates
        max_rev = max(state[p].revision for p in eligible)
        current = [p for p in eligible if state[p].revision == max_rev]
        tally = Counter(state[p].hash for p in current)
        top = max(tally.values())
        winning_hash = min(h for h, c in tally.items() if c == top)
        donor = min(p for p in current if state[p].hash == winning_hash)
        donor_meta = state[donor]
        for p, meta in state.items():
            if p == donor:
                continue
            if (meta.revision, meta.hash) != (donor_meta.revision, donor_meta.hash):
                plan[p].append(
                    FetchItem(
                        key=key,
                        donor_peer=donor,
                        donor_host="",
                        donor_port=0,
                        revision=donor_meta.revision,
                        hash=donor_meta.hash,
                        nbytes=donor_meta.nbytes,
                    )
                )
    return plan


# ---------------------------------------------------------------------------
# Socket shell
# ---------------------------------------------------------------------------


class MasterServer:
    """Runs a MasterCore behind a TCP listener: per-peer reader threads
    feed the single state-machine thread; sends happen from that thread
    with a short timeout, and a peer that cannot be written to is lost."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, config: MasterConfig | None = None):
        self.config = config or MasterConfig()
        self.core = MasterCore(self.config, now=time.monotonic())
        self.listener = socket.create_server((host, port))
        self.port = self.listener.getsockname()[1]
        self.host = host
        self.events: queue.Queue = queue.Queue()
        self.conns: dict[int, wire.FrameConn] = {}  # peer_id -> conn
        self._conn_keys: dict[int, wire.FrameConn] = {}  # pre-assignment
        self._next_conn_key = 1
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.errors: list[str] = []
        self._state_log = open(self.config.state_log_path, "a") if self.config.state_log_path else None
        self._state_log_cursor = 0

    def start(self) -> "MasterServer":
        t_accept = threading.Thread(target=self._accept_loop, name="master-accept", daemon=True)
        t_sm = threading.Thread(target=self._sm_loop, name="master-sm", daemon=True)
        t_accept.start()
        t_sm.start()
        self._threads += [t_accept, t_sm]
        log.info(json.dumps({"event": "listening", "host": self.host, "port": self.port}))
        return self

    # -- accept / read --------------------------------------------------------

    def _accept_loop(self) -> None:
        self.listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                sock, _ = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(
                target=self._handshake, args=(sock,), name="master-handshake", daemon=True
            ).start()

    def _handshake(self, sock: socket.socket) -> None:
        conn = wire.FrameConn(sock)
        try:
            msg_type, payload = conn.recv_frame(timeout=10.0)
            if msg_type != MessageType.JOIN_REQUEST:
                conn.close()
                return
            hello = wire.unpack_join_request(bytes(payload))
            if not isinstance(hello, ClientHello):
                conn.close()
                return
            if hello.version != wire.PROTOCOL_VERSION:
                conn.send_message(
                    MessageType.JOIN_ASSIGN, JoinAssign(JoinStatus.VERSION_MISMATCH), timeout=5.0
                )
                conn.close()
                return
        except (wire.ProtocolError, wire.RecvTimeout, OSError):
            conn.close()
            return
        with self._lock:
            key = self._next_conn_key
            self._next_conn_key += 1
            self._conn_keys[key] = conn
        self.events.put(EvJoin(key, hello))

    def _reader_loop(self, peer_id: int, conn: wire.FrameConn) -> None:
        while not self._stop.is_set():
            try:
                msg_type, payload = conn.recv_frame(timeout=None)
                body = wire.decode_body(msg_type, payload)
            except (wire.ProtocolError, wire.ConnectionClosed, OSError) as e:
                self.events.put(EvPeerLost(peer_id, f"connection lost: {e}"))
                return
            self.events.put(EvFrame(peer_id, msg_type, body))
            if msg_type == MessageType.BYE:
                return

    # -- state machine ----------------------------------------------------------

    def _sm_loop(self) -> None:
        last_tick = time.monotonic()
        while not self._stop.is_set():
            try:
                event = self.events.get(timeout=0.2)
            except queue.Empty:
                event = None
            now = time.monotonic()
            try:
                if event is not None:
                    self.core.now = now
                    self._execute(self.core.handle(event))
                if now - last_tick >= 1.0:
                    last_tick = now
                    self.core.now = now
                    self._execute(self.core.handle(EvTick(now)))
            except Exception as e:  # a state-machine fault must be visible
                log.exception("state machine error")
                self.errors.append(f"{type(e).__name__}: {e}")

    def _execute(self, actions: list) -> None:
        for action in actions:
            if isinstance(action, AssignPeerId):
                conn = self._conn_keys.pop(action.conn_key, None)
                if conn is None:
                    continue
                self.conns[action.peer_id] = conn
                try:
                    conn.send_message(MessageType.JOIN_ASSIGN, action.body, timeout=5.0)
                except (wire.ConnectionClosed, wire.RecvTimeout, OSError):
                    self.events.put(EvPeerLost(action.peer_id, "join reply failed"))
                    continue
                t = threading.Thread(
                    target=self._reader_loop,
                    args=(action.peer_id, conn),
                    name=f"master-read-{action.peer_id}",
                    daemon=True,
                )
                t.start()
                self._threads.append(t)
            elif isinstance(action, Send):
                conn = self.conns.get(action.peer_id)
                if conn is None:
                    continue
                try:
                    conn.send_message(action.msg_type, action.body, timeout=5.0)
                except (wire.ConnectionClosed, wire.RecvTimeout, OSError) as e:
                    self.events.put(EvPeerLost(action.peer_id, f"send failed: {e}"))
            elif isinstance(action, Kick):
                conn = self.conns.pop(action.peer_id, None)
                if conn is not None:
                    conn.close()
            elif isinstance(action, StartMoonshot):
                threading.Thread(
                    target=self._moonshot,
                    args=(action.epoch, action.matrix),
                    name="master-moonshot",
                    daemon=True,
                ).start()
            if self._state_log:
                self._flush_state_log()

    def _flush_state_log(self) -> None:
        while self._state_log_cursor < len(self.core.transition_log):
            entry = self.core.transition_log[self._state_log_cursor]
            self._state_log.write(json.dumps(entry, default=str) + "\n")
            self._state_log_cursor += 1
        self._state_log.flush()

    def _moonshot(self, epoch: int, matrix: topo.CostMatrix) -> None:
        try:
            ring = topo.solve_exact(matrix)
        except topo.TopologyError:
            return
        self.events.put(EvMoonshot(epoch, ring))

    # -- shutdown ----------------------------------------------------------------

    def stop(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        for peer_id, conn in list(self.conns.items()):
            try:
                conn.send_message(MessageType.BYE, wire.Bye(0), timeout=1.0)
            except Exception:
                pass
            conn.close()
        try:
            self.listener.close()
        except OSError:
            pass
        if self._state_log:
            self._flush_state_log()
            self._state_log.close()

    def __enter__(self) -> "MasterServer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def audit_no_major_overlap(transition_log: list[dict]) -> list[str]:
    """Audit helper: returns violations of the one-major-operation rule
    as readable strings (empty when the log is clean)."""
    violations = []
    depth = 0
    for entry in transition_log:
        if entry.get("event") != "transition":
            continue
        frm, to = entry["frm"], entry["to"]
        if frm == "idle" and to != "idle":
            depth += 1
            if depth > 1:
                violations.append(f"major operation started while another active: {entry}")
        elif to == "idle" and frm != "idle":
            depth = max(0, depth - 1)
    return violations


def json_log_to_stderr(level: int = logging.INFO) -> None:
    """Route master/peer event logs as JSON lines on stderr."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger("churncomm")
    root.handlers.clear()
    root.addHandler(handler)
    root.setLevel(level)
