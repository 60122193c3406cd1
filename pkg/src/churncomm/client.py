"""The peer-side communicator.

A communicator holds one connection to the master plus a pool of direct
peer connections. Major operations (updating topology, syncing shared
state) are blocking calls that walk a vote/commit exchange with the
master; collectives are asynchronous, each tag running on a pool slot
with its own send context. A reader thread demultiplexes master frames
to whoever is waiting: per-tag commit/abort boxes, the major-operation
mailbox, and pending-peer answers. Abort notifications flip a per-attempt
memory flag the data path polls between network chunks.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import topology as topo
from . import wire
from .collective import (
    BufferPool,
    CollectiveAborted,
    DTYPE_OF,
    OpContext,
    ReduceOp,
    SpanSender,
    finalize_reduction,
    run_all_reduce,
)
from .config import ClientConfig, load_config
from .sharedstate import SharedStateEntry, SyncOutcomeResult, SyncStatus
from .wire import (
    AbortNotify,
    AbortScope,
    CastPhase,
    ClientHello,
    CollectiveCompleteCommit,
    CollectiveCompleteVote,
    CollectiveInitCommit,
    CollectiveInitVote,
    FrameConn,
    JoinStatus,
    MessageType,
    P2pHello,
    PeerRole,
    ProbeRequest,
    SharedStatePlan,
    SharedStateReport,
    StateEntryMeta,
    SyncOutcome,
    SyncResult,
    SyncStrategy,
    TopologyAssign,
    TopologyConnect,
    VoteCast,
    VoteKind,
    VoteRequest,
)

log = logging.getLogger("churncomm.client")


class CommError(Exception):
    pass


class ConnectError(CommError):
    pass


class MasterLostError(CommError):
    pass


class UsageError(CommError):
    pass


class OperationError(CommError):
    pass


_MASTER_LOST = object()  # sentinel pushed into mailboxes when the link dies


@dataclass
class GroupView:
    """The group as last committed to this peer."""

    epoch: int = 0
    ring: list[int] = field(default_factory=list)
    roster: dict[int, tuple[str, int]] = field(default_factory=dict)
    accepted: bool = False

    @property
    def world(self) -> int:
        return len(self.ring)


@dataclass
class TopologyResult:
    added: int
    removed: int
    accepted: bool
    world: int

    @property
    def changed(self) -> bool:
        return self.added > 0 or self.removed > 0


@dataclass
class ReduceResult:
    status: str  # "completed" | "aborted"
    reason: str = ""
    tx_bytes: int = 0
    rx_bytes: int = 0

    @property
    def completed(self) -> bool:
        return self.status == "completed"


class AsyncHandle:
    """Completion slot for one tagged collective; awaiting it returns
    exactly once."""

    def __init__(self, tag: int):
        self.tag = tag
        self.seq_nr = 0
        self._done = threading.Event()
        self._outcome: ReduceResult | None = None
        self._consumed = False

    def _resolve(self, status: str, reason: str = "", tx: int = 0, rx: int = 0) -> None:
        self._outcome = ReduceResult(status, reason, tx, rx)
        self._done.set()

    @property
    def pending(self) -> bool:
        return not self._done.is_set()

    @property
    def finished(self) -> bool:
        return self._done.is_set()


class _TagBox:
    """Per-tag channel from the reader thread to the engine."""

    def __init__(self) -> None:
        self.frames: queue.Queue = queue.Queue()
        self.abort_event = threading.Event()

    def reset_for_attempt(self) -> None:
        self.abort_event = threading.Event()
        try:
            while True:
                self.frames.get_nowait()
        except queue.Empty:
            pass


class _Demux:
    """Routes inbound master frames to whoever is waiting for them."""

    def __init__(self, comm: "Communicator"):
        self.comm = comm
        self.major: queue.Queue = queue.Queue()
        self.tag_boxes: dict[int, _TagBox] = {}
        self.pending_answers: dict[int, queue.Queue] = {}
        self.lost = threading.Event()
        self.lost_reason = ""
        self._lock = threading.Lock()

    def tag_box(self, tag: int) -> _TagBox:
        with self._lock:
            return self.tag_boxes.setdefault(tag, _TagBox())

    def answer_slot(self, round_: int) -> queue.Queue:
        with self._lock:
            return self.pending_answers.setdefault(round_, queue.Queue())

    def route(self, msg_type: MessageType, body) -> None:
        if msg_type == MessageType.TRANSITION_COMMIT:
            if isinstance(body, (CollectiveInitCommit, CollectiveCompleteCommit)):
                self.tag_box(body.tag).frames.put((msg_type, body))
            else:
                self.major.put((msg_type, body))
        elif msg_type == MessageType.ABORT_NOTIFY:
            if body.has_view:
                self.comm._apply_view(body.epoch, body.ring, body.roster)
            if body.scope == AbortScope.COLLECTIVE and body.tag:
                box = self.tag_box(body.tag)
                box.abort_event.set()
                box.frames.put((msg_type, body))
            else:
                self.major.put((msg_type, body))
        elif msg_type == MessageType.TOPOLOGY_ASSIGN:
            self.comm._apply_view(
                body.epoch,
                body.ring,
                {p.peer_id: (p.host, p.port) for p in body.roster},
                assign=body,
            )
            if body.acked_vote_seq:
                self.major.put((msg_type, body))
        elif msg_type in (MessageType.BANDWIDTH_PROBE_REQUEST, MessageType.SHARED_STATE_PLAN):
            self.major.put((msg_type, body))
        elif msg_type == MessageType.PENDING_PEERS_ANSWER:
            self.answer_slot(body.round).put(body.pending)
        elif msg_type == MessageType.BYE:
            self.fail_all("master said goodbye")
        else:
            log.warning("unrouted frame %s", msg_type.name)

    def fail_all(self, reason: str) -> None:
        self.lost_reason = reason
        self.lost.set()
        with self._lock:
            boxes = list(self.tag_boxes.values())
            answers = list(self.pending_answers.values())
        for box in boxes:
            box.abort_event.set()
            box.frames.put(_MASTER_LOST)
        for q in answers:
            q.put(_MASTER_LOST)
        self.major.put(_MASTER_LOST)


class _P2pManager:
    """Direct peer connections: a listener for inbound traffic plus an
    outbound dial table keyed by (peer, pool slot)."""

    def __init__(self, comm: "Communicator", host: str = "127.0.0.1"):
        self.comm = comm
        self.listener = socket.create_server((host, 0))
        self.port = self.listener.getsockname()[1]
        self.host = host
        self.outbound: dict[tuple[int, int], FrameConn] = {}
        self.inbound: dict[tuple[int, int], FrameConn] = {}
        self._inbound_cv = threading.Condition()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        threading.Thread(target=self._accept_loop, name="p2p-accept", daemon=True).start()

    def _accept_loop(self) -> None:
        self.listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                sock, _ = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._handshake, args=(sock,), daemon=True).start()

    def _handshake(self, sock: socket.socket) -> None:
        conn = FrameConn(sock)
        try:
            msg_type, payload = conn.recv_frame(timeout=10.0)
            hello = wire.unpack_join_request(bytes(payload))
            if msg_type != MessageType.JOIN_REQUEST or not isinstance(hello, P2pHello):
                conn.close()
                return
            if hello.version != wire.PROTOCOL_VERSION:
                conn.close()
                return
        except (wire.ProtocolError, wire.RecvTimeout, wire.ConnectionClosed, OSError):
            conn.close()
            return
        if hello.role == PeerRole.P2P_DATA:
            with self._inbound_cv:
                old = self.inbound.get((hello.src_peer, hello.slot))
                if old is not None:
                    old.close()
                self.inbound[(hello.src_peer, hello.slot)] = conn
                self._inbound_cv.notify_all()
        elif hello.role == PeerRole.P2P_PROBE:
            threading.Thread(
                target=self._serve_probes, args=(conn,), name="p2p-probe-serve", daemon=True
            ).start()
        elif hello.role == PeerRole.P2P_SYNC:
            threading.Thread(
                target=self._serve_sync, args=(conn,), name="p2p-sync-serve", daemon=True
            ).start()

    def _serve_probes(self, conn: FrameConn) -> None:
        try:
            while not self._stop.is_set():
                msg_type, payload = conn.recv_frame(timeout=30.0)
                if msg_type != MessageType.BANDWIDTH_PROBE_REQUEST:
                    break
                topo.serve_probe(conn, ProbeRequest.unpack(bytes(payload)))
        except (wire.ProtocolError, wire.RecvTimeout, wire.ConnectionClosed, OSError):
            pass
        finally:
            conn.close()

    def _serve_sync(self, conn: FrameConn) -> None:
        try:
            msg_type, payload = conn.recv_frame(timeout=30.0)
            if msg_type != MessageType.SHARED_STATE_REPORT:
                return
            request = SharedStateReport.unpack(bytes(payload))
            for meta in request.entries:
                served = self.comm._serve_entry(meta.key)
                if served is None:
                    return
                revision, view = served
                total = len(view)
                offset = 0
                while True:
                    n = min(1 << 20, total - offset)
                    conn.send_message(
                        MessageType.SHARED_STATE_CHUNK,
                        wire.SharedStateChunk(
                            meta.key, revision, total, offset, bytes(view[offset : offset + n])
                        ),
                        timeout=30.0,
                    )
                    offset += n
                    if offset >= total:
                        break
        except (wire.ProtocolError, wire.RecvTimeout, wire.ConnectionClosed, OSError):
            pass
        finally:
            conn.close()

    # -- outbound ---------------------------------------------------------------

    def dial(self, peer_id: int, host: str, port: int, slot: int, role: PeerRole) -> FrameConn:
        sock = socket.create_connection((host, port), timeout=self.comm.config.connect_timeout)
        sock.settimeout(None)
        conn = FrameConn(sock)
        conn.send_message(
            MessageType.JOIN_REQUEST,
            P2pHello(wire.PROTOCOL_VERSION, role, self.comm.peer_id, slot, self.comm.view.epoch),
            timeout=10.0,
        )
        return conn

    def ensure_data_conns(self, peer_id: int, host: str, port: int, pool_size: int) -> None:
        for slot in range(pool_size):
            with self._lock:
                existing = self.outbound.get((peer_id, slot))
            if existing is not None and not existing.closed:
                continue
            conn = self.dial(peer_id, host, port, slot, PeerRole.P2P_DATA)
            with self._lock:
                self.outbound[(peer_id, slot)] = conn

    def get_tx(self, peer_id: int, slot: int) -> FrameConn:
        with self._lock:
            conn = self.outbound.get((peer_id, slot))
        if conn is not None and not conn.closed:
            return conn
        host, port = self.comm.view.roster[peer_id]
        conn = self.dial(peer_id, host, port, slot, PeerRole.P2P_DATA)
        with self._lock:
            self.outbound[(peer_id, slot)] = conn
        return conn

    def wait_rx(self, peer_id: int, slot: int, timeout: float) -> FrameConn:
        deadline = time.monotonic() + timeout
        with self._inbound_cv:
            while True:
                conn = self.inbound.get((peer_id, slot))
                if conn is not None and not conn.closed:
                    return conn
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise wire.ConnectionClosed(
                        f"no inbound data connection from peer {peer_id} slot {slot}"
                    )
                self._inbound_cv.wait(timeout=min(remaining, 0.2))

    def prune(self, keep: set[int]) -> None:
        with self._lock:
            for (peer, slot), conn in list(self.outbound.items()):
                if peer not in keep:
                    conn.close()
                    del self.outbound[(peer, slot)]
        with self._inbound_cv:
            for (peer, slot), conn in list(self.inbound.items()):
                if peer not in keep:
                    conn.close()
                    del self.inbound[(peer, slot)]

    def close(self) -> None:
        self._stop.set()
        try:
            self.listener.close()
        except OSError:
            pass
        with self._lock:
            for conn in self.outbound.values():
                conn.close()
            self.outbound.clear()
        with self._inbound_cv:
            for conn in self.inbound.values():
                conn.close()
            self.inbound.clear()


@dataclass
class CommStats:
    sync_calls: int = 0
    sync_payload_rx: int = 0
    reduce_attempts: int = 0
    reduce_completed: int = 0
    reduce_aborted: int = 0


class Communicator:
    """One training process's handle on the group."""

    def __init__(self, config: ClientConfig):
        self.config = config
        self.peer_id = 0
        self.run_epoch = 0
        self.view = GroupView()
        self._view_lock = threading.Lock()
        self.pool = BufferPool()
        self.stats = CommStats()
        self.event_log: list[tuple[str, str]] = []
        self._entries: dict[str, SharedStateEntry] = {}
        self._entries_lock = threading.Lock()
        self._handles: dict[int, AsyncHandle] = {}
        self._handles_lock = threading.Lock()
        self._api_lock = threading.RLock()
        self._vote_seq = 0
        self._query_round = 1
        self._query_lock = threading.Lock()
        self._closed = False
        self.p2p = _P2pManager(self)
        self.demux = _Demux(self)
        self.master: FrameConn | None = None
        self._slot_queues: list[queue.Queue] = [queue.Queue() for _ in range(config.pool_size)]
        self._slot_senders: list[SpanSender] = []

    # -- connection lifecycle ---------------------------------------------------

    def _connect(self) -> None:
        try:
            self.master = wire.connect_frame_conn(
                self.config.master_host, self.config.master_port, self.config.connect_timeout
            )
        except OSError as e:
            self.p2p.close()
            raise ConnectError(f"master unreachable at {self.config.master_addr}: {e}") from e
        try:
            self.master.send_message(
                MessageType.JOIN_REQUEST,
                ClientHello(wire.PROTOCOL_VERSION, self.p2p.host, self.p2p.port),
                timeout=self.config.connect_timeout,
            )
            msg_type, payload = self.master.recv_frame(timeout=self.config.connect_timeout)
        except (wire.ConnectionClosed, wire.RecvTimeout, OSError) as e:
            self.p2p.close()
            raise ConnectError(f"handshake failed: {e}") from e
        if msg_type != MessageType.JOIN_ASSIGN:
            self.p2p.close()
            raise ConnectError(f"expected join reply, got {msg_type.name}")
        assign = wire.JoinAssign.unpack(bytes(payload))
        if assign.status == JoinStatus.VERSION_MISMATCH:
            self.p2p.close()
            raise ConnectError("protocol version mismatch with master")
        if assign.status != JoinStatus.OK:
            self.p2p.close()
            raise ConnectError(f"join rejected: {assign.status.name}")
        self.peer_id = assign.peer_id
        self.run_epoch = assign.epoch
        self._query_round = assign.query_round
        threading.Thread(target=self._reader_loop, name="master-link", daemon=True).start()
        for slot in range(self.config.pool_size):
            self._slot_senders.append(SpanSender(f"slot-sender-{slot}"))
            threading.Thread(
                target=self._slot_loop, args=(slot,), name=f"slot-worker-{slot}", daemon=True
            ).start()
        log.info("connected: peer_id=%d", self.peer_id)

    def _reader_loop(self) -> None:
        while not self._closed:
            try:
                msg_type, payload = self.master.recv_frame(timeout=None)
                body = wire.decode_body(msg_type, payload)
            except (wire.ProtocolError, wire.ConnectionClosed, OSError) as e:
                self.demux.fail_all(f"master connection lost: {e}")
                return
            self.demux.route(msg_type, body)
            if msg_type == MessageType.BYE:
                return

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self.master is not None:
            try:
                self.master.send_message(MessageType.BYE, wire.Bye(0), timeout=1.0)
            except Exception:
                pass
            self.master.close()
        self.demux.fail_all("communicator closed")
        for q in self._slot_queues:
            q.put(None)
        for s in self._slot_senders:
            s.shutdown()
        self.p2p.close()

    def _kill(self) -> None:
        """Test helper: die abruptly, like a killed process (no goodbye)."""
        self._closed = True
        if self.master is not None:
            self.master.close()
        self.p2p.close()
        self.demux.fail_all("killed")

    def __enter__(self) -> "Communicator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- demux callbacks ----------------------------------------------------------

    def _apply_view(self, epoch, ring, roster, assign: TopologyAssign | None = None) -> None:
        if isinstance(roster, list):
            roster = {p.peer_id: (p.host, p.port) for p in roster}
        with self._view_lock:
            if epoch < self.view.epoch:
                return
            self.view.epoch = epoch
            self.view.ring = list(ring)
            self.view.roster = dict(roster)
            if assign is not None:
                if assign.you_accepted and not self.view.accepted:
                    # first acceptance aligns the pending-query round
                    with self._query_lock:
                        self._query_round = max(self._query_round, assign.query_round)
                self.view.accepted = assign.you_accepted
        self.p2p.prune(set(roster) | {self.peer_id})

    def _serve_entry(self, key: str):
        with self._entries_lock:
            entry = self._entries.get(key)
            if entry is None:
                return None
            return entry.revision, entry.readonly_view()

    # -- small queries -----------------------------------------------------------

    def get_world_size(self) -> int:
        """Accepted peers in this peer's committed group view."""
        with self._view_lock:
            return self.view.world

    def are_peers_pending(self) -> bool:
        """True when registered peers await admission. Uniform across all
        peers for the same logical query round; may overlap running
        collectives."""
        self._check_master()
        with self._query_lock:
            round_ = self._query_round
            self._query_round += 1
        slot = self.demux.answer_slot(round_)
        self.master.send_message(
            MessageType.PENDING_PEERS_QUERY, wire.PendingPeersQuery(round_), timeout=5.0
        )
        return bool(self._take(slot, self.config.vote_timeout, "pending-peers answer"))

    def _check_master(self) -> None:
        if self._closed:
            raise UsageError("communicator is closed")
        if self.demux.lost.is_set():
            raise MasterLostError(self.demux.lost_reason)

    def _take(self, q: queue.Queue, timeout: float, what: str):
        try:
            item = q.get(timeout=timeout)
        except queue.Empty:
            raise OperationError(f"timed out waiting for {what}") from None
        if item is _MASTER_LOST:
            raise MasterLostError(self.demux.lost_reason)
        return item

    def _no_pending_handles(self, what: str) -> None:
        with self._handles_lock:
            live = [h.tag for h in self._handles.values() if h.pending]
        if live:
            raise UsageError(f"{what} while collectives are in flight: tags {sorted(live)}")

    # -- update topology -----------------------------------------------------------

    def update_topology(self) -> TopologyResult:
        """Vote to accept pending peers and refresh the ring; blocks until
        the group commits. With min_peers configured, an accepted peer
        keeps voting until the world is large enough."""
        with self._api_lock:
            self._check_master()
            self._no_pending_handles("update_topology")
            while True:
                result = self._topology_round()
                if not result.accepted:
                    return result  # still registered; the caller may retry
                if result.world >= max(self.config.min_peers, 1):
                    return result
                time.sleep(0.05)

    def _topology_round(self) -> TopologyResult:
        prev_roster = set(self.view.roster) - {self.peer_id} if self.view.accepted else set()
        self._vote_seq += 1
        seq = self._vote_seq
        self.master.send_message(
            MessageType.VOTE_REQUEST, VoteRequest(VoteKind.TOPOLOGY, seq), timeout=5.0
        )
        while True:
            msg_type, body = self._take(
                self.demux.major, self.config.vote_timeout * 2, "topology commit"
            )
            if msg_type == MessageType.TRANSITION_COMMIT and isinstance(body, TopologyConnect):
                self._do_connect_phase(body)
            elif msg_type == MessageType.BANDWIDTH_PROBE_REQUEST:
                self._do_probe_phase(body)
            elif msg_type == MessageType.TOPOLOGY_ASSIGN:
                if body.acked_vote_seq != seq:
                    continue  # conclusion of an older call, already applied
                now_roster = {p.peer_id for p in body.roster} - {self.peer_id}
                added = len(now_roster - prev_roster)
                removed = len(prev_roster - now_roster)
                outcome = TopologyResult(
                    added=added, removed=removed, accepted=body.you_accepted, world=len(body.ring)
                )
                self.event_log.append(
                    ("update_topology", f"added={added} removed={removed} world={outcome.world}")
                )
                return outcome
            elif msg_type == MessageType.ABORT_NOTIFY and body.scope == AbortScope.PROTOCOL:
                raise OperationError(f"rejected by master: {body.reason}")
            else:
                log.warning("ignoring %s during topology call", msg_type.name)

    def _do_connect_phase(self, commit: TopologyConnect) -> None:
        failed: list[int] = []
        for peer in commit.roster:
            if peer.peer_id == self.peer_id:
                continue
            try:
                self.p2p.ensure_data_conns(peer.peer_id, peer.host, peer.port, commit.pool_size)
            except OSError:
                failed.append(peer.peer_id)
        self.master.send_message(
            MessageType.VOTE_CAST,
            VoteCast(CastPhase.P2P_CONNECT, ok=not failed, failed_peers=failed),
            timeout=5.0,
        )

    def _do_probe_phase(self, request: ProbeRequest) -> None:
        scratch_raw = self.pool.acquire(min(request.payload_bytes, 1 << 20))
        scratch = memoryview(scratch_raw)
        results = []
        for target in request.targets:
            try:
                conn = self.p2p.dial(target.peer_id, target.host, target.port, 0, PeerRole.P2P_PROBE)
                try:
                    rate = topo.run_probe(conn, request.payload_bytes, scratch)
                finally:
                    conn.close()
                results.append((target.peer_id, True, rate))
            except (
                topo.TopologyError,
                wire.ProtocolError,
                wire.ConnectionClosed,
                wire.RecvTimeout,
                OSError,
            ):
                results.append((target.peer_id, False, 0.0))
        self.pool.release(scratch_raw)
        self.master.send_message(
            MessageType.BANDWIDTH_PROBE_REPORT, wire.ProbeReport(results), timeout=5.0
        )

    # -- shared state sync ----------------------------------------------------------

    def sync_shared_state(
        self,
        entries: list[SharedStateEntry],
        strategy: SyncStrategy = SyncStrategy.ENFORCE_POPULAR,
    ) -> SyncOutcomeResult:
        """Bring every accepted peer to bit-identical contents for the
        given entries. No payload moves when digests already match."""
        with self._api_lock:
            self._check_master()
            self._no_pending_handles("sync_shared_state")
            self.stats.sync_calls += 1
            with self._entries_lock:
                self._entries = {e.key: e for e in entries}
            metas = [
                StateEntryMeta(e.key, e.revision, e.content_hash(), e.nbytes, e.dtype)
                for e in entries
            ]
            self.master.send_message(
                MessageType.SHARED_STATE_REPORT, SharedStateReport(strategy, metas), timeout=5.0
            )
            while True:
                msg_type, body = self._take(
                    self.demux.major, self.config.vote_timeout * 2, "sync plan"
                )
                if msg_type == MessageType.SHARED_STATE_PLAN:
                    ok, reason = self._execute_fetches(body, entries)
                    digest = [(e.key, e.revision, e.content_hash()) for e in entries]
                    self.master.send_message(
                        MessageType.VOTE_CAST,
                        VoteCast(CastPhase.SYNC_DONE, ok=ok, entries=digest),
                        timeout=5.0,
                    )
                    if not ok:
                        log.warning("sync fetch failed: %s", reason)
                elif msg_type == MessageType.TRANSITION_COMMIT and isinstance(body, SyncResult):
                    return self._sync_outcome(body)
                elif msg_type == MessageType.ABORT_NOTIFY and body.scope == AbortScope.PROTOCOL:
                    raise OperationError(f"rejected by master: {body.reason}")
                else:
                    log.warning("ignoring %s during sync call", msg_type.name)

    def _sync_outcome(self, result: SyncResult) -> SyncOutcomeResult:
        if result.outcome == SyncOutcome.IN_SYNC:
            out = SyncOutcomeResult(SyncStatus.IN_SYNC)
        elif result.outcome == SyncOutcome.UPDATED:
            out = SyncOutcomeResult(SyncStatus.UPDATED, result.updated_keys)
        else:
            out = SyncOutcomeResult(SyncStatus.ERROR, reason=result.reason)
        self.event_log.append(("sync", out.status.value))
        return out

    def _execute_fetches(
        self, plan: SharedStatePlan, entries: list[SharedStateEntry]
    ) -> tuple[bool, str]:
        by_key = {e.key: e for e in entries}
        for item in plan.fetches:
            entry = by_key.get(item.key)
            if entry is None:
                return False, f"plan names unknown entry {item.key!r}"
            if item.revision < entry.revision:
                return False, (
                    f"plan would downgrade {item.key!r} from revision "
                    f"{entry.revision} to {item.revision}"
                )
            if item.nbytes != entry.nbytes:
                return False, f"size mismatch for {item.key!r}"
            try:
                self._fetch_entry(item, entry)
            except (
                wire.ProtocolError,
                wire.ConnectionClosed,
                wire.RecvTimeout,
                OSError,
                CommError,
            ) as e:
                return False, f"fetch of {item.key!r} from peer {item.donor_peer} failed: {e}"
            if entry.content_hash() != item.hash:
                return False, f"fetched bytes for {item.key!r} do not match the plan hash"
            entry.revision = item.revision
        return True, ""

    def _fetch_entry(self, item: wire.FetchItem, entry: SharedStateEntry) -> None:
        conn = self.p2p.dial(
            item.donor_peer, item.donor_host, item.donor_port, 0, PeerRole.P2P_SYNC
        )
        try:
            conn.send_message(
                MessageType.SHARED_STATE_REPORT,
                SharedStateReport(
                    SyncStrategy.FETCH, [StateEntryMeta(item.key, 0, 0, item.nbytes, entry.dtype)]
                ),
                timeout=30.0,
            )
            view = entry.writable_view()
            received = 0
            while received < item.nbytes:
                msg_type, payload = conn.recv_frame(timeout=60.0)
                if msg_type != MessageType.SHARED_STATE_CHUNK:
                    raise wire.ProtocolError(f"expected state chunk, got {msg_type.name}")
                chunk = wire.SharedStateChunk.unpack(bytes(payload))
                if chunk.key != item.key or chunk.total != item.nbytes:
                    raise wire.ProtocolError("state chunk does not match the requested entry")
                view[chunk.offset : chunk.offset + len(chunk.data)] = chunk.data
                received += len(chunk.data)
                self.stats.sync_payload_rx += len(chunk.data)
        finally:
            conn.close()

    # -- collectives -------------------------------------------------------------------

    def all_reduce_async(
        self,
        buffer: np.ndarray,
        tag: int,
        op: ReduceOp = ReduceOp.SUM,
        quantize: bool = False,
    ) -> AsyncHandle:
        """Enqueue one tagged all-reduce; returns immediately. The engine
        owns the buffer until the returned handle resolves."""
        self._check_master()
        if not isinstance(buffer, np.ndarray) or buffer.ndim != 1:
            raise UsageError("buffer must be a one-dimensional numpy array")
        if buffer.dtype not in DTYPE_OF:
            raise UsageError(f"unsupported dtype {buffer.dtype}")
        if not buffer.flags.writeable or not buffer.flags.c_contiguous:
            raise UsageError("buffer must be writable and contiguous")
        if quantize and buffer.dtype != np.float32:
            raise UsageError("quantization requires float32 buffers")
        handle = AsyncHandle(tag)
        with self._handles_lock:
            if tag in self._handles and self._handles[tag].pending:
                raise UsageError(f"tag {tag} already has a live operation")
            self._handles[tag] = handle
        self.stats.reduce_attempts += 1
        self._slot_queues[tag % self.config.pool_size].put((handle, buffer, op, quantize))
        return handle

    def await_async_reduce(self, handle: AsyncHandle, timeout: float | None = None) -> ReduceResult:
        """Block until the tag's completion vote commits or an abort
        propagates; a handle can be awaited exactly once."""
        if handle._consumed:
            raise UsageError("handle already awaited")
        if not handle._done.wait(timeout=timeout if timeout is not None else 600.0):
            raise OperationError(f"collective tag {handle.tag} did not resolve in time")
        handle._consumed = True
        result = handle._outcome
        self.event_log.append(("reduce", f"tag={handle.tag} {result.status}"))
        if result.completed:
            self.stats.reduce_completed += 1
        else:
            self.stats.reduce_aborted += 1
        return result

    def all_reduce(self, buffer, tag, op=ReduceOp.SUM, quantize=False) -> ReduceResult:
        """Synchronous convenience wrapper around the async pair."""
        return self.await_async_reduce(self.all_reduce_async(buffer, tag, op, quantize))

    # -- engine ------------------------------------------------------------------------

    def _slot_loop(self, slot: int) -> None:
        sender = self._slot_senders[slot]
        while True:
            job = self._slot_queues[slot].get()
            if job is None:
                return
            handle, buffer, op, quantize = job
            try:
                self._execute_op(slot, sender, handle, buffer, op, quantize)
            except BaseException as e:  # the engine must never die silently
                log.exception("collective engine failure")
                handle._resolve("aborted", f"engine failure: {e}")

    def _execute_op(self, slot, sender, handle, buffer, op, quantize) -> None:
        tag = handle.tag
        box = self.demux.tag_box(tag)
        box.reset_for_attempt()
        if self.demux.lost.is_set():
            handle._resolve("aborted", "master connection lost")
            return
        if quantize and not bool(np.all(np.isfinite(buffer))):
            handle._resolve("aborted", "buffer contains non-finite values")
            return
        try:
            self.master.send_message(
                MessageType.COLLECTIVE_INIT_VOTE,
                CollectiveInitVote(tag, buffer.size, DTYPE_OF[buffer.dtype], op.code, quantize),
                timeout=5.0,
            )
        except (wire.ConnectionClosed, wire.RecvTimeout, OSError):
            handle._resolve("aborted", "master connection lost")
            return
        item = self._box_take(box, self.config.vote_timeout * 2)
        if item is None:
            handle._resolve("aborted", "master lost or initiation vote timed out")
            return
        if item[0] == MessageType.ABORT_NOTIFY:
            handle._resolve("aborted", item[1].reason)
            return
        commit = item[1]
        if not isinstance(commit, CollectiveInitCommit):
            handle._resolve("aborted", f"unexpected {item[0].name} during initiation")
            return
        handle.seq_nr = commit.seq_nr
        ring = commit.ring
        world = len(ring)
        if world == 1:
            finalize_reduction(buffer, op, 1)
            self._finish_op(handle, box, buffer, None, tx=0, rx=0)
            return

        rank = ring.index(self.peer_id)
        succ = ring[(rank + 1) % world]
        pred = ring[(rank - 1) % world]
        backup_raw = self.pool.acquire(max(buffer.size * buffer.dtype.itemsize, 1))
        backup = np.frombuffer(backup_raw, dtype=buffer.dtype, count=buffer.size)
        np.copyto(backup, buffer)
        try:
            tx_conn = self.p2p.get_tx(succ, slot)
            rx_conn = self.p2p.wait_rx(pred, slot, timeout=self.config.vote_timeout)
        except (OSError, wire.ConnectionClosed) as e:
            self.pool.release(backup_raw)
            self._report_abort(tag, commit.seq_nr, f"ring connect failed: {e}")
            self._await_abort_then_resolve(handle, box, f"ring connect failed: {e}")
            return
        ctx = OpContext(
            tag=tag,
            seq_nr=commit.seq_nr,
            buffer=buffer,
            op=op,
            quantize=quantize,
            rank=rank,
            world=world,
            tx_conn=tx_conn,
            rx_conn=rx_conn,
            abort_event=box.abort_event,
            pool=self.pool,
            chunk_bytes=self.config.chunk_bytes,
            fault_hook=self.config.fault_hook,
        )
        try:
            run_all_reduce(ctx, sender, backup)
        except CollectiveAborted as e:
            self.pool.release(backup_raw)
            if e.source == "io":
                self._report_abort(tag, commit.seq_nr, e.reason)
                self._await_abort_then_resolve(handle, box, e.reason)
            else:
                handle._resolve("aborted", self._drain_abort_reason(box, e.reason))
            return
        self._finish_op(
            handle,
            box,
            buffer,
            (backup_raw, backup),
            tx=ctx.tx_payload_bytes,
            rx=ctx.rx_payload_bytes,
        )

    def _finish_op(self, handle, box, buffer, backup_pair, tx: int, rx: int) -> None:
        try:
            self.master.send_message(
                MessageType.COLLECTIVE_COMPLETE_VOTE,
                CollectiveCompleteVote(handle.tag, handle.seq_nr, True, tx, rx),
                timeout=5.0,
            )
        except (wire.ConnectionClosed, wire.RecvTimeout, OSError):
            if backup_pair is not None:
                np.copyto(buffer, backup_pair[1])
                self.pool.release(backup_pair[0])
            handle._resolve("aborted", "master connection lost at completion")
            return
        item = self._box_take(box, self.config.vote_timeout * 2)
        if (
            item is not None
            and item[0] == MessageType.TRANSITION_COMMIT
            and isinstance(item[1], CollectiveCompleteCommit)
        ):
            if backup_pair is not None:
                self.pool.release(backup_pair[0])
            handle._resolve("completed", tx=tx, rx=rx)
            return
        # completion vetoed: another peer failed after this one finished,
        # so the group retries; hand the caller its original bytes back
        reason = (
            item[1].reason
            if item is not None and item[0] == MessageType.ABORT_NOTIFY
            else "completion vote did not commit"
        )
        if backup_pair is not None:
            np.copyto(buffer, backup_pair[1])
            self.pool.release(backup_pair[0])
        handle._resolve("aborted", reason)

    def _box_take(self, box: _TagBox, timeout: float):
        try:
            item = box.frames.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is _MASTER_LOST:
            return None
        return item

    def _drain_abort_reason(self, box: _TagBox, default: str) -> str:
        try:
            while True:
                item = box.frames.get_nowait()
                if item is not _MASTER_LOST and item[0] == MessageType.ABORT_NOTIFY:
                    return item[1].reason
        except queue.Empty:
            pass
        return default

    def _report_abort(self, tag: int, seq: int, reason: str) -> None:
        try:
            self.master.send_message(
                MessageType.ABORT_NOTIFY,
                AbortNotify(AbortScope.COLLECTIVE, tag, seq, reason),
                timeout=5.0,
            )
        except (wire.ConnectionClosed, wire.RecvTimeout, OSError):
            pass

    def _await_abort_then_resolve(self, handle, box, reason: str) -> None:
        """After reporting a local failure, wait for the master's abort so
        the group-view update rides along; resolve either way."""
        item = self._box_take(box, self.config.vote_timeout)
        if item is not None and item[0] == MessageType.ABORT_NOTIFY:
            reason = item[1].reason
        handle._resolve("aborted", reason)


def connect(
    master_addr: str | None = None, config: ClientConfig | None = None, **overrides
) -> Communicator:
    """Create a communicator and join the master as a registered peer."""
    if config is None:
        config = load_config(**overrides)
    if master_addr is not None:
        config.master_addr = master_addr
    comm = Communicator(config)
    comm._connect()
    return comm
