"""Binary wire protocol shared by the coordinator and all peers.

Frame layout (control fields big-endian):

  [4 bytes: length = 1 + len(payload), big-endian]
  [1 byte:  message type]
  [N bytes: payload]

Tensor payload bodies (the bytes carried by ChunkData / SharedStateChunk)
are raw little-endian element bytes; everything else on the wire is
big-endian. The normative listing of every message code and payload
layout lives in docs/protocol.md.

The first frame sent on any new connection is a JOIN_REQUEST whose payload
starts with a u16 protocol version; a version mismatch closes the
connection.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum

PROTOCOL_VERSION = 1

# length field is 1 (type byte) + payload, and must fit in u32
MAX_PAYLOAD = 2**32 - 2

_HEADER = struct.Struct(">IB")


class ProtocolError(Exception):
    """Malformed or out-of-contract traffic on a connection."""


class IncompleteFrameError(ProtocolError):
    """The byte source ended before a complete frame was read."""


class OversizePayloadError(ProtocolError):
    """Payload too large for the 32-bit length field."""


class ConnectionClosed(ProtocolError):
    """The remote side closed the connection."""


class RecvTimeout(Exception):
    """recv_frame gave up waiting; the partial frame is resumed next call."""


class MessageType(IntEnum):
    """Stable u8 message codes. Unknown codes are a protocol error."""

    JOIN_REQUEST = 1
    JOIN_ASSIGN = 2
    VOTE_REQUEST = 3
    VOTE_CAST = 4
    TRANSITION_COMMIT = 5
    ABORT_NOTIFY = 6
    TOPOLOGY_ASSIGN = 7
    BANDWIDTH_PROBE_REQUEST = 8
    BANDWIDTH_PROBE_REPORT = 9
    SHARED_STATE_REPORT = 10
    SHARED_STATE_PLAN = 11
    SHARED_STATE_CHUNK = 12
    COLLECTIVE_INIT_VOTE = 13
    COLLECTIVE_COMPLETE_VOTE = 14
    CHUNK_DATA = 15
    CHUNK_ACK = 16
    QUANT_META = 17
    PENDING_PEERS_QUERY = 18
    PENDING_PEERS_ANSWER = 19
    BYE = 20


class PeerRole(IntEnum):
    """Role byte inside JOIN_REQUEST: who is dialing and why."""

    CLIENT = 1      # training process -> master
    P2P_DATA = 2    # ring data connection (one pool slot)
    P2P_PROBE = 3   # bandwidth probe connection
    P2P_SYNC = 4    # shared-state fetch connection


class JoinStatus(IntEnum):
    OK = 0
    VERSION_MISMATCH = 1
    REJECTED = 2


class VoteKind(IntEnum):
    TOPOLOGY = 1


class CastPhase(IntEnum):
    P2P_CONNECT = 1
    SYNC_DONE = 2


class CommitKind(IntEnum):
    TOPOLOGY_CONNECT = 1
    COLLECTIVE_INIT = 2
    COLLECTIVE_COMPLETE = 3
    SYNC_RESULT = 4


class AbortScope(IntEnum):
    COLLECTIVE = 1
    PROTOCOL = 2


class SyncStrategy(IntEnum):
    ENFORCE_POPULAR = 1
    SEND_ONLY = 2
    RECEIVE_ONLY = 3
    FETCH = 4  # p2p only: receiver requesting entries from a donor


class SyncOutcome(IntEnum):
    IN_SYNC = 1
    UPDATED = 2
    FAILED = 3


class DType(IntEnum):
    F32 = 1
    F64 = 2
    U8 = 3
    I32 = 4
    I64 = 5


DTYPE_WIDTH = {DType.F32: 4, DType.F64: 8, DType.U8: 1, DType.I32: 4, DType.I64: 8}


class ReduceOpCode(IntEnum):
    SUM = 1
    AVG = 2
    MAX = 3
    MIN = 4


# ---------------------------------------------------------------------------
# Frame encode / decode
# ---------------------------------------------------------------------------


def encode_frame(msg_type: MessageType, payload: bytes | bytearray | memoryview = b"") -> bytes:
    """Pack one frame: big-endian length prefix, type byte, payload."""
    n = len(payload)
    if n > MAX_PAYLOAD:
        raise OversizePayloadError(f"payload of {n} bytes exceeds frame limit")
    return _HEADER.pack(n + 1, int(msg_type)) + bytes(payload)


def decode_frame(source) -> tuple[MessageType, bytes]:
    """Read exactly one frame from a byte source with a read(n) method.

    Consumes length+4 bytes and no more. Raises IncompleteFrameError on a
    truncated stream and ProtocolError on an unknown message code.
    """
    header = _read_exact(source, 5)
    length, code = _HEADER.unpack(header)
    if length < 1:
        raise ProtocolError(f"frame length {length} below minimum of 1")
    try:
        msg_type = MessageType(code)
    except ValueError:
        raise ProtocolError(f"unknown message code 0x{code:02x}") from None
    payload = _read_exact(source, length - 1)
    return msg_type, payload


def _read_exact(source, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        piece = source.read(remaining)
        if not piece:
            raise IncompleteFrameError(f"stream ended {remaining} bytes short")
        chunks.append(piece)
        remaining -= len(piece)
    return b"".join(chunks)


class FrameDecoder:
    """Incremental frame parser: feed bytes in arbitrary pieces.

    Feeding a frame one byte at a time yields the same frames as feeding
    it whole.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[MessageType, bytes]]:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < 5:
                break
            length, code = _HEADER.unpack_from(self._buf)
            if length < 1:
                raise ProtocolError(f"frame length {length} below minimum of 1")
            total = 4 + length
            if len(self._buf) < total:
                break
            try:
                msg_type = MessageType(code)
            except ValueError:
                raise ProtocolError(f"unknown message code 0x{code:02x}") from None
            frames.append((msg_type, bytes(self._buf[5:total])))
            del self._buf[:total]
        return frames

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# Payload pack/unpack helpers
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string field exceeds 65535 bytes")
    return struct.pack(">H", len(raw)) + raw


class _Reader:
    """Cursor over a payload for unpacking."""

    def __init__(self, data: bytes | memoryview):
        self.data = bytes(data)
        self.pos = 0

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.data):
            raise ProtocolError("payload truncated")
        vals = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return vals if len(vals) > 1 else vals[0]

    def take_str(self) -> str:
        n = self.take(">H")
        if self.pos + n > len(self.data):
            raise ProtocolError("payload truncated in string")
        raw = self.data[self.pos : self.pos + n]
        self.pos += n
        return raw.decode("utf-8")

    def take_bytes(self, n: int | None = None) -> bytes:
        if n is None:
            n = len(self.data) - self.pos
        if self.pos + n > len(self.data):
            raise ProtocolError("payload truncated in byte field")
        raw = self.data[self.pos : self.pos + n]
        self.pos += n
        return raw

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.pos} trailing bytes in payload")


def _pack_u64s(ids) -> bytes:
    ids = list(ids)
    return struct.pack(">I", len(ids)) + b"".join(struct.pack(">Q", i) for i in ids)


def _take_u64s(r: _Reader) -> list[int]:
    n = r.take(">I")
    return [r.take(">Q") for _ in range(n)]


# ---------------------------------------------------------------------------
# Message bodies
# ---------------------------------------------------------------------------


@dataclass
class ClientHello:
    """JOIN_REQUEST from a training process to the master."""

    version: int
    p2p_host: str
    p2p_port: int

    def pack(self) -> bytes:
        return (
            struct.pack(">HB", self.version, PeerRole.CLIENT)
            + _pack_str(self.p2p_host)
            + struct.pack(">H", self.p2p_port)
        )


@dataclass
class P2pHello:
    """JOIN_REQUEST on a peer-to-peer connection, identifying the dialer."""

    version: int
    role: PeerRole
    src_peer: int
    slot: int
    epoch: int

    def pack(self) -> bytes:
        return struct.pack(
            ">HBQIQ", self.version, self.role, self.src_peer, self.slot, self.epoch
        )


def unpack_join_request(payload: bytes) -> ClientHello | P2pHello:
    r = _Reader(payload)
    version, role = r.take(">HB")
    role = PeerRole(role)
    if role == PeerRole.CLIENT:
        host = r.take_str()
        port = r.take(">H")
        r.done()
        return ClientHello(version, host, port)
    src, slot, epoch = r.take(">QIQ")
    r.done()
    return P2pHello(version, role, src, slot, epoch)


@dataclass
class JoinAssign:
    status: JoinStatus
    peer_id: int = 0
    epoch: int = 0
    query_round: int = 0

    def pack(self) -> bytes:
        return struct.pack(">BQQQ", self.status, self.peer_id, self.epoch, self.query_round)

    @classmethod
    def unpack(cls, payload: bytes) -> "JoinAssign":
        r = _Reader(payload)
        status, peer_id, epoch, query_round = r.take(">BQQQ")
        r.done()
        return cls(JoinStatus(status), peer_id, epoch, query_round)


@dataclass
class VoteRequest:
    kind: VoteKind
    vote_seq: int = 0  # per-peer counter; the concluding assign echoes it

    def pack(self) -> bytes:
        return struct.pack(">BQ", self.kind, self.vote_seq)

    @classmethod
    def unpack(cls, payload: bytes) -> "VoteRequest":
        r = _Reader(payload)
        kind, vote_seq = r.take(">BQ")
        r.done()
        return cls(VoteKind(kind), vote_seq)


@dataclass
class VoteCast:
    phase: CastPhase
    ok: bool
    failed_peers: list[int] = field(default_factory=list)
    entries: list[tuple[str, int, int]] = field(default_factory=list)  # (key, revision, hash)

    def pack(self) -> bytes:
        out = [struct.pack(">BB", self.phase, 1 if self.ok else 0)]
        out.append(_pack_u64s(self.failed_peers))
        out.append(struct.pack(">I", len(self.entries)))
        for key, rev, hsh in self.entries:
            out.append(_pack_str(key) + struct.pack(">QQ", rev, hsh))
        return b"".join(out)

    @classmethod
    def unpack(cls, payload: bytes) -> "VoteCast":
        r = _Reader(payload)
        phase, ok = r.take(">BB")
        failed = _take_u64s(r)
        n = r.take(">I")
        entries = []
        for _ in range(n):
            key = r.take_str()
            rev, hsh = r.take(">QQ")
            entries.append((key, rev, hsh))
        r.done()
        return cls(CastPhase(phase), bool(ok), failed, entries)


@dataclass
class PeerAddr:
    peer_id: int
    host: str
    port: int
    is_new: bool = False

    def pack(self) -> bytes:
        return (
            struct.pack(">Q", self.peer_id)
            + _pack_str(self.host)
            + struct.pack(">HB", self.port, 1 if self.is_new else 0)
        )

    @classmethod
    def take(cls, r: _Reader) -> "PeerAddr":
        peer_id = r.take(">Q")
        host = r.take_str()
        port, is_new = r.take(">HB")
        return cls(peer_id, host, port, bool(is_new))


def _pack_roster(roster: list[PeerAddr]) -> bytes:
    return struct.pack(">I", len(roster)) + b"".join(p.pack() for p in roster)


def _take_roster(r: _Reader) -> list[PeerAddr]:
    n = r.take(">I")
    return [PeerAddr.take(r) for _ in range(n)]


@dataclass
class TopologyConnect:
    """TRANSITION_COMMIT: dial pool connections to every roster peer."""

    roster: list[PeerAddr]
    pool_size: int

    KIND = CommitKind.TOPOLOGY_CONNECT

    def pack(self) -> bytes:
        return struct.pack(">BI", self.KIND, self.pool_size) + _pack_roster(self.roster)


@dataclass
class CollectiveInitCommit:
    """TRANSITION_COMMIT: begin the data phase for one tagged operation."""

    tag: int
    seq_nr: int
    epoch: int
    ring: list[int]

    KIND = CommitKind.COLLECTIVE_INIT

    def pack(self) -> bytes:
        return struct.pack(">BQQQ", self.KIND, self.tag, self.seq_nr, self.epoch) + _pack_u64s(
            self.ring
        )


@dataclass
class CollectiveCompleteCommit:
    tag: int
    seq_nr: int

    KIND = CommitKind.COLLECTIVE_COMPLETE

    def pack(self) -> bytes:
        return struct.pack(">BQQ", self.KIND, self.tag, self.seq_nr)


@dataclass
class SyncResult:
    outcome: SyncOutcome
    updated_keys: list[str] = field(default_factory=list)
    reason: str = ""

    KIND = CommitKind.SYNC_RESULT

    def pack(self) -> bytes:
        out = [struct.pack(">BBI", self.KIND, self.outcome, len(self.updated_keys))]
        for k in self.updated_keys:
            out.append(_pack_str(k))
        out.append(_pack_str(self.reason))
        return b"".join(out)


def unpack_transition_commit(payload: bytes):
    r = _Reader(payload)
    kind = CommitKind(r.take(">B"))
    if kind == CommitKind.TOPOLOGY_CONNECT:
        pool_size = r.take(">I")
        roster = _take_roster(r)
        r.done()
        return TopologyConnect(roster, pool_size)
    if kind == CommitKind.COLLECTIVE_INIT:
        tag, seq, epoch = r.take(">QQQ")
        ring = _take_u64s(r)
        r.done()
        return CollectiveInitCommit(tag, seq, epoch, ring)
    if kind == CommitKind.COLLECTIVE_COMPLETE:
        tag, seq = r.take(">QQ")
        r.done()
        return CollectiveCompleteCommit(tag, seq)
    outcome, n = r.take(">BI")
    keys = [r.take_str() for _ in range(n)]
    reason = r.take_str()
    r.done()
    return SyncResult(SyncOutcome(outcome), keys, reason)


@dataclass
class AbortNotify:
    """Failure report (peer->master) or abort propagation (master->peers).

    The master->peer direction carries the post-abort group view so
    survivors atomically observe the shrunk world.
    """

    scope: AbortScope
    tag: int
    seq_nr: int
    reason: str
    failed_peer: int = 0
    epoch: int = 0
    ring: list[int] = field(default_factory=list)
    roster: list[PeerAddr] = field(default_factory=list)
    has_view: bool = False

    def pack(self) -> bytes:
        out = [
            struct.pack(">BQQ", self.scope, self.tag, self.seq_nr),
            _pack_str(self.reason),
            struct.pack(">QB", self.failed_peer, 1 if self.has_view else 0),
        ]
        if self.has_view:
            out.append(struct.pack(">Q", self.epoch))
            out.append(_pack_u64s(self.ring))
            out.append(_pack_roster(self.roster))
        return b"".join(out)

    @classmethod
    def unpack(cls, payload: bytes) -> "AbortNotify":
        r = _Reader(payload)
        scope, tag, seq = r.take(">BQQ")
        reason = r.take_str()
        failed_peer, has_view = r.take(">QB")
        epoch, ring, roster = 0, [], []
        if has_view:
            epoch = r.take(">Q")
            ring = _take_u64s(r)
            roster = _take_roster(r)
        r.done()
        return cls(
            AbortScope(scope), tag, seq, reason, failed_peer, epoch, ring, roster, bool(has_view)
        )


@dataclass
class TopologyAssign:
    epoch: int
    ring: list[int]
    roster: list[PeerAddr]
    you_accepted: bool
    added: int
    removed: int
    query_round: int
    acked_vote_seq: int = 0  # nonzero: concludes the peer's topology vote

    def pack(self) -> bytes:
        return (
            struct.pack(">Q", self.epoch)
            + _pack_u64s(self.ring)
            + _pack_roster(self.roster)
            + struct.pack(
                ">BIIQQ",
                1 if self.you_accepted else 0,
                self.added,
                self.removed,
                self.query_round,
                self.acked_vote_seq,
            )
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "TopologyAssign":
        r = _Reader(payload)
        epoch = r.take(">Q")
        ring = _take_u64s(r)
        roster = _take_roster(r)
        acc, added, removed, query_round, acked = r.take(">BIIQQ")
        r.done()
        return cls(epoch, ring, roster, bool(acc), added, removed, query_round, acked)


@dataclass
class ProbeRequest:
    """Master->peer: measure listed directed pairs. P2p: announce a timed
    transfer of payload_bytes to follow."""

    payload_bytes: int
    targets: list[PeerAddr] = field(default_factory=list)

    def pack(self) -> bytes:
        return struct.pack(">I", self.payload_bytes) + _pack_roster(self.targets)

    @classmethod
    def unpack(cls, payload: bytes) -> "ProbeRequest":
        r = _Reader(payload)
        nbytes = r.take(">I")
        targets = _take_roster(r)
        r.done()
        return cls(nbytes, targets)


@dataclass
class ProbeReport:
    """Peer->master: measured directed throughputs, bytes/second."""

    results: list[tuple[int, bool, float]]  # (to_peer, ok, bytes_per_sec)

    def pack(self) -> bytes:
        out = [struct.pack(">I", len(self.results))]
        for to_peer, ok, rate in self.results:
            out.append(struct.pack(">QBd", to_peer, 1 if ok else 0, rate))
        return b"".join(out)

    @classmethod
    def unpack(cls, payload: bytes) -> "ProbeReport":
        r = _Reader(payload)
        n = r.take(">I")
        results = []
        for _ in range(n):
            to_peer, ok, rate = r.take(">QBd")
            results.append((to_peer, bool(ok), rate))
        r.done()
        return cls(results)


@dataclass
class StateEntryMeta:
    key: str
    revision: int
    hash: int
    nbytes: int
    dtype: DType

    def pack(self) -> bytes:
        return _pack_str(self.key) + struct.pack(
            ">QQQB", self.revision, self.hash, self.nbytes, self.dtype
        )

    @classmethod
    def take(cls, r: _Reader) -> "StateEntryMeta":
        key = r.take_str()
        rev, hsh, nbytes, dtype = r.take(">QQQB")
        return cls(key, rev, hsh, nbytes, DType(dtype))


@dataclass
class SharedStateReport:
    """Peer->master digest report (doubles as the sync vote), or a p2p
    fetch request when strategy == FETCH."""

    strategy: SyncStrategy
    entries: list[StateEntryMeta]

    def pack(self) -> bytes:
        return (
            struct.pack(">BI", self.strategy, len(self.entries))
            + b"".join(e.pack() for e in self.entries)
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "SharedStateReport":
        r = _Reader(payload)
        strategy, n = r.take(">BI")
        entries = [StateEntryMeta.take(r) for _ in range(n)]
        r.done()
        return cls(SyncStrategy(strategy), entries)


@dataclass
class FetchItem:
    key: str
    donor_peer: int
    donor_host: str
    donor_port: int
    revision: int
    hash: int
    nbytes: int

    def pack(self) -> bytes:
        return (
            _pack_str(self.key)
            + struct.pack(">Q", self.donor_peer)
            + _pack_str(self.donor_host)
            + struct.pack(">HQQQ", self.donor_port, self.revision, self.hash, self.nbytes)
        )

    @classmethod
    def take(cls, r: _Reader) -> "FetchItem":
        key = r.take_str()
        donor = r.take(">Q")
        host = r.take_str()
        port, rev, hsh, nbytes = r.take(">HQQQ")
        return cls(key, donor, host, port, rev, hsh, nbytes)


@dataclass
class SharedStatePlan:
    fetches: list[FetchItem]

    def pack(self) -> bytes:
        return struct.pack(">I", len(self.fetches)) + b"".join(f.pack() for f in self.fetches)

    @classmethod
    def unpack(cls, payload: bytes) -> "SharedStatePlan":
        r = _Reader(payload)
        n = r.take(">I")
        fetches = [FetchItem.take(r) for _ in range(n)]
        r.done()
        return cls(fetches)


_STATE_CHUNK_FIXED = struct.Struct(">QQQI")


@dataclass
class SharedStateChunk:
    key: str
    revision: int
    total: int
    offset: int
    data: bytes

    def pack(self) -> bytes:
        return (
            _pack_str(self.key)
            + _STATE_CHUNK_FIXED.pack(self.revision, self.total, self.offset, len(self.data))
            + bytes(self.data)
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "SharedStateChunk":
        r = _Reader(payload)
        key = r.take_str()
        rev, total, offset, n = r.take(">QQQI")
        data = r.take_bytes(n)
        r.done()
        return cls(key, rev, total, offset, data)


@dataclass
class CollectiveInitVote:
    tag: int
    element_count: int
    dtype: DType
    op: ReduceOpCode
    quantize: bool

    def pack(self) -> bytes:
        return struct.pack(
            ">QQBBB", self.tag, self.element_count, self.dtype, self.op, 1 if self.quantize else 0
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "CollectiveInitVote":
        r = _Reader(payload)
        tag, count, dtype, op, quant = r.take(">QQBBB")
        r.done()
        return cls(tag, count, DType(dtype), ReduceOpCode(op), bool(quant))


@dataclass
class CollectiveCompleteVote:
    tag: int
    seq_nr: int
    ok: bool
    tx_bytes: int = 0
    rx_bytes: int = 0

    def pack(self) -> bytes:
        return struct.pack(
            ">QQBQQ", self.tag, self.seq_nr, 1 if self.ok else 0, self.tx_bytes, self.rx_bytes
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "CollectiveCompleteVote":
        r = _Reader(payload)
        tag, seq, ok, tx, rx = r.take(">QQBQQ")
        r.done()
        return cls(tag, seq, bool(ok), tx, rx)


_CHUNK_HEADER = struct.Struct(">QQIQI")
CHUNK_HEADER_LEN = _CHUNK_HEADER.size


@dataclass
class ChunkHeader:
    """Header of a CHUNK_DATA frame; (tag, seq_nr) identifies the attempt
    so data from aborted attempts self-identifies as stale."""

    tag: int
    seq_nr: int
    chunk_index: int
    byte_offset: int
    byte_len: int

    def pack(self) -> bytes:
        return _CHUNK_HEADER.pack(
            self.tag, self.seq_nr, self.chunk_index, self.byte_offset, self.byte_len
        )

    @classmethod
    def unpack_from(cls, payload) -> "ChunkHeader":
        tag, seq, idx, off, n = _CHUNK_HEADER.unpack_from(payload)
        return cls(tag, seq, idx, off, n)


def pack_chunk_data(header: ChunkHeader, data) -> list[bytes | memoryview]:
    """Buffer list for a CHUNK_DATA frame, raw element bytes uncopied."""
    if len(data) != header.byte_len:
        raise ProtocolError("chunk header length disagrees with data")
    return [header.pack(), data]


@dataclass
class ChunkAck:
    token: int

    def pack(self) -> bytes:
        return struct.pack(">Q", self.token)

    @classmethod
    def unpack(cls, payload: bytes) -> "ChunkAck":
        r = _Reader(payload)
        token = r.take(">Q")
        r.done()
        return cls(token)


@dataclass
class QuantMeta:
    """Per-stage quantization metadata for one transmitted span."""

    tag: int
    seq_nr: int
    stage: int
    min_val: float
    scale: float

    def pack(self) -> bytes:
        return struct.pack(">QQIff", self.tag, self.seq_nr, self.stage, self.min_val, self.scale)

    @classmethod
    def unpack(cls, payload: bytes) -> "QuantMeta":
        r = _Reader(payload)
        tag, seq, stage, mn, sc = r.take(">QQIff")
        r.done()
        return cls(tag, seq, stage, mn, sc)


@dataclass
class PendingPeersQuery:
    round: int

    def pack(self) -> bytes:
        return struct.pack(">Q", self.round)

    @classmethod
    def unpack(cls, payload: bytes) -> "PendingPeersQuery":
        r = _Reader(payload)
        round_ = r.take(">Q")
        r.done()
        return cls(round_)


@dataclass
class PendingPeersAnswer:
    round: int
    pending: bool

    def pack(self) -> bytes:
        return struct.pack(">QB", self.round, 1 if self.pending else 0)

    @classmethod
    def unpack(cls, payload: bytes) -> "PendingPeersAnswer":
        r = _Reader(payload)
        round_, pending = r.take(">QB")
        r.done()
        return cls(round_, bool(pending))


@dataclass
class Bye:
    code: int = 0

    def pack(self) -> bytes:
        return struct.pack(">B", self.code)

    @classmethod
    def unpack(cls, payload: bytes) -> "Bye":
        r = _Reader(payload)
        code = r.take(">B")
        r.done()
        return cls(code)


# ---------------------------------------------------------------------------
# Framed socket connection
# ---------------------------------------------------------------------------


class FrameConn:
    """A TCP connection speaking length-prefixed frames.

    One thread may read and one thread may write concurrently; reads and
    writes each have their own lock. recv_frame supports an abort event
    polled between socket reads, resuming a partially-read frame on the
    next call so frame boundaries survive an abort.
    """

    def __init__(self, sock: socket.socket):
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass  # not a TCP socket (tests use socketpairs)
        self.sock = sock
        self.tx_bytes = 0
        self.rx_bytes = 0
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()
        self._partial: bytearray | None = None  # resumable in-progress frame
        self._partial_need = 0
        self._partial_hdr_done = False
        self._into_state = None  # resumable recv_frame_into progress
        self._closed = False

    # -- send side ---------------------------------------------------------

    def send_frame(
        self,
        msg_type: MessageType,
        *bufs,
        timeout: float | None = None,
        abort_event: threading.Event | None = None,
        poll_interval: float = 0.5,
        abort_grace: float = 5.0,
    ) -> None:
        """Send one frame assembled from bufs without copying tensor data.

        The abort event is only honored at a frame boundary: once any byte
        of the frame is on the wire the whole frame must follow, otherwise
        the stream would desynchronize. If the frame cannot be completed
        within abort_grace after an abort, the connection is closed and
        discarded rather than left misaligned.
        """
        n = sum(len(b) for b in bufs)
        if n > MAX_PAYLOAD:
            raise OversizePayloadError(f"payload of {n} bytes exceeds frame limit")
        header = _HEADER.pack(n + 1, int(msg_type))
        segments = [memoryview(header), *[memoryview(b).cast("B") for b in bufs]]
        with self._send_lock:
            deadline = None if timeout is None else time.monotonic() + timeout
            abort_deadline = None
            sent_any = False
            seg = 0
            while seg < len(segments):
                if abort_event is not None and abort_event.is_set():
                    if not sent_any:
                        raise AbortedWait()
                    if abort_deadline is None:
                        abort_deadline = time.monotonic() + abort_grace
                    elif time.monotonic() > abort_deadline:
                        self.close()
                        raise ConnectionClosed("send interrupted by abort")
                budget = poll_interval if abort_event is not None else timeout
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        if sent_any:
                            self.close()
                            raise ConnectionClosed("send timed out mid-frame")
                        raise RecvTimeout("send timed out")
                    budget = remaining if budget is None else min(budget, remaining)
                view = segments[seg]
                self.sock.settimeout(budget)
                try:
                    done = self.sock.send(view)
                except socket.timeout:
                    continue
                except OSError as e:
                    raise ConnectionClosed(str(e)) from e
                if done:
                    sent_any = True
                    self.tx_bytes += done
                    if done == len(view):
                        seg += 1
                    else:
                        segments[seg] = view[done:]

    def send_message(self, msg_type: MessageType, body, timeout: float | None = None) -> None:
        self.send_frame(msg_type, body.pack(), timeout=timeout)

    # -- receive side ------------------------------------------------------

    def recv_frame(
        self,
        timeout: float | None = None,
        abort_event: threading.Event | None = None,
        poll_interval: float = 0.05,
    ) -> tuple[MessageType, memoryview]:
        """Read one whole frame.

        With abort_event set, raises AbortedWait between socket reads; the
        partially-read frame is remembered and completed by the next call,
        so the stream stays frame-aligned.
        """
        with self._recv_lock:
            deadline = None if timeout is None else time.monotonic() + timeout
            if self._partial is not None:
                buf, need, hdr_done = self._partial, self._partial_need, self._partial_hdr_done
                self._partial = None
            else:
                buf, need, hdr_done = bytearray(5), 5, False
            while True:
                if need == 0:
                    if hdr_done:
                        break
                    # header complete: validate and extend for the payload
                    length, code = _HEADER.unpack(bytes(buf[:5]))
                    if length < 1:
                        raise ProtocolError(f"frame length {length} below minimum of 1")
                    try:
                        MessageType(code)
                    except ValueError:
                        raise ProtocolError(f"unknown message code 0x{code:02x}") from None
                    hdr_done = True
                    need = length - 1
                    if need == 0:
                        break
                    buf.extend(bytearray(need))
                    continue
                if abort_event is not None and abort_event.is_set():
                    self._save_state(buf, need, hdr_done)
                    raise AbortedWait()
                budget = poll_interval if abort_event is not None else timeout
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        self._save_state(buf, need, hdr_done)
                        raise RecvTimeout()
                    budget = remaining if budget is None else min(budget, remaining)
                need -= self._recv_some(buf, need, budget)
            msg_type = MessageType(buf[4])
            payload = memoryview(bytes(buf[5:]))
            self.rx_bytes += len(buf)
            return msg_type, payload

    # The resumable state is a bytearray sized for what is expected so far
    # plus how many bytes at its tail are still unread.

    def _save_state(self, buf: bytearray, need: int, hdr_done: bool) -> None:
        self._partial = buf
        self._partial_need = need
        self._partial_hdr_done = hdr_done

    def recv_frame_into(
        self,
        out: memoryview,
        timeout: float | None = None,
        abort_event: threading.Event | None = None,
        poll_interval: float = 0.05,
    ) -> tuple[MessageType, int]:
        """Data-path variant of recv_frame: the payload lands in the
        caller-provided buffer, so steady-state reads allocate nothing.

        Returns (msg_type, payload_length). A payload larger than out is
        drained through it and reported with a negative length so the
        caller can discard it (only stale frames can be oversized). An
        abort mid-frame is resumable, provided the next call passes a
        buffer at least as large.
        """
        with self._recv_lock:
            deadline = None if timeout is None else time.monotonic() + timeout
            if self._into_state is not None:
                hdr, hdr_got, length, got, skipping = self._into_state
                self._into_state = None
            else:
                hdr, hdr_got, length, got, skipping = bytearray(5), 0, -1, 0, False
            while True:
                if abort_event is not None and abort_event.is_set():
                    self._into_state = (hdr, hdr_got, length, got, skipping)
                    raise AbortedWait()
                budget = poll_interval if abort_event is not None else timeout
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        self._into_state = (hdr, hdr_got, length, got, skipping)
                        raise RecvTimeout()
                    budget = remaining if budget is None else min(budget, remaining)
                if hdr_got < 5:
                    hdr_got += self._recv_into_view(memoryview(hdr)[hdr_got:], budget)
                    if hdr_got < 5:
                        continue
                    length, code = _HEADER.unpack(bytes(hdr))
                    if length < 1:
                        raise ProtocolError(f"frame length {length} below minimum of 1")
                    try:
                        MessageType(code)
                    except ValueError:
                        raise ProtocolError(f"unknown message code 0x{code:02x}") from None
                    skipping = (length - 1) > len(out)
                    if length == 1:
                        break
                    continue
                need = (length - 1) - got
                if need == 0:
                    break
                if skipping:
                    window = out[: min(need, len(out))] if len(out) else memoryview(bytearray(4096))
                    got += self._recv_into_view(window[: min(need, len(window))], budget)
                else:
                    got += self._recv_into_view(out[got : length - 1], budget)
                if got == length - 1:
                    break
            msg_type = MessageType(hdr[4])
            self.rx_bytes += 5 + (length - 1)
            return msg_type, (-(length - 1) or 0) if skipping else (length - 1)

    def _recv_into_view(self, view: memoryview, timeout: float | None) -> int:
        if len(view) == 0:
            return 0
        self.sock.settimeout(timeout)
        try:
            got = self.sock.recv_into(view)
        except socket.timeout:
            return 0
        except OSError as e:
            raise ConnectionClosed(str(e)) from e
        if got == 0:
            raise ConnectionClosed("peer closed connection")
        return got

    def _recv_some(self, buf: bytearray, need: int, timeout: float | None) -> int:
        self.sock.settimeout(timeout)
        view = memoryview(buf)[len(buf) - need :]
        try:
            got = self.sock.recv_into(view)
        except socket.timeout:
            return 0
        except OSError as e:
            raise ConnectionClosed(str(e)) from e
        if got == 0:
            raise ConnectionClosed("peer closed connection")
        return got

    def recv_message(self, timeout: float | None = None):
        """Read one frame and decode its body into a message dataclass."""
        msg_type, payload = self.recv_frame(timeout=timeout)
        return msg_type, decode_body(msg_type, payload)

    def close(self) -> None:
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    @property
    def closed(self) -> bool:
        return self._closed


class AbortedWait(Exception):
    """recv_frame observed the abort event before a frame completed."""


_DECODERS = {
    MessageType.JOIN_REQUEST: unpack_join_request,
    MessageType.JOIN_ASSIGN: JoinAssign.unpack,
    MessageType.VOTE_REQUEST: VoteRequest.unpack,
    MessageType.VOTE_CAST: VoteCast.unpack,
    MessageType.TRANSITION_COMMIT: unpack_transition_commit,
    MessageType.ABORT_NOTIFY: AbortNotify.unpack,
    MessageType.TOPOLOGY_ASSIGN: TopologyAssign.unpack,
    MessageType.BANDWIDTH_PROBE_REQUEST: ProbeRequest.unpack,
    MessageType.BANDWIDTH_PROBE_REPORT: ProbeReport.unpack,
    MessageType.SHARED_STATE_REPORT: SharedStateReport.unpack,
    MessageType.SHARED_STATE_PLAN: SharedStatePlan.unpack,
    MessageType.SHARED_STATE_CHUNK: SharedStateChunk.unpack,
    MessageType.COLLECTIVE_INIT_VOTE: CollectiveInitVote.unpack,
    MessageType.COLLECTIVE_COMPLETE_VOTE: CollectiveCompleteVote.unpack,
    MessageType.CHUNK_ACK: ChunkAck.unpack,
    MessageType.QUANT_META: QuantMeta.unpack,
    MessageType.PENDING_PEERS_QUERY: PendingPeersQuery.unpack,
    MessageType.PENDING_PEERS_ANSWER: PendingPeersAnswer.unpack,
    MessageType.BYE: Bye.unpack,
}


def decode_body(msg_type: MessageType, payload):
    """Decode a frame payload into its message dataclass.

    CHUNK_DATA is returned as (ChunkHeader, memoryview) because its body
    must stay uncopied.
    """
    if msg_type == MessageType.CHUNK_DATA:
        header = ChunkHeader.unpack_from(payload)
        data = memoryview(payload)[CHUNK_HEADER_LEN:]
        if len(data) != header.byte_len:
            raise ProtocolError("chunk data length disagrees with header")
        return header, data
    return _DECODERS[msg_type](payload)


def connect_frame_conn(host: str, port: int, timeout: float = 10.0) -> FrameConn:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return FrameConn(sock)
