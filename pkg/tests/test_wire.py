from __future__ import annotations

import io
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from churncomm import wire
from churncomm.wire import (
    AbortNotify,
    AbortScope,
    ChunkHeader,
    ClientHello,
    CollectiveCompleteCommit,
    CollectiveInitCommit,
    CollectiveInitVote,
    DType,
    FrameDecoder,
    IncompleteFrameError,
    JoinAssign,
    JoinStatus,
    MessageType,
    P2pHello,
    PeerAddr,
    PeerRole,
    ProtocolError,
    ReduceOpCode,
    SharedStatePlan,
    SharedStateReport,
    StateEntryMeta,
    SyncResult,
    SyncOutcome,
    SyncStrategy,
    TopologyAssign,
    TopologyConnect,
    VoteCast,
    CastPhase,
    decode_body,
    decode_frame,
    encode_frame,
    unpack_transition_commit,
)


def test_empty_bye_frame_is_five_bytes():
    raw = encode_frame(MessageType.BYE, b"")
    assert raw == bytes([0, 0, 0, 1, int(MessageType.BYE)])


def test_length_field_counts_type_byte():
    raw = encode_frame(MessageType.VOTE_CAST, b"\x01\x02")
    assert raw[:4] == bytes([0, 0, 0, 3])


def test_decode_inverts_encode():
    payload = b"some topology payload"
    raw = encode_frame(MessageType.TOPOLOGY_ASSIGN, payload)
    msg_type, got = decode_frame(io.BytesIO(raw))
    assert msg_type == MessageType.TOPOLOGY_ASSIGN
    assert got == payload


def test_unknown_code_is_protocol_error():
    raw = bytes([0, 0, 0, 1, 0xFF])
    with pytest.raises(ProtocolError):
        decode_frame(io.BytesIO(raw))


def test_truncated_stream_is_incomplete_frame_error():
    raw = encode_frame(MessageType.VOTE_CAST, b"abcdef")
    with pytest.raises(IncompleteFrameError):
        decode_frame(io.BytesIO(raw[:-2]))


def test_round_trip_of_random_pairs():
    rng = random.Random(7)
    types = list(MessageType)
    for _ in range(1000):
        msg_type = rng.choice(types)
        payload = rng.randbytes(rng.randrange(0, 200))
        got_type, got = decode_frame(io.BytesIO(encode_frame(msg_type, payload)))
        assert (got_type, got) == (msg_type, payload)


def test_second_frame_left_untouched():
    rng = random.Random(11)
    for _ in range(50):
        p1 = rng.randbytes(rng.randrange(0, 64))
        p2 = rng.randbytes(rng.randrange(0, 64))
        stream = io.BytesIO(
            encode_frame(MessageType.CHUNK_ACK, p1) + encode_frame(MessageType.BYE, p2)
        )
        msg_type, got = decode_frame(stream)
        assert (msg_type, got) == (MessageType.CHUNK_ACK, p1)
        rest = stream.read()
        assert rest == encode_frame(MessageType.BYE, p2)


def test_incremental_parse_matches_whole():
    rng = random.Random(3)
    frames = [
        (rng.choice(list(MessageType)), rng.randbytes(rng.randrange(0, 100))) for _ in range(20)
    ]
    raw = b"".join(encode_frame(t, p) for t, p in frames)

    whole = FrameDecoder().feed(raw)

    dec = FrameDecoder()
    bytewise = []
    for i in range(len(raw)):
        bytewise.extend(dec.feed(raw[i : i + 1]))
    assert dec.pending_bytes == 0
    assert whole == bytewise == frames


@given(
    msg_type=st.sampled_from(list(MessageType)),
    payload=st.binary(max_size=2048),
)
@settings(max_examples=200, deadline=None)
def test_round_trip_property(msg_type, payload):
    got_type, got = decode_frame(io.BytesIO(encode_frame(msg_type, payload)))
    assert (got_type, got) == (msg_type, payload)


def test_oversize_payload_rejected():
    class FakeLen(bytes):
        def __len__(self):
            return 2**32

    with pytest.raises(wire.OversizePayloadError):
        encode_frame(MessageType.BYE, FakeLen())


# -- message body codecs -----------------------------------------------------


BODIES = [
    (MessageType.JOIN_REQUEST, ClientHello(1, "198.51.100.7", 40001)),
    (MessageType.JOIN_REQUEST, P2pHello(1, PeerRole.P2P_DATA, 12, 3, 9)),
    (MessageType.JOIN_ASSIGN, JoinAssign(JoinStatus.OK, 5, 77, 2)),
    (MessageType.VOTE_REQUEST, wire.VoteRequest(wire.VoteKind.TOPOLOGY)),
    (
        MessageType.VOTE_CAST,
        VoteCast(CastPhase.SYNC_DONE, True, [4, 9], [("w", 3, 0xDEAD), ("m", 3, 0xBEEF)]),
    ),
    (
        MessageType.TRANSITION_COMMIT,
        TopologyConnect([PeerAddr(1, "127.0.0.1", 9000), PeerAddr(2, "10.0.0.2", 9001, True)], 4),
    ),
    (MessageType.TRANSITION_COMMIT, CollectiveInitCommit(8, 2, 5, [3, 1, 2])),
    (MessageType.TRANSITION_COMMIT, CollectiveCompleteCommit(8, 2)),
    (MessageType.TRANSITION_COMMIT, SyncResult(SyncOutcome.UPDATED, ["w"], "")),
    (
        MessageType.ABORT_NOTIFY,
        AbortNotify(
            AbortScope.COLLECTIVE,
            8,
            2,
            "peer loss",
            failed_peer=4,
            epoch=6,
            ring=[1, 2],
            roster=[PeerAddr(1, "a", 1), PeerAddr(2, "b", 2)],
            has_view=True,
        ),
    ),
    (MessageType.ABORT_NOTIFY, AbortNotify(AbortScope.PROTOCOL, 0, 0, "bad vote")),
    (
        MessageType.TOPOLOGY_ASSIGN,
        TopologyAssign(3, [1, 2, 3], [PeerAddr(i, "h", i) for i in (1, 2, 3)], True, 1, 0, 12),
    ),
    (MessageType.BANDWIDTH_PROBE_REQUEST, wire.ProbeRequest(1 << 20, [PeerAddr(2, "h", 5)])),
    (MessageType.BANDWIDTH_PROBE_REPORT, wire.ProbeReport([(2, True, 1.5e8), (3, False, 0.0)])),
    (
        MessageType.SHARED_STATE_REPORT,
        SharedStateReport(
            SyncStrategy.ENFORCE_POPULAR, [StateEntryMeta("w", 4, 0xABC, 4096, DType.F32)]
        ),
    ),
    (
        MessageType.SHARED_STATE_PLAN,
        SharedStatePlan([wire.FetchItem("w", 3, "127.0.0.1", 901, 4, 0xABC, 4096)]),
    ),
    (MessageType.SHARED_STATE_CHUNK, wire.SharedStateChunk("w", 4, 4096, 1024, b"\x01" * 64)),
    (
        MessageType.COLLECTIVE_INIT_VOTE,
        CollectiveInitVote(8, 1 << 20, DType.F32, ReduceOpCode.AVG, True),
    ),
    (MessageType.COLLECTIVE_COMPLETE_VOTE, wire.CollectiveCompleteVote(8, 2, True, 100, 100)),
    (MessageType.CHUNK_ACK, wire.ChunkAck(99)),
    (MessageType.QUANT_META, wire.QuantMeta(8, 2, 1, -1.5, 0.25)),
    (MessageType.PENDING_PEERS_QUERY, wire.PendingPeersQuery(41)),
    (MessageType.PENDING_PEERS_ANSWER, wire.PendingPeersAnswer(41, True)),
    (MessageType.BYE, wire.Bye(0)),
]


@pytest.mark.parametrize("msg_type,body", BODIES, ids=lambda b: type(b).__name__)
def test_body_codec_round_trip(msg_type, body):
    if isinstance(body, (ClientHello, P2pHello)):
        got = wire.unpack_join_request(body.pack())
    elif msg_type == MessageType.TRANSITION_COMMIT:
        got = unpack_transition_commit(body.pack())
    else:
        got = decode_body(msg_type, body.pack())
    assert got == body


def test_chunk_data_zero_copy_round_trip():
    header = ChunkHeader(tag=8, seq_nr=2, chunk_index=5, byte_offset=4096, byte_len=12)
    data = b"abcdefghijkl"
    bufs = wire.pack_chunk_data(header, data)
    payload = b"".join(bytes(b) for b in bufs)
    got_header, got_data = decode_body(MessageType.CHUNK_DATA, payload)
    assert got_header == header
    assert bytes(got_data) == data


def test_chunk_data_length_mismatch_rejected():
    header = ChunkHeader(8, 2, 5, 0, 3)
    with pytest.raises(ProtocolError):
        wire.pack_chunk_data(header, b"toolong")
