"""Pipelined ring all-reduce: reduce-scatter then allgather, abortable at
network-chunk granularity, optionally u8-quantized, with a caching buffer
pool so the steady-state data path allocates nothing.

The buffer is partitioned into world_size contiguous chunks. During the
reduce phase each rank streams one chunk per step to its ring successor
while accumulating the chunk arriving from its predecessor; after W-1
steps every rank owns one fully reduced chunk. The gather phase rotates
the owned chunks around the ring unmodified (quantized chunks are
forwarded verbatim, codes and metadata untouched), which is what makes
the final result bit-identical on every peer. Abort signals are polled
from memory between network chunks; any failure restores the caller's
buffer byte-exactly from the engine's backup copy.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .wire import (
    CHUNK_HEADER_LEN,
    AbortedWait,
    ChunkHeader,
    ConnectionClosed,
    DType,
    FrameConn,
    MessageType,
    ProtocolError,
    QuantMeta,
    RecvTimeout,
    ReduceOpCode,
)

_FRAME_OVERHEAD = 5  # length prefix + type byte
_META_FRAME_BYTES = _FRAME_OVERHEAD + 28


class ReduceOp(Enum):
    SUM = "sum"
    AVG = "avg"
    MAX = "max"
    MIN = "min"

    @property
    def code(self) -> ReduceOpCode:
        return _OP_CODE[self]

    @classmethod
    def from_code(cls, code: ReduceOpCode) -> "ReduceOp":
        return _CODE_OP[ReduceOpCode(code)]


_OP_CODE = {
    ReduceOp.SUM: ReduceOpCode.SUM,
    ReduceOp.AVG: ReduceOpCode.AVG,
    ReduceOp.MAX: ReduceOpCode.MAX,
    ReduceOp.MIN: ReduceOpCode.MIN,
}
_CODE_OP = {v: k for k, v in _OP_CODE.items()}

_ACCUMULATE = {
    ReduceOp.SUM: np.add,
    ReduceOp.AVG: np.add,
    ReduceOp.MAX: np.maximum,
    ReduceOp.MIN: np.minimum,
}

NP_DTYPE = {DType.F32: np.float32, DType.F64: np.float64}
DTYPE_OF = {np.dtype(np.float32): DType.F32, np.dtype(np.float64): DType.F64}


class CollectiveAborted(Exception):
    """The attempt was cancelled; the caller's buffer has been restored."""

    def __init__(self, reason: str, source: str = "io"):
        super().__init__(reason)
        self.reason = reason
        self.source = source  # "master" | "io"


def compute_chunk_boundaries(n_elements: int, world_size: int) -> list[tuple[int, int]]:
    """Contiguous per-rank element ranges partitioning [0, n_elements).

    The first (n mod W) ranks get the ceiling share, the rest the floor;
    ranks beyond n_elements receive empty ranges.
    """
    if world_size < 1:
        raise ValueError("world_size must be at least 1")
    base, extra = divmod(n_elements, world_size)
    bounds = []
    start = 0
    for rank in range(world_size):
        size = base + (1 if rank < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


# ---------------------------------------------------------------------------
# Quantization (per-stage min-max affine mapping to u8)
# ---------------------------------------------------------------------------


def quantize_chunk(values: np.ndarray, out: np.ndarray) -> tuple[float, float]:
    """Quantize a float32 span into u8 codes; returns (min_val, scale).

    q = round((x - min) / scale) clamped to [0, 255] with
    scale = (max - min) / 255, or 1 when the span is constant.
    """
    if values.size == 0:
        return 0.0, 1.0
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite values cannot be quantized")
    mn = values.min()
    scale = (values.max() - mn) / np.float32(255.0)
    if scale == 0:
        scale = np.float32(1.0)
    sc = _scratch_f32(values.size)
    np.subtract(values, mn, out=sc)
    np.divide(sc, scale, out=sc)
    np.rint(sc, out=sc)
    np.clip(sc, 0.0, 255.0, out=sc)
    np.copyto(out[: values.size], sc, casting="unsafe")
    return float(mn), float(scale)


def dequantize_into(codes: np.ndarray, min_val: float, scale: float, out: np.ndarray) -> None:
    """Inverse mapping x = min + q * scale, written into out (float32)."""
    np.multiply(codes, np.float32(scale), out=out, casting="unsafe")
    np.add(out, np.float32(min_val), out=out)


_scratch_local = threading.local()


def _scratch_f32(n: int) -> np.ndarray:
    buf = getattr(_scratch_local, "buf", None)
    if buf is None or buf.size < n:
        buf = np.empty(max(n, 65536), dtype=np.float32)
        _scratch_local.buf = buf
    return buf[:n]


# ---------------------------------------------------------------------------
# Caching buffer pool
# ---------------------------------------------------------------------------


@dataclass
class PoolStats:
    allocated: int = 0
    hits: int = 0


class BufferPool:
    """Exact-size caching allocator for data-path buffers.

    After warm-up every acquire for a repeated operation shape is a cache
    hit; the allocation counter stands still, which is what the
    steady-state zero-allocation tests assert.
    """

    def __init__(self) -> None:
        self._free: dict[int, list[bytearray]] = {}
        self._lock = threading.Lock()
        self.stats = PoolStats()

    def acquire(self, nbytes: int) -> bytearray:
        with self._lock:
            bucket = self._free.get(nbytes)
            if bucket:
                self.stats.hits += 1
                return bucket.pop()
            self.stats.allocated += 1
        return bytearray(nbytes)

    def release(self, buf: bytearray) -> None:
        with self._lock:
            self._free.setdefault(len(buf), []).append(buf)


# ---------------------------------------------------------------------------
# Send worker
# ---------------------------------------------------------------------------


class SpanSender(threading.Thread):
    """Dedicated send context for one pool slot, so the sends and receives
    of a stage overlap and full-duplex links stay saturated."""

    def __init__(self, name: str = "span-sender"):
        super().__init__(name=name, daemon=True)
        self._tasks: queue.Queue = queue.Queue()
        self.start()

    def submit(self, fn) -> "_SendHandle":
        handle = _SendHandle()
        self._tasks.put((fn, handle))
        return handle

    def run(self) -> None:
        while True:
            item = self._tasks.get()
            if item is None:
                return
            fn, handle = item
            try:
                fn()
            except BaseException as e:  # surfaced to the engine thread
                handle.error = e
            handle.done.set()

    def shutdown(self) -> None:
        self._tasks.put(None)


class _SendHandle:
    def __init__(self) -> None:
        self.done = threading.Event()
        self.error: BaseException | None = None

    def wait(self) -> None:
        self.done.wait()
        if self.error is not None:
            raise self.error


# ---------------------------------------------------------------------------
# Ring engine
# ---------------------------------------------------------------------------


@dataclass
class OpContext:
    """Everything one tagged all-reduce attempt needs to run its stages."""

    tag: int
    seq_nr: int
    buffer: np.ndarray  # 1-D caller array, engine-owned for the duration
    op: ReduceOp
    quantize: bool
    rank: int
    world: int
    tx_conn: FrameConn
    rx_conn: FrameConn
    abort_event: threading.Event
    pool: BufferPool
    chunk_bytes: int = 256 * 1024
    fault_hook: object = None  # callable(side, frame_index) raising to inject
    tx_payload_bytes: int = 0
    rx_payload_bytes: int = 0
    _fault_counts: dict = field(default_factory=dict)
    _lease: list = field(default_factory=list)

    @property
    def elem_size(self) -> int:
        return self.buffer.dtype.itemsize

    def check_abort(self) -> None:
        if self.abort_event.is_set():
            raise AbortedWait()

    def tick_fault(self, side: str) -> None:
        if self.fault_hook is not None:
            count = self._fault_counts.get(side, 0) + 1
            self._fault_counts[side] = count
            self.fault_hook(side, count)

    def acquire(self, nbytes: int) -> bytearray:
        buf = self.pool.acquire(nbytes)
        self._lease.append(buf)
        return buf

    def release_all(self) -> None:
        for buf in self._lease:
            self.pool.release(buf)
        self._lease.clear()


def _send_span(
    ctx: OpContext,
    stage: int,
    payload: memoryview,
    meta: tuple[float, float] | None,
) -> None:
    """Stream one stage's wire bytes to the ring successor in network
    chunks, polling the abort flag between frames (memory-only check)."""
    if meta is not None:
        ctx.check_abort()
        body = QuantMeta(ctx.tag, ctx.seq_nr, stage, meta[0], meta[1]).pack()
        ctx.tx_conn.send_frame(
            MessageType.QUANT_META, body, abort_event=ctx.abort_event
        )
        ctx.tx_payload_bytes += _FRAME_OVERHEAD + len(body)
    total = len(payload)
    offset = 0
    index = 0
    while offset < total:
        ctx.check_abort()
        ctx.tick_fault("tx")
        n = min(ctx.chunk_bytes, total - offset)
        header = ChunkHeader(ctx.tag, ctx.seq_nr, index, offset, n)
        ctx.tx_conn.send_frame(
            MessageType.CHUNK_DATA,
            header.pack(),
            payload[offset : offset + n],
            abort_event=ctx.abort_event,
        )
        ctx.tx_payload_bytes += _FRAME_OVERHEAD + CHUNK_HEADER_LEN + n
        offset += n
        index += 1


def _recv_stage(
    ctx: OpContext,
    staging: memoryview,
    expect_wire_bytes: int,
    meta_box: list | None,
    consume,
) -> None:
    """Receive one stage's wire bytes from the ring predecessor.

    Frames whose (tag, seq_nr) do not match the current attempt are
    discarded: they are leftovers of an aborted attempt. consume(offset,
    view) integrates each arriving chunk immediately, keeping the stage
    pipelined rather than store-and-forward.
    """
    received = 0
    while (meta_box is not None and meta_box[0] is None) or received < expect_wire_bytes:
        msg_type, length = ctx.rx_conn.recv_frame_into(
            staging, timeout=60.0, abort_event=ctx.abort_event
        )
        if length < 0:
            continue  # oversized stale frame, drained and dropped
        ctx.tick_fault("rx")
        if msg_type == MessageType.QUANT_META:
            qm = QuantMeta.unpack(bytes(staging[:length]))
            if (qm.tag, qm.seq_nr) != (ctx.tag, ctx.seq_nr):
                continue
            if meta_box is None:
                raise ProtocolError("unexpected quantization metadata")
            meta_box[0] = (qm.min_val, qm.scale)
            ctx.rx_payload_bytes += _FRAME_OVERHEAD + length
            continue
        if msg_type != MessageType.CHUNK_DATA:
            raise ProtocolError(f"unexpected {msg_type.name} on data connection")
        header = ChunkHeader.unpack_from(staging)
        if (header.tag, header.seq_nr) != (ctx.tag, ctx.seq_nr):
            if header.tag == ctx.tag and header.seq_nr > ctx.seq_nr:
                raise ProtocolError("data from a future attempt")
            continue
        if header.byte_offset != received:
            raise ProtocolError("out-of-order chunk within stage")
        if header.byte_offset + header.byte_len > expect_wire_bytes:
            raise ProtocolError("chunk exceeds stage span")
        if meta_box is not None and meta_box[0] is None:
            raise ProtocolError("chunk data arrived before quantization metadata")
        consume(
            header.byte_offset,
            staging[CHUNK_HEADER_LEN : CHUNK_HEADER_LEN + header.byte_len],
        )
        received += header.byte_len
        ctx.rx_payload_bytes += _FRAME_OVERHEAD + CHUNK_HEADER_LEN + header.byte_len


def run_reduce_stage(
    ctx: OpContext,
    step: int,
    tx_span: np.ndarray,
    rx_span: np.ndarray,
    sender: SpanSender,
    staging: memoryview,
    q_tx: np.ndarray | None,
    dq_scratch: np.ndarray | None,
    replace_own_tx: bool,
) -> None:
    """One reduce-scatter step: stream tx_span to the successor while
    accumulating the predecessor's span into rx_span element-wise."""
    accumulate = _ACCUMULATE[ctx.op]
    if ctx.quantize:
        meta = quantize_chunk(tx_span, q_tx)
        if replace_own_tx and tx_span.size:
            # own contribution is replaced by its dequantized form so no
            # peer retains precision others cannot reconstruct
            dequantize_into(q_tx[: tx_span.size], meta[0], meta[1], tx_span)
        wire_tx = memoryview(q_tx)[: tx_span.size].cast("B")
        send_meta = meta
    else:
        wire_tx = _wire_view(tx_span)
        send_meta = None
    handle = sender.submit(lambda: _send_span(ctx, step, wire_tx, send_meta))

    try:
        if ctx.quantize:
            meta_box: list = [None]

            def consume(offset: int, view: memoryview) -> None:
                n = len(view)
                codes = np.frombuffer(view, dtype=np.uint8, count=n)
                part = dq_scratch[:n]
                dequantize_into(codes, meta_box[0][0], meta_box[0][1], part)
                accumulate(rx_span[offset : offset + n], part, out=rx_span[offset : offset + n])

            _recv_stage(ctx, staging, rx_span.size, meta_box, consume)
        else:
            esz = ctx.elem_size

            def consume(offset: int, view: memoryview) -> None:
                arr = np.frombuffer(view, dtype=ctx.buffer.dtype, count=len(view) // esz)
                lo = offset // esz
                accumulate(rx_span[lo : lo + arr.size], arr, out=rx_span[lo : lo + arr.size])

            _recv_stage(ctx, staging, rx_span.size * esz, None, consume)
    except BaseException:
        ctx.abort_event.set()  # unblock the sender before unwinding
        _join_quiet(handle)
        raise
    handle.wait()
    ctx.check_abort()


def run_allgather_stage(
    ctx: OpContext,
    step: int,
    tx_wire: memoryview,
    tx_meta: tuple[float, float] | None,
    rx_span: np.ndarray,
    sender: SpanSender,
    staging: memoryview,
    rx_codes: np.ndarray | None,
) -> tuple[memoryview, tuple[float, float] | None]:
    """One allgather step: broadcast the currently owned chunk and
    overwrite rx_span with the predecessor's; returns the received wire
    bytes for verbatim forwarding at the next step."""
    handle = sender.submit(lambda: _send_span(ctx, step, tx_wire, tx_meta))
    try:
        if ctx.quantize:
            meta_box: list = [None]

            def consume(offset: int, view: memoryview) -> None:
                rx_codes[offset : offset + len(view)] = np.frombuffer(view, dtype=np.uint8)

            _recv_stage(ctx, staging, rx_span.size, meta_box, consume)
            meta = meta_box[0]
            dequantize_into(rx_codes[: rx_span.size], meta[0], meta[1], rx_span)
            next_wire = memoryview(rx_codes)[: rx_span.size].cast("B")
            next_meta = meta
        else:
            esz = ctx.elem_size

            def consume(offset: int, view: memoryview) -> None:
                arr = np.frombuffer(view, dtype=ctx.buffer.dtype, count=len(view) // esz)
                lo = offset // esz
                np.copyto(rx_span[lo : lo + arr.size], arr)

            _recv_stage(ctx, staging, rx_span.size * esz, None, consume)
            next_wire = _wire_view(rx_span)
            next_meta = None
    except BaseException:
        ctx.abort_event.set()  # unblock the sender before unwinding
        _join_quiet(handle)
        raise
    handle.wait()
    ctx.check_abort()
    return next_wire, next_meta


def _join_quiet(handle: _SendHandle) -> None:
    """Join a sender whose stage already failed; the receive-side error is
    the one that propagates."""
    handle.done.wait()


def finalize_reduction(buffer: np.ndarray, op: ReduceOp, world_size: int) -> None:
    """Average divides by world size; other operators are complete as-is."""
    if op is ReduceOp.AVG:
        np.divide(buffer, buffer.dtype.type(world_size), out=buffer)


def _wire_view(span: np.ndarray) -> memoryview:
    return memoryview(span).cast("B")


def run_all_reduce(ctx: OpContext, sender: SpanSender, backup: np.ndarray | None = None) -> None:
    """Execute both phases for one attempt over the established ring
    connections. Raises CollectiveAborted after restoring the caller's
    buffer byte-exactly from the backup copy. A caller-held backup may be
    passed in so the caller can also restore after a post-completion
    abort; otherwise one is taken from the pool."""
    n = ctx.buffer.size
    w = ctx.world
    bounds = compute_chunk_boundaries(n, w)
    esz = ctx.elem_size
    max_span = max(hi - lo for lo, hi in bounds) if n else 0

    if backup is None:
        backup_raw = ctx.acquire(max(n * esz, 1))
        backup = np.frombuffer(backup_raw, dtype=ctx.buffer.dtype, count=n)
        np.copyto(backup, ctx.buffer)

    staging = memoryview(ctx.acquire(ctx.chunk_bytes + CHUNK_HEADER_LEN + 64))
    q_tx = dq_scratch = None
    code_bufs: list[np.ndarray] = []
    if ctx.quantize:
        q_tx = np.frombuffer(ctx.acquire(max(max_span, 1)), dtype=np.uint8, count=max_span)
        dq_n = max(min(ctx.chunk_bytes, max_span), 1)
        dq_scratch = np.frombuffer(ctx.acquire(dq_n * 4), dtype=np.float32, count=dq_n)
        # two code buffers alternate between "receiving" and "being
        # forwarded" across gather steps
        code_bufs = [
            np.frombuffer(ctx.acquire(max(max_span, 1)), dtype=np.uint8, count=max_span)
            for _ in range(2)
        ]

    try:
        for step in range(w - 1):
            tx_chunk = (ctx.rank - step) % w
            rx_chunk = (ctx.rank - step - 1) % w
            tx_lo, tx_hi = bounds[tx_chunk]
            rx_lo, rx_hi = bounds[rx_chunk]
            run_reduce_stage(
                ctx,
                step,
                ctx.buffer[tx_lo:tx_hi],
                ctx.buffer[rx_lo:rx_hi],
                sender,
                staging,
                q_tx,
                dq_scratch,
                replace_own_tx=(step == 0),
            )

        current = (ctx.rank + 1) % w
        lo, hi = bounds[current]
        own = ctx.buffer[lo:hi]
        if ctx.quantize:
            meta = quantize_chunk(own, q_tx)
            if own.size:
                # the owned chunk is what every other peer will hold; adopt
                # its dequantized form locally to preserve bit-parity
                dequantize_into(q_tx[: own.size], meta[0], meta[1], own)
            tx_wire = memoryview(q_tx)[: own.size].cast("B")
            tx_meta = meta
        else:
            tx_wire = _wire_view(own)
            tx_meta = None
        for step in range(w - 1):
            inc = (current - 1) % w
            rx_lo, rx_hi = bounds[inc]
            tx_wire, tx_meta = run_allgather_stage(
                ctx,
                (w - 1) + step,
                tx_wire,
                tx_meta,
                ctx.buffer[rx_lo:rx_hi],
                sender,
                staging,
                code_bufs[step % 2] if ctx.quantize else None,
            )
            current = inc

        finalize_reduction(ctx.buffer, ctx.op, w)
    except AbortedWait as e:
        np.copyto(ctx.buffer, backup)
        raise CollectiveAborted("abort signaled", source="master") from e
    except (ConnectionClosed, RecvTimeout, ProtocolError, OSError, IOError) as e:
        ctx.abort_event.set()  # unblock the sender before unwinding
        np.copyto(ctx.buffer, backup)
        raise CollectiveAborted(f"io failure: {e}", source="io") from e
    finally:
        ctx.release_all()
