"""The bound communicator: buffer views in, native calls out.

Strategy names match the native protocol exactly: "enforcePopular",
"sendOnly", "receiveOnly". Native errors surface as binding exceptions
with the native error preserved on the .native attribute.
"""

from __future__ import annotations

import numpy as np

import churncomm
from churncomm import client as _native
from churncomm.collective import ReduceOp
from churncomm.sharedstate import SharedStateEntry
from churncomm.wire import DType, SyncStrategy


class BindingError(Exception):
    """Base of all binding-level failures; .native holds the original
    error when one crossed the boundary."""

    def __init__(self, message: str, native: Exception | None = None):
        super().__init__(message)
        self.native = native


class UsageError(BindingError):
    pass


class NativeError(BindingError):
    pass


_STRATEGIES = {
    "enforcePopular": SyncStrategy.ENFORCE_POPULAR,
    "sendOnly": SyncStrategy.SEND_ONLY,
    "receiveOnly": SyncStrategy.RECEIVE_ONLY,
}

_OPS = {
    "sum": ReduceOp.SUM,
    "avg": ReduceOp.AVG,
    "max": ReduceOp.MAX,
    "min": ReduceOp.MIN,
}

_DTYPES = {
    np.dtype(np.float32): DType.F32,
    np.dtype(np.float64): DType.F64,
}


def _map_native(e: Exception) -> BindingError:
    if isinstance(e, _native.UsageError):
        return UsageError(str(e), native=e)
    return NativeError(f"{type(e).__name__}: {e}", native=e)


def _as_array(view, what: str) -> np.ndarray:
    """Zero-copy numpy view over a caller buffer; usage errors are raised
    before any native call."""
    try:
        mv = memoryview(view)
    except TypeError:
        raise UsageError(f"{what} does not support the buffer protocol") from None
    if not mv.contiguous:
        raise UsageError(f"{what} must be contiguous")
    if mv.readonly:
        raise UsageError(f"{what} must be writable")
    arr = np.asarray(mv)
    if arr.dtype == np.uint8 and mv.format in ("f", "d"):
        arr = arr.view(np.float32 if mv.format == "f" else np.float64)
    if arr.dtype not in _DTYPES:
        raise UsageError(f"{what} has unsupported element type {mv.format!r}")
    return arr.reshape(-1)


class BoundHandle:
    """Await-once completion slot mirroring the native handle.

    The handle keeps a reference to the in-flight array view, which pins
    the underlying buffer (resizing an exported buffer raises in the
    caller) until the await returns."""

    def __init__(self, native_handle, arr: np.ndarray, canary):
        self._handle = native_handle
        self._arr = arr
        self._canary = canary

    @property
    def tag(self) -> int:
        return self._handle.tag

    @property
    def pending(self) -> bool:
        return self._handle.pending


class BoundCommunicator:
    """Opaque wrapper over a native communicator plus a registry of
    exported buffer views used as shared state."""

    def __init__(self, comm: _native.Communicator, debug: bool = False):
        self._comm = comm
        self._debug = debug
        self._state: dict[str, SharedStateEntry] = {}

    # -- lifecycle --------------------------------------------------------

    def close(self) -> None:
        self._comm.close()

    def __enter__(self) -> "BoundCommunicator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def peer_id(self) -> int:
        return self._comm.peer_id

    # -- membership -------------------------------------------------------

    def update_topology(self):
        try:
            return self._comm.update_topology()
        except Exception as e:
            raise _map_native(e) from e

    def are_peers_pending(self) -> bool:
        try:
            return self._comm.are_peers_pending()
        except Exception as e:
            raise _map_native(e) from e

    def get_world_size(self) -> int:
        return self._comm.get_world_size()

    # -- shared state -----------------------------------------------------

    def register_state(self, name: str, view, revision: int = 0) -> None:
        """Export a buffer view as a shared-state entry. The view is read
        and written in place by syncs; the caller owns the memory."""
        arr = _as_array(view, f"state entry {name!r}")
        self._state[name] = SharedStateEntry(name, _DTYPES[arr.dtype], arr, revision=revision)

    def advance_state(self, name: str | None = None) -> None:
        """Bump the revision after the application advanced the state."""
        for entry in self._state.values() if name is None else [self._state[name]]:
            entry.revision += 1

    def state_revision(self, name: str) -> int:
        return self._state[name].revision

    def sync_shared_state(self, strategy: str = "enforcePopular"):
        if strategy not in _STRATEGIES:
            raise UsageError(
                f"unknown strategy {strategy!r}; expected one of {sorted(_STRATEGIES)}"
            )
        if not self._state:
            raise UsageError("no state entries registered")
        try:
            return self._comm.sync_shared_state(
                list(self._state.values()), _STRATEGIES[strategy]
            )
        except Exception as e:
            raise _map_native(e) from e

    # -- collectives ------------------------------------------------------

    def all_reduce_async(self, view, tag: int, op: str = "sum", quantize: bool = False) -> BoundHandle:
        """Zero-copy hand-off of the view's memory to the engine."""
        if op not in _OPS:
            raise UsageError(f"unknown reduce op {op!r}; expected one of {sorted(_OPS)}")
        arr = _as_array(view, "reduce buffer")
        canary = self._make_canary(arr)
        try:
            handle = self._comm.all_reduce_async(arr, tag, _OPS[op], quantize)
        except Exception as e:
            raise _map_native(e) from e
        return BoundHandle(handle, arr, canary)

    def await_async_reduce(self, handle: BoundHandle, timeout: float | None = None):
        try:
            result = self._comm.await_async_reduce(handle._handle, timeout)
        except Exception as e:
            raise _map_native(e) from e
        self._check_canary(handle)
        handle._arr = None  # unpin
        return result

    def all_reduce(self, view, tag: int, op: str = "sum", quantize: bool = False):
        return self.await_async_reduce(self.all_reduce_async(view, tag, op, quantize))

    # -- debug canary -------------------------------------------------------

    @staticmethod
    def _region(arr: np.ndarray) -> tuple[int, int]:
        iface = arr.__array_interface__
        return iface["data"][0], arr.nbytes

    def _make_canary(self, arr: np.ndarray):
        if not self._debug:
            return None
        return self._region(arr)

    def _check_canary(self, handle: BoundHandle) -> None:
        if handle._canary is None or handle._arr is None:
            return
        # the engine writes the result in place, so contents change; the
        # memory region itself must not
        if self._region(handle._arr) != handle._canary:
            raise UsageError(
                f"buffer for tag {handle.tag} moved while the reduce was in flight"
            )


def connect(master_addr: str | None = None, debug: bool = False, **overrides) -> BoundCommunicator:
    """Create and join a native communicator, wrapped for buffer views."""
    try:
        comm = churncomm.connect(master_addr, **overrides)
    except Exception as e:
        raise _map_native(e) from e
    return BoundCommunicator(comm, debug=debug)
