"""Buffer-protocol bindings for the churncomm communicator.

The bound communicator accepts any contiguous object implementing the
buffer protocol (numpy arrays, memoryviews, framework tensor storage
exposed as such) and hands the memory region to the engine zero-copy: a
reduce transmits from and receives into the caller's storage, plus one
backup copy for abort restoration. A view passed to an asynchronous
reduce must stay pinned and unmodified by the caller until the await
returns; debug mode adds a canary that verifies the region still maps to
the same memory at await time.

Awaiting blocks the calling interpreter thread while releasing the
global interpreter lock, so other threads keep running.
"""

from __future__ import annotations

from .bound import (
    BindingError,
    BoundCommunicator,
    BoundHandle,
    NativeError,
    UsageError,
    connect,
)

__all__ = [
    "BindingError",
    "BoundCommunicator",
    "BoundHandle",
    "NativeError",
    "UsageError",
    "connect",
]

__version__ = "0.1.0"
