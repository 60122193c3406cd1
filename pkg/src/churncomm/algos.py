"""Reference churn-tolerant training loops on a deterministic toy task.

The task is fixed-seed linear regression in float32 with a fixed
evaluation order, so a trajectory is a pure function of (seed, world,
schedule) and "bit-identical across peers" is directly testable.
Gradients are snapped to a dyadic grid (multiples of 2^-10, clipped to
[-1, 1]); together with power-of-two learning rates this makes the inner
SGD update exact in float32, which is what turns the data-parallel and
H=1 local-update loops into bit-equal trajectories rather than merely
close ones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .client import Communicator, ReduceResult
from .collective import ReduceOp
from .sharedstate import SharedStateEntry, SyncStatus, simplehash
from .wire import DType, SyncStrategy

GRAD_GRID_BITS = 10  # gradients land on multiples of 2**-10


@dataclass
class ToyModel:
    """Linear regression on synthetic shards.

    Batches are indexable by (shard, step), so a retried step re-reads
    exactly the same data. Gradient values are clipped and snapped to the
    dyadic grid; see the module docstring.
    """

    dim: int = 4096
    batch: int = 32
    seed: int = 0
    noise: float = 0.01

    # parameters live deep inside the [1, 2) float32 binade so the exact
    # update arithmetic never crosses to a coarser ulp grid
    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 0xBEEF])
        self.true_weights = (1.4 + rng.random(self.dim) * 0.2).astype(np.float32)

    def init_params(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0xF00D])
        return (1.4 + rng.random(self.dim) * 0.2).astype(np.float32)

    def _batch(self, shard: int, step: int, inner: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, shard, step, inner])
        x = rng.normal(0, 1, (self.batch, self.dim)).astype(np.float32)
        y = x @ self.true_weights
        y += rng.normal(0, self.noise, self.batch).astype(np.float32)
        return x, y.astype(np.float32)

    def gradient(self, params: np.ndarray, shard: int, step: int, inner: int = 0) -> np.ndarray:
        """Mean-squared-error gradient, clipped and grid-snapped."""
        x, y = self._batch(shard, step, inner)
        residual = x @ params - y
        grad = (2.0 / np.float32(self.batch)) * (x.T @ residual)
        np.clip(grad, -0.25, 0.25, out=grad)
        scale = np.float32(1 << GRAD_GRID_BITS)
        np.multiply(grad, scale, out=grad)
        np.rint(grad, out=grad)
        np.divide(grad, scale, out=grad)
        return grad.astype(np.float32)

    def loss(self, params: np.ndarray, shard: int, step: int, inner: int = 0) -> float:
        x, y = self._batch(shard, step, inner)
        r = x @ params - y
        return float(np.mean(r * r))


class PlainSGD:
    """params -= lr * grad; exact in float32 when lr is a power of two and
    grads sit on the toy model's grid."""

    def __init__(self, lr: float = 2.0**-6):
        self.lr = np.float32(lr)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad

    def state_entries(self, prefix: str = "") -> list[SharedStateEntry]:
        return []


class NesterovOuter:
    """Nesterov-momentum outer optimizer acting on pseudo-gradients."""

    def __init__(self, dim: int, lr: float = 0.5, momentum: float = 0.9):
        self.lr = np.float32(lr)
        self.momentum = np.float32(momentum)
        self.velocity = np.zeros(dim, dtype=np.float32)

    def step(self, params: np.ndarray, delta: np.ndarray) -> None:
        np.multiply(self.velocity, self.momentum, out=self.velocity)
        self.velocity += delta
        params -= self.lr * (delta + self.momentum * self.velocity)

    def state_entries(self, prefix: str = "") -> list[SharedStateEntry]:
        return [SharedStateEntry(prefix + "outer_momentum", DType.F32, self.velocity)]


@dataclass
class RunResult:
    params: np.ndarray
    digests: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    steps_run: int = 0
    wall_seconds: float = 0.0


def _reduce_with_retry(comm: Communicator, buffer: np.ndarray, tag: int, op: ReduceOp, retries: int = 8) -> ReduceResult:
    """Lockstep retry: an abort restores the buffer, membership settles in
    the background, and the same step is attempted again."""
    for _ in range(retries):
        result = comm.all_reduce(buffer, tag=tag, op=op)
        if result.completed:
            return result
        time.sleep(0.05)
    raise RuntimeError(f"collective tag {tag} kept aborting: {result.reason}")


def _state_digest(entries: list[SharedStateEntry]) -> int:
    acc = 0
    for e in entries:
        acc ^= simplehash(e.readonly_view())
    return acc


def run_ddp(
    comm: Communicator,
    model: ToyModel,
    steps: int,
    inner_lr: float = 2.0**-6,
    shard: int | None = None,
    state_prefix: str = "",
) -> RunResult:
    """Data-parallel loop: average the gradients every step, then apply
    the same update everywhere."""
    params = model.init_params()
    optimizer = PlainSGD(inner_lr)
    entry = SharedStateEntry(state_prefix + "params", DType.F32, params, revision=0)
    out = RunResult(params)
    t0 = time.perf_counter()
    step = 0
    while step < steps:
        comm.update_topology()
        sync = comm.sync_shared_state([entry])
        if sync.status is SyncStatus.ERROR:
            time.sleep(0.05)
            continue
        my_shard = shard if shard is not None else comm.peer_id
        grad = model.gradient(params, my_shard, step)
        _reduce_with_retry(comm, grad, tag=0, op=ReduceOp.AVG)
        optimizer.step(params, grad)
        entry.revision += 1
        out.digests.append((entry.revision, simplehash(params)))
        out.losses.append(model.loss(params, my_shard, step))
        step += 1
    out.steps_run = step
    out.wall_seconds = time.perf_counter() - t0
    return out


def run_local_sgd(model: ToyModel, steps: int, inner_lr: float = 2.0**-6, shard: int = 1) -> RunResult:
    """Single-process trajectory for degenerate-world comparisons."""
    params = model.init_params()
    optimizer = PlainSGD(inner_lr)
    out = RunResult(params)
    for step in range(steps):
        grad = model.gradient(params, shard, step)
        optimizer.step(params, grad)
        out.digests.append((step + 1, simplehash(params)))
    out.steps_run = steps
    return out


def run_diloco(
    comm: Communicator,
    model: ToyModel,
    inner_steps: int,
    outer_steps: int,
    inner_lr: float = 2.0**-6,
    outer_optimizer=None,
    shard: int | None = None,
    state_prefix: str = "",
    pace_seconds: float = 0.0,
    on_synced=None,
    stop_event=None,
    initial_state: tuple | None = None,
) -> RunResult:
    """Local-update loop: H inner steps, then an averaged pseudo-gradient
    applied by the outer optimizer.

    on_synced(entries) fires after every successful state sync with the
    group-agreed bytes, which is the right moment to checkpoint.
    initial_state=(params, entries) lets a respawned worker start from a
    restored checkpoint instead of the model's fresh initialization."""
    if initial_state is not None:
        global_params, entries = initial_state
    else:
        global_params = model.init_params()
        entries = None
    local_params = global_params.copy()
    inner_opt = PlainSGD(inner_lr)
    outer_opt = outer_optimizer if outer_optimizer is not None else PlainSGD(1.0)
    if entries is None:
        entries = [SharedStateEntry(state_prefix + "params", DType.F32, global_params, revision=0)]
        entries += outer_opt.state_entries(state_prefix)
    out = RunResult(global_params)
    t0 = time.perf_counter()
    t = 0
    while t < outer_steps:
        if stop_event is not None and stop_event.is_set():
            break
        if pace_seconds:
            time.sleep(pace_seconds)
        comm.update_topology()
        sync = comm.sync_shared_state(entries)
        if sync.status is SyncStatus.ERROR:
            time.sleep(0.05)
            continue
        if sync.status is SyncStatus.UPDATED:
            np.copyto(local_params, global_params)
        if on_synced is not None:
            on_synced(entries)
        my_shard = shard if shard is not None else comm.peer_id
        for i in range(inner_steps):
            grad = model.gradient(local_params, my_shard, t, i)
            inner_opt.step(local_params, grad)
        delta = global_params - local_params
        _reduce_with_retry(comm, delta, tag=0, op=ReduceOp.AVG)
        outer_opt.step(global_params, delta)
        np.copyto(local_params, global_params)
        for e in entries:
            e.revision += 1
        out.digests.append((entries[0].revision, _state_digest(entries)))
        out.losses.append(model.loss(global_params, my_shard, t))
        t += 1
    out.steps_run = t
    out.wall_seconds = time.perf_counter() - t0
    return out


def run_async_diloco(
    comm: Communicator,
    model: ToyModel,
    inner_steps: int,
    outer_steps: int,
    inner_lr: float = 2.0**-6,
    outer_optimizer=None,
    shard: int | None = None,
    compute_delay: float = 0.0,
    on_step=None,
    state_prefix: str = "",
    stop_at_revision: int | None = None,
) -> RunResult:
    """One-step-delayed pipeline: each reduced pseudo-gradient is applied
    one outer step late so the reduce overlaps local compute.

    stop_at_revision ends the loop at a group-uniform boundary: the shared
    revision is identical on every peer, so all of them stop together
    regardless of when each one joined.

    Membership changes are folded in only when peers are pending: any
    in-flight reduce is awaited first, so major operations never overlap a
    running collective. A newly joined peer eavesdrops on the reduce it
    missed through a send-only/receive-only state sync, after which it is
    bit-compatible with the veterans.
    """
    global_params = model.init_params()
    local_params = global_params.copy()
    inner_opt = PlainSGD(inner_lr)
    outer_opt = outer_optimizer if outer_optimizer is not None else PlainSGD(1.0)
    entries = [SharedStateEntry(state_prefix + "params", DType.F32, global_params, revision=0)]
    entries += outer_opt.state_entries(state_prefix)
    out = RunResult(global_params)

    delta_bufs = [np.zeros(model.dim, dtype=np.float32) for _ in range(2)]
    in_flight = None  # (handle, buffer) of the launched reduce
    prev_ready: np.ndarray | None = None  # completed averaged delta, or None
    self_is_new = not comm.view.accepted
    was_accepted = comm.view.accepted
    owe_send = False  # a newcomer still needs the eavesdrop hand-off
    eavesdrop_failures = 0

    def settle_in_flight():
        nonlocal in_flight, prev_ready
        if in_flight is None:
            prev_ready = None
            return
        handle, buf = in_flight
        in_flight = None
        result = comm.await_async_reduce(handle, timeout=120.0)
        # an aborted delta is dropped; the divergence it carried folds
        # into the next pseudo-gradient automatically
        prev_ready = buf if result.completed else None

    t0 = time.perf_counter()
    t = 0
    while t < outer_steps:
        if stop_at_revision is not None and entries[0].revision >= stop_at_revision:
            break
        if comm.are_peers_pending():
            settle_in_flight()
            result = comm.update_topology()
            if result.accepted and not was_accepted:
                self_is_new = True
                was_accepted = True
            if result.added > 0 and not self_is_new:
                owe_send = True
            sync = comm.sync_shared_state(entries)
            if sync.status is SyncStatus.ERROR:
                time.sleep(0.05)
                continue
            np.copyto(local_params, global_params)

        my_shard = shard if shard is not None else comm.peer_id
        for i in range(inner_steps):
            grad = model.gradient(local_params, my_shard, t, i)
            inner_opt.step(local_params, grad)
        if compute_delay:
            time.sleep(compute_delay)

        if in_flight is not None:
            settle_in_flight()

        delta = delta_bufs[t % 2]
        np.subtract(global_params, local_params, out=delta)

        applied = False
        if prev_ready is not None:
            outer_opt.step(global_params, prev_ready)
            for e in entries:
                e.revision += 1
            applied = True
        np.copyto(local_params, global_params)

        # the extra sync that hands a newcomer the result of the reduce it
        # missed; newcomer state is never chosen to be distributed, and
        # both sides keep retrying until the hand-off lands
        if self_is_new:
            # if every veteran vanished, only receive-only peers remain and
            # the plan cannot pick a donor; fall back to the popularity
            # rule, which is safe because all survivors hold the join state
            strategy = (
                SyncStrategy.RECEIVE_ONLY if eavesdrop_failures < 3 else SyncStrategy.ENFORCE_POPULAR
            )
            sync = comm.sync_shared_state(entries, strategy)
            if sync.ok:
                self_is_new = False
                eavesdrop_failures = 0
                np.copyto(local_params, global_params)
            else:
                eavesdrop_failures += 1
        elif owe_send:
            sync = comm.sync_shared_state(entries, SyncStrategy.SEND_ONLY)
            if sync.ok:
                owe_send = False

        handle = comm.all_reduce_async(delta, tag=0, op=ReduceOp.AVG)
        in_flight = (handle, delta)
        prev_ready = None

        out.digests.append((entries[0].revision, _state_digest(entries)))
        if on_step is not None:
            on_step(t, applied)
        t += 1

    settle_in_flight()
    out.steps_run = t
    out.wall_seconds = time.perf_counter() - t0
    return out
