"""Operator tooling: the master daemon, worker/training entry point,
loopback benchmarks, and the churn stress harness.

All machine-readable reports go to stdout as JSON; events stream to
stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import signal
import subprocess
import sys
import tempfile
import threading
import time
from pathlib import Path

import numpy as np

from . import algos
from .client import CommError, MasterLostError, connect
from .collective import ReduceOp
from .config import ClientConfig
from .master import MasterConfig, MasterServer, json_log_to_stderr
from .sharedstate import simplehash

log = logging.getLogger("churncomm.cli")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="churncomm")
    sub = parser.add_subparsers(dest="command", required=True)

    p_master = sub.add_parser("master", help="run the coordinator daemon")
    p_master.add_argument("--listen", default="0.0.0.0:27777", help="host:port (port 0 picks one)")
    p_master.add_argument("--pool-size", type=int, default=4)
    p_master.add_argument("--probe-bytes", type=int, default=4 * 1024 * 1024)
    p_master.add_argument("--vote-timeout", type=float, default=30.0)
    p_master.add_argument("--state-log", default=None, help="append-only JSONL transition log")

    p_train = sub.add_parser("train", help="run a training worker")
    p_train.add_argument("--master", default=os.environ.get("CHURNCOMM_MASTER_ADDR", "127.0.0.1:27777"))
    p_train.add_argument("--algo", choices=["ddp", "diloco", "async-diloco"], default="diloco")
    p_train.add_argument("--steps", type=int, default=50, help="outer steps; 0 means run until killed")
    p_train.add_argument("--inner-steps", type=int, default=2)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--dim", type=int, default=4096)
    p_train.add_argument("--batch", type=int, default=8)
    p_train.add_argument("--iteration-ms", type=float, default=0.0)
    p_train.add_argument("--checkpoint-dir", default=None)
    p_train.add_argument("--min-peers", type=int, default=0)
    p_train.add_argument("--pool-size", type=int, default=2)

    p_bench = sub.add_parser("bench", help="measure reduce time and traffic")
    p_bench.add_argument("--master", default=None, help="join an existing master instead of spawning one")
    p_bench.add_argument("--world", type=int, default=2)
    p_bench.add_argument("--bytes", type=int, default=64 * 1024 * 1024, help="contribution per peer")
    p_bench.add_argument("--ops", type=int, default=1, help="concurrent reduce operations")
    p_bench.add_argument("--pool", type=int, default=4)
    p_bench.add_argument("--op", choices=["sum", "avg"], default="sum")
    p_bench.add_argument("--repeats", type=int, default=1)
    p_bench.add_argument("--dump-matrix", default=None, help="write the measured cost matrix as JSON")
    p_bench.add_argument("--chunk-bytes", type=int, default=1024 * 1024)
    p_bench.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    p_bench.add_argument("--timeout", type=float, default=600.0)

    p_chaos = sub.add_parser("chaos", help="churn stress harness")
    p_chaos.add_argument("--duration", type=float, default=60.0)
    p_chaos.add_argument("--seed", type=int, default=0)
    p_chaos.add_argument("--min-peers", type=int, default=2)
    p_chaos.add_argument("--max-peers", type=int, default=5)
    p_chaos.add_argument("--kill-min-ms", type=float, default=500.0)
    p_chaos.add_argument("--kill-max-ms", type=float, default=1000.0)
    p_chaos.add_argument("--iteration-ms", type=float, default=100.0)
    p_chaos.add_argument("--stall-timeout", type=float, default=30.0)
    p_chaos.add_argument("--graceful", action="store_true", help="terminate instead of hard-killing")

    args = parser.parse_args(argv)
    # many short-lived cross-thread handoffs per operation: a smaller GIL
    # switch interval keeps wake-up latency out of the data path
    sys.setswitchinterval(0.001)
    import faulthandler

    faulthandler.register(signal.SIGUSR1, all_threads=True)
    json_log_to_stderr()
    if args.command == "master":
        return cmd_master(args)
    if args.command == "train":
        return cmd_train(args)
    if args.command == "bench":
        return cmd_bench(args)
    if args.command == "chaos":
        return cmd_chaos(args)
    return 2


# ---------------------------------------------------------------------------
# master
# ---------------------------------------------------------------------------


def cmd_master(args) -> int:
    host, _, port = args.listen.rpartition(":")
    config = MasterConfig(
        pool_size=args.pool_size,
        probe_bytes=args.probe_bytes,
        vote_timeout=args.vote_timeout,
        state_log_path=args.state_log,
    )
    try:
        server = MasterServer(host or "0.0.0.0", int(port), config).start()
    except OSError as e:
        print(json.dumps({"event": "bind_failed", "error": str(e)}), flush=True)
        return 1
    print(json.dumps({"event": "listening", "host": server.host, "port": server.port}), flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    while not stop.is_set():
        stop.wait(0.2)
    server.stop()
    print(json.dumps({"event": "stopped"}), flush=True)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_checkpoint(path: Path, entries) -> None:
    if not path.exists():
        return
    with np.load(path) as stored:
        revision = int(stored["revision"])
        for entry in entries:
            if entry.key in stored.files:
                np.copyto(
                    np.frombuffer(entry.writable_view(), dtype=np.float32), stored[entry.key]
                )
                entry.revision = revision


def _save_checkpoint(path: Path, entries) -> None:
    arrays = {
        e.key: np.frombuffer(e.readonly_view(), dtype=np.float32).copy() for e in entries
    }
    arrays["revision"] = np.int64(max(e.revision for e in entries))
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def cmd_train(args) -> int:
    cfg = ClientConfig(
        master_addr=args.master,
        pool_size=args.pool_size,
        min_peers=args.min_peers,
        probe_bytes=256 * 1024,
    )
    comm = connect(config=cfg)
    model = algos.ToyModel(dim=args.dim, batch=args.batch, seed=args.seed)
    steps = args.steps if args.steps > 0 else 10**9
    pace = args.iteration_ms / 1000.0
    ckpt = Path(args.checkpoint_dir) / "latest.npz" if args.checkpoint_dir else None

    outer = algos.NesterovOuter(model.dim)

    def on_synced(entries):
        if ckpt is not None:
            _save_checkpoint(ckpt, entries)
        digest = algos._state_digest(entries)
        log.info(json.dumps({
            "event": "worker_synced",
            "peer": comm.peer_id,
            "revision": entries[0].revision,
            "digest": f"{digest:016x}",
        }))

    try:
        if args.algo == "ddp":
            result = algos.run_ddp(comm, model, steps)
        elif args.algo == "diloco":
            result = _run_diloco_with_checkpoint(comm, model, args, outer, pace, ckpt, on_synced, steps)
        else:
            result = algos.run_async_diloco(
                comm, model, args.inner_steps, steps, outer_optimizer=outer,
                compute_delay=pace,
            )
        report = {
            "event": "worker_done",
            "peer_id": comm.peer_id,
            "steps": result.steps_run,
            "final_digest": f"{simplehash(result.params):016x}",
            "wall_seconds": result.wall_seconds,
        }
        print(json.dumps(report), flush=True)
        return 0
    except (CommError, MasterLostError) as e:
        print(json.dumps({"event": "worker_error", "error": str(e)}), flush=True)
        return 1
    finally:
        comm.close()


def _run_diloco_with_checkpoint(comm, model, args, outer, pace, ckpt, on_synced, steps):
    from .sharedstate import SharedStateEntry
    from .wire import DType

    global_params = model.init_params()
    entries = [SharedStateEntry("params", DType.F32, global_params, revision=0)]
    entries += outer.state_entries()
    if ckpt is not None:
        # a respawned worker restores the last committed checkpoint so the
        # group can resume from the state it previously agreed on
        _load_checkpoint(ckpt, entries)
    return algos.run_diloco(
        comm, model, args.inner_steps, steps, outer_optimizer=outer,
        pace_seconds=pace, on_synced=on_synced,
        initial_state=(global_params, entries),
    )


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    if args.worker:
        return _bench_worker(args)
    started_master = None
    if args.master is None:
        config = MasterConfig(pool_size=args.pool, probe_bytes=1 << 20)
        started_master = MasterServer("127.0.0.1", 0, config).start()
        master_addr = f"127.0.0.1:{started_master.port}"
    else:
        master_addr = args.master
    procs = []
    try:
        for _ in range(args.world):
            procs.append(
                subprocess.Popen(
                    [
                        sys.executable, "-m", "churncomm.cli", "bench", "--worker",
                        "--master", master_addr,
                        "--world", str(args.world),
                        "--bytes", str(args.bytes),
                        "--ops", str(args.ops),
                        "--pool", str(args.pool),
                        "--op", args.op,
                        "--repeats", str(args.repeats),
                        "--chunk-bytes", str(args.chunk_bytes),
                    ],
                    stdout=subprocess.PIPE,
                    stderr=subprocess.DEVNULL,
                    text=True,
                )
            )
        reports = []
        deadline = time.monotonic() + args.timeout
        for proc in procs:
            remaining = max(1.0, deadline - time.monotonic())
            try:
                out, _ = proc.communicate(timeout=remaining)
            except subprocess.TimeoutExpired:
                proc.kill()
                print(json.dumps({"event": "bench_failed", "error": "worker timeout"}), flush=True)
                return 1
            if proc.returncode != 0:
                print(json.dumps({"event": "bench_failed", "error": f"worker exited {proc.returncode}"}), flush=True)
                return 1
            reports.append(json.loads(out.strip().splitlines()[-1]))
        times = [r["seconds"] for r in reports]
        mean_t = float(np.mean(times))
        std_t = float(np.std(times))
        contribution = args.bytes * args.ops
        report = {
            "event": "bench_report",
            "world": args.world,
            "bytes_per_op": args.bytes,
            "ops": args.ops,
            "pool": args.pool,
            "time_s": mean_t,
            "time_std_s": std_t,
            "effective_throughput_bytes_per_s": contribution / mean_t if mean_t else 0.0,
            "tx_bytes_per_peer": float(np.mean([r["tx_bytes"] for r in reports])),
            "rx_bytes_per_peer": float(np.mean([r["rx_bytes"] for r in reports])),
            "expected_payload_bytes": 2 * (args.world - 1) / args.world * contribution,
            "per_peer": reports,
        }
        if args.dump_matrix and started_master is not None:
            # the live matrix is pruned as peers depart; dump the snapshot
            # the last ring was solved from
            matrix = {
                f"{a}->{b}": seconds
                for (a, b), seconds in started_master.core.last_solved_matrix.items()
            }
            Path(args.dump_matrix).write_text(json.dumps(matrix, indent=2))
        print(json.dumps(report), flush=True)
        return 0
    finally:
        for proc in procs:
            if proc.poll() is None:
                proc.kill()
        if started_master is not None:
            started_master.stop()


def _bench_worker(args) -> int:
    cfg = ClientConfig(
        master_addr=args.master,
        pool_size=args.pool,
        min_peers=args.world,
        probe_bytes=1 << 20,
        chunk_bytes=args.chunk_bytes,
    )
    comm = connect(config=cfg)
    try:
        # blocks until the world is complete; a rejected join (connect
        # failure during admission) is simply retried
        while not comm.update_topology().accepted:
            time.sleep(0.05)
        op = ReduceOp.SUM if args.op == "sum" else ReduceOp.AVG
        n = args.bytes // 4
        rng = np.random.default_rng(comm.peer_id)
        buffers = [rng.normal(0, 1, n).astype(np.float32) for _ in range(args.ops)]
        tx0 = rx0 = 0
        best = None
        for _ in range(args.repeats):
            bufs = [b.copy() for b in buffers]
            start = time.perf_counter()
            handles = [comm.all_reduce_async(bufs[i], tag=i, op=op) for i in range(args.ops)]
            results = [comm.await_async_reduce(h, timeout=args.timeout) for h in handles]
            elapsed = time.perf_counter() - start
            if not all(r.completed for r in results):
                print(json.dumps({"event": "worker_error", "error": "reduce aborted"}), flush=True)
                return 1
            tx0 = sum(r.tx_bytes for r in results)
            rx0 = sum(r.rx_bytes for r in results)
            best = elapsed if best is None else min(best, elapsed)
        print(
            json.dumps(
                {
                    "peer_id": comm.peer_id,
                    "seconds": best,
                    "tx_bytes": tx0,
                    "rx_bytes": rx0,
                }
            ),
            flush=True,
        )
        return 0
    finally:
        comm.close()


# ---------------------------------------------------------------------------
# chaos
# ---------------------------------------------------------------------------


class ChaosSchedule:
    """Randomized spawn/kill plan; never drops below min_peers."""

    def __init__(self, seed, min_peers, max_peers, kill_min_ms, kill_max_ms, duration):
        self.rng = random.Random(seed)
        self.min_peers = min_peers
        self.max_peers = max_peers
        self.kill_min_ms = kill_min_ms
        self.kill_max_ms = kill_max_ms
        self.duration = duration

    def next_delay(self) -> float:
        return self.rng.uniform(self.kill_min_ms, self.kill_max_ms) / 1000.0

    def choose_action(self, live: int) -> str:
        if live <= self.min_peers:
            return "spawn"
        if live >= self.max_peers:
            return "kill"
        return self.rng.choice(["spawn", "kill"])


def _spawn_chaos_worker(master_addr, ckpt_dir, args):
    return subprocess.Popen(
        [
            sys.executable, "-m", "churncomm.cli", "train",
            "--master", master_addr,
            "--algo", "diloco",
            "--steps", "0",
            "--inner-steps", "2",
            "--dim", "1024",
            "--iteration-ms", str(args.iteration_ms),
            "--checkpoint-dir", str(ckpt_dir),
            "--pool-size", "2",
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )


def run_chaos(args) -> dict:
    """Drive the churn schedule; returns the machine-readable verdict."""
    schedule = ChaosSchedule(
        args.seed, args.min_peers, args.max_peers, args.kill_min_ms, args.kill_max_ms, args.duration
    )
    config = MasterConfig(pool_size=2, probe_bytes=256 * 1024, vote_timeout=10.0)
    server = MasterServer("127.0.0.1", 0, config).start()
    master_addr = f"127.0.0.1:{server.port}"
    ckpt_dir = Path(tempfile.mkdtemp(prefix="churncomm-chaos-"))
    workers: list[subprocess.Popen] = []
    events = []
    verdict = {"pass": False}
    try:
        for _ in range(args.min_peers):
            workers.append(_spawn_chaos_worker(master_addr, ckpt_dir, args))
        start = time.monotonic()
        last_revision = 0
        last_advance = start
        max_stall = 0.0
        failures = []
        next_churn = start + schedule.next_delay()
        while time.monotonic() - start < args.duration:
            time.sleep(0.05)
            workers = [w for w in workers if w.poll() is None]
            now = time.monotonic()
            if now >= next_churn:
                action = schedule.choose_action(len(workers))
                if action == "kill" and len(workers) > schedule.min_peers:
                    victim = schedule.rng.choice(workers)
                    if args.graceful:
                        victim.terminate()
                    else:
                        victim.kill()
                    events.append({"t": now - start, "event": "kill", "pid": victim.pid})
                elif action == "spawn" and len(workers) < schedule.max_peers:
                    workers.append(_spawn_chaos_worker(master_addr, ckpt_dir, args))
                    events.append({"t": now - start, "event": "spawn", "pid": workers[-1].pid})
                next_churn = now + schedule.next_delay()
            revision = server.core.committed_revision
            if revision > last_revision:
                last_revision = revision
                last_advance = now
            max_stall = max(max_stall, now - last_advance)
            if now - last_advance > args.stall_timeout:
                failures.append(f"no revision advance for {now - last_advance:.1f}s")
                break
        digest_faults = [
            e for e in server.core.transition_log
            if e["event"] == "sync_failed" and "diverge" in e.get("reason", "")
        ]
        if digest_faults:
            failures.append(f"{len(digest_faults)} syncs with diverging digests")
        if server.errors:
            failures.append(f"master errors: {server.errors}")
        from .master import audit_no_major_overlap

        overlaps = audit_no_major_overlap(server.core.transition_log)
        if overlaps:
            failures.append(f"{len(overlaps)} overlapping major operations")
        if last_revision <= 0:
            failures.append("shared-state revision never advanced")
        orphaned = [
            ts.tag for ts in server.core.tags.values() if ts.phase.value != "vote_initiate"
        ]
        verdict = {
            "pass": not failures,
            "failures": failures,
            "final_revision": last_revision,
            "max_stall_seconds": round(max_stall, 3),
            "sync_commits": sum(
                1 for e in server.core.transition_log if e["event"] in ("sync_committed", "sync_noop")
            ),
            "events": events,
            "orphaned_tags_at_exit": orphaned,
        }
        return verdict
    finally:
        for w in workers:
            if w.poll() is None:
                w.kill()
        for w in workers:
            try:
                w.wait(timeout=10)
            except subprocess.TimeoutExpired:
                pass
        server.stop()


def cmd_chaos(args) -> int:
    verdict = run_chaos(args)
    verdict["event"] = "chaos_report"
    print(json.dumps(verdict), flush=True)
    return 0 if verdict["pass"] else 1


if __name__ == "__main__":
    sys.exit(main())
