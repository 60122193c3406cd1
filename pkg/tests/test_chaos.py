from __future__ import annotations

import argparse
import json
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import pytest

from churncomm.cli import run_chaos
from churncomm.master import MasterConfig, MasterServer


def _chaos_args(**overrides) -> argparse.Namespace:
    base = dict(
        duration=15.0,
        seed=7,
        min_peers=2,
        max_peers=4,
        kill_min_ms=500.0,
        kill_max_ms=1000.0,
        iteration_ms=100.0,
        stall_timeout=30.0,
        graceful=False,
    )
    base.update(overrides)
    return argparse.Namespace(**base)


def test_zero_churn_schedule_passes():
    # min == max means the schedule can never kill nor spawn
    verdict = run_chaos(_chaos_args(duration=8.0, min_peers=2, max_peers=2))
    assert verdict["pass"], verdict["failures"]
    assert verdict["final_revision"] > 0
    assert not [e for e in verdict["events"] if e["event"] == "kill"]


def test_short_churn_run_passes():
    verdict = run_chaos(_chaos_args(duration=15.0))
    assert verdict["pass"], verdict["failures"]
    assert verdict["final_revision"] > 0
    assert verdict["orphaned_tags_at_exit"] == []
    assert verdict["max_stall_seconds"] < 30.0


def _spawn_worker(addr: str, ckpt_dir: Path, extra=()) -> subprocess.Popen:
    return subprocess.Popen(
        [
            sys.executable, "-m", "churncomm.cli", "train",
            "--master", addr, "--algo", "diloco", "--steps", "0",
            "--inner-steps", "2", "--dim", "512", "--iteration-ms", "50",
            "--checkpoint-dir", str(ckpt_dir), "--pool-size", "2",
            *extra,
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )


def _wait_revision(server: MasterServer, target: int, timeout: float) -> int:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if server.core.committed_revision >= target:
            return server.core.committed_revision
        time.sleep(0.05)
    return server.core.committed_revision


def test_kill_all_then_respawn_resumes_from_last_state():
    config = MasterConfig(pool_size=2, probe_bytes=256 * 1024, vote_timeout=10.0)
    server = MasterServer("127.0.0.1", 0, config).start()
    addr = f"127.0.0.1:{server.port}"
    ckpt_dir = Path(tempfile.mkdtemp(prefix="churncomm-resume-"))
    try:
        workers = [_spawn_worker(addr, ckpt_dir) for _ in range(2)]
        reached = _wait_revision(server, 8, timeout=60)
        assert reached >= 8, "group never made progress"
        committed = dict(server.core.committed_state)
        for w in workers:
            w.kill()
        for w in workers:
            w.wait(timeout=10)

        # fresh workers restore the shared checkpoint and the run resumes
        # strictly beyond the previously committed revision
        workers = [_spawn_worker(addr, ckpt_dir) for _ in range(2)]
        resumed = _wait_revision(server, reached + 5, timeout=60)
        assert resumed > reached, "run did not resume past the committed state"
        for w in workers:
            w.kill()
            w.wait(timeout=10)
        assert committed.keys() == server.core.committed_state.keys()
    finally:
        server.stop()


def test_fresh_state_without_checkpoint_cannot_resume():
    config = MasterConfig(pool_size=2, probe_bytes=256 * 1024, vote_timeout=10.0)
    server = MasterServer("127.0.0.1", 0, config).start()
    addr = f"127.0.0.1:{server.port}"
    ckpt_a = Path(tempfile.mkdtemp(prefix="churncomm-ckpt-a-"))
    ckpt_b = Path(tempfile.mkdtemp(prefix="churncomm-ckpt-b-"))
    try:
        workers = [_spawn_worker(addr, ckpt_a) for _ in range(2)]
        reached = _wait_revision(server, 5, timeout=60)
        assert reached >= 5
        for w in workers:
            w.kill()
            w.wait(timeout=10)

        # newcomers with no checkpoint offer fresh state; the group floor
        # refuses them as donors, so the revision cannot advance
        workers = [_spawn_worker(addr, ckpt_b, extra=()) for _ in range(2)]
        time.sleep(6)
        assert server.core.committed_revision == reached
        refusals = [
            e for e in server.core.transition_log
            if e["event"] == "sync_plan_error" and "resumption" in e.get("reason", "")
        ]
        assert refusals, "master never refused the fresh state"
        for w in workers:
            w.kill()
            w.wait(timeout=10)
    finally:
        server.stop()
