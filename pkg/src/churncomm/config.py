"""Client configuration: file based (TOML or JSON) with environment overrides.

Environment variables take precedence over the file, which takes
precedence over built-in defaults:

  CHURNCOMM_MASTER_ADDR   host:port of the master
  CHURNCOMM_POOL_SIZE     p2p connections per peer pair
  CHURNCOMM_PROBE_BYTES   bandwidth probe payload size
  CHURNCOMM_VOTE_TIMEOUT  seconds before a silent voter is treated as lost
  CHURNCOMM_MIN_PEERS     update_topology blocks until this many peers
  CHURNCOMM_CHUNK_BYTES   network chunk size inside a reduce stage
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


@dataclass
class ClientConfig:
    master_addr: str = "127.0.0.1:27777"
    pool_size: int = 4
    probe_bytes: int = 4 * 1024 * 1024
    vote_timeout: float = 30.0
    min_peers: int = 0
    chunk_bytes: int = 256 * 1024
    quick_time_limit: float = 0.25
    connect_timeout: float = 10.0

    # test seam: called at every data-frame boundary when set
    fault_hook: object = field(default=None, repr=False, compare=False)

    @property
    def master_host(self) -> str:
        host, _, _ = self.master_addr.rpartition(":")
        return host

    @property
    def master_port(self) -> int:
        _, _, port = self.master_addr.rpartition(":")
        return int(port)


_ENV_FIELDS = {
    "CHURNCOMM_MASTER_ADDR": ("master_addr", str),
    "CHURNCOMM_POOL_SIZE": ("pool_size", int),
    "CHURNCOMM_PROBE_BYTES": ("probe_bytes", int),
    "CHURNCOMM_VOTE_TIMEOUT": ("vote_timeout", float),
    "CHURNCOMM_MIN_PEERS": ("min_peers", int),
    "CHURNCOMM_CHUNK_BYTES": ("chunk_bytes", int),
}


def load_config(path: str | Path | None = None, env: dict | None = None, **overrides) -> ClientConfig:
    """Build a ClientConfig from an optional TOML/JSON file, the process
    environment, and keyword overrides (strongest)."""
    env = os.environ if env is None else env
    values: dict = {}
    if path is not None:
        raw = Path(path).read_bytes()
        if str(path).endswith(".json"):
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
        # accept both flat keys and the sectioned layout
        flat = dict(data)
        for section in ("topology", "collective", "client"):
            flat.update(data.get(section, {}))
        known = {f.name for f in fields(ClientConfig)}
        values.update({k: v for k, v in flat.items() if k in known})
    for env_key, (name, cast) in _ENV_FIELDS.items():
        if env_key in env:
            values[name] = cast(env[env_key])
    values.update(overrides)
    return ClientConfig(**values)
