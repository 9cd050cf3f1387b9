"""Run directories: manifest, append-only CSV sinks and checkpoints."""
from __future__ import annotations

import csv
import json
import platform
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from ..errors import ConfigError

MANIFEST_FORMAT = "piddpg.manifest/1"
METRICS_COLUMNS = (
    "episode",
    "total_reward",
    "critic_loss_mean",
    "actor_gradnorm_mean",
    "refiner_q_gain_median",
    "sigma",
    "k_refine",
    "eval_reward",
)
TIMING_COLUMNS = ("episode", "wall_ms")
REFINER_COLUMNS = ("episode", "step", "k_refine", "q_before", "q_after", "q_gain")
SWEEP_COLUMNS = ("parameter", "value", "seed", "episode", "reward")
QGAIN_COLUMNS = ("parameter", "value", "seed", "episode", "q_gain")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


class CsvSink:
    """Append-only CSV file; writes from several threads are serialized."""

    def __init__(self, path, columns, append: bool = False):
        self.path = Path(path)
        self.columns = tuple(columns)
        self._lock = threading.Lock()
        fresh = not (append and self.path.exists())
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if not fresh else "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._writer.writerow(self.columns)
            self._fh.flush()

    def write(self, row: dict) -> None:
        with self._lock:
            self._writer.writerow([_cell(row.get(c)) for c in self.columns])
            self._fh.flush()

    def write_many(self, rows) -> None:
        for row in rows:
            self.write(row)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, columns, rows) -> Path:
    with CsvSink(path, columns) as sink:
        sink.write_many(rows)
    return Path(path)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    config: dict
    profile_digest: str
    seed: int
    profile_file: str = "profile.json"
    command: str = "train"
    started_at: str = field(default_factory=now_iso)
    finished_at: str | None = None
    version: str = __version__
    environment: dict = field(
        default_factory=lambda: {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        }
    )
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "profile_file": self.profile_file,
            "profile_digest": self.profile_digest,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "version": self.version,
            "environment": self.environment,
            "extra": self.extra,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        doc = json.loads(path.read_text())
        if doc.get("format") != MANIFEST_FORMAT:
            raise ConfigError(f"{path}: unsupported manifest format {doc.get('format')!r}")
        return cls(
            config=doc["config"],
            profile_digest=doc["profile_digest"],
            seed=doc["seed"],
            profile_file=doc.get("profile_file", "profile.json"),
            command=doc.get("command", "train"),
            started_at=doc.get("started_at"),
            finished_at=doc.get("finished_at"),
            version=doc.get("version", ""),
            environment=doc.get("environment", {}),
            extra=doc.get("extra", {}),
        )
