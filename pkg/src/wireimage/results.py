"""JSONL result files: one manifest line followed by one record per line.

Records are flushed as they are appended so that an interrupted run leaves a
parseable prefix.  On close the manifest is rewritten (atomically) with the
end timestamp.
"""

from __future__ import annotations

import json
import logging
import os
import platform
import socket
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

from . import __version__

log = logging.getLogger(__name__)


@dataclass
class RunManifest:
    command: list[str] = field(default_factory=lambda: list(sys.argv))
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    tool_version: str = __version__
    start: float = field(default_factory=time.time)
    end: float | None = None
    host: dict = field(default_factory=lambda: {
        "hostname": socket.gethostname(),
        "platform": platform.platform(),
        "python": platform.python_version(),
    })

    def to_dict(self) -> dict:
        return {"kind": "manifest", **asdict(self)}


class ResultWriter:
    """Single, thread-safe appender for a JSONL result file."""

    def __init__(self, path: str | Path, manifest: RunManifest) -> None:
        self.path = Path(path)
        self.manifest = manifest
        self._lock = threading.Lock()
        self.count = 0
        self._f = open(self.path, "w", encoding="utf-8")
        self._write_line(manifest.to_dict())

    def _write_line(self, obj: dict) -> None:
        self._f.write(json.dumps(obj, sort_keys=True) + "\n")
        self._f.flush()

    def append(self, record: dict) -> None:
        with self._lock:
            self._write_line(record)
            self.count += 1

    def close(self) -> None:
        with self._lock:
            if self._f.closed:
                return
            self._f.close()
            self.manifest.end = time.time()
            tmp = self.path.with_name(self.path.name + ".tmp")
            with open(self.path, encoding="utf-8") as src, open(tmp, "w", encoding="utf-8") as dst:
                src.readline()
                dst.write(json.dumps(self.manifest.to_dict(), sort_keys=True) + "\n")
                for line in src:
                    dst.write(line)
            os.replace(tmp, self.path)

    def __enter__(self) -> "ResultWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class ReadStats:
    lines: int = 0
    records: int = 0
    manifests: int = 0
    malformed: int = 0


def iter_records(path: str | Path, stats: ReadStats | None = None,
                 kinds: tuple[str, ...] | None = None) -> Iterator[dict]:
    """Yield JSON records, skipping (and counting) lines that don't parse."""
    stats = stats if stats is not None else ReadStats()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            stats.lines += 1
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not an object")
            except ValueError as exc:
                stats.malformed += 1
                log.warning("%s:%d: skipping malformed line (%s)", path, lineno, exc)
                continue
            if obj.get("kind") == "manifest":
                stats.manifests += 1
                continue
            if kinds is not None and obj.get("kind") not in kinds:
                continue
            stats.records += 1
            yield obj
