"""Run manifests: enough provenance to regenerate every artifact bit-exactly."""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def now_utc() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    options: dict
    config: dict
    config_sha256: str
    seed: int
    tool_version: str = __version__
    python: str = platform.python_version()
    started: str = field(default_factory=now_utc)
    finished: str = ""
    artifacts: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    potential_hash: str | None = None

    def add_artifact(self, path, root) -> None:
        p = Path(path)
        self.artifacts.append({"path": str(p.relative_to(root)), "sha256": sha256_file(p), "bytes": p.stat().st_size})

    def add_input(self, path) -> None:
        p = Path(path)
        self.inputs.append({"path": str(p.resolve()), "sha256": sha256_file(p)})

    def write(self, path) -> None:
        self.finished = now_utc()
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
