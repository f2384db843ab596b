"""Run manifests: one append-only record per command invocation.

Each run directory holds exactly one manifest.json written on success; the
file is never rewritten, so every artifact is reachable from exactly one
manifest.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DataFormatError

MANIFEST_NAME = "manifest.json"


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_snapshot: str
    seed: int
    input_hashes: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    def write(self, run_dir: str | Path) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / MANIFEST_NAME
        if path.exists():
            raise DataFormatError(f"{path} already exists; manifests are append-only")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def read_manifest(run_dir: str | Path) -> RunManifest:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataFormatError(f"{path} not found")
    data = json.loads(path.read_text())
    return RunManifest(**data)
