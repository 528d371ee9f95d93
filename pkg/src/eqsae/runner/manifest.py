"""Run manifest, artifact checksums and per-stage seed derivation."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

MANIFEST_NAME = "manifest.json"


def derive_seed(global_seed: int, stage: str, variant: str = "", k: int = 0) -> int:
    """Seed for one stage job: sha256 of (global_seed, stage, variant, K), folded to 31 bits."""
    blob = f"{global_seed}|{stage}|{variant}|{k}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") % (2**31)


def file_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_checksums(root: Path, rel_to: Path) -> dict[str, str]:
    """Checksums of every file below ``root``, keyed by path relative to ``rel_to``."""
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        out[path.relative_to(rel_to).as_posix()] = file_checksum(path)
    return out


@dataclass
class StageRecord:
    key: str
    fingerprint: str
    seed: int
    outputs: dict[str, str]
    seconds: float
    cache_hit: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunManifest:
    """Config snapshot plus one record per stage job (checksums, seed, wall clock, cache hit)."""

    root: Path
    config: dict = field(default_factory=dict)
    stages: dict[str, StageRecord] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def load(cls, root: str | Path) -> "RunManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            return cls(root)
        data = json.loads(path.read_text())
        stages = {k: StageRecord(**v) for k, v in data.get("stages", {}).items()}
        return cls(root, data.get("config", {}), stages)

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {
            "config": self.config,
            "stages": {k: self.stages[k].to_dict() for k in sorted(self.stages)},
        }
        tmp = self.root / (MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
        os.replace(tmp, self.root / MANIFEST_NAME)

    def record(self, rec: StageRecord) -> None:
        with self._lock:
            self.stages[rec.key] = rec
            self.save()

    def is_fresh(self, key: str, fingerprint: str) -> bool:
        """True if ``key`` ran with this fingerprint and its outputs are intact on disk."""
        rec = self.stages.get(key)
        if rec is None or rec.fingerprint != fingerprint or not rec.outputs:
            return False
        for rel, digest in rec.outputs.items():
            path = self.root / rel
            if not path.is_file() or file_checksum(path) != digest:
                return False
        return True

    def outputs_digest(self, keys: list[str]) -> str:
        """Combined digest of the outputs of upstream stages (part of a downstream fingerprint)."""
        h = hashlib.sha256()
        for key in sorted(keys):
            rec = self.stages[key]
            h.update(key.encode())
            for rel in sorted(rec.outputs):
                h.update(f"{rel}={rec.outputs[rel]}".encode())
        return h.hexdigest()

    def artifacts(self) -> list[str]:
        return sorted(rel for rec in self.stages.values() for rel in rec.outputs)
