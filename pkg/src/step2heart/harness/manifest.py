"""Per-run manifest: config snapshot, stage status and artifact hashes."""

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

from ..errors import CohortIOError, MissingArtifactError

MANIFEST_NAME = "manifest.json"
STAGES = ("generate", "pretrain", "extract", "evaluate", "report")


def file_digest(path):
    """Git-style blob hash (sha1 over ``blob <size>\\0`` + content)."""
    h = hashlib.sha1()
    h.update(f"blob {os.path.getsize(path)}\0".encode())
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    run_id: str
    config: dict
    config_hash: str
    created: float = field(default_factory=time.time)
    updated: float = None
    stages: dict = field(default_factory=dict)  # name -> {"status", "finished", "artifacts"}

    def mark(self, run_dir, stage, artifacts, status="done", **extra):
        """Record ``stage`` as finished with ``artifacts`` (paths relative to ``run_dir``).

        Per-variant stages merge their artifact lists so that running one
        variant at a time accumulates.
        """
        prev = self.stages.get(stage, {})
        table = dict(prev.get("artifacts", {}))
        for rel in artifacts:
            table[rel] = file_digest(os.path.join(run_dir, rel))
        entry = {**prev, **extra, "status": status, "finished": time.time(), "artifacts": table}
        self.stages[stage] = entry
        self.updated = entry["finished"]
        self.save(run_dir)

    def require(self, run_dir, stage, rel_paths=(), hint=None):
        """Raise :class:`MissingArtifactError` unless ``stage`` finished and left ``rel_paths``."""
        hint = hint or stage
        entry = self.stages.get(stage)
        if entry is None or entry.get("status") != "done":
            raise MissingArtifactError(f"stage '{stage}' has not completed; run `{hint}` first",
                                       stage=hint)
        for rel in rel_paths:
            if not os.path.exists(os.path.join(run_dir, rel)):
                raise MissingArtifactError(f"missing artifact {rel}; run `{hint}` first", stage=hint)

    def to_dict(self):
        return {"run_id": self.run_id, "config": self.config, "config_hash": self.config_hash,
                "created": self.created, "updated": self.updated, "stages": self.stages}

    def save(self, run_dir):
        atomic_write_json(os.path.join(run_dir, MANIFEST_NAME), self.to_dict())

    @classmethod
    def load(cls, run_dir):
        path = os.path.join(run_dir, MANIFEST_NAME)
        if not os.path.isfile(path):
            raise MissingArtifactError(f"no run manifest in {run_dir}; run `generate` first",
                                       stage="generate")
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
            return cls(d["run_id"], d["config"], d["config_hash"], d["created"], d.get("updated"),
                       d.get("stages", {}))
        except (json.JSONDecodeError, KeyError) as exc:
            raise CohortIOError(f"{path}: corrupt manifest ({exc})") from exc
