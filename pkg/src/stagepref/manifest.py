"""Run manifests: canonical config hashing for reproducibility audits.

A manifest records exactly what produced a set of output files. Two runs
with equal config hashes are guaranteed to write byte-identical results,
because every stochastic choice flows from the seeds included in the hash.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict, seeds: list[int]) -> str:
    payload = canonical_json({"config": config, "seeds": seeds})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    outputs: list[str] = field(default_factory=list)
    package_version: str = "0.1.0"
    started_at: float = 0.0
    finished_at: float = 0.0

    def hash(self) -> str:
        return config_hash(self.config, self.seeds)

    def to_json_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "outputs": self.outputs,
            "package_version": self.package_version,
            "config_hash": self.hash(),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def start_manifest(command: str, config: dict, seeds: list[int]) -> RunManifest:
    return RunManifest(command=command, config=config, seeds=list(seeds),
                       started_at=time.time())


def finish_manifest(manifest: RunManifest, outputs: list[str], path: str) -> None:
    manifest.outputs = list(outputs)
    manifest.finished_at = time.time()
    manifest.write(path)
