"""Run manifests: the reproducibility record each command leaves behind.

Every output directory holds exactly one ``manifest.json`` describing the
command, the resolved configuration, the seed, digests of every input and
output file, and a timestamp. Two runs agree when their manifests match
everywhere except the timestamp; since output digests are part of the
manifest, that comparison is also a bit-exactness check on the outputs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import __version__

MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    pass


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class RunManifest:
    command: str
    version: str
    seed: int | None
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    created: str = ""

    def matches(self, other: "RunManifest") -> bool:
        """Equality up to the timestamp."""
        a = dataclasses.asdict(self)
        b = dataclasses.asdict(other)
        a.pop("created")
        b.pop("created")
        return a == b


def build_manifest(
    command: str,
    *,
    config: dict | None = None,
    seed: int | None = None,
    inputs: dict[str, str] | None = None,
) -> RunManifest:
    """Start a manifest; ``inputs`` maps labels to input file paths."""
    digests = {}
    for label, path in sorted((inputs or {}).items()):
        digests[label] = sha256_file(path)
    return RunManifest(
        command=command,
        version=__version__,
        seed=seed,
        config=dict(config or {}),
        inputs=digests,
        created=datetime.now(timezone.utc).isoformat(),
    )


def finalize_manifest(manifest: RunManifest, out_dir: str) -> str:
    """Digest every file in ``out_dir`` and write the manifest there."""
    outputs = {}
    for name in sorted(os.listdir(out_dir)):
        path = os.path.join(out_dir, name)
        if name == MANIFEST_NAME or not os.path.isfile(path):
            continue
        outputs[name] = sha256_file(path)
    manifest.outputs = outputs
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path: str) -> RunManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    known = {f.name for f in dataclasses.fields(RunManifest)}
    extra = set(raw) - known
    if extra:
        raise ManifestError(f"unknown manifest fields: {sorted(extra)}")
    try:
        return RunManifest(**raw)
    except TypeError as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc
