"""Run manifests: every command records its config, seeds, and inputs."""

from __future__ import annotations

import datetime
import hashlib
import json
from pathlib import Path
from typing import Iterable, Union

from . import __version__

MANIFEST_NAME = "manifest.json"


def _checksum(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def input_checksums(paths: Iterable[Union[str, Path]]) -> dict[str, str]:
    out = {}
    for item in paths:
        path = Path(item)
        if path.is_dir():
            for file in sorted(p for p in path.rglob("*") if p.is_file()):
                out[str(file)] = _checksum(file)
        elif path.is_file():
            out[str(path)] = _checksum(path)
    return out


def write_manifest(out_dir: Union[str, Path], command: str, config: dict,
                   seeds: Iterable[int], inputs: Iterable[Union[str, Path]]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "input_checksums": input_checksums(inputs),
        "tool_version": __version__,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def read_manifest(out_dir: Union[str, Path]) -> dict:
    return json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))
