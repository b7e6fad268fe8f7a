"""Versioned binary blobs for surrogate weights, generators and target classifiers.

Every blob is a single ``torch.save`` file holding a plain dict with a
``format`` tag and a ``version`` next to the payload, so a file can be
identified without knowing in advance what wrote it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from .errors import CheckpointError

BLOB_VERSION = 1

TINY_ENCODER = "mutualattack.tiny-dual-encoder"
GENERATOR = "mutualattack.generator"
TARGET = "mutualattack.target"


def write_blob(path: str | Path, kind: str, payload: dict[str, Any]) -> Path:
    """Write ``payload`` tagged with ``kind`` and the current blob version."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": kind, "version": BLOB_VERSION, **payload}, out)
    return out


def read_blob(path: str | Path, kind: str) -> dict[str, Any]:
    """Load a blob and check its tag and version.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        CheckpointError: If the file is not a ``kind`` blob of a known version.
    """
    src = Path(path)
    if not src.is_file():
        raise FileNotFoundError(f"checkpoint not found: {src}")
    try:
        blob = torch.load(src, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{src} is not a readable checkpoint: {exc}") from exc

    if not isinstance(blob, dict) or blob.get("format") != kind:
        found = blob.get("format") if isinstance(blob, dict) else type(blob).__name__
        raise CheckpointError(f"{src} holds '{found}', expected '{kind}'")
    if blob.get("version") != BLOB_VERSION:
        raise CheckpointError(
            f"{src} has version {blob.get('version')!r}; this release reads version {BLOB_VERSION}"
        )
    return blob
