"""Checkpoint blobs: an 8-byte magic header followed by a torch payload."""

from __future__ import annotations

import io
from pathlib import Path

import torch

MAGIC = b"DFMSD\x00\x01\x00"


class CheckpointError(ValueError):
    pass


def save_checkpoint(payload: dict, path: str | Path) -> None:
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + buffer.getvalue())


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic header in {path}")
    try:
        return torch.load(io.BytesIO(blob[len(MAGIC) :]), weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint payload in {path}: {exc}") from exc
