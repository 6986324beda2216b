"""Self-describing checkpoint container shared by every stage.

Files are safetensors: a JSON header (tensor names, dtypes, shapes, plus our
string metadata) followed by the raw little-endian parameter blob.  Metadata
carries the checkpoint ``kind``, an echo of the model config and free-form
extras such as vocabularies or normalisation statistics.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .errors import CheckpointError, CheckpointMissing

FORMAT = "bookstyle"
VERSION = "1"


def save_checkpoint(path: str | Path, kind: str, state: dict, config: dict, extra: Optional[dict] = None) -> None:
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in state.items()}
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": json.dumps(config, sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata=meta)


def load_checkpoint(path: str | Path, kind: Optional[str] = None) -> tuple:
    """Return ``(state_dict, config, extra)``; checks the kind when given."""
    path = Path(path)
    if not path.exists():
        raise CheckpointMissing(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
        if meta.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} checkpoint")
        if kind is not None and meta.get("kind") != kind:
            raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
        state = {k: fh.get_tensor(k) for k in fh.keys()}
    return state, json.loads(meta["config"]), json.loads(meta["extra"])


def checkpoint_kind(path: str | Path) -> str:
    with safe_open(str(path), framework="pt") as fh:
        return (fh.metadata() or {}).get("kind", "")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    """sha256 over parameter and buffer bytes in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
