from __future__ import annotations

import hashlib
import os
import random
import re
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

_SAFE_NAME = re.compile(r"[^a-zA-Z0-9._-]")


def sanitize(value: str) -> str:
    """Return a filesystem-safe version of *value*."""
    cleaned = _SAFE_NAME.sub("_", value)
    return cleaned.strip("_") or "unknown"


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seed every random source used by the pipeline.

    In deterministic mode torch runs single-threaded with deterministic
    kernels, so reductions happen in a fixed order.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def content_hash(paths: Iterable[Path], root: Path | None = None) -> str:
    """SHA-256 over the names and bytes of *paths* (directories are walked)."""
    files: list[Path] = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            files.extend(p for p in path.rglob("*") if p.is_file())
        elif path.is_file():
            files.append(path)
    digest = hashlib.sha256()
    for file in sorted(set(files)):
        name = file.relative_to(root) if root is not None else file.name
        digest.update(str(name).encode("utf-8"))
        digest.update(b"\0")
        digest.update(file.read_bytes())
    return digest.hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    """Write *text* to *path* via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
