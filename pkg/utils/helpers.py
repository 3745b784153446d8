from __future__ import annotations
from pathlib import Path
from typing import Any, Iterable, Optional
import hashlib
import json
import os
import tempfile

import numpy as np


def derive_seed(seed: int, *parts: Any) -> int:
    """
    Deterministic child seed for a (seed, part, part, ...) schedule.
    Parts may be ints or strings; the same inputs always give the same seed.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for p in parts:
        if isinstance(p, (int, np.integer)):
            words.append(int(p) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(p).encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:4], "little"))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str | Path, obj: Any, indent: Optional[int] = 2) -> None:
    atomic_write_text(path, json.dumps(obj, ensure_ascii=False, indent=indent) + "\n")


def read_json(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def parse_scalar(text: str) -> Any:
    """Parse a CLI override value: JSON if it parses, else the raw string."""
    try:
        return json.loads(text)
    except Exception:
        return text


def unique_in_order(items: Iterable[Any]) -> list:
    seen = set()
    out = []
    for x in items:
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out
