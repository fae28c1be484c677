"""
HLSIRM - Helper Utilities
"""
import hashlib
import json
from typing import Any, Iterable, Optional

import numpy as np


def canonical_json(value: Any, indent: Optional[int] = None) -> str:
    """
    Serialize to JSON with sorted keys and no incidental whitespace.

    Floats use Python's shortest round-trip repr, so every value reloads
    bit-identically.
    """
    if indent is None:
        return json.dumps(to_jsonable(value), sort_keys=True, separators=(",", ":"), allow_nan=True)
    return json.dumps(to_jsonable(value), sort_keys=True, indent=indent, allow_nan=True)


def to_jsonable(value: Any) -> Any:
    """Convert numpy containers and scalars into plain Python values."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def short_hash(text: str, size: int = 16) -> str:
    """First ``size`` hex characters of the SHA-256 of ``text``."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:size]


def hash_parts(parts: Iterable[bytes]) -> str:
    """SHA-256 over a sequence of byte chunks."""
    digest = hashlib.sha256()
    for part in parts:
        digest.update(len(part).to_bytes(8, "little"))
        digest.update(part)
    return digest.hexdigest()


def csv_banner(version: str, config_hash: str) -> str:
    """First line of every CSV artifact."""
    return f"# hlsirm {version} config={config_hash}"


def strip_banner(text: str) -> str:
    """Drop leading ``#`` lines from CSV text."""
    lines = text.splitlines(keepends=True)
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        start += 1
    return "".join(lines[start:])


def derive_seed(seed: int, *keys: str) -> int:
    """Independent child seed for a named sub-task of a run."""
    words = [int(seed)] + [int(short_hash(key, 8), 16) for key in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])
