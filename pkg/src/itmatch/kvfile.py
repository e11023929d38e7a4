"""Plain-text "key: value" files.

One dialect serves dataset manifests, checkpoints, and CLI config files:
UTF-8 lines of ``key: value``, blank lines and ``#`` comments allowed,
duplicate keys rejected.  Values keep everything after the first colon.
"""

from __future__ import annotations

import os

from .errors import DataError


def format_kv(pairs) -> str:
    items = pairs.items() if isinstance(pairs, dict) else pairs
    lines = []
    for key, value in items:
        key = str(key)
        value = str(value)
        if ":" in key or "\n" in key or not key.strip():
            raise DataError(f"invalid key {key!r}")
        if "\n" in value:
            raise DataError(f"value for {key!r} contains a newline")
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def write_kv(path: str | os.PathLike, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(pairs))


def parse_kv_text(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key: value', got {raw!r}")
        key, _, value = line.partition(":")
        key = key.strip()
        value = value.strip()
        if not key:
            raise DataError(f"{source}:{lineno}: empty key")
        if key in out:
            raise DataError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), source=str(path))
