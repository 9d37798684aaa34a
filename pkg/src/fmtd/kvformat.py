"""Flat ``key = value`` text files with dotted section prefixes.

Used for run configs and for ensemble/suite manifests: one key per line,
``#`` starts a comment, order is preserved on write so files diff cleanly.
"""

from __future__ import annotations

from pathlib import Path


class KvError(ValueError):
    pass


def format_kv(pairs: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise KvError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise KvError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def write_kv(path, pairs: dict[str, object]) -> None:
    Path(path).write_text(format_kv(pairs), encoding="utf-8")


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))
