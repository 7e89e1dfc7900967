"""Line-oriented key=value config parsing.

Shared by the radius table and solver config readers. The dialect is
deliberately small: one `key = value` pair per line, `#` starts a comment,
blank lines are skipped.
"""

from __future__ import annotations

from .errors import FormatError


def strip_comment(line: str) -> str:
    idx = line.find("#")
    if idx >= 0:
        line = line[:idx]
    return line.strip()


def parse_key_values(text: str) -> dict[str, str]:
    """Parse `key = value` lines into an ordered dict of strings.

    Duplicate keys are an error; values keep internal whitespace.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = strip_comment(raw)
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_bool(value: str, *, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise FormatError(f"{key}: expected boolean, got {value!r}")
