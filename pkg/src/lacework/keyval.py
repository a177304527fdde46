"""Plain-text key=value config files.

One `key = value` pair per line; `#` starts a comment. Values are parsed as
bool, int, float, or string (in that order); comma-separated values become
lists. Used for both environment and experiment configs.
"""

from __future__ import annotations

from pathlib import Path


def _parse_scalar(text: str):
    t = text.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def parse_value(text: str):
    t = text.strip()
    if "," in t:
        return [_parse_scalar(p) for p in t.split(",") if p.strip()]
    return _parse_scalar(t)


def read_keyval(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = parse_value(value)
    return out


def write_keyval(path, values: dict) -> None:
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
