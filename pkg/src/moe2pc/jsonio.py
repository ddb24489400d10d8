"""JSON loading with line-aware diagnostics."""

from __future__ import annotations

import json
import re
from pathlib import Path

from .errors import ConfigError


def read_json(path) -> tuple[dict, str]:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{Path(path).name}: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{Path(path).name}: top level must be an object", line=1)
    return obj, text


def field_line(text: str | None, key: str) -> int | None:
    """Best-effort 1-based line of the first occurrence of ``"key"``."""
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    if m is None:
        return None
    return text.count("\n", 0, m.start()) + 1


def fail(text: str | None, key: str, message: str, path: str | None = None):
    raise ConfigError(message, field=path or key, line=field_line(text, key))
