"""Structured-text configuration files.

Format (documented in README, ``format_version = 1``):

* ``#`` starts a comment, blank lines are ignored.
* ``[section]`` opens a section; keys before any section land in ``""``.
* ``key = value`` where value is a number, a bare string, or a
  whitespace-separated list of numbers.
* ``key = [`` opens a rectangular numeric table, one row per line,
  terminated by a line containing only ``]``.

Units are carried in field names (``mass_kg``, ``fuel_map_kg_s``), never in
values. ``load_config``/``dump_config`` round-trip losslessly for floats.
"""

from __future__ import annotations

import os
from typing import Any

from .errors import ConfigError

FORMAT_VERSION = 1

ConfigDict = dict[str, dict[str, Any]]


def _parse_value(token: str, where: str):
    parts = token.split()
    if not parts:
        raise ConfigError(f"{where}: empty value")
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        if len(parts) == 1:
            return parts[0]
        return token.strip()
    return nums[0] if len(nums) == 1 else nums


def load_config(path: str | os.PathLike) -> ConfigDict:
    """Parse a config file into ``{section: {key: value}}``."""
    sections: ConfigDict = {"": {}}
    current = sections[""]
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()

    i = 0
    n = len(lines)
    while i < n:
        raw = lines[i]
        i += 1
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{i}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{i}: missing key")
        if value == "[":
            rows: list[list[float]] = []
            while i < n:
                row_line = lines[i].split("#", 1)[0].strip()
                i += 1
                if row_line == "]":
                    break
                if not row_line:
                    continue
                try:
                    rows.append([float(tok) for tok in row_line.split()])
                except ValueError as exc:
                    raise ConfigError(f"{path}:{i}: bad table row {row_line!r}") from exc
            else:
                raise ConfigError(f"{path}: unterminated table for key {key!r}")
            if rows and any(len(r) != len(rows[0]) for r in rows):
                raise ConfigError(f"{path}: table {key!r} is not rectangular")
            current[key] = rows
        else:
            current[key] = _parse_value(value, f"{path}:{i}")
    return sections


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(float(value)) if isinstance(value, float) else str(value)
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)):
        return " ".join(repr(float(v)) for v in value)
    raise ConfigError(f"cannot serialize config value of type {type(value).__name__}")


def dump_config(sections: ConfigDict, path: str | os.PathLike) -> None:
    """Write ``{section: {key: value}}`` in the structured-text format."""
    with open(path, "w", encoding="utf-8") as fh:
        for name, entries in sections.items():
            if name:
                fh.write(f"\n[{name}]\n")
            for key, value in entries.items():
                if (isinstance(value, list) and value
                        and isinstance(value[0], (list, tuple))):
                    fh.write(f"{key} = [\n")
                    for row in value:
                        fh.write("  " + " ".join(repr(float(v)) for v in row) + "\n")
                    fh.write("]\n")
                else:
                    fh.write(f"{key} = {_format_value(value)}\n")


def require(sections: ConfigDict, section: str, key: str):
    try:
        return sections[section][key]
    except KeyError as exc:
        raise ConfigError(f"missing config entry [{section}] {key}") from exc


def check_format_version(sections: ConfigDict, path: str = "<config>") -> None:
    version = sections.get("", {}).get("format_version")
    if version is None:
        raise ConfigError(f"{path}: missing top-level 'format_version'")
    if int(version) != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format_version {version} "
                          f"(expected {FORMAT_VERSION})")
