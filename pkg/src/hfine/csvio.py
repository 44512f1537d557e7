"""CSV tables with '#' headers and the JSON-lines run manifest.

CSV content depends only on the command, config and seed: wall time lives in
the manifest alone, so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class Column:
    name: str
    unit: str
    description: str


@dataclass(frozen=True, eq=False)
class Table:
    """A named table; each row holds one value (number or short text) per :class:`Column`."""

    name: str
    columns: tuple
    rows: tuple
    notes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.rows)
        for r in rows:
            if len(r) != len(self.columns):
                raise ValueError(f"{self.name}: {len(r)} values per row, {len(self.columns)} columns")
        object.__setattr__(self, "rows", rows)

    def column(self, name):
        k = [c.name for c in self.columns].index(name)
        return np.array([r[k] for r in self.rows])


def run_id(command: str, config_hash: str, seed: int, version: str) -> str:
    """Deterministic identifier tying CSVs to their manifest line."""
    return hashlib.sha256(f"{command}|{config_hash}|{seed}|{version}".encode()).hexdigest()[:12]


def _format(value):
    if isinstance(value, str):
        if "," in value or "\n" in value:
            raise ValueError(f"text cell {value!r} contains a separator")
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    value = float(value)
    return "nan" if np.isnan(value) else f"{value:.12g}"


def write_table(path, table: Table, command, config_hash, seed, version, rid):
    lines = [
        f"# hfine {command} {version}",
        f"# run_id: {rid} (see {MANIFEST_NAME})",
        f"# config_hash: {config_hash}",
        f"# seed: {seed}",
    ]
    lines += [f"# note: {n}" for n in table.notes]
    lines += [f"# column {c.name} [{c.unit}]: {c.description}" for c in table.columns]
    lines.append(",".join(c.name for c in table.columns))
    lines += [",".join(_format(v) for v in row) for row in table.rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path):
    """Return ``(header_lines, column_names, rows)`` of a CSV written by :func:`write_table`."""
    header, names, rows = [], None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            header.append(line)
        elif names is None:
            names = line.split(",")
        elif line:
            rows.append([_parse(v) for v in line.split(",")])
    return header, names, rows


def _parse(text):
    try:
        return float(text)
    except ValueError:
        return text


def append_manifest(out_dir, entry: dict):
    with open(Path(out_dir) / MANIFEST_NAME, "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
