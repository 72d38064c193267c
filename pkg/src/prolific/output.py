"""File writers. Every file starts with the seed, config hash and package version."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__


def provenance(seed: int | None, config_hash: str | None) -> dict:
    return {"seed": seed, "config_hash": config_hash, "version": __version__}


def _plain(value):
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if math.isnan(v):
            return None
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def write_csv(path: Path, rows: Iterable[Mapping], columns: Sequence[str], meta: Mapping) -> Path:
    """Delimited file with ``# key=value`` header lines, then a column header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for key, val in meta.items():
            fh.write(f"# {key}={val}\n")
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _plain(v) for k, v in row.items()})
    return path


def read_csv(path: Path) -> tuple[dict, list[dict]]:
    """Inverse of :func:`write_csv` (values stay strings)."""
    meta, body = {}, []
    with Path(path).open() as fh:
        for line in fh:
            if line.startswith("# "):
                key, _, val = line[2:].rstrip("\n").partition("=")
                meta[key] = val
            else:
                body.append(line)
    return meta, list(csv.DictReader(body))


def write_json(path: Path, payload: Mapping, meta: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"provenance": _plain(dict(meta)), **_plain(dict(payload))}
    path.write_text(json.dumps(doc, indent=2, allow_nan=False, default=str) + "\n")
    return path


def write_jsonl(path: Path, records: Iterable[Mapping], meta: Mapping) -> Path:
    """JSON lines; the first line is the provenance record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(json.dumps({"provenance": _plain(dict(meta))}) + "\n")
        for rec in records:
            fh.write(json.dumps(_plain(dict(rec))) + "\n")
    return path
