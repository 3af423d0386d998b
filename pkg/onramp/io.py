"""Atomic artifact writers and their readers (JSON, JSON Lines, CSV)."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import numpy as np

from onramp.errors import InputError


def to_jsonable(value: Any) -> Any:
    """Convert numpy containers and scalars to plain Python for json.dump."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


def _atomic_write(path: Path, suffix: str, write) -> None:
    """Write via temp file + rename so readers never see a partial file."""
    parent = path.parent
    parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=parent, suffix=suffix)
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as f:
            write(f)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(data: Any, path: Path) -> None:
    def _write(f):
        json.dump(to_jsonable(data), f, indent=2, sort_keys=True)
        f.write("\n")

    _atomic_write(Path(path), ".json.tmp", _write)


def read_json(path: Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing artifact: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"corrupted JSON in {path} ({e})") from e


def write_jsonl(records: Iterable[Any], path: Path) -> None:
    def _write(f):
        for record in records:
            f.write(json.dumps(to_jsonable(record), sort_keys=True))
            f.write("\n")

    _atomic_write(Path(path), ".jsonl.tmp", _write)


def read_jsonl(path: Path) -> list[Any]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing artifact: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise InputError(f"corrupted JSON Lines in {path}:{lineno} ({e})") from e
    return records


def write_csv(rows: Iterable[Mapping[str, Any]], fieldnames: list[str], path: Path) -> None:
    def _write(f):
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: to_jsonable(row[k]) for k in fieldnames})

    _atomic_write(Path(path), ".csv.tmp", _write)


def read_csv(path: Path) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing artifact: {path}")
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except csv.Error as e:
        raise InputError(f"corrupted CSV in {path} ({e})") from e
