"""Deterministic CSV/JSON writers.

Every CSV starts with three comment lines (schema, config echo, sha256 of
the body) followed by a header row.  Floats are written with ``repr`` so a
rerun with the same inputs produces identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = ["write_csv", "read_csv", "write_json", "to_jsonable"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_jsonable(obj):
    """Convert numpy scalars/arrays and tuples into plain JSON values.

    Non-finite floats become ``None`` so the output is strict JSON.
    """
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def write_csv(path, header: Sequence[str], rows, schema: str, config: Mapping | None = None) -> str:
    """Write rows under a self-describing preamble; returns the body hash."""
    lines = [",".join(header)]
    for row in rows:
        if isinstance(row, Mapping):
            row = [row.get(h) for h in header]
        lines.append(",".join(_fmt(v) for v in row))
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    echo = json.dumps(to_jsonable(config or {}), sort_keys=True, separators=(",", ":"))
    pre = f"# schema: {schema}; columns: {','.join(header)}\n# config: {echo}\n# sha256: {digest}\n"
    Path(path).write_text(pre + body, encoding="utf-8")
    return digest


def read_csv(path) -> tuple:
    """``(header, rows as float arrays where possible, preamble lines)``."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    pre = [ln for ln in text if ln.startswith("#")]
    body = [ln for ln in text if not ln.startswith("#")]
    header = body[0].split(",")
    rows = [ln.split(",") for ln in body[1:]]
    return header, rows, pre


def write_json(path, obj) -> None:
    text = json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")
