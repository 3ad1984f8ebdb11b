"""Deterministic CSV and JSON report writers.

Cell formatting is fixed (12 significant digits, non-finite numbers as
empty CSV cells and JSON nulls, sorted JSON keys, trailing newline), so
reruns with the same inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, is_dataclass


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if not math.isfinite(value):
            return ""
        return format(value, ".12g")
    return str(value)


def jsonable(value):
    """Rewrite a report object into plain JSON-safe python values."""
    if is_dataclass(value) and not isinstance(value, type):
        return jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, bool):
        return value
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(format_cell(row.get(col)) for col in columns))
    with open(path, "w", newline="") as handle:
        handle.write("\n".join(lines) + "\n")


def write_json(path: str, payload) -> None:
    with open(path, "w") as handle:
        json.dump(jsonable(payload), handle, indent=2, sort_keys=True, allow_nan=False)
        handle.write("\n")


def write_reports(
    outdir: str,
    metrics_columns: list[str],
    metrics_rows: list[dict],
    replicate_columns: list[str],
    replicate_rows: list[dict],
    ledger: dict,
    config_echo: dict,
) -> dict[str, str]:
    """Emit the standard report set; returns the written paths by name."""
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "metrics.csv": os.path.join(outdir, "metrics.csv"),
        "metrics.json": os.path.join(outdir, "metrics.json"),
        "replicates.csv": os.path.join(outdir, "replicates.csv"),
        "ledger.json": os.path.join(outdir, "ledger.json"),
    }
    write_csv(paths["metrics.csv"], metrics_columns, metrics_rows)
    write_json(paths["metrics.json"], {"config": config_echo, "rows": metrics_rows})
    write_csv(paths["replicates.csv"], replicate_columns, replicate_rows)
    write_json(paths["ledger.json"], ledger)
    return paths
