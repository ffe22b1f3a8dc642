"""CSV/JSON artifact writers and their readers."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

from .search import METRIC_COLUMNS

ATTRIBUTION_COLUMNS = ("sample_id", "label", "ard", "max_attr_fp", "max_attr_q", "p_used")


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics(path, trace: list[dict]) -> None:
    write_csv(path, METRIC_COLUMNS, trace)


def read_metrics(path) -> list[dict]:
    out = []
    for row in read_csv(path):
        out.append({c: (int(row[c]) if c in ("step", "epoch") else float(row[c])) for c in METRIC_COLUMNS})
    return out


def provenance(command: str, cfg, version: str) -> dict:
    return {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg["run.seed"],
        "version": version,
        "config": {k: cfg.raw[k] for k in sorted(cfg.raw)},
    }


def write_provenance(artifact: Path, record: dict) -> Path:
    side = artifact.with_name(artifact.name + ".provenance.json")
    side.write_text(json.dumps(dict(record, artifact=artifact.name), sort_keys=True, indent=2) + "\n")
    return side


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
