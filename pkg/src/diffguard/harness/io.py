"""Result files: CSV with a manifest reference line, and the JSON run manifest."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
RESULTS_NAME = "results.csv"
CHECKPOINT_NAME = "checkpoint.json"


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def render_csv(header, rows, config_sha1: str) -> str:
    """CSV text whose first line points back at the manifest of the run.

    The reference line starts with ``#`` so ``pandas.read_csv(comment="#")``
    and similar readers skip it.
    """
    buf = io.StringIO()
    buf.write(f"# manifest={MANIFEST_NAME} config_sha1={config_sha1}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if isinstance(row, dict):
            row = [row.get(h) for h in header]
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, config_sha1: str) -> Path:
    path = Path(path)
    path.write_text(render_csv(header, rows, config_sha1))
    return path


def read_csv(path):
    """Inverse of :func:`write_csv`: ``(header, rows)`` with cells as strings."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, list(reader)


def array_rows(x, labels, ids=None):
    """One row per example: id, features, label last."""
    x = np.atleast_2d(x)
    ids = range(len(x)) if ids is None else ids
    return [[i, *row, int(lab)] for i, row, lab in zip(ids, x, labels)]


def array_header(d):
    return ["example_id", *[f"x{j}" for j in range(d)], "label"]


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return path
