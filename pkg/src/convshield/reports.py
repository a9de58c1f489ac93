"""JSON/CSV emission shared by the analysis, experiment and CLI layers."""
from __future__ import annotations

import csv
import io
import json

import numpy as np


def csv_text(header, rows) -> str:
    """CSV with floats at 6 significant digits."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.6g}" if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def json_text(doc) -> str:
    """Full-precision JSON (floats use the shortest round-tripping repr)."""
    return json.dumps(doc, indent=2, default=_default) + "\n"
