"""Result containers shared by sweeps and gate analysis, plus their file formats."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Marks a value that is undefined (e.g. a relative difference against a zero baseline).
UNDEFINED = math.nan


def is_undefined(v) -> bool:
    return isinstance(v, float) and math.isnan(v)


def _fmt(v: float) -> str:
    return "undefined" if math.isnan(v) else f"{v:.12g}"


@dataclass
class AblationMatrix:
    rows: list[str]
    cols: list[str]
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{len(self.rows)} rows x {len(self.cols)} cols")
        if np.any(np.isinf(self.values)):
            raise ValueError("matrix values must be finite or UNDEFINED")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def row(self, label: str) -> np.ndarray:
        return self.values[self.rows.index(label)]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + list(self.cols))
        for r, vals in zip(self.rows, self.values):
            w.writerow([r] + [_fmt(float(v)) for v in vals])
        return buf.getvalue()

    def write(self, csv_path, sidecar: dict | None = None) -> tuple[Path, Path]:
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv_text())
        js = csv_path.with_suffix(".json")
        payload = {"rows": self.rows, "cols": self.cols, "meta": self.meta}
        if sidecar:
            payload.update(sidecar)
        js.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        return csv_path, js

    @classmethod
    def read_csv(cls, path) -> "AblationMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        cols = rows[0][1:]
        labels = [r[0] for r in rows[1:]]
        vals = [[UNDEFINED if x == "undefined" else float(x) for x in r[1:]] for r in rows[1:]]
        return cls(labels, cols, np.array(vals, dtype=np.float64).reshape(len(labels), len(cols)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


@dataclass
class EvalReport:
    per_type: dict[str, float]
    counts: dict[str, int]
    overall: float
    a_mpt: float
    h_mpt: float
    zero_type_accuracy: bool = False

    def to_dict(self) -> dict:
        return {"per_type": self.per_type, "counts": self.counts, "overall": self.overall,
                "a_mpt": self.a_mpt, "h_mpt": self.h_mpt,
                "zero_type_accuracy": self.zero_type_accuracy}


def mean_per_type(per_type: dict[str, float]) -> tuple[float, float, bool]:
    """Arithmetic and harmonic means over types; flag is set when some type scores 0."""
    accs = list(per_type.values())
    a = float(np.mean(accs))
    if any(x == 0.0 for x in accs):
        return a, 0.0, True
    return a, float(len(accs) / sum(1.0 / x for x in accs)), False


SHADES = " ░▒▓█"


def render_heatmap(m: AblationMatrix, title: str = "") -> str:
    """Plain-text heatmap: shade encodes |value| relative to the matrix max;
    undefined cells print ``?``."""
    finite = m.values[~np.isnan(m.values)]
    scale = float(np.max(np.abs(finite))) if finite.size else 0.0
    width = max(len(r) for r in m.rows) if m.rows else 0
    lines = [title] if title else []
    lines.append(" " * width + " " + " ".join(f"{c:>10}" for c in m.cols))
    for r, vals in zip(m.rows, m.values):
        cells = []
        for v in vals:
            if math.isnan(v):
                cells.append(f"{'?':>10}")
                continue
            level = 0 if scale == 0 else min(4, int(round(4 * abs(v) / scale)))
            cells.append(f"{SHADES[level] * 2} {v:+7.3f}")
        lines.append(f"{r:>{width}} " + " ".join(cells))
    if scale:
        lines.append(f"(shade scale: full block = {scale:.4g})")
    return "\n".join(lines) + "\n"
