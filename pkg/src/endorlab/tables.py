"""TSV emission and CSV ingestion for the batch front end.

All output tables are TSV with a single '#'-prefixed header line naming the
columns (units embedded in the column names). Floats are written with
repr-level precision so identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .relaxation import DecayCurve
from .tensorfit import Roadmap, RoadmapRecord

__all__ = [
    "format_value",
    "write_tsv",
    "read_roadmap_csv",
    "read_rates_csv",
    "read_decay_csv",
    "RunReport",
]


def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return np.format_float_scientific(v, precision=12) if (
            v != 0 and (abs(v) < 1e-4 or abs(v) >= 1e16)) else f"{float(v):.12g}"
    return str(v)


def write_tsv(path, columns: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["#" + "\t".join(columns)]
    for row in rows:
        lines.append("\t".join(format_value(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def _read_rows(path, expected_columns):
    """CSV rows as dicts; raises with the offending line number on bad input."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        missing = set(expected_columns) - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for k, row in enumerate(reader, start=2):
            parsed = {}
            for col in expected_columns:
                raw = row[col]
                if col in ("plane", "kind"):
                    parsed[col] = raw.strip()
                    continue
                try:
                    parsed[col] = float(raw)
                except (TypeError, ValueError):
                    raise ValueError(f"{path}: line {k}: bad value {raw!r} in column {col!r}")
            rows.append(parsed)
    return rows


def read_roadmap_csv(path, f_mw_GHz: float, window_mT, nuclear_spin: float = 3.5) -> Roadmap:
    """Roadmap from CSV columns plane, angle_deg, peak_index, field_mT."""
    rows = _read_rows(path, ("plane", "angle_deg", "peak_index", "field_mT"))
    grouped: dict[tuple, list] = {}
    for r in rows:
        grouped.setdefault((r["plane"], r["angle_deg"]), []).append(
            (r["peak_index"], r["field_mT"]))
    records = []
    for (plane, angle), pts in sorted(grouped.items()):
        pts.sort()
        fields = np.array([f for (_, f) in pts])
        records.append(RoadmapRecord(plane=plane, angle_deg=angle, fields_mT=fields))
    return Roadmap(records=records, f_mw_GHz=f_mw_GHz, window_mT=tuple(window_mT),
                   nuclear_spin=nuclear_spin)


def read_rates_csv(path) -> dict:
    """Relaxation-time data from CSV columns temperature_K, value_s, kind.

    Returns {kind: (temperatures, rates_per_s)} with rates = 1/value.
    """
    rows = _read_rows(path, ("temperature_K", "value_s", "kind"))
    out: dict[str, list] = {}
    for k, r in enumerate(rows, start=2):
        if r["kind"] not in ("t1e", "t1n"):
            raise ValueError(f"{path}: line {k}: kind must be 't1e' or 't1n', got {r['kind']!r}")
        if r["value_s"] <= 0:
            raise ValueError(f"{path}: line {k}: non-positive relaxation time")
        out.setdefault(r["kind"], []).append((r["temperature_K"], 1.0 / r["value_s"]))
    return {kind: (np.array([t for t, _ in v]), np.array([r for _, r in v]))
            for kind, v in out.items()}


def read_decay_csv(path) -> DecayCurve:
    """Echo decay data from CSV columns two_tau_s, amplitude."""
    rows = _read_rows(path, ("two_tau_s", "amplitude"))
    rows.sort(key=lambda r: r["two_tau_s"])
    return DecayCurve(two_tau_s=np.array([r["two_tau_s"] for r in rows]),
                      amplitude=np.array([r["amplitude"] for r in rows]))


@dataclass
class RunReport:
    """Provenance record accompanying every CLI command's outputs."""

    command: str
    inputs_digest: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    started: float = field(default_factory=time.time)
    wall_time_s: float = 0.0
    success: bool = True

    def digest_file(self, path):
        p = Path(path)
        self.inputs_digest[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()

    def add_output(self, path):
        self.outputs.append(str(path))

    def finish(self, out_dir) -> Path:
        self.wall_time_s = time.time() - self.started
        for out in self.outputs:
            if not Path(out).exists():
                self.success = False
                self.warnings.append(f"declared output missing: {out}")
        path = Path(out_dir) / "run_report.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "command": self.command,
            "inputs_sha256": self.inputs_digest,
            "outputs": self.outputs,
            "warnings": self.warnings,
            "wall_time_s": round(self.wall_time_s, 3),
            "success": self.success,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path
