"""Prune report record and its JSON / CSV serialization."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

LAYER_FIELDS = ("layer_id", "n_before", "keep", "retained_variance_fraction")
TOTAL_FIELDS = ("flops_before", "flops_after", "params_before", "params_after", "speedup")
METRIC_FIELDS = ("acc_before", "acc_after", "delta")


@dataclass
class LayerRecord:
    layer_id: str
    n_before: int
    keep: int
    retained_variance_fraction: float


@dataclass
class PruneReport:
    layers: list[LayerRecord] = field(default_factory=list)
    flops_before: int = 0
    flops_after: int = 0
    params_before: int = 0
    params_after: int = 0
    acc_before: float | None = None
    acc_after: float | None = None
    method: str = ""
    mode: str = ""

    @property
    def speedup(self) -> float:
        return self.flops_before / self.flops_after if self.flops_after else float("inf")

    @property
    def delta(self) -> float | None:
        if self.acc_before is None or self.acc_after is None:
            return None
        return self.acc_after - self.acc_before

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "mode": self.mode,
            "layers": [asdict(rec) for rec in self.layers],
            "totals": {
                "flops_before": self.flops_before,
                "flops_after": self.flops_after,
                "params_before": self.params_before,
                "params_after": self.params_after,
                "speedup": self.speedup,
            },
            "metrics": {
                "acc_before": self.acc_before,
                "acc_after": self.acc_after,
                "delta": self.delta,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {d.get('schema_version')!r}")
        totals = d["totals"]
        metrics = d.get("metrics", {})
        return cls(
            layers=[LayerRecord(**rec) for rec in d["layers"]],
            flops_before=totals["flops_before"],
            flops_after=totals["flops_after"],
            params_before=totals["params_before"],
            params_after=totals["params_after"],
            acc_before=metrics.get("acc_before"),
            acc_after=metrics.get("acc_after"),
            method=d.get("method", ""),
            mode=d.get("mode", ""),
        )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def emit_report(report: PruneReport, path, format: str = "json") -> Path:
    """Write ``report`` as JSON (versioned schema) or CSV (one row per layer plus totals)."""
    path = Path(path)
    if format == "json":
        # Python floats serialize as the shortest repr that round-trips exactly.
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    elif format == "csv":
        header = LAYER_FIELDS + TOTAL_FIELDS + METRIC_FIELDS
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for rec in report.layers:
                row = [_fmt(getattr(rec, f)) for f in LAYER_FIELDS]
                writer.writerow(row + [""] * (len(TOTAL_FIELDS) + len(METRIC_FIELDS)))
            d = report.to_dict()
            totals = ["TOTAL", _fmt(sum(r.n_before for r in report.layers)),
                      _fmt(sum(r.keep for r in report.layers)), ""]
            totals += [_fmt(d["totals"][f]) for f in TOTAL_FIELDS]
            totals += [_fmt(d["metrics"][f]) for f in METRIC_FIELDS]
            writer.writerow(totals)
    else:
        raise ValueError(f"unknown report format {format!r}")
    return path


def read_report(path) -> PruneReport:
    return PruneReport.from_dict(json.loads(Path(path).read_text()))
