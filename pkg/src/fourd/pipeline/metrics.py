"""Image-quality metrics and the metric report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InputError
from ..splat.losses import ssim as _ssim

CSV_COLUMNS = ("view_id", "psnr_db", "ssim", "wall_seconds")
SCHEMA_VERSION = 1


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def video_psnr(a, b) -> float:
    """PSNR of the mean squared error over a whole frame stack."""
    return psnr(a, b)


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) over pixels and channels."""
    return _ssim(a, b)


def video_ssim(a, b) -> float:
    return float(np.mean([ssim(x, y) for x, y in zip(a, b)]))


def format_number(x, digits: int = 6) -> str:
    if x is None:
        return ""
    if math.isinf(x):
        return "inf"
    return f"{x:.{digits}f}"


def _json_number(x):
    if x is None:
        return None
    return "inf" if math.isinf(x) else round(float(x), 9)


@dataclass
class ViewMetrics:
    view_id: str
    psnr_db: float
    ssim: float
    wall_seconds: float | None = None


@dataclass
class MetricReport:
    """Per-view metrics of one or more fitting runs plus their aggregates."""

    runs: dict[str, list[ViewMetrics]] = field(default_factory=dict)
    train_psnr: dict[str, float] = field(default_factory=dict)
    counts: dict[str, list[int]] = field(default_factory=dict)
    runtime_seconds: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    record_timing: bool = False

    def aggregate(self, run: str) -> ViewMetrics:
        rows = self.runs[run]
        ps = [r.psnr_db for r in rows]
        return ViewMetrics(
            "mean",
            math.inf if all(math.isinf(p) for p in ps) else float(np.mean([p for p in ps if not math.isinf(p)])),
            float(np.mean([r.ssim for r in rows])),
            None if not self.record_timing else float(sum(r.wall_seconds or 0.0 for r in rows)),
        )

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        multi = len(self.runs) > 1
        w.writerow(CSV_COLUMNS)
        for run, rows in self.runs.items():
            for r in rows + [self.aggregate(run)]:
                vid = f"{run}/{r.view_id}" if multi else r.view_id
                wall = format_number(r.wall_seconds, 3) if self.record_timing else ""
                w.writerow([vid, format_number(r.psnr_db), format_number(r.ssim), wall])
        return buf.getvalue()

    def to_json(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "meta": self.meta, "runs": {}}
        for run, rows in self.runs.items():
            agg = self.aggregate(run)
            out["runs"][run] = {
                "views": [
                    {"view_id": r.view_id, "psnr_db": _json_number(r.psnr_db), "ssim": _json_number(r.ssim)}
                    | ({"wall_seconds": _json_number(r.wall_seconds)} if self.record_timing else {})
                    for r in rows
                ],
                "mean_psnr_db": _json_number(agg.psnr_db),
                "mean_ssim": _json_number(agg.ssim),
                "train_psnr_db": _json_number(self.train_psnr.get(run)),
                "gaussian_counts": self.counts.get(run, []),
            }
            if self.record_timing:
                out["runs"][run]["runtime_seconds"] = _json_number(self.runtime_seconds.get(run))
        return out

    def write(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = d / "metrics.csv", d / "report.json"
        csv_path.write_text(self.csv_text())
        json_path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return csv_path, json_path


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != CSV_COLUMNS:
        raise InputError(f"{path}: unexpected columns {list(rows[0].keys())}")
    return rows
