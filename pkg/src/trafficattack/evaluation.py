"""Forecast-error and attack-effect metrics, report files, comparison tables.

All metrics are computed in raw vehicles/hour.

Report JSON schema (``<prefix>.json``)::

    {"format": "trafficattack-report", "version": 1,
     "model_id": str, "method": "fgsm" | "bim",
     "pre_rmse": float, "post_rmse": float, "degradation_pct": float,
     "l2_signal_change": float, "l2_prediction_change": float,
     "per_sample_pre_rmse": [float, ...], "per_sample_post_rmse": [float, ...],
     "config": {...}, "manifest_hash": str | null}

``<prefix>.csv`` has header ``sample,pre_rmse,post_rmse`` and one row per
sample. ``<prefix>.pre.hist`` and ``<prefix>.post.hist`` are two-column
(bin centre, count) text files over shared equal-width bins.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FormatError

REPORT_FORMAT = "trafficattack-report"
TABLE_COLUMNS = ("model_id", "method", "pre_rmse", "post_rmse", "degradation_pct",
                 "l2_signal_change", "l2_prediction_change")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(predictions, ground_truth) -> float:
    p, y = _pair(predictions, ground_truth)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def degradation(pre_rmse: float, post_rmse: float) -> float:
    """Relative RMSE increase, in percent."""
    if not pre_rmse > 0:
        raise ContractError(f"pre-attack RMSE must be positive, got {pre_rmse}")
    return 100.0 * (post_rmse - pre_rmse) / pre_rmse


def l2_change(a, b) -> float:
    """Mean over samples of the L2 norm of each sample's difference."""
    a, b = _pair(a, b)
    if a.ndim < 1 or a.shape[0] == 0:
        raise DimensionError("need at least one sample")
    diff = (a - b).reshape(a.shape[0], -1)
    return float(np.mean(np.sqrt((diff ** 2).sum(axis=1))))


def per_sample_rmse(predictions, ground_truth) -> np.ndarray:
    p, y = _pair(predictions, ground_truth)
    return np.sqrt(((y - p) ** 2).reshape(p.shape[0], -1).mean(axis=1))


def histogram(values, bins: int = 40, value_range: tuple[float, float] | None = None):
    """Equal-width histogram; returns (counts, edges)."""
    values = np.asarray(values, dtype=np.float64)
    if value_range is None:
        value_range = (float(values.min()), float(values.max()))
    lo, hi = value_range
    if hi <= lo:
        hi = lo + 1.0  # degenerate data: everything in the first bin
    return np.histogram(values, bins=bins, range=(lo, hi))


def rmse_distribution(predictions, ground_truth, bins: int = 40):
    """Per-sample RMSE and its histogram: (per_sample, counts, edges)."""
    per = per_sample_rmse(predictions, ground_truth)
    counts, edges = histogram(per, bins)
    return per, counts, edges


@dataclass
class AttackReport:
    model_id: str
    method: str
    pre_rmse: float
    post_rmse: float
    degradation_pct: float
    l2_signal_change: float
    l2_prediction_change: float
    per_sample_pre_rmse: np.ndarray
    per_sample_post_rmse: np.ndarray
    config: dict = field(default_factory=dict)
    manifest_hash: str | None = None

    def __post_init__(self):
        self.per_sample_pre_rmse = np.asarray(self.per_sample_pre_rmse, dtype=np.float64)
        self.per_sample_post_rmse = np.asarray(self.per_sample_post_rmse, dtype=np.float64)
        if self.per_sample_pre_rmse.shape != self.per_sample_post_rmse.shape:
            raise DimensionError("per-sample arrays differ in length")

    def __eq__(self, other):
        if not isinstance(other, AttackReport):
            return NotImplemented
        return (self._scalars() == other._scalars()
                and np.array_equal(self.per_sample_pre_rmse, other.per_sample_pre_rmse)
                and np.array_equal(self.per_sample_post_rmse, other.per_sample_post_rmse))

    def _scalars(self):
        return (self.model_id, self.method, self.pre_rmse, self.post_rmse, self.degradation_pct,
                self.l2_signal_change, self.l2_prediction_change, self.config, self.manifest_hash)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": 1,
            "model_id": self.model_id,
            "method": self.method,
            "pre_rmse": self.pre_rmse,
            "post_rmse": self.post_rmse,
            "degradation_pct": self.degradation_pct,
            "l2_signal_change": self.l2_signal_change,
            "l2_prediction_change": self.l2_prediction_change,
            "per_sample_pre_rmse": self.per_sample_pre_rmse.tolist(),
            "per_sample_post_rmse": self.per_sample_post_rmse.tolist(),
            "config": self.config,
            "manifest_hash": self.manifest_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        if d.get("format") != REPORT_FORMAT:
            raise FormatError(f"not a report: format={d.get('format')!r}")
        return cls(d["model_id"], d["method"], d["pre_rmse"], d["post_rmse"], d["degradation_pct"],
                   d["l2_signal_change"], d["l2_prediction_change"], d["per_sample_pre_rmse"],
                   d["per_sample_post_rmse"], d.get("config", {}), d.get("manifest_hash"))


def build_report(model_id: str, method: str, ground_truth, pre_predictions, post_predictions,
                 original_inputs, adversarial_inputs, config: dict | None = None) -> AttackReport:
    pre = rmse(pre_predictions, ground_truth)
    post = rmse(post_predictions, ground_truth)
    return AttackReport(
        model_id=model_id,
        method=method,
        pre_rmse=pre,
        post_rmse=post,
        degradation_pct=degradation(pre, post),
        l2_signal_change=l2_change(original_inputs, adversarial_inputs),
        l2_prediction_change=l2_change(pre_predictions, post_predictions),
        per_sample_pre_rmse=per_sample_rmse(pre_predictions, ground_truth),
        per_sample_post_rmse=per_sample_rmse(post_predictions, ground_truth),
        config=dict(config or {}),
    )


def emit_report(report: AttackReport, prefix: str | Path, bins: int = 40) -> list[Path]:
    """Write ``prefix.json``, ``prefix.csv``, ``prefix.pre.hist`` and ``prefix.post.hist``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    try:
        p = prefix.with_name(prefix.name + ".json")
        p.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        paths.append(p)

        p = prefix.with_name(prefix.name + ".csv")
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "pre_rmse", "post_rmse"])
            for i, (a, b) in enumerate(zip(report.per_sample_pre_rmse, report.per_sample_post_rmse)):
                w.writerow([i, repr(float(a)), repr(float(b))])
        paths.append(p)

        pooled = np.concatenate([report.per_sample_pre_rmse, report.per_sample_post_rmse])
        rng = (float(pooled.min()), float(pooled.max())) if pooled.size else (0.0, 1.0)
        for tag, values in (("pre", report.per_sample_pre_rmse), ("post", report.per_sample_post_rmse)):
            counts, edges = histogram(values, bins, rng)
            centers = 0.5 * (edges[:-1] + edges[1:])
            p = prefix.with_name(f"{prefix.name}.{tag}.hist")
            lines = [f"# rmse_bin_center count ({tag}-attack, {report.model_id}/{report.method})"]
            lines += [f"{c!r} {int(n)}" for c, n in zip(centers.tolist(), counts)]
            p.write_text("\n".join(lines) + "\n")
            paths.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report under {prefix}: {exc}") from exc
    return paths


def load_report(path: str | Path) -> AttackReport:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return AttackReport.from_dict(data)


def comparison_rows(reports: list[AttackReport], l2_scale: float = 1.0) -> list[tuple]:
    """Table rows in ``TABLE_COLUMNS`` order; L2 columns divided by ``l2_scale``."""
    rows = []
    for r in sorted(reports, key=lambda r: (r.model_id, r.method)):
        rows.append((r.model_id, r.method, r.pre_rmse, r.post_rmse, r.degradation_pct,
                     r.l2_signal_change / l2_scale, r.l2_prediction_change / l2_scale))
    return rows


def format_table(rows: list[tuple]) -> str:
    header = TABLE_COLUMNS
    cells = [header] + [(m, meth, f"{a:.2f}", f"{b:.2f}", f"{c:.2f}", f"{d:.4g}", f"{e:.4g}")
                        for m, meth, a, b, c, d, e in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
