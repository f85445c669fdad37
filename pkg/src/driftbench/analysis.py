"""Rank correlation across metrics and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .metrics import HIGHER, LOWER, METRIC_DIRECTIONS

MIN_PRESENT = 3


@dataclass
class MetricMatrix:
    """Models x metrics table; NaN marks an absent value, +inf is allowed."""

    models: list[str]
    metrics: list[str]
    directions: dict[str, str]
    values: np.ndarray
    reasons: dict[tuple[str, str], str] = field(default_factory=dict)
    reported: set[str] = field(default_factory=set)
    metadata: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.models), len(self.metrics))
        missing = [m for m in self.metrics if self.directions.get(m) not in (HIGHER, LOWER)]
        if missing:
            raise ValueError(f"no direction tag for metrics {missing}")
        if len(set(self.models)) != len(self.models):
            raise ValueError("duplicate model names")

    def column(self, metric: str) -> np.ndarray:
        return self.values[:, self.metrics.index(metric)]

    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def subset(self, models: Sequence[str]) -> "MetricMatrix":
        idx = [self.models.index(m) for m in models]
        return MetricMatrix(list(models), list(self.metrics), dict(self.directions),
                            self.values[idx], {k: v for k, v in self.reasons.items() if k[0] in models},
                            set(self.reported), {m: self.metadata.get(m, {}) for m in models})

    @classmethod
    def from_records(cls, records: Iterable, metrics: Sequence[str] | None = None) -> "MetricMatrix":
        """Build from ModelRecord-like objects (``name``, ``reported_generation``,
        ``computed`` and optionally ``absent``/``metadata``)."""
        records = list(records)
        if metrics is None:
            seen = set()
            for r in records:
                seen |= set(r.reported_generation) | set(r.computed)
            metrics = [m for m in METRIC_DIRECTIONS if m in seen]
        vals = np.full((len(records), len(metrics)), np.nan)
        reasons, reported = {}, set()
        for i, r in enumerate(records):
            absent = getattr(r, "absent", {}) or {}
            for j, m in enumerate(metrics):
                if m in r.reported_generation:
                    vals[i, j] = r.reported_generation[m]
                    reported.add(m)
                elif m in r.computed:
                    vals[i, j] = r.computed[m]
                else:
                    reasons[(r.name, m)] = absent.get(m, "not available")
        return cls([r.name for r in records], list(metrics),
                   {m: METRIC_DIRECTIONS[m] for m in metrics}, vals, reasons, reported,
                   {r.name: dict(getattr(r, "metadata", {}) or {}) for r in records})


@dataclass
class CorrelationMatrix:
    metrics: list[str]
    rho: np.ndarray
    abs_mode: bool
    counts: np.ndarray
    reasons: dict[tuple[str, str], str] = field(default_factory=dict)
    direction_normalized: bool = True

    def get(self, a: str, b: str) -> float | None:
        v = self.rho[self.metrics.index(a), self.metrics.index(b)]
        return None if math.isnan(v) else float(v)


@dataclass(frozen=True)
class SpearmanResult:
    rho: float | None
    n: int
    reason: str | None = None


def spearman_detail(x: Sequence[float], y: Sequence[float]) -> SpearmanResult:
    """Spearman's rho with average ranks for ties and pairwise deletion of NaNs.

    ``+inf`` entries stay in and share the top rank.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need equal-length 1-D sequences, got {x.shape} and {y.shape}")
    keep = ~(np.isnan(x) | np.isnan(y))
    x, y = x[keep], y[keep]
    n = int(x.size)
    if n < MIN_PRESENT:
        return SpearmanResult(None, n, f"only {n} paired values (need {MIN_PRESENT})")
    # doubled average ranks are integers, so the sums below are exact
    rx = [int(v) for v in 2 * rankdata(x, method="average")]
    ry = [int(v) for v in 2 * rankdata(y, method="average")]
    tx, ty = sum(rx), sum(ry)
    cx = [n * v - tx for v in rx]
    cy = [n * v - ty for v in ry]
    sxx, syy = sum(v * v for v in cx), sum(v * v for v in cy)
    if sxx == 0 or syy == 0:
        return SpearmanResult(None, n, "constant column")
    num = sum(a * b for a, b in zip(cx, cy))
    root = math.isqrt(sxx * syy)
    den = root if root * root == sxx * syy else math.sqrt(sxx) * math.sqrt(syy)
    return SpearmanResult(max(-1.0, min(1.0, num / den)), n)


def spearman(x: Sequence[float], y: Sequence[float]) -> float | None:
    return spearman_detail(x, y).rho


def oriented(column: np.ndarray, direction: str) -> np.ndarray:
    """Flip lower-better columns so larger always means better."""
    return -column if direction == LOWER else column


def correlation_matrix(m: MetricMatrix, abs_mode: bool = False,
                       normalize_directions: bool = True) -> CorrelationMatrix:
    if len(m.models) < MIN_PRESENT:
        raise ValueError(f"correlation needs >= {MIN_PRESENT} models, got {len(m.models)}")
    k = len(m.metrics)
    rho = np.full((k, k), np.nan)
    counts = np.zeros((k, k), dtype=int)
    reasons = {}
    cols = [oriented(m.column(name), m.directions[name]) if normalize_directions else m.column(name)
            for name in m.metrics]
    for i in range(k):
        for j in range(i, k):
            res = spearman_detail(cols[i], cols[j])
            counts[i, j] = counts[j, i] = res.n
            if res.rho is None:
                reasons[(m.metrics[i], m.metrics[j])] = reasons[(m.metrics[j], m.metrics[i])] = res.reason
                continue
            value = 1.0 if i == j else res.rho
            rho[i, j] = rho[j, i] = abs(value) if abs_mode else value
    return CorrelationMatrix(list(m.metrics), rho, abs_mode, counts, reasons, normalize_directions)


# -- fixtures ----------------------------------------------------------------

TABLE4_COLUMNS = ["gFID", "rFID", "PSNR", "SSIM", "LPIPS", "Canny", "Depth", "Seg", "Spatial",
                  "Identity", "Face@R", "CLIP", "DINOv2"]


def load_table4_fixture() -> MetricMatrix:
    """The 33-variant result table shipped with the package (gFID mostly absent)."""
    text = resources.files("driftbench").joinpath("data/table4_fixture.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    vals = [[float(r[c]) if r[c] else math.nan for c in TABLE4_COLUMNS] for r in rows]
    reasons = {(r["weight_name"], "gFID"): "not reported" for r in rows if not r["gFID"]}
    meta = {r["weight_name"]: {"group": r["group"]} for r in rows}
    return MetricMatrix([r["weight_name"] for r in rows], list(TABLE4_COLUMNS),
                        {c: METRIC_DIRECTIONS[c] for c in TABLE4_COLUMNS}, vals, reasons,
                        {"gFID"}, meta)


# -- report emission -----------------------------------------------------------

def format_value(v: float) -> str:
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _json_value(v: float):
    return format_value(v) if math.isinf(v) else float(v)


def _safe_name(metric: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "@-_" else "_" for ch in metric)


def write_metrics_csv(m: MetricMatrix, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + m.metrics)
        for i, name in enumerate(m.models):
            w.writerow([name] + [format_value(v) for v in m.values[i]])
    return path


def write_metrics_long_csv(m: MetricMatrix, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "metric", "value", "source", "note"])
        for i, name in enumerate(m.models):
            for j, metric in enumerate(m.metrics):
                v = m.values[i, j]
                source = "reported" if metric in m.reported else "computed"
                note = m.reasons.get((name, metric), "") if math.isnan(v) else ""
                w.writerow([name, metric, format_value(v) if not math.isnan(v) else "n/a", source, note])
    return path


def metrics_document(m: MetricMatrix) -> dict:
    models = []
    for i, name in enumerate(m.models):
        reported, computed, absent = {}, {}, {}
        for j, metric in enumerate(m.metrics):
            v = m.values[i, j]
            if math.isnan(v):
                absent[metric] = m.reasons.get((name, metric), "not available")
            elif metric in m.reported:
                reported[metric] = _json_value(v)
            else:
                computed[metric] = _json_value(v)
        meta = dict(m.metadata.get(name, {}))
        if absent:
            meta["absent"] = absent
        models.append({"name": name, "reported": reported, "computed": computed, "metadata": meta})
    return {"models": models}


def write_correlation_csv(c: CorrelationMatrix, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + c.metrics)
        for i, name in enumerate(c.metrics):
            w.writerow([name] + [format_value(v) for v in c.rho[i]])
    return path


def write_scatter(m: MetricMatrix, a: str, b: str, out_dir: Path) -> Path:
    path = out_dir / f"{_safe_name(a)}_vs_{_safe_name(b)}.csv"
    ca, cb = m.column(a), m.column(b)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", a, b])
        for name, va, vb in zip(m.models, ca, cb):
            if not (math.isnan(va) or math.isnan(vb)):
                w.writerow([name, format_value(va), format_value(vb)])
    return path


def leaderboard_markdown(m: MetricMatrix) -> str:
    arrows = {HIGHER: "↑", LOWER: "↓"}
    header = "| Model | " + " | ".join(f"{x} {arrows[m.directions[x]]}" for x in m.metrics) + " |"
    lines = [header, "|" + "---|" * (len(m.metrics) + 1)]
    for i, name in enumerate(m.models):
        cells = []
        for j, metric in enumerate(m.metrics):
            v = m.values[i, j]
            if math.isnan(v):
                cells.append("n/a")
            elif math.isinf(v):
                cells.append("inf")
            else:
                cells.append(f"{v:.4f}")
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    notes = sorted({f"{metric}: n/a ({reason})" for (_, metric), reason in m.reasons.items()})
    if notes:
        lines += ["", *[f"- {n}" for n in notes]]
    return "\n".join(lines) + "\n"


def write_heatmap(c: CorrelationMatrix, path: Path, vmin: float = 0.8) -> Path | None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(c.metrics), 1 + 0.5 * len(c.metrics)))
    data = np.abs(c.rho) if c.abs_mode else c.rho
    im = ax.imshow(data, vmin=vmin if c.abs_mode else -1.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(c.metrics)), c.metrics, rotation=60, ha="right")
    ax.set_yticks(range(len(c.metrics)), c.metrics)
    for i in range(len(c.metrics)):
        for j in range(len(c.metrics)):
            if not math.isnan(data[i, j]):
                ax.text(j, i, f"{data[i, j]:.2f}", ha="center", va="center", fontsize=6)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def emit_reports(m: MetricMatrix, c: CorrelationMatrix | None, out_dir,
                 scatter_pairs: Sequence[tuple[str, str]] | None = None,
                 heatmap: bool = False, extra_metadata: dict | None = None) -> list[Path]:
    """Write metrics/correlation/scatter/leaderboard files; returns written paths.

    Scatter files default to every unordered pair of metrics that have at
    least one value.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_metrics_csv(m, out / "metrics.csv"),
               write_metrics_long_csv(m, out / "metrics_long.csv")]
    doc = metrics_document(m)
    if extra_metadata:
        doc["metadata"] = extra_metadata
    path = out / "metrics.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    written.append(path)
    if c is not None:
        written.append(write_correlation_csv(c, out / "correlation.csv"))
        if heatmap:
            hm = write_heatmap(c, out / "heatmap.png")
            if hm is not None:
                written.append(hm)
    if scatter_pairs is None:
        filled = [col for col in m.metrics if not np.isnan(m.column(col)).all()]
        scatter_pairs = [(a, b) for i, a in enumerate(filled) for b in filled[i + 1:]]
    written += [write_scatter(m, a, b, out) for a, b in scatter_pairs]
    path = out / "leaderboard.md"
    path.write_text(leaderboard_markdown(m))
    written.append(path)
    return written
