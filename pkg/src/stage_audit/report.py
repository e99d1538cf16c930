"""Aggregate evaluation output into summary tables and plot-ready data files.

No plotting dependency: ``plotdata`` emits per-attribute (label, value) CSV
series any external tool can consume.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import EvalSummary
from .orchestrator import BenchmarkManifest


@dataclass
class Report:
    estimator: str
    base_mpjpe_mm: float
    base_pa_mpjpe_mm: float
    category_pdp: dict[str, float]  # insertion order = config order
    attribute_pdp: dict[str, float]
    overall_pdp: float
    intersection_sizes: dict[str, int]
    attribute_categories: dict[str, str]
    stability: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    fid: dict[str, float] = field(default_factory=dict)  # externally computed, pass-through

    def validate(self) -> None:
        cats = list(self.category_pdp.values())
        if cats:
            mean = sum(cats) / len(cats)
            if abs(mean - self.overall_pdp) > 1e-9:
                raise ValueError("overall PDP does not equal the category mean")


def summarize(
    summary: EvalSummary,
    manifest: BenchmarkManifest,
    estimator: str,
    fid: dict[str, float] | None = None,
) -> Report:
    report = Report(
        estimator=estimator,
        base_mpjpe_mm=summary.base_mpjpe_mm,
        base_pa_mpjpe_mm=summary.base_pa_mpjpe_mm,
        category_pdp={c.category: c.pdp for c in summary.categories},
        attribute_pdp={a.attribute_id: a.pdp for a in summary.attribute_evals()},
        overall_pdp=summary.overall_pdp,
        intersection_sizes={c.category: c.intersection_size for c in summary.categories},
        attribute_categories={
            a.attribute_id: a.category for a in summary.attribute_evals()
        },
        stability={a.attribute_id: list(a.stability) for a in summary.attribute_evals()},
        fid=dict(fid or {}),
    )
    report.validate()
    return report


def report_to_dict(report: Report) -> dict:
    return {
        "estimator": report.estimator,
        "base_mpjpe_mm": report.base_mpjpe_mm,
        "base_pa_mpjpe_mm": report.base_pa_mpjpe_mm,
        "category_pdp": report.category_pdp,
        "attribute_pdp": report.attribute_pdp,
        "overall_pdp": report.overall_pdp,
        "intersection_sizes": report.intersection_sizes,
        "attribute_categories": report.attribute_categories,
        "stability": {k: [[n, v] for n, v in s] for k, s in report.stability.items()},
        "fid": report.fid,
    }


def report_from_dict(d: dict) -> Report:
    report = Report(
        estimator=d["estimator"],
        base_mpjpe_mm=float(d["base_mpjpe_mm"]),
        base_pa_mpjpe_mm=float(d["base_pa_mpjpe_mm"]),
        category_pdp={k: float(v) for k, v in d["category_pdp"].items()},
        attribute_pdp={k: float(v) for k, v in d["attribute_pdp"].items()},
        overall_pdp=float(d["overall_pdp"]),
        intersection_sizes={k: int(v) for k, v in d["intersection_sizes"].items()},
        attribute_categories=dict(d.get("attribute_categories", {})),
        stability={k: [(int(n), float(v)) for n, v in s] for k, s in d.get("stability", {}).items()},
        fid={k: float(v) for k, v in d.get("fid", {}).items()},
    )
    report.validate()
    return report


def render_json(report: Report) -> str:
    return json.dumps(report_to_dict(report), indent=1, sort_keys=True) + "\n"


def parse_json(text: str) -> Report:
    return report_from_dict(json.loads(text))


def render_csv(report: Report) -> str:
    """One data row: label, base errors, one column per category, mean."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    categories = list(report.category_pdp)
    writer.writerow(["estimator", "mpjpe_mm", "pa_mpjpe_mm", *categories, "mean_pdp"])
    writer.writerow([
        report.estimator,
        repr(report.base_mpjpe_mm),
        repr(report.base_pa_mpjpe_mm),
        *[repr(report.category_pdp[c]) for c in categories],
        repr(report.overall_pdp),
    ])
    return buf.getvalue()


def parse_csv(text: str) -> dict:
    rows = list(csv.reader(io.StringIO(text)))
    header, values = rows[0], rows[1]
    out: dict = {"estimator": values[0]}
    for name, value in zip(header[1:], values[1:]):
        out[name] = float(value)
    return out


def render_table(report: Report) -> str:
    categories = list(report.category_pdp)
    headers = ["Estimator", "MPJPE", "PA-MPJPE", *categories, "Mean"]
    row = [
        report.estimator,
        f"{report.base_mpjpe_mm:.2f}",
        f"{report.base_pa_mpjpe_mm:.2f}",
        *[f"{report.category_pdp[c]:.2f}" for c in categories],
        f"{report.overall_pdp:.2f}",
    ]
    widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
        "  ".join(v.ljust(w) for v, w in zip(row, widths)),
        "",
        "Base error in mm; sensitivity per category in % of degraded poses.",
        "Intersection sizes: "
        + ", ".join(f"{c}={report.intersection_sizes[c]}" for c in categories),
    ]
    if report.fid:
        lines.append("FID (externally computed): "
                     + ", ".join(f"{k}={v}" for k, v in sorted(report.fid.items())))
    return "\n".join(lines) + "\n"


def emit(report: Report, out_dir: str | Path, formats: tuple[str, ...] = ("table-text", "csv", "json", "plotdata")) -> dict[str, Path]:
    """Write the report in the requested formats; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for fmt in formats:
        if fmt == "json":
            path = out_dir / "report.json"
            path.write_text(render_json(report))
        elif fmt == "csv":
            path = out_dir / "report.csv"
            path.write_text(render_csv(report))
        elif fmt == "table-text":
            path = out_dir / "report.txt"
            path.write_text(render_table(report))
        elif fmt == "plotdata":
            plot_dir = out_dir / "plotdata"
            plot_dir.mkdir(exist_ok=True)
            by_category: dict[str, list[tuple[str, float]]] = {}
            for attribute_id, value in report.attribute_pdp.items():
                cat = report.attribute_categories.get(attribute_id, "all")
                by_category.setdefault(cat, []).append((attribute_id, value))
            for cat, series in by_category.items():
                path = plot_dir / f"{cat}.csv"
                buf = io.StringIO()
                writer = csv.writer(buf, lineterminator="\n")
                writer.writerow(["label", "pdp"])
                for label, value in series:
                    writer.writerow([label, repr(value)])
                path.write_text(buf.getvalue())
            written[fmt] = plot_dir
            continue
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written[fmt] = path
    return written
