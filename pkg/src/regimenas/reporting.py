"""Run manifests and report emission.

A finished search run leaves raw records on disk: the evaluation trace,
per-candidate training reports, the baseline report, and ablation rows.
This module assembles those records into four tables — per-generation
progress, best-found versus the plain recurrent baseline, component
ablations, per-regime test error — plus 20-bin histogram data over the
metrics and hyperparameters of every candidate the search evaluated, and
renders the lot as JSON, CSV, or markdown.  Every number in every table is
read back from a persisted record; nothing here re-runs a model.

``RunManifest`` entries give each output file exactly one owner.  A command
that rewrites a file takes ownership from the earlier entry, so the union
of ``artifacts`` across entries always partitions the directory.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .blocks import CELL_TYPES
from .data import REGIMES
from .search import _jsonable

N_BINS = 20

MANIFEST_NAME = "manifest.json"


class ReportError(RuntimeError):
    """A report was requested from a run directory missing raw records."""


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    """Hash of the canonical (sorted-key) JSON form of a config-like object."""
    text = json.dumps(_jsonable(obj), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunManifest:
    """Provenance of one command invocation and the files it wrote.

    ``artifacts`` are POSIX-style paths relative to the manifest's own
    directory; timestamps are ISO-8601 UTC.
    """

    run_id: str
    command: str
    argv: list
    started: str
    finished: str = ""
    seeds: dict = field(default_factory=dict)
    config_hashes: dict = field(default_factory=dict)
    data_fingerprint: str = ""
    thread_cap: Optional[int] = None
    artifacts: list = field(default_factory=list)

    @classmethod
    def begin(cls, command: str, argv: list, started: str) -> "RunManifest":
        digest = hashlib.sha256(
            f"{command}|{started}|{json.dumps(list(argv))}".encode()
        ).hexdigest()
        return cls(run_id=f"{command}-{digest[:10]}", command=command,
                   argv=list(argv), started=started)


def load_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        return {"runs": []}
    return json.loads(path.read_text())


def record_run(run_dir, manifest: RunManifest) -> Path:
    """Append a run entry; files it wrote change owner to the new entry."""
    run_dir = Path(run_dir)
    doc = load_manifest(run_dir)
    mine = set(manifest.artifacts)
    for entry in doc["runs"]:
        entry["artifacts"] = [a for a in entry["artifacts"] if a not in mine]
    doc["runs"].append(asdict(manifest))
    path = run_dir / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2))
    return path


def artifact_owners(run_dir) -> dict:
    """Artifact path -> list of run ids referencing it (should be length 1)."""
    owners: dict = {}
    for entry in load_manifest(run_dir)["runs"]:
        for a in entry["artifacts"]:
            owners.setdefault(a, []).append(entry["run_id"])
    return owners


# ---------------------------------------------------------------------------
# histogram data
# ---------------------------------------------------------------------------

def equal_width_histogram(values, n_bins: int = N_BINS) -> dict:
    """Counts over ``n_bins`` equal-width bins spanning the observed range.

    A constant sample gets a unit-wide range centred on its value so the
    bins stay well defined; an empty sample yields empty edge/count lists.
    Non-finite entries and Nones are dropped before binning.
    """
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return {"kind": "numeric", "bin_edges": [], "counts": [], "n": 0}
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(vals, bins=edges)
    return {"kind": "numeric", "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts], "n": int(vals.size)}


def category_histogram(values, order: tuple = ()) -> dict:
    """Counts per category.

    ``order`` pins the leading categories and keeps them even at count
    zero (the cell-type axis should always show all cell kinds); unlisted
    values follow in sorted order.
    """
    vals = list(values)
    cats = list(order) + sorted(set(vals) - set(order))
    counts = [sum(1 for v in vals if v == c) for c in cats]
    return {"kind": "categorical", "categories": cats, "counts": counts,
            "n": len(vals)}


# ---------------------------------------------------------------------------
# bundle assembly
# ---------------------------------------------------------------------------

#: static caveats attached to every rendering
FOOTNOTES = (
    "Loss values are each model's own training objective (the baseline "
    "trains on the prediction term only) and are not comparable across "
    "rows; MAE/RMSE/R2 are computed identically for every row.",
    "Benchmark rows are retrained on the merged train+val data with a 10% "
    "validation tail before the test evaluation.",
    "Generation 0 is the initial random design.",
    "Histograms use 20 equal-width bins over the observed range; the cell "
    "type axis is categorical.",
)


@dataclass
class ReportBundle:
    """The emitted tables plus histogram data, all read from raw records."""

    generation_table: list
    benchmark_table: list
    ablation_table: list
    regime_table: list
    histograms: dict
    footnotes: list

    def to_dict(self) -> dict:
        return asdict(self)


def _require(path: Path) -> Path:
    if not path.exists():
        raise ReportError(f"missing artifact: {path}")
    return path


def _read_json(path: Path):
    return json.loads(_require(path).read_text())


def load_trace_records(run_dir) -> list:
    path = _require(Path(run_dir) / "trace.jsonl")
    return [json.loads(line)
            for line in path.read_text().splitlines() if line.strip()]


def load_eval_reports(run_dir, records: list) -> dict:
    """Per-candidate training reports keyed by report id.

    Individual files may be absent (a resumed run only rewrites the ones it
    trained); the tables show blanks for anything unrecorded.
    """
    rdir = _require(Path(run_dir) / "reports")
    out = {}
    for rec in records:
        path = rdir / f"{rec['report_id']}.json"
        if path.exists():
            out[rec["report_id"]] = json.loads(path.read_text())
    return out


def build_generation_table(records: list, reports: dict) -> list:
    """One row per generation: the best candidate's validation metrics."""
    table = []
    for g in sorted({r["generation"] for r in records}):
        rows = [r for r in records if r["generation"] == g]
        scored = [r for r in rows if r["score"] is not None]
        entry = {"generation": g, "n_evals": len(rows),
                 "n_failed": sum(1 for r in rows if r["failed"]),
                 "best_val_loss": None, "best_val_mae": None,
                 "best_val_rmse": None, "best_val_r2": None,
                 "epochs": None, "report_id": None}
        if scored:
            best = max(scored, key=lambda r: r["score"])
            entry["best_val_loss"] = -best["score"]
            entry["report_id"] = best["report_id"]
            rep = reports.get(best["report_id"])
            if rep is not None:
                m = rep.get("metrics") or {}
                entry["best_val_mae"] = m.get("mae")
                entry["best_val_rmse"] = m.get("rmse")
                entry["best_val_r2"] = m.get("r2")
                entry["epochs"] = rep.get("epochs_run")
        table.append(entry)
    return table


def build_benchmark_table(baseline: dict, summary: dict) -> list:
    base_rep = baseline.get("report") or {}
    base_m = baseline.get("test_metrics") or {}
    final = summary.get("final_metrics") or {}
    return [
        {"model": "GRU baseline",
         "test_loss": (base_m.get("breakdown") or {}).get("total"),
         "test_mae": base_m.get("mae"), "test_rmse": base_m.get("rmse"),
         "test_r2": base_m.get("r2"), "epochs": base_rep.get("epochs_run"),
         "n_parameters": base_rep.get("n_parameters")},
        {"model": "best searched",
         "test_loss": final.get("test_loss"),
         "test_mae": final.get("mae"), "test_rmse": final.get("rmse"),
         "test_r2": final.get("r2"), "epochs": final.get("epochs"),
         "n_parameters": final.get("n_parameters")},
    ]


def build_regime_table(baseline: dict, summary: dict) -> list:
    def row(model: str, per_regime: Optional[dict]) -> dict:
        out = {"model": model}
        for regime in REGIMES:
            out[regime] = (per_regime or {}).get(regime)
        return out

    base_m = baseline.get("test_metrics") or {}
    final = summary.get("final_metrics") or {}
    return [row("GRU baseline", base_m.get("per_regime_mae")),
            row("best searched", final.get("per_regime_mae"))]


def build_ablation_table(ablation: dict) -> list:
    return [{"variant": r["variant"], "test_mae": r.get("mae"),
             "test_rmse": r.get("rmse"), "test_r2": r.get("r2"),
             "mae_increase_pct": r.get("mae_increase_pct"),
             "failed": r.get("failed", False), "note": r.get("note", "")}
            for r in ablation["rows"]]


def build_histograms(records: list, reports: dict) -> dict:
    """Metric and hyperparameter distributions over evaluated candidates.

    Metric histograms cover candidates that trained successfully; the
    architecture axes cover every candidate the search touched.
    """
    ok = [reports[r["report_id"]] for r in records
          if not r["failed"] and r["report_id"] in reports]

    def metric(key: str) -> list:
        return [(rep.get("metrics") or {}).get(key) for rep in ok]

    archs = [r["arch"] for r in records]
    return {
        "val_mae": equal_width_histogram(metric("mae")),
        "val_rmse": equal_width_histogram(metric("rmse")),
        "val_r2": equal_width_histogram(metric("r2")),
        "dropout": equal_width_histogram([a["dropout"] for a in archs]),
        "hidden_size": equal_width_histogram(
            [h for a in archs for h in a["hidden_sizes"]]),
        "cell_type": category_histogram(
            [c for a in archs for c in a["cell_types"]], order=CELL_TYPES),
    }


def build_bundle(run_dir) -> ReportBundle:
    """Assemble all tables from a finished run directory.

    Raises :class:`ReportError` naming the first missing artifact.
    """
    run_dir = Path(run_dir)
    records = load_trace_records(run_dir)
    reports = load_eval_reports(run_dir, records)
    summary = _read_json(run_dir / "summary.json")
    baseline = _read_json(run_dir / "baseline" / "report.json")
    ablation = _read_json(run_dir / "ablation.json")
    return ReportBundle(
        generation_table=build_generation_table(records, reports),
        benchmark_table=build_benchmark_table(baseline, summary),
        ablation_table=build_ablation_table(ablation),
        regime_table=build_regime_table(baseline, summary),
        histograms=build_histograms(records, reports),
        footnotes=list(FOOTNOTES),
    )


# ---------------------------------------------------------------------------
# renderers
# ---------------------------------------------------------------------------

_TABLE_COLUMNS = {
    "generation_table": ["generation", "n_evals", "n_failed", "best_val_loss",
                         "best_val_mae", "best_val_rmse", "best_val_r2",
                         "epochs", "report_id"],
    "benchmark_table": ["model", "test_loss", "test_mae", "test_rmse",
                        "test_r2", "epochs", "n_parameters"],
    "ablation_table": ["variant", "test_mae", "test_rmse", "test_r2",
                       "mae_increase_pct", "failed", "note"],
    "regime_table": ["model", *REGIMES],
}

_HIST_TITLES = {
    "val_mae": "Validation MAE",
    "val_rmse": "Validation RMSE",
    "val_r2": "Validation R2",
    "dropout": "Dropout rate",
    "hidden_size": "Hidden size",
    "cell_type": "Cell type",
}


def _cell(v) -> str:
    # repr round-trips floats exactly, keeping CSV and JSON numbers identical
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _table_csv(rows: list, columns: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def render_json(bundle: ReportBundle) -> str:
    return json.dumps(bundle.to_dict(), indent=2, sort_keys=True)


def render_csv(bundle: ReportBundle) -> dict:
    """One CSV text per table plus a long-format histogram file."""
    files = {f"{name}.csv": _table_csv(getattr(bundle, name), cols)
             for name, cols in _TABLE_COLUMNS.items()}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["histogram", "kind", "bin_start", "bin_end",
                     "category", "count"])
    for name, h in bundle.histograms.items():
        if h["kind"] == "numeric":
            for i, count in enumerate(h["counts"]):
                writer.writerow([name, "numeric", _cell(h["bin_edges"][i]),
                                 _cell(h["bin_edges"][i + 1]), "", count])
        else:
            for cat, count in zip(h["categories"], h["counts"]):
                writer.writerow([name, "categorical", "", "", cat, count])
    files["histograms.csv"] = buf.getvalue()
    return files


def _fmt(v, nd: int = 4) -> str:
    if v is None:
        return "—"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.{nd}f}"
    return str(v)


def _md_table(headers: list, rows: list) -> str:
    lines = ["| " + " | ".join(headers) + " |",
             "|" + "|".join(" --- " for _ in headers) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines)


def render_markdown(bundle: ReportBundle) -> str:
    parts = ["# Search report", "", "## Generation progress", ""]
    parts.append(_md_table(
        ["Generation", "Evals", "Failed", "Best val loss", "Best val MAE",
         "Best val RMSE", "Best val R2", "Epochs"],
        [[_fmt(r["generation"]), _fmt(r["n_evals"]), _fmt(r["n_failed"]),
          _fmt(r["best_val_loss"]), _fmt(r["best_val_mae"]),
          _fmt(r["best_val_rmse"]), _fmt(r["best_val_r2"]),
          _fmt(r["epochs"])] for r in bundle.generation_table]))

    parts += ["", "## Benchmark", ""]
    parts.append(_md_table(
        ["Model", "Test loss", "Test MAE", "Test RMSE", "Test R2",
         "Epochs", "Parameters"],
        [[_fmt(r["model"]), _fmt(r["test_loss"]), _fmt(r["test_mae"]),
          _fmt(r["test_rmse"]), _fmt(r["test_r2"]), _fmt(r["epochs"]),
          _fmt(r["n_parameters"])] for r in bundle.benchmark_table]))

    parts += ["", "## Ablation", ""]

    def pct(v):
        return "—" if v is None else f"{v:+.1f}%"

    parts.append(_md_table(
        ["Variant", "Test MAE", "Test RMSE", "Test R2", "MAE increase"],
        [[_fmt(r["variant"]), _fmt(r["test_mae"]), _fmt(r["test_rmse"]),
          _fmt(r["test_r2"]),
          "—" if r["variant"] == "full" else pct(r["mae_increase_pct"])]
         for r in bundle.ablation_table]))

    parts += ["", "## Per-regime test MAE", ""]
    parts.append(_md_table(
        ["Model", *REGIMES],
        [[_fmt(r["model"])] + [_fmt(r[name]) for name in REGIMES]
         for r in bundle.regime_table]))

    parts += ["", "## Distributions", ""]
    for name, h in bundle.histograms.items():
        parts += [f"### {_HIST_TITLES.get(name, name)}", ""]
        if h["n"] == 0:
            parts += ["no data", ""]
            continue
        if h["kind"] == "numeric":
            parts.append(_md_table(
                ["Bin start", "Bin end", "Count"],
                [[_fmt(h["bin_edges"][i]), _fmt(h["bin_edges"][i + 1]),
                  str(c)] for i, c in enumerate(h["counts"])]))
        else:
            parts.append(_md_table(
                ["Category", "Count"],
                [[cat, str(c)]
                 for cat, c in zip(h["categories"], h["counts"])]))
        parts.append("")

    parts += ["## Notes", ""]
    parts += [f"{i}. {note}" for i, note in enumerate(bundle.footnotes, 1)]
    return "\n".join(parts)


def write_report(run_dir, fmt: str) -> list:
    """Emit the bundle under ``run_dir/report`` in the requested format.

    Returns the list of paths written.
    """
    if fmt not in ("json", "csv", "markdown"):
        raise ReportError(f"unknown report format {fmt!r}")
    bundle = build_bundle(run_dir)
    out = Path(run_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        path = out / "bundle.json"
        path.write_text(render_json(bundle) + "\n")
        written.append(path)
    elif fmt == "csv":
        for name, text in render_csv(bundle).items():
            path = out / name
            path.write_text(text)
            written.append(path)
    else:
        path = out / "report.md"
        path.write_text(render_markdown(bundle) + "\n")
        written.append(path)
    return written
