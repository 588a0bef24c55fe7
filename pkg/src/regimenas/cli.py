"""Command-line entry points: data generation, search runs, baselines, reports.

Verbs:
    generate-data   sample a synthetic regime-switching OHLCV series
    search          run the full pipeline on an OHLCV CSV
    train-baseline  train the plain GRU comparator on its own
    ablate          re-run component ablations for a finished search run
    report          render a finished run's report bundle (markdown/csv/json)

Exit codes: 0 success, 1 orchestration or configuration error, 2 data
validation error.

``REGIMENAS_THREADS`` caps parallel candidate workers; the bundled evaluator
trains candidates one at a time (a single worker always satisfies the cap)
and the value is additionally forwarded to the BLAS thread pools.

Re-running ``search`` with an existing output directory resumes it: every
evaluation already recorded in ``trace.jsonl`` is reused instead of
retrained, and the remaining proposals replay identically under the same
seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .data import (DataError, SynthMarketConfig, default_synth_config,
                   engineer_features, generate_synthetic, load_csv,
                   normalize_rolling_z, save_csv)
from .losses import LossWeights
from .reporting import (ReportError, RunManifest, config_hash, file_sha256,
                        load_manifest, record_run, write_report)
from .search import (SearchConfig, _enc_key, _jsonable, _merged_dataset,
                     arch_from_dict, encode, run_ablation, run_search)
from .training import (TrainConfig, attach_regime_outputs, build_windows,
                       evaluate, pretrain_detector, save_checkpoint,
                       train_gru_baseline)


class CliError(Exception):
    """Configuration or orchestration failure; exits with status 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors, which this interface reserves for
    # data validation; route usage problems through the normal error path
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _apply_thread_cap() -> Optional[int]:
    raw = os.environ.get("REGIMENAS_THREADS")
    if raw is None or raw == "":
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise CliError(f"REGIMENAS_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise CliError("REGIMENAS_THREADS must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(cap))
    return cap


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def _load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return doc


def _reject_unknown(doc: dict, allowed, what: str) -> None:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise CliError(f"unknown {what} field '{sorted(unknown)[0]}'")


def _synth_config(doc: dict, seed_override: Optional[int]) -> SynthMarketConfig:
    """Generator settings; ``n_steps`` and ``seed`` must be explicit so a
    regenerated dataset is always attributable to its seed."""
    names = [f.name for f in dataclasses.fields(SynthMarketConfig)]
    _reject_unknown(doc, names, "config")
    for name in ("n_steps", "seed"):
        if name not in doc:
            raise CliError(f"config missing required field '{name}'")
    kw = dict(doc)
    if "transition" not in kw:
        # borrow only the canonical persistent-regime matrix
        kw["transition"] = default_synth_config(1).transition
    for key in ("mu", "sigma", "kappa"):
        if key in kw:
            kw[key] = tuple(kw[key])
    if seed_override is not None:
        kw["seed"] = seed_override
    try:
        return SynthMarketConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}")


def _train_config(doc: dict, seed_override: Optional[int]) -> TrainConfig:
    names = [f.name for f in dataclasses.fields(TrainConfig)]
    _reject_unknown(doc, names, "train config")
    kw = dict(doc)
    if seed_override is not None:
        kw["seed"] = seed_override
    try:
        lw = kw.get("loss_weights")
        if isinstance(lw, (list, tuple)):
            kw["loss_weights"] = LossWeights(*lw)
        elif isinstance(lw, dict):
            kw["loss_weights"] = LossWeights(**lw)
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid train config: {exc}")


def _search_config(doc: dict, seed_override: Optional[int]) -> SearchConfig:
    names = [f.name for f in dataclasses.fields(SearchConfig)]
    _reject_unknown(doc, names, "search config")
    kw = dict(doc)
    if seed_override is not None:
        kw["seed"] = seed_override
    try:
        return SearchConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid search config: {exc}")


_RUN_KEYS = ("search", "train", "normalize_window", "ablation", "baseline")


def _run_configs(doc: dict, seed_override: Optional[int]):
    """Split a search run's config into its pieces.

    ``ablation``/``baseline`` (default true) let a long search skip the
    post-hoc retraining passes; the report bundle needs both, so disabling
    either defers report emission to the ``ablate``/``train-baseline`` and
    ``report`` verbs.
    """
    _reject_unknown(doc, _RUN_KEYS, "config")
    scfg = _search_config(doc.get("search", {}), seed_override)
    tcfg = _train_config(doc.get("train", {}), seed_override)
    window = doc.get("normalize_window", 60)
    if not isinstance(window, int) or isinstance(window, bool) or window < 2:
        raise CliError("normalize_window must be an integer >= 2")
    flags = []
    for key in ("ablation", "baseline"):
        value = doc.get(key, True)
        if not isinstance(value, bool):
            raise CliError(f"{key} must be true or false")
        flags.append(value)
    return scfg, tcfg, window, flags[0], flags[1]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _load_panel(data_path, window: int):
    series = load_csv(data_path)
    return normalize_rolling_z(engineer_features(series), window=window)


def _prepared_windows(panel, tcfg: TrainConfig):
    ds = build_windows(panel, tcfg.t_window, tcfg.stride)
    detector = pretrain_detector(ds, seed=tcfg.seed)
    attach_regime_outputs(ds, detector)
    return ds


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True))
    return path


def _rel(paths, root: Path) -> list:
    root = root.resolve()
    return sorted(Path(p).resolve().relative_to(root).as_posix()
                  for p in paths)


def _manifest(args, command: str, started: str, **fields) -> RunManifest:
    m = RunManifest.begin(command, getattr(args, "raw_argv", []), started)
    m.finished = _utc_now()
    m.thread_cap = getattr(args, "thread_cap", None)
    for key, value in fields.items():
        setattr(m, key, value)
    return m


def _load_reuse(run_dir: Path) -> dict:
    """Recorded evaluations of an earlier (possibly interrupted) run.

    Keyed by the candidate's encoding so a replayed proposal is recognised
    no matter at which index it reappears.  ``unc_after`` restores the
    detector-uncertainty signal the next proposal saw.
    """
    reuse = {}
    for line in (run_dir / "trace.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        unc_after = None
        rpath = run_dir / "reports" / f"{rec['report_id']}.json"
        if not rec["failed"] and rpath.exists():
            report = json.loads(rpath.read_text())
            unc_after = report.get("mean_val_uncertainty")
        reuse[_enc_key(encode(arch_from_dict(rec["arch"])))] = {
            "score": rec["score"] if rec["score"] is not None else math.nan,
            "failed": rec["failed"],
            "fail_reason": rec.get("fail_reason", ""),
            "unc_after": unc_after,
        }
    return reuse


def _train_and_store_baseline(ds, tcfg: TrainConfig, out: Path) -> bool:
    """Fit the GRU comparator on merged train+val; persist report + weights."""
    merged = _merged_dataset(ds, tcfg)
    report = train_gru_baseline(merged, seed=tcfg.seed, cfg=tcfg)
    payload = {"kind": "GRU", "seed": tcfg.seed,
               "report": report.to_json_dict(), "test_metrics": None}
    ok = not report.failed and report.model is not None
    if ok:
        payload["test_metrics"] = evaluate(
            report.model, merged, "test",
            weights=LossWeights(1.0, 0.0, 0.0, 0.0), static_gate=True,
            l_target=tcfg.l_target, batch_size=tcfg.batch_size)
        save_checkpoint(out / "baseline" / "model", report.model,
                        meta={"kind": "GRU", "seed": tcfg.seed})
    _write_json(out / "baseline" / "report.json", payload)
    if ok:
        m = payload["test_metrics"]
        print(f"baseline test MAE {m['mae']:.6f} RMSE {m['rmse']:.6f} "
              f"R2 {m['r2']:.4f}")
    else:
        print(f"baseline training failed: {report.fail_reason}",
              file=sys.stderr)
    return ok


def _files_under(path: Path) -> list:
    return [p for p in path.rglob("*") if p.is_file()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = _synth_config(_load_json(args.config), args.seed)
    series, hidden = generate_synthetic(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(series, out)
    sidecar = out.with_name(out.stem + ".regimes.csv")
    with open(sidecar, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "regime"])
        for ts, name in zip(series.timestamp, hidden):
            writer.writerow([int(ts), name])
    print(f"wrote {out} ({len(series)} rows) and {sidecar}")
    return 0


def cmd_search(args) -> int:
    started = _utc_now()
    doc = _load_json(args.config) if args.config else {}
    scfg, tcfg, window, do_ablation, do_baseline = _run_configs(doc, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    panel = _load_panel(args.data, window)
    ds = _prepared_windows(panel, tcfg)

    reuse = None
    if (out / "trace.jsonl").exists():
        reuse = _load_reuse(out)
        print(f"resuming: {len(reuse)} recorded evaluations available")

    trace = run_search(ds, scfg, tcfg, out_dir=out, reuse=reuse)
    artifacts = [out / "trace.jsonl", out / "summary.json"]
    artifacts.append(_write_json(out / "config.json", {
        "search": asdict(scfg), "train": asdict(tcfg),
        "normalize_window": window, "ablation": do_ablation,
        "baseline": do_baseline,
        "data_path": str(Path(args.data).resolve())}))

    rdir = out / "reports"
    rdir.mkdir(exist_ok=True)
    for rec in trace.records:
        path = rdir / f"{rec.report_id}.json"
        if rec.report is not None:
            _write_json(path, rec.report.to_json_dict())
        if path.exists():
            artifacts.append(path)

    best = trace.best_record
    if best is None:
        print("search finished without a successful candidate",
              file=sys.stderr)
    else:
        print(f"evaluated {len(trace.records)} candidates; "
              f"best score {best.score:.6f} (eval {best.index})")
    if trace.final_report is not None:
        artifacts.append(_write_json(rdir / "final.json",
                                     trace.final_report.to_json_dict()))
        if trace.final_report.model is not None:
            ck = save_checkpoint(out / "best_model", trace.final_report.model,
                                 meta={"arch": asdict(trace.final_arch),
                                       "metrics": _jsonable(
                                           trace.final_metrics)})
            artifacts += _files_under(ck)
    if trace.final_metrics:
        fm = trace.final_metrics
        print(f"final test MAE {fm['mae']:.6f} RMSE {fm['rmse']:.6f} "
              f"R2 {fm['r2']:.4f}")

    baseline_ok = False
    if do_baseline:
        baseline_ok = _train_and_store_baseline(ds, tcfg, out)
        artifacts += _files_under(out / "baseline")

    if do_ablation and trace.final_arch is not None:
        rows = run_ablation(trace.final_arch, ds, tcfg)
        artifacts.append(_write_json(out / "ablation.json", {
            "best_arch": asdict(trace.final_arch), "rows": rows}))

    if baseline_ok and do_ablation and trace.final_arch is not None:
        artifacts += write_report(out, "json")
        artifacts += write_report(out, "markdown")
    else:
        print("report bundle skipped (needs baseline and ablation records)")

    record_run(out, _manifest(
        args, "search", started,
        seeds={"search": scfg.seed, "train": tcfg.seed},
        config_hashes={"search": config_hash(asdict(scfg)),
                       "train": config_hash(asdict(tcfg))},
        data_fingerprint=file_sha256(args.data),
        artifacts=_rel(artifacts, out)))
    print(f"run artifacts in {out}")
    return 0


def cmd_train_baseline(args) -> int:
    started = _utc_now()
    doc = _load_json(args.config) if args.config else {}
    _reject_unknown(doc, ("kind", "train", "normalize_window"), "config")
    kind = doc.get("kind", "GRU")
    if kind != "GRU":
        raise CliError(f"unsupported baseline kind {kind!r} "
                       "(only GRU is implemented)")
    tcfg = _train_config(doc.get("train", {}), args.seed)
    window = doc.get("normalize_window", 60)

    panel = _load_panel(args.data, window)
    ds = build_windows(panel, tcfg.t_window, tcfg.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not _train_and_store_baseline(ds, tcfg, out):
        raise CliError("baseline training failed; see report.json")
    record_run(out, _manifest(
        args, "train-baseline", started,
        seeds={"train": tcfg.seed},
        config_hashes={"train": config_hash(asdict(tcfg))},
        data_fingerprint=file_sha256(args.data),
        artifacts=_rel(_files_under(out / "baseline"), out)))
    return 0


def _read_run_file(path: Path) -> dict:
    if not path.exists():
        raise CliError(f"missing artifact: {path}")
    return json.loads(path.read_text())


def cmd_ablate(args) -> int:
    started = _utc_now()
    out = Path(args.out)
    cfg_doc = _read_run_file(out / "config.json")
    summary = _read_run_file(out / "summary.json")
    if not summary.get("final_arch"):
        raise CliError(f"{out / 'summary.json'} records no final "
                       "architecture (search incomplete)")
    arch = arch_from_dict(summary["final_arch"])
    tcfg = _train_config(cfg_doc["train"], None)

    data_path = args.data or cfg_doc.get("data_path")
    if not data_path or not Path(data_path).exists():
        raise CliError(f"data file not found: {data_path!r}; pass --data")
    fingerprint = file_sha256(data_path)
    for entry in load_manifest(out)["runs"]:
        if entry["command"] == "search" and entry["data_fingerprint"]:
            if entry["data_fingerprint"] != fingerprint:
                raise CliError(f"{data_path} changed since the search run "
                               "(fingerprint mismatch)")
            break

    panel = _load_panel(data_path, cfg_doc.get("normalize_window", 60))
    ds = _prepared_windows(panel, tcfg)
    rows = run_ablation(arch, ds, tcfg)
    path = _write_json(out / "ablation.json",
                       {"best_arch": asdict(arch), "rows": rows})
    for row in rows:
        tag = f"+{row['mae_increase_pct']:.1f}%" \
            if not row["failed"] and row["variant"] != "full" else ""
        mae = "failed" if row["failed"] else f"MAE {row['mae']:.6f}"
        print(f"{row['variant']:<22} {mae} {tag}")
    record_run(out, _manifest(
        args, "ablate", started, seeds={"train": tcfg.seed},
        config_hashes={"train": config_hash(asdict(tcfg))},
        data_fingerprint=fingerprint, artifacts=_rel([path], out)))
    return 0


def cmd_report(args) -> int:
    started = _utc_now()
    out = Path(args.out)
    try:
        written = write_report(out, args.format)
    except ReportError as exc:
        raise CliError(str(exc))
    record_run(out, _manifest(args, "report", started,
                              artifacts=_rel(written, out)))
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regimenas",
                     description="regime-aware architecture search")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")

    p = sub.add_parser("generate-data",
                       help="sample a synthetic regime-switching market")
    p.add_argument("--config", required=True,
                   help="generator JSON; n_steps and seed are required keys")
    p.add_argument("--out", required=True,
                   help="output CSV; a .regimes.csv sidecar lands next to it")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("search", help="run the full search pipeline")
    p.add_argument("--data", required=True, help="OHLCV CSV")
    p.add_argument("--config", default=None,
                   help="JSON with 'search'/'train' sections (defaults used "
                        "when omitted)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override both search and train seeds")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train-baseline",
                       help="train the plain GRU comparator")
    p.add_argument("--data", required=True, help="OHLCV CSV")
    p.add_argument("--config", default=None,
                   help="JSON with optional 'train' section and 'kind'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the train seed")
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("ablate",
                       help="re-run component ablations for a finished run")
    p.add_argument("--out", required=True, help="finished run directory")
    p.add_argument("--data", default=None,
                   help="data CSV (defaults to the path the run recorded)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render the report bundle")
    p.add_argument("--out", required=True, help="finished run directory")
    p.add_argument("--format", choices=("markdown", "csv", "json"),
                   default="markdown")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list] = None) -> int:
    raw = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(raw)
        args.raw_argv = raw
        args.thread_cap = _apply_thread_cap()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
