"""Command-line entry point: generate, train-source, adapt, sweep, report.

Exit codes: 0 success, 1 I/O failure, 2 configuration or input error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from sfosda import __version__
from sfosda.config import RunConfig, dump_config, load_config
from sfosda.data import LabeledSet, UnlabeledSet, generate_source, generate_target, load_dataset, save_dataset
from sfosda.engine import (
    accuracy,
    adapt,
    load_adapt_state,
    load_model,
    save_model,
    split_train_val,
    train_source,
)
from sfosda.errors import ConfigError, IntegrityError, NumericAbort, ParseError, SchemaError
from sfosda.metrics import evaluate
from sfosda.numerics import Rng
from sfosda.report import (
    RunSummary,
    format_sweep_table,
    read_summary,
    render_report,
    write_metrics_csv,
    write_summary,
)
from sfosda.separation import write_diagnostics, write_histogram

log = logging.getLogger("sfosda")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ENV = "SFOSDA_OUTPUT_DIR"
MANIFEST_FORMAT = "sfosda-manifest"
SWEEP_AXES = ("delta_t", "criterion", "toggles")


def output_dir(args) -> Path:
    """--out wins, then $SFOSDA_OUTPUT_DIR, then ./sfosda-out."""
    out = args.out or os.environ.get(OUTPUT_ENV) or "sfosda-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# data resolution
# ----------------------------------------------------------------------------

def _need_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"dataset file not found: {p}")
    return p


def source_data(cfg: RunConfig) -> LabeledSet:
    if cfg.data.source_path:
        return load_dataset(_need_file(cfg.data.source_path), "labeled", cfg.data.source.n_classes)
    return generate_source(cfg.data.source)


def target_data(cfg: RunConfig) -> UnlabeledSet:
    if cfg.data.target_path:
        return load_dataset(_need_file(cfg.data.target_path), "unlabeled", cfg.data.source.n_classes)
    return generate_target(cfg.data.source, cfg.data.shift)


def source_accuracy(cfg: RunConfig, model, source: LabeledSet) -> dict:
    rng = Rng(cfg.seed).stream("source-train").stream("split")
    tr, va = split_train_val(len(source), cfg.source_training.val_fraction, rng)
    out = {"train_acc": accuracy(model, source.features[tr], source.labels[tr])}
    if len(va):
        out["val_acc"] = accuracy(model, source.features[va], source.labels[va])
    return out


def obtain_source_model(cfg: RunConfig, path: str | None):
    """Load ``path`` if given, else train on the configured source data."""
    if path:
        model, _ = load_model(_need_file(path))
        return model, None, 0.0
    t0 = time.perf_counter()
    source = source_data(cfg)
    model = train_source(cfg, source)
    return model, source_accuracy(cfg, model, source), time.perf_counter() - t0


# ----------------------------------------------------------------------------
# verbs
# ----------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    out = output_dir(args)
    source = generate_source(cfg.data.source)
    target = generate_target(cfg.data.source, cfg.data.shift)
    src_path, tgt_path = out / "source.csv", out / "target.csv"
    save_dataset(src_path, source, comment=f"source seed={cfg.data.source.seed}")
    save_dataset(tgt_path, target, comment=f"target seed={cfg.data.shift.seed}; label column holds hidden labels")
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "sfosda": __version__,
        "seeds": {"source": cfg.data.source.seed, "shift": cfg.data.shift.seed},
        "source_spec": dataclasses.asdict(cfg.data.source),
        "shift_spec": dataclasses.asdict(cfg.data.shift),
        "files": {
            "source": {"path": src_path.name, "rows": len(source), "sha256": _sha256(src_path)},
            "target": {"path": tgt_path.name, "rows": len(target), "known_classes": target.n_known,
                       "sha256": _sha256(tgt_path)},
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {src_path} ({len(source)} rows) and {tgt_path} ({len(target)} rows)")
    return EXIT_OK


def cmd_train_source(args) -> int:
    cfg = load_config(args.config)
    out = output_dir(args)
    t0 = time.perf_counter()
    source = source_data(cfg)
    model = train_source(cfg, source)
    acc = source_accuracy(cfg, model, source)
    elapsed = time.perf_counter() - t0
    save_model(out / "source_model.npz", model, cfg.seed, {"config_hash": cfg.hash()})
    summary = RunSummary("train-source", cfg.hash(), cfg.ablation_id(), cfg.seed, name=cfg.name, source=acc,
                         config=cfg.to_dict(), timing={"source_seconds": elapsed})
    write_summary(out / "summary.json", summary)
    print(f"source model written to {out / 'source_model.npz'}; "
          + "  ".join(f"{k} {100 * v:.1f}" for k, v in acc.items()))
    return EXIT_OK


def run_adaptation(cfg: RunConfig, out: Path, source_model, target: UnlabeledSet, source_info, source_seconds,
                   resume: str | None = None, diagnostics: bool = False) -> RunSummary:
    hist_dir = out / "histograms"
    hist_dir.mkdir(exist_ok=True)
    diag_dir = out / "diagnostics"
    if diagnostics:
        diag_dir.mkdir(exist_ok=True)

    def on_epoch(epoch, sep, state):
        write_histogram(hist_dir / f"epoch_{epoch:03d}.csv", sep.scores)
        if diagnostics:
            write_diagnostics(diag_dir / f"epoch_{epoch:03d}.csv", sep, target.hidden_labels)

    state = load_adapt_state(_need_resume(resume), cfg) if resume else None
    t0 = time.perf_counter()
    result = adapt(cfg, source_model, target, state=state, checkpoint_path=out / "checkpoint.npz",
                   on_epoch=on_epoch)
    adapt_seconds = time.perf_counter() - t0
    save_model(out / "student.npz", result.student, cfg.seed, {"config_hash": cfg.hash()})
    write_metrics_csv(out / "metrics.csv", result.reports)
    final = None
    if target.hidden_labels is not None:
        final = evaluate(result.student, target.features, target.hidden_labels, target.n_known).as_dict()
    summary = RunSummary("adapt", cfg.hash(), cfg.ablation_id(), cfg.seed, reports=result.reports, final=final,
                         name=cfg.name, source=source_info, config=cfg.to_dict(),
                         timing={"source_seconds": source_seconds, "adapt_seconds": adapt_seconds})
    write_summary(out / "summary.json", summary)
    return summary


def _need_resume(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return p


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    out = output_dir(args)
    target = target_data(cfg)
    model, info, secs = obtain_source_model(cfg, args.source_model)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    summary = run_adaptation(cfg, out, model, target, info, secs, args.resume, args.diagnostics)
    sys.stdout.write(render_report(summary))
    return EXIT_OK


def sweep_points(cfg: RunConfig, axis: str, values: list) -> list[tuple[str, RunConfig]]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ConfigError(f"sweep over {axis} has no values")
    points = []
    for v in values:
        if axis == "delta_t":
            points.append((str(v), cfg.with_overrides({"adapt.delta_t": float(v)})))
        elif axis == "criterion":
            points.append((str(v), cfg.with_overrides({"adapt.criterion": v})))
        else:
            # each value names a toggle to switch off; "none" keeps the full method
            name = str(v)
            if name == "none":
                points.append((name, cfg))
            elif name in dataclasses.asdict(cfg.toggles):
                points.append((name, cfg.with_overrides({f"toggles.{name}": False})))
            else:
                raise ConfigError(f"unknown toggle {name!r} in sweep values")
    return points


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    axis = args.axis or cfg.sweep.axis
    if axis is None:
        raise ConfigError("no sweep axis given (use --axis or sweep.axis in the config)")
    points = sweep_points(cfg, axis, list(cfg.sweep.values))
    out = output_dir(args)
    target = target_data(cfg)
    model, info, secs = obtain_source_model(cfg, args.source_model)
    rows = []
    for label, point in points:
        point_dir = out / f"{axis}={label}"
        point_dir.mkdir(exist_ok=True)
        row = {"axis": axis, "value": label, "ablation_id": point.ablation_id()}
        try:
            s = run_adaptation(point, point_dir, model, target, info, secs)
            f = s.final or {}
            row.update(os_star=f.get("os_star"), unk=f.get("unk"), hos=f.get("hos"), status="ok")
        except (NumericAbort, ValueError) as exc:
            log.warning("sweep point %s=%s failed: %s", axis, label, exc)
            row.update(status=f"failed: {exc}")
        rows.append(row)
    table = format_sweep_table(rows)
    (out / "sweep.csv").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.summary)
    if not path.is_file():
        raise ConfigError(f"summary file not found: {path}")
    sys.stdout.write(render_report(read_summary(path)))
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfosda", description="Source-free open-set domain adaptation at desk scale.")
    p.add_argument("--version", action="version", version=f"sfosda {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_out(sp):
        sp.add_argument("config", help="YAML run configuration (may name a shipped preset)")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./sfosda-out)")
        return sp

    g = with_out(sub.add_parser("generate", help="write the synthetic source/target datasets and a manifest"))
    g.set_defaults(func=cmd_generate)

    t = with_out(sub.add_parser("train-source", help="train the source classifier and save a checkpoint"))
    t.set_defaults(func=cmd_train_source)

    a = with_out(sub.add_parser("adapt", help="adapt a source model to the target set"))
    a.add_argument("--source-model", help="source checkpoint; trained from the config's source data if omitted")
    a.add_argument("--resume", help="adaptation checkpoint to continue from")
    a.add_argument("--diagnostics", action="store_true", help="also dump per-sample separation tables")
    a.set_defaults(func=cmd_adapt)

    s = with_out(sub.add_parser("sweep", help="one adaptation per value of a config axis"))
    s.add_argument("--axis", choices=SWEEP_AXES, help="overrides sweep.axis in the config")
    s.add_argument("--source-model", help="source checkpoint shared by every point")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="print a run summary in human-readable form")
    r.add_argument("summary", help="summary.json written by adapt or train-source")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"sfosda: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, SchemaError, IntegrityError, ValueError) as exc:
        print(f"sfosda: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"sfosda: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
