"""Run summaries, per-epoch metric tables and the human-readable report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from sfosda import __version__
from sfosda.engine import EpochReport
from sfosda.errors import ParseError, SchemaError

SUMMARY_FORMAT = "sfosda-summary"
SUMMARY_VERSION = 1
METRICS_HEADER = "# sfosda-metrics v1"
SWEEP_HEADER = "# sfosda-sweep v1"

METRIC_COLUMNS = [
    "epoch", "os_star", "unk", "hos", "loss_total", "loss_ce_known", "loss_ce_unknown",
    "loss_im_ent", "loss_im_div", "loss_triplet", "loss_consistency", "n_known", "n_unknown",
    "gamma", "m", "zeta2", "lr", "degenerate", "separation_balanced_acc",
]
SWEEP_COLUMNS = ["axis", "value", "ablation_id", "os_star", "unk", "hos", "status"]
SPARK = "▁▂▃▄▅▆▇█"


@dataclass
class RunSummary:
    command: str
    config_hash: str
    ablation_id: str
    seed: int
    reports: list[EpochReport] = field(default_factory=list)
    final: dict | None = None  # EvalResult.as_dict() of the final student
    name: str | None = None
    source: dict | None = None
    config: dict | None = None
    timing: dict = field(default_factory=dict)
    artifact_version: str = __version__

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["reports"] = [r.as_dict() for r in self.reports]
        return {"format": SUMMARY_FORMAT, "version": SUMMARY_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunSummary":
        if not isinstance(d, dict) or d.get("format") != SUMMARY_FORMAT:
            raise SchemaError("not a run summary")
        if d.get("version") != SUMMARY_VERSION:
            raise SchemaError(f"unsupported summary version {d.get('version')!r}")
        body = {k: v for k, v in d.items() if k not in ("format", "version")}
        try:
            body["reports"] = [EpochReport.from_dict(r) for r in body.get("reports", [])]
            return cls(**body)
        except TypeError as exc:
            raise SchemaError(f"malformed run summary: {exc}") from None

    def without_timing(self) -> dict[str, Any]:
        """Summary dict with every wall-clock field removed, for equality checks."""
        d = self.to_dict()
        d.pop("timing", None)
        for r in d["reports"]:
            r.pop("wall_clock", None)
        return d


def write_summary(path, summary: RunSummary) -> None:
    Path(path).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_summary(path) -> RunSummary:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"summary is not valid JSON: {exc.msg}", exc.lineno) from None
    return RunSummary.from_dict(data)


# ----------------------------------------------------------------------------
# delimited tables
# ----------------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metric_row(r: EpochReport) -> dict[str, Any]:
    m = r.metrics or {}
    losses = r.losses
    return {
        "epoch": r.epoch, "os_star": m.get("os_star"), "unk": m.get("unk"), "hos": m.get("hos"),
        "loss_total": losses["total"], "loss_ce_known": losses["ce_known"],
        "loss_ce_unknown": losses["ce_unknown"], "loss_im_ent": losses["im_ent"],
        "loss_im_div": losses["im_div"], "loss_triplet": losses["triplet"],
        "loss_consistency": losses["consistency"], "n_known": r.n_known, "n_unknown": r.n_unknown,
        "gamma": r.gamma, "m": r.m, "zeta2": r.zeta2, "lr": r.lr, "degenerate": r.degenerate,
        "separation_balanced_acc": r.separation_balanced_acc,
    }


def format_metrics_csv(reports: list[EpochReport]) -> str:
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in reports:
        row = metric_row(r)
        w.writerow([_cell(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def write_metrics_csv(path, reports: list[EpochReport]) -> None:
    Path(path).write_text(format_metrics_csv(reports), encoding="utf-8")


def _read_table(path, header_line: str, columns: list[str]) -> list[dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != header_line:
        raise ParseError(f"expected first line {header_line!r}", 1)
    reader = csv.reader(lines[1:])
    head = next(reader, None)
    if head != columns:
        raise ParseError(f"unexpected columns {head}", 2)
    rows = []
    for lineno, fields in enumerate(reader, start=3):
        if len(fields) != len(columns):
            raise ParseError(f"expected {len(columns)} fields, found {len(fields)}", lineno)
        rows.append(dict(zip(columns, fields)))
    return rows


def read_metrics_csv(path) -> list[dict[str, float | int | None]]:
    out = []
    for row in _read_table(path, METRICS_HEADER, METRIC_COLUMNS):
        parsed: dict[str, float | int | None] = {}
        for k, v in row.items():
            if v == "":
                parsed[k] = None
            elif k in ("epoch", "n_known", "n_unknown", "degenerate"):
                parsed[k] = int(v)
            else:
                parsed[k] = float(v)
        out.append(parsed)
    return out


def format_sweep_table(rows: list[dict[str, Any]]) -> str:
    buf = io.StringIO()
    buf.write(SWEEP_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def read_sweep_table(path) -> list[dict[str, Any]]:
    out = []
    for row in _read_table(path, SWEEP_HEADER, SWEEP_COLUMNS):
        for k in ("os_star", "unk", "hos"):
            row[k] = None if row[k] == "" else float(row[k])
        out.append(row)
    return out


# ----------------------------------------------------------------------------
# human-readable output
# ----------------------------------------------------------------------------

def pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100.0 * v:.1f}"


def sparkline(values: list[float | None]) -> str:
    """One glyph per value on a fixed 0..1 scale; missing values print as a space."""
    out = []
    for v in values:
        if v is None or not math.isfinite(v):
            out.append(" ")
        else:
            out.append(SPARK[min(int(max(v, 0.0) * len(SPARK)), len(SPARK) - 1)])
    return "".join(out)


def render_report(summary: RunSummary) -> str:
    lines = [f"run {summary.name or summary.ablation_id}  ablation {summary.ablation_id}  "
             f"seed {summary.seed}  config {summary.config_hash}  sfosda {summary.artifact_version}"]
    if summary.source:
        lines.append("source  " + "  ".join(f"{k} {pct(v)}" for k, v in sorted(summary.source.items())))
    f = summary.final
    if f is not None:
        lines.append(f"final  OS* {pct(f.get('os_star'))}  UNK {pct(f.get('unk'))}  HOS {pct(f.get('hos'))}")
    if not summary.reports:
        lines.append("no epochs recorded")
        return "\n".join(lines) + "\n"
    last = summary.reports[-1]
    g = last.gmm
    lines.append(
        f"separation (epoch {last.epoch})  known {last.n_known}  unknown {last.n_unknown}  "
        f"gmm means {g['mu_low']:.4f}/{g['mu_high']:.4f}" + ("  degenerate" if last.degenerate else ""))
    sep_acc = [r.separation_balanced_acc for r in summary.reports if r.separation_balanced_acc is not None]
    if sep_acc:
        lines.append(f"separation balanced accuracy  first {pct(sep_acc[0])}  last {pct(sep_acc[-1])}")
    hos_trace = [None if r.metrics is None else r.metrics.get("hos") for r in summary.reports]
    if any(v is not None for v in hos_trace):
        seen = [v for v in hos_trace if v is not None]
        lines.append(f"HOS by epoch  |{sparkline(hos_trace)}|  peak {pct(max(seen))}  last {pct(seen[-1])}")
    lines.append(f"gamma {last.gamma:.4f}  zeta2 {last.zeta2:.4f}  lr {last.lr:.6f}")
    return "\n".join(lines) + "\n"
