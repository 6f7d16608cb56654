"""Editing metrics, reports, and parameter sweeps."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
import json
import math
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .data import Dataset, SampleSet, harvest_anchor_set
from .editor import EditConfig, SequentialState, build_projection_cache, edit_batch
from .errors import ConfigError, FormatError
from .model import TinyViT, predict
from .tracing import TraceResult, select_layers

REPORT_SCHEMA = "xedit.report/1"
SWEEP_AXES = ("top_k_layers", "target_steps", "anchor_size")
SWEEP_HEADER = ("value", "fix_ratio", "delta_acc_pp")


def evaluate_accuracy(model: TinyViT, dataset, batch: int = 256) -> float:
    n = len(dataset.labels)
    if n == 0:
        raise ConfigError("cannot evaluate accuracy on an empty dataset")
    correct = 0
    for i in range(0, n, batch):
        pred = predict(model, dataset.images[i : i + batch])[0]
        correct += int(np.sum(pred == dataset.labels[i : i + batch]))
    return correct / n


@dataclass
class MetricsReport:
    method: str
    acc_before: float
    acc_after: float
    delta_acc_pp: float
    n_corrected: int
    n_edits: int
    fix_ratio: float
    dpe: float
    no_fix: bool
    edit_time_s_per_sample: float
    edit_time_s_total: float
    includes_tracing: bool = False
    anchor_agreement: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def dpe_rounded(self) -> float:
        return round_half_up(self.dpe, 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dpe_rounded"] = self.dpe_rounded
        return d


def round_half_up(x: float, digits: int) -> float:
    """Decimal rounding as printed in tables (0.025 -> 0.03), immune to binary ties."""
    scale = 10**digits
    return math.floor(x * scale + 0.5 + 1e-9) / scale


def drop_per_edit(delta_acc_pp: float, n_corrected: int) -> tuple[float, bool]:
    """``(dpe, no_fix)``; with nothing corrected the ratio is undefined and reported as 0."""
    if n_corrected <= 0:
        return 0.0, True
    return max(0.0, delta_acc_pp / n_corrected), False


def compute_report(method: str, acc_before: float, acc_after: float, n_corrected: int, n_edits: int,
                   seconds: float, includes_tracing: bool = False, anchor_agreement: float | None = None,
                   config: dict | None = None) -> MetricsReport:
    if n_edits < 0 or not 0 <= n_corrected <= max(n_edits, 0):
        raise ConfigError(f"inconsistent counts: {n_corrected} corrected of {n_edits}")
    delta = (acc_before - acc_after) * 100.0
    dpe, no_fix = drop_per_edit(delta, n_corrected)
    return MetricsReport(
        method=method,
        acc_before=acc_before,
        acc_after=acc_after,
        delta_acc_pp=delta,
        n_corrected=n_corrected,
        n_edits=n_edits,
        fix_ratio=n_corrected / n_edits if n_edits else 0.0,
        dpe=dpe,
        no_fix=no_fix,
        edit_time_s_per_sample=seconds / n_edits if n_edits else 0.0,
        edit_time_s_total=seconds,
        includes_tracing=includes_tracing,
        anchor_agreement=anchor_agreement,
        config=dict(config or {}),
    )


def report_for_model(method: str, base: TinyViT, edited: TinyViT, test: Dataset, edits: SampleSet,
                     seconds: float, anchors: SampleSet | None = None, **kw) -> MetricsReport:
    """Evaluate ``edited`` against ``base`` on the test split, the edit set, and optionally the anchors."""
    n_fixed = int(np.sum(predict(edited, edits.images)[0] == edits.labels)) if len(edits) else 0
    agreement = None
    if anchors is not None and len(anchors):
        agreement = float(np.mean(predict(edited, anchors.images)[0] == predict(base, anchors.images)[0]))
    return compute_report(method, evaluate_accuracy(base, test), evaluate_accuracy(edited, test), n_fixed,
                          len(edits), seconds, anchor_agreement=agreement, **kw)


def save_reports(path, reports: list[MetricsReport], meta: dict | None = None) -> None:
    doc = {"schema": REPORT_SCHEMA, "meta": meta or {}, "reports": [r.to_dict() for r in reports]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_reports(path) -> list[MetricsReport]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"{path}: expected schema {REPORT_SCHEMA}, found {doc.get('schema')!r}")
    out = []
    for d in doc["reports"]:
        d = dict(d)
        d.pop("dpe_rounded", None)
        out.append(MetricsReport(**d))
    return out


def format_table(reports: list[MetricsReport]) -> str:
    """Aligned text with one row per method."""
    head = ["Method", "dACC (pp)", "Fix Ratio", "DPE", "Sec/Sample", "Anchor agr."]
    rows = []
    for r in reports:
        arrow = "down" if r.delta_acc_pp > 0 else "up" if r.delta_acc_pp < 0 else ""
        agr = "-" if r.anchor_agreement is None else f"{100 * r.anchor_agreement:.1f}%"
        dpe = f"{r.dpe_rounded:.2f}" + (" (no fix)" if r.no_fix else "")
        rows.append([r.method, f"{arrow} {abs(r.delta_acc_pp):.2f}".strip(),
                     f"{100 * r.fix_ratio:.2f}% ({r.n_corrected}/{r.n_edits})", dpe,
                     f"{r.edit_time_s_per_sample:.4f}", agr])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# sweeps


def spearman(x, y) -> float:
    """Rank correlation; 0.0 when either series is constant (no trend to report)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ConfigError("series differ in length")
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(spearmanr(x, y)[0])


@dataclass
class SweepRow:
    value: float
    fix_ratio: float
    delta_acc_pp: float


def sweep(model: TinyViT, edits: SampleSet, traces: list[TraceResult], train: Dataset, test: Dataset,
          axis: str, values, config: EditConfig = EditConfig(), n_anchors: int = 500, anchor_seed: int = 0,
          n_layers: int | None = None) -> list[SweepRow]:
    """One independent edit of the same base model per value of ``axis``."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    n_layers = n_layers or model.config.n_layers
    layers = range(n_layers)
    acc_before = evaluate_accuracy(model, test)
    shared = None
    if axis != "anchor_size":
        anchors = harvest_anchor_set(model, train, n_anchors, anchor_seed)
        shared = build_projection_cache(model, anchors, layers, config.edit_target, config.eig_threshold)
    rows = []
    for v in values:
        cfg, trs, cache = config, traces, shared
        if axis == "top_k_layers":
            cfg = replace(config, top_k=int(v))
            trs = [replace(t, selected_layers=select_layers(t.ie_per_layer, int(v))) for t in traces]
        elif axis == "target_steps":
            cfg = replace(config, target_steps=int(v))
        else:
            anchors = harvest_anchor_set(model, train, int(v), anchor_seed)
            cache = build_projection_cache(model, anchors, layers, config.edit_target, config.eig_threshold)
        edited, out = edit_batch(model, edits, trs, cache, SequentialState(), cfg)
        fix = out.n_corrected / len(edits) if len(edits) else 0.0
        rows.append(SweepRow(float(v), fix, (acc_before - evaluate_accuracy(edited, test)) * 100.0))
    return rows


def write_sweep_csv(path, rows: list[SweepRow], axis: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if axis:
            fh.write(f"# axis={axis}\n")
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([repr(r.value), repr(r.fix_ratio), repr(r.delta_acc_pp)])


def read_sweep_csv(path) -> tuple[str | None, list[SweepRow]]:
    axis = None
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].startswith("# axis="):
        axis = lines.pop(0)[len("# axis="):]
    reader = csv.reader(lines)
    header = next(reader, None)
    if tuple(header or ()) != SWEEP_HEADER:
        raise FormatError(f"{path}: expected header {','.join(SWEEP_HEADER)}")
    return axis, [SweepRow(float(a), float(b), float(c)) for a, b, c in reader]
