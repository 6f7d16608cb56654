"""Command-line entry point: ``xedit <command> [options]``.

Every command reads and writes files under ``--workdir``:

    train.xeds val.xeds test.xeds      gen-data
    base.xeck                          train
    traces.json                        trace (edit set ids + per-sample tracing)
    edited.xeck edit_outcome.json      edit (plus projection.xeck, sequential.xeck)
    baseline-<method>.xeck/.json       baseline
    report.json report.txt report.png  eval
    sweep-<axis>.csv sweep-<axis>.png  sweep

Exit codes: 0 success, 1 usage or configuration error, 2 missing or unreadable
artifact, 3 numerical failure.
"""

from __future__ import annotations

import argparse
from dataclasses import replace
import json
import logging
from pathlib import Path
import sys
import time
import traceback

import numpy as np

from . import config as cfgmod
from .checkpoint import load_model, save_model
from .config import RunConfig
from .data import SPLITS, Dataset, SampleSet, gen_dataset, harvest_anchor_set, harvest_edit_set, load_dataset, save_dataset, split
from .editor import ProjectionCache, SequentialState, build_projection_cache, edit_batch, edit_sequential
from .errors import ConfigError, FormatError, MissingArtifactError, NumericalError, XEditError
from .evaluation import (SWEEP_AXES, format_table, report_for_model, save_reports, spearman, sweep,
                         write_sweep_csv)
from .model import init_model, predict
from .tracing import load_traces, save_traces, select_layers, trace_set
from .trainer import finetune_baseline, retrain_baseline, train

log = logging.getLogger("xedit")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
BASELINE_METHODS = ("finetune", "finetune-l2", "retrain")
METHOD_TAGS = {"finetune": "FineTune", "finetune-l2": "FineTune+L2", "retrain": "ReTrain"}
_DEFAULTS = RunConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _opt(p, flag: str, targets, type_, help_: str):
    """Register a flag overriding the dotted setting(s) ``targets`` for this subcommand only."""
    targets = (targets,) if isinstance(targets, str) else tuple(targets)
    dest = flag.lstrip("-").replace("-", "_")
    table = p.get_default("overrides") or {}
    table[dest] = targets
    p.set_defaults(overrides=table)
    default = cfgmod.lookup(_DEFAULTS, targets[0])
    p.add_argument(flag, dest=dest, type=type_, default=None, help=f"{help_} (default: {default})")


def _common(p):
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--workdir", default=None, help=f"artifact directory (default: {_DEFAULTS.workdir})")
    p.add_argument("--seed", type=int, default=None, help=f"seed for every stage (default: {_DEFAULTS.seed})")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _data_opts(p):
    _opt(p, "--n-per-class", "data.n_per_class", int, "samples generated per class")
    _opt(p, "--n-classes", "data.synthetic.n_classes", int, "number of bar orientations")
    _opt(p, "--image-size", "data.synthetic.image_size", int, "image side in pixels")
    _opt(p, "--pixel-noise", "data.synthetic.pixel_noise_sigma", float, "Gaussian pixel noise sigma")
    _opt(p, "--jitter", "data.synthetic.shape_jitter", float, "angle jitter, fraction of the class spacing")


def _train_opts(p):
    _opt(p, "--epochs", "train.epochs", int, "training epochs")
    _opt(p, "--train-lr", "train.learning_rate", float, "Adam learning rate")
    _opt(p, "--batch-size", "train.batch_size", int, "minibatch size")
    _opt(p, "--layers", "model.n_layers", int, "transformer blocks")
    _opt(p, "--d-model", "model.d_model", int, "residual width")


def _trace_opts(p):
    _opt(p, "--max-edits", "harvest.max_edits", int, "cap on misclassified validation samples to edit")
    _opt(p, "--noise-sigma", "trace.noise_sigma", float, "embedding noise for causal tracing")
    _opt(p, "--runs", "trace.n_runs", int, "corrupted runs per sample")
    _opt(p, "--top-k", ("trace.top_k", "edit.top_k"), int, "layers edited per sample")


def _edit_opts(p):
    _opt(p, "--anchors", "harvest.n_anchors", int, "anchor samples (capped by availability; 0 disables protection)")
    _opt(p, "--eig-threshold", "edit.eig_threshold", float, "eigenvalue cut for the protected subspace")
    _opt(p, "--steps", "edit.target_steps", int, "target optimisation steps")
    _opt(p, "--lr", "edit.target_lr", float, "target optimisation learning rate")
    _opt(p, "--edit-target", "edit.edit_target", str, "MLP matrix to edit: fc2 or fc1")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xedit", description="Null-space constrained editing of a small vision transformer.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="render the synthetic dataset and write train/val/test files")
    _common(p)
    _data_opts(p)

    p = sub.add_parser("train", help="train the base model")
    _common(p)
    _train_opts(p)

    p = sub.add_parser("trace", help="harvest the edit set and run causal tracing on it")
    _common(p)
    _trace_opts(p)

    p = sub.add_parser("edit", help="apply the closed-form null-space edit")
    _common(p)
    _trace_opts(p)
    _edit_opts(p)
    p.add_argument("--retrace", action="store_true", help="trace again instead of reading traces.json")
    p.add_argument("--per-sample", action="store_true", help="one edit batch per sample (sequential mode)")
    p.add_argument("--resume", action="store_true",
                   help="continue from edited.xeck and sequential.xeck, protecting earlier edits")

    p = sub.add_parser("baseline", help="run a gradient-based editing baseline")
    _common(p)
    p.add_argument("--method", choices=BASELINE_METHODS, default="finetune", help="baseline (default: finetune)")
    _opt(p, "--epochs", "baseline.train.epochs", int, "baseline epochs")
    _opt(p, "--lr", "baseline.train.learning_rate", float, "baseline Adam learning rate")
    _opt(p, "--batch-size", "baseline.train.batch_size", int, "baseline minibatch size")
    _opt(p, "--l2-lambda", "baseline.l2_lambda", float, "FineTune+L2 penalty weight")

    p = sub.add_parser("eval", help="compare edited checkpoints against the base model")
    _common(p)
    _opt(p, "--anchors", "harvest.n_anchors", int, "anchor samples used for the agreement column")
    p.add_argument("--include-tracing", action="store_true", help="add tracing time to the X-Edit time")

    p = sub.add_parser("sweep", help="vary one editing parameter and record fix ratio and test drop")
    _common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True, help="parameter to vary")
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 1,2,3,4")
    _edit_opts(p)

    p = sub.add_parser("run-all", help="gen-data, train, trace, edit, baselines and eval in one go")
    _common(p)
    _data_opts(p)
    _train_opts(p)
    _trace_opts(p)
    _edit_opts(p)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "workdir", None):
        cfg = replace(cfg, workdir=args.workdir)
    for dest, targets in (getattr(args, "overrides", None) or {}).items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        for t in targets:
            cfg = cfgmod.override(cfg, t, value)
    # rebuilding through the loader re-runs every section's validation
    return cfgmod.from_dict(cfg.to_dict())


# ---------------------------------------------------------------------------
# artifacts


def _wd(cfg: RunConfig) -> Path:
    return Path(cfg.workdir)


def _need_dir(path: Path) -> Path:
    if not path.is_dir():
        raise MissingArtifactError(f"output directory does not exist: {path}")
    return path


def _load_splits(cfg: RunConfig) -> dict[str, Dataset]:
    return {s: load_dataset(_wd(cfg) / f"{s}.xeds", s) for s in SPLITS}


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifactError(f"not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON") from exc


def _edit_set(cfg: RunConfig, val: Dataset):
    """The edit samples recorded by ``trace`` and their trace results."""
    path = _wd(cfg) / "traces.json"
    ids = np.asarray(_read_json(path)["meta"]["edit_ids"], dtype=np.int64)
    if len(ids) and (ids.min() < 0 or ids.max() >= len(val)):
        raise FormatError(f"{path}: edit ids do not match {len(val)} validation samples")
    edits = SampleSet(val.images[ids], val.labels[ids], val.split, val.ids[ids])
    return edits, load_traces(path)


def _anchors(cfg: RunConfig, model, train_set: Dataset):
    n_correct = int(np.sum(_predict_all(model, train_set) == train_set.labels))
    k = min(cfg.harvest.n_anchors, n_correct)
    if k < cfg.harvest.n_anchors:
        log.warning("only %d correctly classified training samples; using %d anchors", n_correct, k)
    return harvest_anchor_set(model, train_set, k, cfg.harvest.anchor_seed)


def _predict_all(model, ds):
    return np.concatenate([predict(model, ds.images[i : i + 256])[0] for i in range(0, len(ds), 256)])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _need_dir(_wd(cfg))
    ds = gen_dataset(cfg.data.synthetic, cfg.data.n_per_class)
    parts = split(ds, cfg.data.split, cfg.data.split_seed)
    for part in parts:
        save_dataset(out / f"{part.split}.xeds", part)
    _write_json(out / "config.json", cfg.to_dict())
    print(" ".join(f"{p.split}={len(p)}" for p in parts))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    splits = _load_splits(cfg)
    model, history = train(init_model(cfg.model), splits["train"], cfg.train)
    acc = {s: float(np.mean(_predict_all(model, d) == d.labels)) for s, d in splits.items()}
    save_model(_wd(cfg) / "base.xeck", model, {"role": "base", "run_config": cfg.to_dict(),
                                                "history": history, "accuracy": acc})
    print(" ".join(f"{s}_acc={a:.4f}" for s, a in acc.items()))
    return EXIT_OK


def _trace(cfg: RunConfig, model, val: Dataset):
    edits = harvest_edit_set(model, val, cfg.harvest.max_edits)
    t0 = time.perf_counter()
    traces = trace_set(model, edits, cfg.trace)
    return edits, traces, time.perf_counter() - t0


def cmd_trace(cfg: RunConfig, args) -> int:
    model, _ = load_model(_wd(cfg) / "base.xeck")
    val = load_dataset(_wd(cfg) / "val.xeds", "val")
    edits, traces, seconds = _trace(cfg, model, val)
    meta = {"edit_ids": [int(i) for i in edits.ids], "run_config": cfg.to_dict()}
    save_traces(_wd(cfg) / "traces.json", traces, meta)
    _write_json(_wd(cfg) / "trace_timing.json", {"seconds": seconds, "n_samples": len(edits)})
    flagged = sum(t.corruption_failed for t in traces)
    print(f"edit_samples={len(edits)} corruption_flagged={flagged}")
    return EXIT_OK


def cmd_edit(cfg: RunConfig, args) -> int:
    wd = _wd(cfg)
    splits = _load_splits(cfg)
    base, _ = load_model(wd / "base.xeck")
    trace_seconds = 0.0
    if args.retrace:
        edits, traces, trace_seconds = _trace(cfg, base, splits["val"])
        save_traces(wd / "traces.json", traces, {"edit_ids": [int(i) for i in edits.ids],
                                                 "run_config": cfg.to_dict()})
    else:
        edits, traces = _edit_set(cfg, splits["val"])
        timing = wd / "trace_timing.json"
        trace_seconds = _read_json(timing)["seconds"] if timing.exists() else 0.0
    traces = [replace(t, selected_layers=select_layers(t.ie_per_layer, cfg.trace.top_k)) for t in traces]

    if args.resume:
        model, _ = load_model(wd / "edited.xeck")
        state = SequentialState.load(wd / "sequential.xeck")
        cache = ProjectionCache.load(wd / "projection.xeck")
    else:
        model, state = base, SequentialState()
        anchors = _anchors(cfg, base, splits["train"])
        cache = build_projection_cache(base, anchors, range(base.config.n_layers), cfg.edit.edit_target,
                                       cfg.edit.eig_threshold)
    run = edit_sequential if args.per_sample else edit_batch
    edited, outcome = run(model, edits, traces, cache, state, cfg.edit)

    meta = {"role": "edited", "method": "X-Edit", "run_config": cfg.to_dict()}
    save_model(wd / "edited.xeck", edited, meta)
    cache.save(wd / "projection.xeck", {"run_config": cfg.to_dict()})
    state.save(wd / "sequential.xeck")
    doc = outcome.to_dict()
    doc.update({"method": "X-Edit", "trace_seconds": trace_seconds, "per_sample": bool(args.per_sample),
                "n_edits": len(edits), "run_config": cfg.to_dict()})
    _write_json(wd / "edit_outcome.json", doc)
    print(f"corrected={outcome.n_corrected}/{len(edits)} seconds={outcome.seconds:.3f}")
    return EXIT_OK


def cmd_baseline(cfg: RunConfig, args) -> int:
    wd = _wd(cfg)
    splits = _load_splits(cfg)
    base, _ = load_model(wd / "base.xeck")
    edits, _ = _edit_set(cfg, splits["val"])
    if args.method == "retrain":
        tc = replace(cfg.train, seed=cfg.baseline.train.seed)
        model, seconds = retrain_baseline(cfg.model, splits["train"], edits, tc)
    else:
        lam = cfg.baseline.l2_lambda if args.method == "finetune-l2" else 0.0
        model, seconds = finetune_baseline(base, edits, cfg.baseline.train, lam)
    tag = METHOD_TAGS[args.method]
    save_model(wd / f"baseline-{args.method}.xeck", model, {"role": "baseline", "method": tag,
                                                             "run_config": cfg.to_dict()})
    _write_json(wd / f"baseline-{args.method}.json", {"method": tag, "seconds": seconds, "n_edits": len(edits)})
    fixed = int(np.sum(_predict_all(model, edits) == edits.labels))
    print(f"{tag}: corrected={fixed}/{len(edits)} seconds={seconds:.3f}")
    return EXIT_OK


def collect_reports(cfg: RunConfig, include_tracing: bool = False):
    wd = _wd(cfg)
    splits = _load_splits(cfg)
    base, _ = load_model(wd / "base.xeck")
    edits, _ = _edit_set(cfg, splits["val"])
    anchors = _anchors(cfg, base, splits["train"])
    candidates = [("edited.xeck", "edit_outcome.json")]
    candidates += [(f"baseline-{m}.xeck", f"baseline-{m}.json") for m in BASELINE_METHODS]
    reports = []
    for ck, side in candidates:
        if not (wd / ck).exists():
            continue
        model, meta = load_model(wd / ck)
        info = _read_json(wd / side)
        seconds = info["seconds"]
        traced = include_tracing and meta.get("method") == "X-Edit"
        if traced:
            seconds += info.get("trace_seconds", 0.0)
        reports.append(report_for_model(meta.get("method", ck), base, model, splits["test"], edits, seconds,
                                        anchors=anchors, includes_tracing=traced,
                                        config=meta.get("run_config", {})))
    if not reports:
        raise MissingArtifactError(f"no edited or baseline checkpoints in {wd}")
    return reports


def cmd_eval(cfg: RunConfig, args) -> int:
    from .plots import plot_reports

    wd = _wd(cfg)
    reports = collect_reports(cfg, args.include_tracing)
    save_reports(wd / "report.json", reports, {"run_config": cfg.to_dict()})
    table = format_table(reports)
    (wd / "report.txt").write_text(table + "\n")
    plot_reports(reports, wd / "report.png")
    print(table)
    return EXIT_OK


def _parse_values(text: str, axis: str):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values for {axis} must be comma-separated integers") from exc
    if not vals:
        raise ConfigError("--values is empty")
    return vals


def cmd_sweep(cfg: RunConfig, args) -> int:
    from .plots import plot_sweep

    wd = _wd(cfg)
    splits = _load_splits(cfg)
    base, _ = load_model(wd / "base.xeck")
    edits, traces = _edit_set(cfg, splits["val"])
    traces = [replace(t, selected_layers=select_layers(t.ie_per_layer, cfg.trace.top_k)) for t in traces]
    values = _parse_values(args.values, args.axis)
    rows = sweep(base, edits, traces, splits["train"], splits["test"], args.axis, values, cfg.edit,
                 n_anchors=cfg.harvest.n_anchors, anchor_seed=cfg.harvest.anchor_seed)
    csv_path = wd / f"sweep-{args.axis}.csv"
    write_sweep_csv(csv_path, rows, args.axis)
    plot_sweep(rows, args.axis, csv_path.with_suffix(".png"))
    print("value,fix_ratio,delta_acc_pp")
    for r in rows:
        print(f"{r.value:g},{r.fix_ratio:.4f},{r.delta_acc_pp:.4f}")
    xs = [r.value for r in rows]
    print(f"spearman(value, fix_ratio)={spearman(xs, [r.fix_ratio for r in rows]):.3f} "
          f"spearman(value, delta_acc_pp)={spearman(xs, [r.delta_acc_pp for r in rows]):.3f}")
    return EXIT_OK


def cmd_run_all(cfg: RunConfig, args) -> int:
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    for step in (cmd_gen_data, cmd_train, cmd_trace):
        step(cfg, args)
    cmd_edit(cfg, argparse.Namespace(retrace=False, per_sample=False, resume=False))
    for m in BASELINE_METHODS:
        cmd_baseline(cfg, argparse.Namespace(method=m))
    return cmd_eval(cfg, argparse.Namespace(include_tracing=False))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "trace": cmd_trace,
    "edit": cmd_edit,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "run-all": cmd_run_all,
}


def _origin(exc: BaseException) -> str:
    frames = traceback.extract_tb(exc.__traceback__)
    return Path(frames[-1].filename).stem if frames else "?"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"xedit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (MissingArtifactError, FileNotFoundError, FormatError) as exc:
        print(f"xedit: missing or unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"xedit: numerical failure in {_origin(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, XEditError) as exc:
        print(f"xedit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
