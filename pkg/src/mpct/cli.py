"""Command line front end: ``run``, ``eval`` and ``compare``.

Exit status is 0 on success, 2 for invalid configuration or unusable
inputs and 1 for failures during computation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .config import ExperimentConfig, load_config
from .errors import CheckpointError, ConfigError, DataError, MPCTError
from .metrics import Classifier, evaluate, train_eval_classifier
from .models import checkpoint_load, checkpoint_save
from .training import LOSS_FIELDS, Trainer, default_eval_plan, train

CSV_FORMAT_VERSION = 1
BASE_COLUMNS = ("step", "epoch", "lr") + LOSS_FIELDS
# metric families where a larger value is better; for the rest lower wins
HIGHER_IS_BETTER = ("psnr",)


@dataclass
class RunReport:
    config: str
    series: list[dict]
    final: dict
    checkpoints: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    csv_format: int = CSV_FORMAT_VERSION

    def missing_artifacts(self, root: Path) -> list[str]:
        return [p for p in self.checkpoints if not (root / p).exists()]

    def to_text(self) -> str:
        lines = [f"steps: {self.final.get('step', 0)}", "final metrics:"]
        lines += [f"  {k} = {_fmt(v)}" for k, v in sorted(self.final.items()) if k != "step"]
        lines.append("checkpoints:")
        lines += [f"  {p}" for p in self.checkpoints] or ["  (none)"]
        lines.append("timings (s):")
        lines += [f"  {k} = {v:.3f}" for k, v in sorted(self.timings.items())]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_series_csv(path: Path, rows: Sequence[dict]) -> list[str]:
    """Fixed leading columns, then metric keys in sorted order."""
    metric_keys = sorted({k for r in rows for k in r} - set(BASE_COLUMNS))
    header = list(BASE_COLUMNS) + metric_keys
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in header])
    path.write_text(buf.getvalue())
    return header


def write_curves_csv(path: Path, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "metric", "value"])
    for r in rows:
        for k in sorted(set(r) - {"step", "epoch"}):
            if r[k] is not None:
                w.writerow([r["step"], k, _fmt(r[k])])
    path.write_text(buf.getvalue())


def write_metrics_report(path: Path, step: int, values: dict) -> None:
    keys = sorted(values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + keys)
    w.writerow([step] + [_fmt(values[k]) for k in keys])
    path.write_text(buf.getvalue())


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive ownership of a run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {run_dir} is locked by another run "
                          f"(remove {lock} if that run is gone)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def build_classifier(cfg: ExperimentConfig, train_sets) -> Classifier | None:
    if not {"cls_error", "fid"} & set(cfg.experiment.metrics):
        return None
    task = {d: train_sets[d] for d in cfg.training.task_domains}
    clf = train_eval_classifier(task, cfg.training.discriminator_spec(cfg.dataset.channels),
                                seed=cfg.training.seed, steps=cfg.experiment.classifier_steps)
    clf.require_gate()
    return clf


def run_experiment(cfg: ExperimentConfig, log=None) -> RunReport:
    """Train from a validated config and write every artifact of the run."""
    run_dir = cfg.run_dir
    timings = {}
    with run_lock(run_dir):
        t0 = time.perf_counter()
        (run_dir / "config.snapshot").write_text(cfg.snapshot_text())
        train_sets, eval_sets = cfg.build_datasets()
        classifier = build_classifier(cfg, train_sets)
        timings["setup"] = time.perf_counter() - t0
        ck_dir = run_dir / "checkpoints"
        checkpoints: list[str] = []
        trainer = Trainer(cfg.training, train_sets)

        def on_eval(tr: Trainer, row: dict):
            final = tr.step == tr.total_steps
            if tr.step > 0 and (tr.step % cfg.experiment.checkpoint_every == 0 or final):
                path = ck_dir / f"step-{tr.step:06d}.mpct"
                checkpoint_save(path, tr.bank, tr.discs, tr.image_shape, extra={"step": tr.step})
                tr.last_checkpoint = str(path)
                checkpoints.append(str(path.relative_to(run_dir)))
            if log:
                shown = {k: row[k] for k in ("gap_mean", "psnr_mean", "cls_error_mean", "fid_mean") if k in row}
                log(f"step {tr.step}: " + ", ".join(f"{k}={v:.4f}" for k, v in shown.items()))

        t1 = time.perf_counter()
        trainer, history = train(cfg.training, train_sets, eval_sets, metrics=cfg.experiment.metrics,
                                 classifier=classifier, on_eval=on_eval, trainer=trainer)
        timings["train"] = time.perf_counter() - t1
        write_series_csv(run_dir / "metrics.csv", history.rows)
        write_curves_csv(run_dir / "curves.csv", history.rows)
        final = {"step": history.final.step, **history.final.values}
        report = RunReport(cfg.snapshot_text(), history.rows, final, checkpoints, timings)
        missing = report.missing_artifacts(run_dir)
        if missing:
            raise MPCTError(f"artifacts missing at report time: {missing}")
        (run_dir / "report.json").write_text(json.dumps(asdict(report), indent=1, sort_keys=True,
                                                        default=_json_default))
        (run_dir / "report.txt").write_text(report.to_text())
    return report


def _json_default(v):
    return repr(v)


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint, metrics: Sequence[str] | None = None):
    """Evaluate a stored checkpoint on the config's held-out sets."""
    ck = checkpoint_load(checkpoint, n_domains=len(cfg.training.all_domains))
    if list(ck.bank.domains) != cfg.training.all_domains:
        raise ConfigError(f"checkpoint domains {list(ck.bank.domains)} differ from config {cfg.training.all_domains}")
    if tuple(ck.image_shape) != cfg.dataset.image_shape:
        raise ConfigError(f"checkpoint image shape {tuple(ck.image_shape)} differs from config {cfg.dataset.image_shape}")
    metrics = tuple(metrics or cfg.experiment.metrics)
    train_sets, eval_sets = cfg.build_datasets()
    cfg.experiment.metrics = metrics
    classifier = build_classifier(cfg, train_sets)
    pairs, triples = default_eval_plan(cfg.training)
    step = int(ck.extra.get("step", 0))
    return evaluate(ck.bank, eval_sets, step=step, pairs=pairs, triples=triples, metrics=metrics,
                    classifier=classifier)


def load_report(path) -> RunReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read run report {path}: {exc}") from None
    return RunReport(data["config"], data["series"], data["final"], data.get("checkpoints", []), data.get("timings", {}))


def compare_reports(a: RunReport, b: RunReport) -> tuple[list[tuple], list[str]]:
    """Rows (metric, a, b, delta) over shared final metrics; delta > 0 means
    the second report is better. Also returns the metrics only one side has."""
    ka = set(a.final) - {"step"}
    kb = set(b.final) - {"step"}
    shared = sorted(ka & kb)
    if not shared:
        raise ConfigError("reports share no metrics")
    rows = []
    for k in shared:
        va, vb = float(a.final[k]), float(b.final[k])
        higher = k.split("/")[0].split("_mean")[0] in HIGHER_IS_BETTER
        delta = (vb - va) if higher else (va - vb)
        rows.append((k, va, vb, 0.0 if va == vb else delta))
    return rows, sorted(ka ^ kb)


# ---------------------------------------------------------------- commands


def cmd_run(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"training.seed={args.seed}")
    if args.ablate_consistency:
        overrides.append("training.consistency_enabled=false")
    if args.out:
        overrides.append(f"experiment.out={args.out}")
    cfg = load_config(args.config, overrides)
    report = run_experiment(cfg, log=lambda m: print(m, file=sys.stderr))
    print(report.to_text(), end="")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
    cfg = load_config(args.config, list(args.set or []))
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else None
    try:
        report = evaluate_checkpoint(cfg, args.checkpoint, metrics)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from None
    if args.out:
        write_metrics_report(Path(args.out), report.step, report.values)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = sorted(report.values)
        w.writerow(["step"] + keys)
        w.writerow([report.step] + [_fmt(report.values[k]) for k in keys])
        print(buf.getvalue(), end="")
    return 0


def cmd_compare(args) -> int:
    rows, only_one = compare_reports(load_report(args.report_a), load_report(args.report_b))
    for k in only_one:
        print(f"warning: metric {k} present in only one report; skipped", file=sys.stderr)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "a", "b", "delta"])
    for r in rows:
        w.writerow([r[0]] + [_fmt(v) for v in r[1:]])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    width = max(len(r[0]) for r in rows)
    print(f"{'metric'.ljust(width)}  {'a':>12}  {'b':>12}  {'delta':>12}")
    for k, va, vb, d in rows:
        print(f"{k.ljust(width)}  {va:12.6g}  {vb:12.6g}  {d:+12.6g}")
    print("(delta > 0: second report is better)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpct", description="Multi-path consistent image translation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train from a config file")
    r.add_argument("--config", required=True, help="experiment config (INI sections)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    r.add_argument("--ablate-consistency", action="store_true", help="train with the consistency term off")
    r.add_argument("--out", help="output root directory")
    r.add_argument("--seed", type=int, help="training seed")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint without training")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True, help="config providing the dataset section")
    e.add_argument("--metrics", help="comma separated subset of gap,psnr,cls_error,fid")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--out", help="write the metrics CSV here instead of stdout")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="side-by-side deltas of two run reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--out", help="also write the delta table as CSV")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("MPCT_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            try:
                limit = int(threads)
            except ValueError:
                raise ConfigError(f"MPCT_THREADS must be an integer, got {threads!r}") from None
            with threadpool_limits(limits=limit):
                return args.func(args)
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
