"""Command-line front end: ``tfczsl {gen-data,train,eval,report}``.

Exit codes: 0 ok, 2 bad config or usage, 3 bad dataset / missing checkpoint,
4 training failure, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, load_config
from .data import save_dataset, synth_dataset
from .errors import CheckpointError, ConfigError, DataError, TfczslError, TrainingError
from .evaluation import CzslReport
from . import experiment

log = logging.getLogger("tfczsl")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3, 4
REPORT_FILE = "report.csv"


def _exit_code(exc: TfczslError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, CheckpointError)):
        return EXIT_DATA
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    return EXIT_OTHER


def _config(args) -> ExperimentConfig:
    overrides = list(args.override or [])
    if getattr(args, "dataset", None):
        overrides.append(f"dataset={args.dataset}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> Path:
    cfg = _config(args)
    ds = synth_dataset(**cfg.synth.model_dump())
    try:
        out = save_dataset(ds, args.out, encoding=args.encoding)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc.strerror}") from None
    print(f"wrote {len(ds.labels)} samples, {len(ds.seen_classes)} seen / "
          f"{len(ds.unseen_classes)} unseen classes to {out}")
    return out


def cmd_train(args) -> Path:
    cfg = _config(args)
    result = experiment.train(cfg)
    run_dir = experiment.write_run(args.out, cfg, result)
    tr = result.trainer
    print(f"{cfg.run_name}: {tr.steps} optimizer steps, {len(tr.checkpoints)} checkpoint(s) -> {run_dir}")
    if args.eval:
        _evaluate_run(run_dir)
    return run_dir


def _evaluate_run(run_dir: Path, out: Optional[Path] = None) -> CzslReport:
    cfg, checkpoints = experiment.read_run(run_dir)
    if not checkpoints:
        raise CheckpointError(f"{run_dir} lists no checkpoints")
    ds = experiment.build_dataset(cfg)
    report = experiment.evaluate(cfg, checkpoints, ds)
    report.to_csv(out or Path(run_dir) / REPORT_FILE)
    print(f"{cfg.run_name}: {report.summary_line()}")
    return report


def cmd_eval(args) -> CzslReport:
    return _evaluate_run(Path(args.run_dir), Path(args.out) if args.out else None)


def _lookup(tree: dict, dotted: str):
    node = tree
    for k in dotted.split("."):
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"sweep key {dotted!r} not in run config")
        node = node[k]
    return node


def _load_runs(run_dirs: Sequence[str]) -> list[dict]:
    runs = []
    for d in run_dirs:
        d = Path(d)
        meta_path, rep_path = d / "metadata.json", d / REPORT_FILE
        if not meta_path.exists():
            continue
        if not rep_path.exists():
            _evaluate_run(d)
        meta = json.loads(meta_path.read_text())
        runs.append({"dir": d, "name": meta["name"], "config": meta["config"],
                     "report": CzslReport.from_csv(rep_path)})
    if not runs:
        raise DataError("no completed runs found")
    return runs


def _headline_values(rep: CzslReport) -> dict:
    src = rep.rows[-1] if rep.protocol == "task_free" else rep.aggregates
    return {k: src[k] for k in rep.columns[1:]}


def _pct(v: float) -> str:
    return "-" if v != v else f"{100 * v:.2f}"


def _write_tables(runs: list[dict], out: Path) -> None:
    keys = sorted({k for r in runs for k in r["report"].columns[1:]},
                  key=lambda k: ("SA", "UA", "H", "mSA", "mUA", "mH").index(k))
    header = ["run", "mode", "seed", *keys]
    lines = []
    for r in runs:
        vals = _headline_values(r["report"])
        lines.append([r["name"], r["config"]["trainer"]["mode"], r["config"]["seed"],
                      *[vals.get(k, float("nan")) for k in keys]])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[*l[:3], *map(repr, l[3:])] for l in lines])
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for l in lines:
        md.append("| " + " | ".join([str(v) for v in l[:3]] + [_pct(v) for v in l[3:]]) + " |")
    (out / "summary.md").write_text("\n".join(md) + "\n")


def _plot(series: dict, xlabel: str, ylabel: str, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "tfczsl"  # stable element ids
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, pts in series.items():
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(args) -> list[Path]:
    runs = _load_runs(args.run_dirs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_tables(runs, out)
    written = [out / "summary.md", out / "summary.csv"]

    agnostic = [r for r in runs if r["report"].protocol == "task_agnostic"]
    if agnostic:
        series = {}
        for r in agnostic:
            # mH is undefined after the last task (nothing left unseen)
            series[r["name"]] = [(int(row["task"]), row["mH"]) for row in r["report"].rows[:-1]]
        _plot(series, "task", "mH (%)", out / "tasks_mH.svg")
        written.append(out / "tasks_mH.svg")

    free = [r for r in runs if r["report"].protocol == "task_free"]
    if free:
        series = defaultdict(list)
        for i, r in enumerate(free):
            x = _lookup(r["config"], args.sweep) if args.sweep else i
            label = r["config"]["trainer"]["mode"] if args.sweep else r["name"]
            series[label].append((x, r["report"].rows[-1]["H"]))
        _plot(dict(series), args.sweep or "run", "H (%)", out / "H.svg")
        written.append(out / "H.svg")
    for p in written:
        print(p)
    return written


# -- entry point ------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (defaults used when omitted)")
    p.add_argument("--override", "-o", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. trainer.epochs=5; repeatable")
    p.add_argument("--seed", type=int, help="shorthand for --override seed=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tfczsl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--encoding", choices=("npy", "csv"), default="npy")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one run and write its run directory")
    _add_config_flags(p)
    p.add_argument("--dataset", help="dataset directory (otherwise synthesized from config)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--eval", action="store_true", help="also evaluate and write report.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run directory's checkpoints")
    p.add_argument("run_dir")
    p.add_argument("--out", help=f"report CSV path (default RUN_DIR/{REPORT_FILE})")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summary tables and SVG plots over runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", help="config key for the x axis of task-free runs, "
                                   "e.g. trainer.memory_per_class")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TfczslError as exc:
        print(f"tfczsl {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
