"""Command line runner.

Two subcommands: `run` executes one configured experiment (or a preset sweep)
and writes rounds.csv, summary.json and manifest.json into the output
directory; `compare` reads several run summaries and prints an aligned
accuracy table.  Relative dataset paths resolve against $FILVER_DATA_ROOT.

Exit codes: 0 ok, 2 configuration problem, 3 runtime contract violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone

from .config import (DATA_ROOT_ENV, PRESET_STRATEGY_SWEEPS, PRESETS, ExperimentConfig,
                     build_manifest, parse_config, preset_config)
from .errors import ConfigError, ContractViolation, IdxFormatError
from .federation import run_experiment


def _fmt(x) -> str:
    # repr of a Python float is the shortest round-trip form, so identical
    # runs produce byte-identical rows
    return repr(float(x))


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def execute_run(cfg: ExperimentConfig, *, resume_from=None, stop_after_round=None,
                quiet=False) -> dict:
    """Run one experiment to completion (or to stop_after_round) and write
    the report files.  Returns the summary dict."""
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.time()

    tasks = cfg.build_tasks()
    fl = cfg.fl_config()
    strategy = cfg.strategy_config()
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)

    checkpoint_every = cfg["checkpoint_every"]
    checkpoint_dir = None
    if checkpoint_every > 0 or resume_from is not None or stop_after_round is not None:
        checkpoint_dir = os.path.join(out_dir, "checkpoint")

    rounds_path = os.path.join(out_dir, "rounds.csv")
    resuming = resume_from is not None
    csv_file = open(rounds_path, "a" if resuming else "w")
    header = (["round", "task"]
              + [f"acc_task_{i + 1}" for i in range(tasks.n_tasks)]
              + ["mean_loss", "n_clients"])
    if not resuming:
        csv_file.write(",".join(header) + "\n")

    def on_round(report):
        row = ([str(report.round_id + 1), str(report.task_id + 1)]
               + [_fmt(a) for a in report.accuracies]
               + [_fmt(report.mean_loss), str(len(report.participants))])
        csv_file.write(",".join(row) + "\n")
        if not quiet and (report.round_id + 1) % fl.rounds_per_task == 0:
            accs = " ".join(f"{a:.3f}" for a in report.accuracies)
            print(f"task {report.task_id + 1}/{tasks.n_tasks} done "
                  f"(round {report.round_id + 1}): acc per task [{accs}]")

    try:
        reports, state = run_experiment(
            tasks, cfg["scenario"], fl, strategy,
            master_seed=cfg.master_seed(),
            encoder_spec=cfg.encoder_spec(tasks),
            classifier_spec=cfg.classifier_spec(tasks),
            beta=cfg["model.beta"],
            pretrain_epochs=cfg["model.pretrain_epochs"],
            pretrain_lr=cfg["model.pretrain_lr"],
            threads=cfg["threads"],
            on_round=on_round,
            checkpoint_dir=checkpoint_dir,
            checkpoint_every=checkpoint_every,
            resume_from=resume_from,
            stop_after_round=stop_after_round)
    finally:
        csv_file.close()

    final_accs = [float(a) for a in state.evaluate()]
    summary = {
        "strategy": strategy.kind,
        "scenario": cfg["scenario"],
        "seed": cfg.master_seed(),
        "rounds_completed": state.global_round,
        "final_task_accuracies": final_accs,
        "average_accuracy": sum(final_accs) / len(final_accs),
        "enrollment": state.schedule.render().splitlines(),
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    _write_json(os.path.join(out_dir, "manifest.json"),
                build_manifest(cfg, started_at, round(time.time() - t0, 3)))
    if not quiet:
        print(f"average final accuracy: {summary['average_accuracy']:.4f}  ({out_dir})")
    return summary


def _cmd_run(args) -> int:
    if (args.config is None) == (args.preset is None):
        raise ConfigError("run", ["give exactly one of a config file or --preset"])

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = str(args.checkpoint_every)

    sweep = PRESET_STRATEGY_SWEEPS.get(args.preset) if args.preset else None
    if sweep:
        if args.resume or args.stop_after_round is not None:
            raise ConfigError("run", ["--resume / --stop-after-round do not apply to "
                                      "multi-strategy presets"])
        base = preset_config(args.preset, overrides)
        out_root = base["out"]
        merged = {"strategies": {}}
        for kind in sweep:
            sub = dict(overrides)
            sub["strategy.kind"] = kind
            sub["out"] = os.path.join(out_root, kind)
            cfg = preset_config(args.preset, sub)
            print(f"--- strategy {kind} ---")
            merged["strategies"][kind] = execute_run(cfg, quiet=args.quiet)
        _write_json(os.path.join(out_root, "summary.json"), merged)
        print(f"combined summary: {os.path.join(out_root, 'summary.json')}")
        return 0

    if args.preset:
        cfg = preset_config(args.preset, overrides)
    else:
        cfg = parse_config(args.config, overrides)
    execute_run(cfg, resume_from=args.resume, stop_after_round=args.stop_after_round,
                quiet=args.quiet)
    return 0


def _load_summary(run_dir: str) -> dict:
    path = os.path.join(run_dir, "summary.json")
    if not os.path.exists(path):
        raise ConfigError("compare", [f"missing summary file: {path}"])
    with open(path) as f:
        summary = json.load(f)
    if "final_task_accuracies" not in summary:
        raise ConfigError("compare", [
            f"{path}: no final_task_accuracies; for a multi-strategy run point "
            f"at one of its per-strategy subdirectories"])
    return summary


def _cmd_compare(args) -> int:
    if len(args.dirs) < 2:
        raise ConfigError("compare", ["need at least two run directories"])
    rows = []
    for d in args.dirs:
        summary = _load_summary(d)
        accs = [float(a) for a in summary["final_task_accuracies"]]
        rows.append((os.path.normpath(d), accs, sum(accs) / len(accs)))

    n_tasks = len(rows[0][1])
    for label, accs, _ in rows[1:]:
        if len(accs) != n_tasks:
            raise ContractViolation(
                f"compare: {label} has {len(accs)} tasks, {rows[0][0]} has {n_tasks}")

    headers = ["run"] + [f"task_{i + 1}" for i in range(n_tasks)] + ["avg"]
    base = rows[0]
    table = []
    for label, accs, avg in rows:
        table.append([label] + [f"{a:.3f}" for a in accs] + [f"{avg:.3f}"])
    for label, accs, avg in rows[1:]:
        deltas = [a - b for a, b in zip(accs, base[1])]
        table.append([f"delta {label}"]
                     + [f"{d:+.3f}" for d in deltas]
                     + [f"{avg - base[2]:+.3f}"])

    widths = [max(len(headers[c]), max(len(r[c]) for r in table))
              for c in range(len(headers))]
    def fmt_line(cells):
        left = cells[0].ljust(widths[0])
        rest = "  ".join(c.rjust(w) for c, w in zip(cells[1:], widths[1:]))
        return f"{left}  {rest}"

    print(fmt_line(headers))
    print("-" * (sum(widths) + 2 * len(widths) - 2))
    for r in table:
        print(fmt_line(r))

    csv_lines = [",".join(headers)] + [",".join(r) for r in table]
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("\n".join(csv_lines) + "\n")
        print(f"csv written: {args.csv}")
    else:
        print()
        for line in csv_lines:
            print(line)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="filver",
        description="Federated incremental learning simulator with embedding rehearsal.",
        epilog=f"Relative dataset paths resolve against ${DATA_ROOT_ENV}.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file or preset")
    run.add_argument("config", nargs="?", default=None, help="key = value config file")
    run.add_argument("--preset", choices=sorted(PRESETS), default=None,
                     help="named built-in experiment")
    run.add_argument("--seed", type=int, default=None, help="override the master seed")
    run.add_argument("--out", default=None, help="override the output directory")
    run.add_argument("--threads", type=int, default=None,
                     help="worker threads for local client training")
    run.add_argument("--checkpoint-every", type=int, default=None, dest="checkpoint_every",
                     help="write a checkpoint every N global rounds")
    run.add_argument("--resume", default=None, metavar="DIR",
                     help="resume from a checkpoint directory")
    run.add_argument("--stop-after-round", type=int, default=None, dest="stop_after_round",
                     help="stop after N global rounds (writes a checkpoint)")
    run.add_argument("--quiet", action="store_true", help="suppress progress lines")

    cmp_ = sub.add_parser("compare", help="tabulate several runs' final accuracies")
    cmp_.add_argument("dirs", nargs="+", help="run output directories")
    cmp_.add_argument("--csv", default=None, help="also write the table as CSV here")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_compare(args)
    except ConfigError as exc:
        print(f"config error in {exc.origin}:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except (IdxFormatError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
