"""``scpl`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from . import config as cfgmod
from .bench import format_table, hardware_threads, non_increasing, run_bench
from .data import save_dataset
from .gradcheck import run_suite, wrong_relu_vjp
from .network import build_from_template
from .schedule import ScheduleError, WorkloadSpec, compare, export_gantt, summarize
from .trainers import ConfigError, TrainingDiverged, train

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("scpl")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, doc: dict) -> None:
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _resolved(args) -> dict:
    return cfgmod.apply_overrides(cfgmod.load_config(args.config), args.set)


def cmd_train(args) -> int:
    doc = _resolved(args)
    out = _out_dir(args)
    _echo(out, doc)
    ds = cfgmod.build_dataset(doc.get("data", {}))
    template = cfgmod.build_template(doc.get("model", {}), ds)
    cfg = cfgmod.build_train_config(doc.get("train", {}))
    net = build_from_template(template, seed=cfg.seed)
    cfg.validate(net.H)
    log.info("training %s on %d examples, H=%d", cfg.strategy, len(ds.train_idx), net.H)
    try:
        records = train(net, ds, cfg)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    rows = [r.to_dict() for r in records]
    with open(out / "metrics.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    _write_summary(out / "summary.csv", rows)
    net.save(out / "checkpoint.bin")
    if rows and not args.no_plots:
        from .plotting import plot_metrics
        plot_metrics(rows, out / "metrics.png", title=f"{cfg.strategy} (seed {cfg.seed})")
    final = rows[-1]["test_acc"] if rows else float("nan")
    print(f"strategy={cfg.strategy} epochs={len(rows)} final_test_acc={final:.4f}")
    return EXIT_OK


def _write_summary(path: Path, rows: list[dict]) -> None:
    k = len(rows[0]["component_losses"]) if rows else 0
    cols = ["epoch", "global_loss", "train_acc", "test_acc", "lr", "seconds", "examples_per_sec",
            "blocking_violations"] + [f"loss_{j + 1}" for j in range(k)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols[:8]] + r["component_losses"])


def cmd_simulate(args) -> int:
    doc = _resolved(args)
    out = _out_dir(args)
    _echo(out, doc)
    try:
        spec = WorkloadSpec.from_dict(doc)
        spec.validate()
        strategies = ("nmp", "gpipe", "scpl", "scpl_gpipe") if args.all else (spec.strategy,)
        traces = []
        for s in strategies:
            summary, trace = summarize(spec.with_strategy(s))
            print(summary.line())
            traces.append(trace)
    except ScheduleError as e:
        raise ConfigError(str(e)) from e
    if args.all:
        with open(out / "comparison.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["strategy", "micro_batches", "makespan", "bubble_ratio", "speedup_vs_nmp"])
            for s in compare(spec):
                w.writerow([s.strategy, s.micro_batches, s.makespan, f"{s.bubble_ratio:.4f}",
                            f"{s.speedup_vs_nmp:.2f}"])
    for trace in traces:
        export_gantt(trace, out / f"gantt_{trace.strategy}.json")
        if not args.no_plots:
            from .plotting import plot_gantt
            plot_gantt(trace, out / f"gantt_{trace.strategy}.png")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.out:
        _echo(_out_dir(args), {"seeds": args.seeds, "base_seed": args.seed, "inject_fault": args.inject_fault})
    if args.inject_fault == "relu":
        with ad.inject_vjp("relu", wrong_relu_vjp):
            results = run_suite(args.seeds, args.seed)
    else:
        results = run_suite(args.seeds, args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    total = sum(r.cases for r in results)
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed ({total} cases)")
    return EXIT_OK


def cmd_bench(args) -> int:
    doc = _resolved(args)
    out = _out_dir(args)
    _echo(out, doc)
    bench = dict(cfgmod.BENCH_KEYS, **doc.get("bench", {}))
    ds = cfgmod.build_dataset(doc.get("data", {}))
    template = cfgmod.build_template(doc.get("model", {}), ds)
    train_section = dict(doc.get("train", {}), inflation_ms=float(bench["inflation_ms"]))
    cfg = cfgmod.build_train_config(train_section)
    workers = [int(w) for w in bench["workers"]]
    if max(workers) > template.hidden_components + 1:
        raise ConfigError(f"at most {template.hidden_components + 1} workers for this model")
    threads = hardware_threads()
    if threads < max(workers):
        print(f"warning: {threads} hardware thread(s) available for {max(workers)} workers", file=sys.stderr)
    rows = run_bench(template, ds, cfg, workers, int(bench["repeats"]))
    print(format_table(rows))
    piped = [r.seconds for r in rows if r.workers]
    if not non_increasing(piped):
        print("warning: epoch time increased with more workers beyond the 10% band", file=sys.stderr)
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["setting", "workers", "seconds", "examples_per_sec", "speedup"])
        for r in rows:
            w.writerow([r.label, r.workers, f"{r.seconds:.6f}", f"{r.examples_per_sec:.2f}", f"{r.speedup:.4f}"])
    if not args.no_plots:
        from .plotting import plot_bench
        plot_bench([{"label": r.label, "seconds": r.seconds} for r in rows], out / "bench.png")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    doc = _resolved(args)
    out = _out_dir(args)
    _echo(out, doc)
    ds = cfgmod.build_dataset(doc.get("data", {}))
    npz = save_dataset(ds, out / args.name)
    print(f"wrote {npz} n={len(ds)} checksum={ds.checksum()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scpl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True,
                            help="TOML/JSON file, or the name of a shipped config (e.g. reference_workload)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (section.key or an unambiguous bare key)")
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    sp = sub.add_parser("train", help="train a network and write metrics, summary and checkpoint")
    common(sp)
    sp.add_argument("--out", default="runs/train")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("simulate", help="simulate one training iteration and emit Gantt traces")
    common(sp)
    sp.add_argument("--out", default="runs/simulate")
    sp.add_argument("--all", action="store_true", help="compare nmp, gpipe, scpl and scpl_gpipe")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    sp.add_argument("--out", default=None)
    sp.add_argument("--seeds", type=int, default=8, help="random cases per check")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--inject-fault", choices=["relu"], default=None,
                    help="debug hook: break a backward rule to confirm the suite catches it")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", help="time sequential vs pipelined SCPL epochs")
    common(sp)
    sp.add_argument("--out", default="runs/bench")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gen-data", help="generate a dataset with a provenance sidecar")
    common(sp)
    sp.add_argument("--out", default="runs/data")
    sp.add_argument("--name", default="dataset", help="file stem for the .npz/.json pair")
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
