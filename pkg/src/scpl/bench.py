"""Wall-clock comparison of sequential and pipelined SCPL epochs."""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Sequence

from .data import Dataset
from .network import NetworkTemplate, build_from_template
from .trainers import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class BenchRow:
    label: str
    workers: int  # 0 for the sequential baseline
    seconds: float
    examples_per_sec: float
    speedup: float  # sequential seconds / this row's seconds


def hardware_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not on Linux
        return os.cpu_count() or 1


def _epoch_time(template: NetworkTemplate, ds: Dataset, cfg: TrainConfig, repeats: int) -> tuple[float, float]:
    best = None
    for _ in range(repeats):
        net = build_from_template(template, seed=cfg.seed)
        rec = train(net, ds, cfg)[-1]
        if best is None or rec.seconds < best.seconds:
            best = rec
    return best.seconds, best.examples_per_sec


def run_bench(template: NetworkTemplate, ds: Dataset, cfg: TrainConfig,
              workers: Sequence[int] = (1, 2, 4), repeats: int = 3) -> list[BenchRow]:
    """Time one epoch per setting, keeping the fastest of ``repeats`` runs.

    ``cfg.inflation_ms`` is slept once per component per mini-batch in every
    strategy, standing in for per-device compute.
    """
    threads = hardware_threads()
    if max(workers) > threads:
        log.warning("only %d hardware threads for up to %d workers; timings are indicative only",
                    threads, max(workers))
    base = dataclasses.replace(cfg, epochs=1)
    seq_s, seq_eps = _epoch_time(template, ds, dataclasses.replace(base, strategy="scpl"), repeats)
    rows = [BenchRow("sequential", 0, seq_s, seq_eps, 1.0)]
    for w in workers:
        pcfg = dataclasses.replace(base, strategy="scpl_pipelined", workers=w)
        s, eps = _epoch_time(template, ds, pcfg, repeats)
        rows.append(BenchRow(f"pipelined-{w}", w, s, eps, seq_s / s if s > 0 else float("inf")))
    return rows


def non_increasing(seconds: Sequence[float], tolerance: float = 0.10) -> bool:
    """True when each time is at most (1 + tolerance) times its predecessor."""
    return all(b <= a * (1.0 + tolerance) for a, b in zip(seconds, seconds[1:]))


def format_table(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'setting':<14}{'seconds':>10}{'examples/s':>14}{'speedup':>10}"]
    for r in rows:
        lines.append(f"{r.label:<14}{r.seconds:>10.3f}{r.examples_per_sec:>14.1f}{r.speedup:>9.2f}x")
    return "\n".join(lines)
