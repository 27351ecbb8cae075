"""Training strategies: end-to-end BP, Early-Exit, sequential and pipelined SCPL."""

from __future__ import annotations

import dataclasses
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import Dataset, ViewBatch, batches
from .losses import cross_entropy
from .network import (
    ScplNetwork,
    blocking_violations,
    component_backward,
    component_forward,
    component_step,
)
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)

STRATEGIES = ("bp", "early_exit", "scpl", "scpl_pipelined")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


class PipelineError(RuntimeError):
    def __init__(self, component: int, cause: BaseException):
        super().__init__(f"pipeline worker for component {component} failed: {cause!r}")
        self.component = component
        self.cause = cause


@dataclass
class TrainConfig:
    strategy: str = "scpl"
    epochs: int = 200
    batch_size: int = 128
    views: int = 2
    tau: float = 0.1
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    lr_schedule: str = "cosine"
    seed: int = 0
    workers: Optional[int] = None  # pipelined only; None means one per component
    queue_capacity: int = 2  # pipelined only; 0 means unbounded
    aug_noise: float = 0.1
    loss_variant: str = "eq"  # "eq" (per-anchor 1/|P(i)|) or "alg1"
    inflation_ms: float = 0.0  # artificial per-component compute time
    check_blocking: bool = False

    def validate(self, H: Optional[int] = None) -> "TrainConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.views not in (1, 2):
            raise ConfigError("views must be 1 or 2")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.queue_capacity < 0:
            raise ConfigError("queue_capacity must be >= 0")
        if self.loss_variant not in ("eq", "alg1"):
            raise ConfigError(f"loss_variant must be 'eq' or 'alg1', got {self.loss_variant!r}")
        if self.inflation_ms < 0:
            raise ConfigError("inflation_ms must be >= 0")
        if self.workers is not None and H is not None and not 1 <= self.workers <= H + 1:
            raise ConfigError(f"workers must be in [1, {H + 1}] for a network with {H + 1} components")
        return self

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr_max
        return cosine_lr(epoch, max(self.epochs, 1), self.lr_max, self.lr_min)


@dataclass
class MetricsRecord:
    epoch: int
    component_losses: list  # mean per batch, one entry per loss-owning component
    global_loss: float
    train_acc: float
    test_acc: float
    seconds: float
    examples_per_sec: float
    lr: float
    blocking_violations: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------


def _inflate(cfg: TrainConfig) -> None:
    if cfg.inflation_ms > 0:
        time.sleep(cfg.inflation_ms / 1000.0)


def _accuracy(net: ScplNetwork, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(net.predict(x) == y))


def _ensure_optimizers(net: ScplNetwork) -> None:
    for c in net.components:
        if c.optimizer is None:
            c.optimizer = Adam(c.params())


class _EpochStats:
    def __init__(self, k: int):
        self.loss_sums = np.zeros(k)
        self.batches = 0
        self.correct = 0
        self.seen = 0
        self.violations = 0

    def add(self, losses, logits: np.ndarray, labels: np.ndarray) -> None:
        self.loss_sums += losses
        self.batches += 1
        self.correct += int(np.sum(logits.argmax(axis=1) == labels))
        self.seen += len(labels)


def _run_epochs(net: ScplNetwork, ds: Dataset, cfg: TrainConfig, k: int,
                epoch_fn: Callable[[int, float], _EpochStats]) -> list[MetricsRecord]:
    records = []
    x_test, y_test = ds.test()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        t0 = time.perf_counter()
        try:
            st = epoch_fn(epoch, lr)
        except ad.NonFiniteError as e:
            raise TrainingDiverged(epoch, str(e)) from e
        secs = time.perf_counter() - t0
        means = st.loss_sums / max(st.batches, 1)
        if not np.all(np.isfinite(means)):
            raise TrainingDiverged(epoch, "non-finite loss")
        rec = MetricsRecord(
            epoch=epoch,
            component_losses=[float(v) for v in means],
            global_loss=float(means.sum()),
            train_acc=st.correct / max(st.seen, 1),
            test_acc=_accuracy(net, x_test, y_test),
            seconds=secs,
            examples_per_sec=st.seen / secs if secs > 0 else float("inf"),
            lr=lr,
            blocking_violations=st.violations,
        )
        log.info("epoch %d loss %.4f train %.3f test %.3f (%.2fs)", epoch, rec.global_loss,
                 rec.train_acc, rec.test_acc, secs)
        records.append(rec)
    return records


def _epoch_batches(ds: Dataset, cfg: TrainConfig, epoch: int):
    return batches(ds, cfg.batch_size, cfg.seed, epoch, cfg.views, cfg.aug_noise)


# ---------------------------------------------------------------------------


def bp_step(net: ScplNetwork, opt: Adam, batch: ViewBatch, lr: float) -> tuple[float, np.ndarray]:
    """One end-to-end step: single tape through every encoder and the classifier."""
    tape = Tape()
    logits = net.forward_all(batch.features, tape)
    loss = cross_entropy(logits, batch.labels)
    tape.backward(loss)
    opt.step(tape.param_grads(), lr)
    return loss.item(), logits.data


def train_bp(net: ScplNetwork, ds: Dataset, cfg: TrainConfig) -> list[MetricsRecord]:
    """Reference baseline: projection heads are ignored, one global cross-entropy."""
    opt = Adam(net.effective_params())

    def epoch_fn(epoch, lr):
        st = _EpochStats(1)
        for batch in _epoch_batches(ds, cfg, epoch):
            loss, logits = bp_step(net, opt, batch, lr)
            _inflate(cfg)
            st.add([loss], logits, batch.labels)
        return st

    return _run_epochs(net, ds, cfg, 1, epoch_fn)


def scpl_step(net: ScplNetwork, batch: ViewBatch, cfg: TrainConfig, lr: float, st: _EpochStats) -> None:
    """Run every component in order on one mini-batch with immediate local updates."""
    x = batch.features
    losses = []
    for c in net.components:
        res = component_step(c, x, batch.labels, cfg.tau, cfg.loss_variant)
        if cfg.check_blocking:
            st.violations += len(blocking_violations(c, res.tape))
        _inflate(cfg)
        c.optimizer.step(res.grads, lr)
        losses.append(res.loss)
        x = res.output
    st.add(losses, x, batch.labels)


def train_scpl_sequential(net: ScplNetwork, ds: Dataset, cfg: TrainConfig) -> list[MetricsRecord]:
    _ensure_optimizers(net)

    def epoch_fn(epoch, lr):
        st = _EpochStats(len(net.components))
        for batch in _epoch_batches(ds, cfg, epoch):
            scpl_step(net, batch, cfg, lr, st)
        return st

    return _run_epochs(net, ds, cfg, len(net.components), epoch_fn)


def train_early_exit(net: ScplNetwork, ds: Dataset, cfg: TrainConfig) -> list[MetricsRecord]:
    """Blocked components, each hidden one trained by a linear auxiliary classifier."""
    if not all(c.objective == "ce" for c in net.components):
        net = net.with_early_exit_heads(cfg.seed)
    return train_scpl_sequential(net, ds, cfg)


# ---------------------------------------------------------------------------
# pipelined SCPL

_END = "end"
_STOP = "stop"


def partition(n: int, workers: int) -> list[range]:
    """Split component positions 0..n-1 into ``workers`` contiguous groups."""
    bounds = np.linspace(0, n, workers + 1).round().astype(int)
    return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


class _Pipeline:
    """Worker threads, one per component group, linked by bounded FIFO queues.

    Messages are ``("batch", seq, x, labels, lr)``, ``("end",)`` and ``("stop",)``.
    Workers report ``(position, seq, loss, extra)`` tuples on an unbounded
    stats queue; the last worker reports ``("end",)`` when an epoch drains.
    """

    POLL = 0.05

    def __init__(self, net: ScplNetwork, cfg: TrainConfig, workers: int):
        self.net, self.cfg = net, cfg
        self.groups = partition(len(net.components), workers)
        self.inbox = [queue.Queue(maxsize=cfg.queue_capacity) for _ in self.groups]
        self.stats: queue.Queue = queue.Queue()
        self.abort = threading.Event()
        self.threads = [threading.Thread(target=self._worker, args=(w,), name=f"scpl-worker-{w}", daemon=True)
                        for w in range(len(self.groups))]

    def start(self):
        for t in self.threads:
            t.start()

    def put(self, w: int, msg) -> None:
        while True:
            if self.abort.is_set():
                raise _Aborted
            try:
                self.inbox[w].put(msg, timeout=self.POLL)
                return
            except queue.Full:
                continue

    def _get(self, w: int):
        while True:
            if self.abort.is_set():
                raise _Aborted
            try:
                return self.inbox[w].get(timeout=self.POLL)
            except queue.Empty:
                continue

    def _worker(self, w: int) -> None:
        cfg = self.cfg
        comps = [self.net.components[i] for i in self.groups[w]]
        last_worker = w == len(self.groups) - 1
        last_seq = -1
        current = comps[0].index
        try:
            while True:
                msg = self._get(w)
                if msg[0] == _STOP:
                    if not last_worker:
                        self.put(w + 1, msg)
                    return
                if msg[0] == _END:
                    last_seq = -1
                    if last_worker:
                        self.stats.put(msg)
                    else:
                        self.put(w + 1, msg)
                    continue
                _, seq, x, labels, lr = msg
                if seq <= last_seq:
                    raise RuntimeError(f"mini-batch {seq} arrived after {last_seq}")
                last_seq = seq
                for j, c in enumerate(comps):
                    current = c.index
                    tape, r = component_forward(c, x)
                    out = ad.detach(r).data
                    if j == len(comps) - 1 and not last_worker:
                        self.put(w + 1, ("batch", seq, out, labels, lr))
                    res = component_backward(c, tape, r, labels, cfg.tau, cfg.loss_variant)
                    violations = len(blocking_violations(c, res.tape)) if cfg.check_blocking else 0
                    _inflate(cfg)
                    c.optimizer.step(res.grads, lr)
                    extra = out if c.is_output else None
                    self.stats.put((c.index - 1, seq, res.loss, violations, extra))
                    x = out
        except _Aborted:
            return
        except BaseException as e:  # surfaced to the trainer thread
            self.stats.put(("error", current, e))
            self.abort.set()

    def shutdown(self) -> None:
        if not self.abort.is_set():
            try:
                self.put(0, (_STOP,))
            except _Aborted:
                pass
        for t in self.threads:
            t.join(timeout=5.0)
        self.abort.set()


class _Aborted(Exception):
    pass


def train_scpl_pipelined(net: ScplNetwork, ds: Dataset, cfg: TrainConfig) -> list[MetricsRecord]:
    """One worker thread per component (or contiguous component group).

    A worker forwards mini-batch t, hands the detached output downstream, then
    computes its local loss, backward and update before taking mini-batch t+1.
    Each epoch ends with a barrier that drains every queue.
    """
    k = len(net.components)
    workers = cfg.workers or k
    cfg.validate(net.H)
    _ensure_optimizers(net)
    pipe = _Pipeline(net, cfg, workers)
    pipe.start()

    def epoch_fn(epoch, lr):
        st = _EpochStats(k)
        labels_by_seq = {}
        loss_rows: dict[int, np.ndarray] = {}

        def drain(block: bool):
            while True:
                try:
                    item = pipe.stats.get(timeout=_Pipeline.POLL) if block else pipe.stats.get_nowait()
                except queue.Empty:
                    if block:
                        continue
                    return False
                if item[0] == "error":
                    _, comp, exc = item
                    if isinstance(exc, ad.NonFiniteError):
                        raise exc
                    raise PipelineError(comp, exc) from exc
                if item[0] == _END:
                    return True
                pos, seq, loss, violations, extra = item
                loss_rows.setdefault(seq, np.zeros(k))[pos] = loss
                st.violations += violations
                if extra is not None:
                    y = labels_by_seq.pop(seq)
                    st.correct += int(np.sum(extra.argmax(axis=1) == y))
                    st.seen += len(y)

        try:
            for seq, batch in enumerate(_epoch_batches(ds, cfg, epoch)):
                labels_by_seq[seq] = batch.labels
                pipe.put(0, ("batch", seq, batch.features, batch.labels, lr))
                drain(block=False)
            pipe.put(0, (_END,))
            drain(block=True)
        except _Aborted:
            drain(block=True)  # raises the worker's error
            raise
        for row in loss_rows.values():
            st.loss_sums += row
        st.batches = len(loss_rows)
        return st

    try:
        return _run_epochs(net, ds, cfg, k, epoch_fn)
    finally:
        pipe.shutdown()


TRAINERS = {
    "bp": train_bp,
    "early_exit": train_early_exit,
    "scpl": train_scpl_sequential,
    "scpl_pipelined": train_scpl_pipelined,
}


def train(net: ScplNetwork, ds: Dataset, cfg: TrainConfig) -> list[MetricsRecord]:
    cfg.validate(net.H)
    return TRAINERS[cfg.strategy](net, ds, cfg)
