"""Discrete-event simulation of one training iteration under five execution strategies.

A :class:`WorkloadSpec` gives integer time-unit costs per layer and phase.
:func:`build_task_graph` expands it into a precedence DAG according to the
strategy, and :func:`simulate` list-schedules that DAG onto devices.

Strategies
----------
bp_single_device
    Everything on one device, strict chain.
nmp
    Layers on their devices, forward chain, one loss, backward chain in
    reverse layer order (chain rule), per-layer update after its backward.
gpipe
    nmp split into ``m`` micro-batches; forward and backward are pipelined
    but backward still follows the chain rule.
scpl
    Every layer has a local loss; its backward depends only on that loss.
scpl_gpipe
    scpl rules per micro-batch with pipelined forwards.

Devices run one task at a time and pick the ready task with the smallest
``(phase, micro_batch, layer)`` key, phases ordered FW < LOSS < BW < UP.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional

PHASES = ("FW", "LOSS", "BW", "UP")
STRATEGIES = ("bp_single_device", "nmp", "gpipe", "scpl", "scpl_gpipe")
GANTT_SCHEMA = "scpl.gantt/1"

_PHASE_RANK = {p: i for i, p in enumerate(PHASES)}


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class LayerCost:
    fw: int
    bw: int
    loss: int = 0
    update: int = 0
    device: Optional[int] = None  # defaults to the layer position


@dataclass
class WorkloadSpec:
    layers: list
    strategy: str = "nmp"
    micro_batches: int = 1
    comm_cost: int = 0

    def __post_init__(self):
        self.layers = [lc if isinstance(lc, LayerCost) else LayerCost(**lc) for lc in self.layers]
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ScheduleError("workload has no layers")
        if self.strategy not in STRATEGIES:
            raise ScheduleError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not isinstance(self.micro_batches, int) or self.micro_batches < 1:
            raise ScheduleError("micro_batches must be an integer >= 1")
        if not isinstance(self.comm_cost, int) or self.comm_cost < 0:
            raise ScheduleError("comm_cost must be a non-negative integer")
        for i, lc in enumerate(self.layers, start=1):
            for name in ("fw", "bw", "loss", "update"):
                v = getattr(lc, name)
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    raise ScheduleError(f"layer {i}: {name} must be a non-negative integer, got {v!r}")
        used = sorted(set(self.device_map()))
        if used != list(range(len(used))):
            raise ScheduleError(f"device map must cover devices 0..{len(used) - 1} without gaps, got {used}")

    def device_map(self) -> list[int]:
        if self.strategy == "bp_single_device":
            return [0] * len(self.layers)
        return [i if lc.device is None else lc.device for i, lc in enumerate(self.layers)]

    @property
    def num_devices(self) -> int:
        return max(self.device_map()) + 1

    def with_strategy(self, strategy: str, micro_batches: Optional[int] = None) -> "WorkloadSpec":
        m = self.micro_batches if micro_batches is None else micro_batches
        return WorkloadSpec(list(self.layers), strategy, m, self.comm_cost)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "micro_batches": self.micro_batches,
            "comm_cost": self.comm_cost,
            "layers": [{k: v for k, v in asdict(lc).items() if v is not None} for lc in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        known = {"strategy", "micro_batches", "comm_cost", "layers"}
        extra = set(d) - known - {"name", "notes"}
        if extra:
            raise ScheduleError(f"unknown workload keys: {sorted(extra)}")
        if "layers" not in d:
            raise ScheduleError("workload needs a 'layers' list")
        try:
            layers = [LayerCost(**lc) for lc in d["layers"]]
        except TypeError as e:
            raise ScheduleError(f"bad layer entry: {e}") from None
        return cls(layers, d.get("strategy", "nmp"), d.get("micro_batches", 1), d.get("comm_cost", 0))


@dataclass(frozen=True)
class Task:
    id: int
    kind: str
    layer: int  # 1-based
    micro_batch: int  # 1-based
    device: int
    duration: int

    @property
    def priority(self) -> tuple:
        return (_PHASE_RANK[self.kind], self.micro_batch, self.layer, self.id)


@dataclass
class TaskGraph:
    tasks: list
    edges: list  # (pred id, succ id)
    comm_cost: int = 0

    def preds(self) -> list[list[int]]:
        out = [[] for _ in self.tasks]
        for a, b in self.edges:
            out[b].append(a)
        return out

    def lag(self, a: int, b: int) -> int:
        return self.comm_cost if self.tasks[a].device != self.tasks[b].device else 0

    def topological_order(self) -> list[int]:
        n = len(self.tasks)
        indeg = [0] * n
        succ = [[] for _ in range(n)]
        for a, b in self.edges:
            succ[a].append(b)
            indeg[b] += 1
        order = [i for i in range(n) if indeg[i] == 0]
        for i in order:
            for j in succ[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    order.append(j)
        if len(order) != n:
            raise ScheduleError("task graph contains a cycle")
        return order

    def critical_path(self) -> int:
        """Longest duration-weighted path (including communication lags)."""
        preds = self.preds()
        finish = {}
        for i in self.topological_order():
            start = max((finish[p] + self.lag(p, i) for p in preds[i]), default=0)
            finish[i] = start + self.tasks[i].duration
        return max(finish.values(), default=0)

    def find(self, kind: str, layer: int, micro_batch: int = 1) -> Task:
        for t in self.tasks:
            if (t.kind, t.layer, t.micro_batch) == (kind, layer, micro_batch):
                return t
        raise KeyError((kind, layer, micro_batch))

    def has_edge(self, a: Task, b: Task) -> bool:
        return (a.id, b.id) in set(self.edges)


def _split(cost: int, m: int, what: str) -> int:
    if cost % m:
        raise ScheduleError(f"{what} cost {cost} is not divisible by {m} micro-batches")
    return cost // m


def build_task_graph(spec: WorkloadSpec) -> TaskGraph:
    spec.validate()
    s = spec.strategy
    L = len(spec.layers)
    dev = spec.device_map()
    m = spec.micro_batches if s in ("gpipe", "scpl_gpipe") else 1
    tasks: list[Task] = []
    edges: list[tuple[int, int]] = []
    ids: dict[tuple, int] = {}

    def add(kind, layer, k, duration, deps=()):
        t = Task(len(tasks), kind, layer, k, dev[layer - 1], duration)
        tasks.append(t)
        ids[(kind, layer, k)] = t.id
        edges.extend((ids[d], t.id) for d in deps)

    local = s in ("scpl", "scpl_gpipe")
    for k in range(1, m + 1):
        for l in range(1, L + 1):
            lc = spec.layers[l - 1]
            deps = []
            if l > 1:
                deps.append(("FW", l - 1, k))
            if k > 1:
                deps.append(("FW", l, k - 1))
            add("FW", l, k, _split(lc.fw, m, f"layer {l} fw"), deps)
            if local:
                add("LOSS", l, k, _split(lc.loss, m, f"layer {l} loss"), [("FW", l, k)])
                add("BW", l, k, _split(lc.bw, m, f"layer {l} bw"), [("LOSS", l, k)])
        if not local:
            add("LOSS", L, k, _split(spec.layers[-1].loss, m, f"layer {L} loss"), [("FW", L, k)])
            for l in range(L, 0, -1):
                dep = ("LOSS", L, k) if l == L else ("BW", l + 1, k)
                add("BW", l, k, _split(spec.layers[l - 1].bw, m, f"layer {l} bw"), [dep])
    for l in range(1, L + 1):
        add("UP", l, 1, spec.layers[l - 1].update, [("BW", l, k) for k in range(1, m + 1)])
    return TaskGraph(tasks, edges, spec.comm_cost)


@dataclass(frozen=True)
class Interval:
    start: int
    end: int
    task: int
    kind: str
    layer: int
    micro_batch: int


@dataclass
class GanttTrace:
    devices: dict  # device id -> list[Interval] sorted by start
    makespan: int
    strategy: str = ""
    busy: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.busy:
            self.busy = {d: sum(iv.end - iv.start for iv in ivs) for d, ivs in self.devices.items()}

    @property
    def num_tasks(self) -> int:
        return sum(len(v) for v in self.devices.values())


def simulate(graph: TaskGraph, spec: Optional[WorkloadSpec] = None) -> GanttTrace:
    """Non-delay list scheduling: an idle device starts its best ready task at once."""
    graph.topological_order()  # cycle check
    n = len(graph.tasks)
    preds = graph.preds()
    succs = [[] for _ in range(n)]
    for a, b in graph.edges:
        succs[a].append(b)
    waiting = [len(p) for p in preds]
    release = [0] * n  # max over finished preds of finish + lag
    ready = {i for i in range(n) if not preds[i]}
    devices = sorted({t.device for t in graph.tasks})
    free_at = {d: 0 for d in devices}
    running: list[tuple[int, int]] = []  # (finish time, task id)
    ivs: dict[int, list[Interval]] = {d: [] for d in devices}
    done = 0

    def complete(i: int, end: int) -> None:
        nonlocal done
        done += 1
        for j in succs[i]:
            release[j] = max(release[j], end + graph.lag(i, j))
            waiting[j] -= 1
            if waiting[j] == 0:
                ready.add(j)

    t = 0
    while done < n:
        for end, i in sorted(r for r in running if r[0] <= t):
            running.remove((end, i))
            complete(i, end)
        if done == n:
            break
        started = False
        for d in devices:
            if free_at[d] > t:
                continue
            cands = [i for i in ready if graph.tasks[i].device == d and release[i] <= t]
            if not cands:
                continue
            i = min(cands, key=lambda j: graph.tasks[j].priority)
            ready.discard(i)
            task = graph.tasks[i]
            free_at[d] = t + task.duration
            ivs[d].append(Interval(t, t + task.duration, i, task.kind, task.layer, task.micro_batch))
            running.append((t + task.duration, i))
            started = True
        if started or any(end <= t for end, _ in running):
            continue  # zero-length tasks may unlock more work at the same instant
        horizon = [end for end, _ in running]
        horizon += [release[i] for i in ready if release[i] > t]
        if not horizon:
            raise ScheduleError("simulation stalled: unsatisfiable dependencies")
        t = min(horizon)
    makespan = max((iv.end for v in ivs.values() for iv in v), default=0)
    strategy = spec.strategy if spec is not None else ""
    return GanttTrace({d: sorted(v, key=lambda iv: (iv.start, iv.end)) for d, v in ivs.items()}, makespan, strategy)


def bubble_ratio(trace: GanttTrace) -> float:
    """Idle fraction of total device-time; 0 for an empty (zero-length) trace."""
    if trace.makespan == 0 or not trace.devices:
        return 0.0
    return 1.0 - sum(trace.busy.values()) / (len(trace.devices) * trace.makespan)


def run(spec: WorkloadSpec) -> GanttTrace:
    return simulate(build_task_graph(spec), spec)


def round_half_up(x: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class Summary:
    strategy: str
    micro_batches: int
    makespan: int
    bubble_ratio: float
    speedup_vs_nmp: float

    def line(self) -> str:
        return (f"strategy={self.strategy} makespan={self.makespan} "
                f"bubble_ratio={self.bubble_ratio:.4f} speedup_vs_nmp={self.speedup_vs_nmp:.2f}x")


def summarize(spec: WorkloadSpec) -> tuple[Summary, GanttTrace]:
    trace = run(spec)
    base = run(spec.with_strategy("nmp", 1)).makespan
    speed = round_half_up(base / trace.makespan) if trace.makespan else float("nan")
    m = spec.micro_batches if spec.strategy in ("gpipe", "scpl_gpipe") else 1
    return Summary(spec.strategy, m, trace.makespan, bubble_ratio(trace), speed), trace


def compare(spec: WorkloadSpec, strategies=("nmp", "gpipe", "scpl", "scpl_gpipe")) -> list[Summary]:
    return [summarize(spec.with_strategy(s))[0] for s in strategies]


# ---------------------------------------------------------------------------
# Gantt JSON


def gantt_to_dict(trace: GanttTrace) -> dict:
    return {
        "schema": GANTT_SCHEMA,
        "strategy": trace.strategy,
        "makespan": trace.makespan,
        "devices": [
            {"id": d, "intervals": [asdict(iv) for iv in ivs]}
            for d, ivs in sorted(trace.devices.items())
        ],
    }


def export_gantt(trace: GanttTrace, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(gantt_to_dict(trace), indent=1))
    return path


def import_gantt(path) -> GanttTrace:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != GANTT_SCHEMA:
        raise ScheduleError(f"unsupported gantt schema {doc.get('schema')!r}")
    devices = {int(d["id"]): [Interval(**iv) for iv in d["intervals"]] for d in doc["devices"]}
    return GanttTrace(devices, int(doc["makespan"]), doc.get("strategy", ""))


def load_workload(path) -> WorkloadSpec:
    """Read a workload from TOML or JSON (by extension)."""
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".json":
        doc = json.loads(text)
    else:
        doc = parse_toml(text.decode())
    return WorkloadSpec.from_dict(doc.get("workload", doc))


def parse_toml(text: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)
