"""Two-phase weight-transfer scheduling under URAM capacity.

Tiles execute strictly in order; each tile's weights load through the single
params port during some earlier tile's execution window. A plan assigns each
load a window; one deterministic event-timeline evaluator prices every plan
(baseline, adaptive, and the exhaustive oracle all share it), so stall
comparisons between them are exact.

Timeline semantics: a load assigned to window k may start no earlier than
window k's execution start and no earlier than the port is free; it then
waits until its URAM entries fit (memory frees when a tile finishes
executing). A tile is resident from load start until its execution ends.
Tile 0 is preloaded. A plan whose loads can never fit is infeasible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import hbm
from .putiming import PUConfig, PortSet, effective_m, first_gemm_layer_id, resolve_layer_mode, uram_capacity
from .workload import LayerSpec, ModelGraph, ceil_div, conv_to_gemm, tile_layer

_EPS = 1e-12
INF = math.inf


class SchedulerError(ValueError):
    pass


@dataclass(frozen=True)
class TileTask:
    """One tile in execution order: load seconds, execution seconds, URAM
    entries held while resident."""

    id: int
    load_time: float
    exec_time: float
    entries: int
    layer_id: int = -1

    def __post_init__(self):
        if self.load_time < 0 or self.exec_time < 0 or self.entries < 0:
            raise SchedulerError(f"tile {self.id}: negative task parameters")


@dataclass
class SchedulePlan:
    window_of: dict[int, int]
    stall_of: dict[int, float]
    load_start: dict[int, float]
    exec_start: dict[int, float]
    exec_end: dict[int, float]
    total_stall: float
    feasible: bool = True

    def resident_interval(self, tile: int) -> tuple[float, float]:
        return (self.load_start[tile], self.exec_end[tile])

    def relocated(self, tile: int) -> bool:
        w = self.window_of.get(tile)
        return w is not None and w != tile - 1


@dataclass
class RatioRow:
    tile_id: int
    layer_id: int
    time_ratio: float
    memory_ratio: float
    relocated: bool


@dataclass
class RatioReport:
    rows: list[RatioRow] = field(default_factory=list)


def _empty_plan() -> SchedulePlan:
    return SchedulePlan({}, {}, {}, {}, {}, 0.0, True)


def evaluate_plan(tasks: list[TileTask], capacity: int, window_of: dict[int, int],
                  loads_present: Optional[Iterable[int]] = None) -> SchedulePlan:
    """Simulate one window assignment; returns stalls or an infeasible plan.

    loads_present restricts which loads are modeled (the rest are treated as
    already resident), which gives a monotone lower bound for partial
    assignments in the exhaustive search.
    """
    T = len(tasks)
    if T == 0:
        return _empty_plan()
    for t in tasks:
        if t.entries > capacity:
            raise SchedulerError(f"tile {t.id} needs {t.entries} entries, capacity is {capacity}")

    present = sorted(range(1, T)) if loads_present is None else sorted(loads_present)
    for j in present:
        w = window_of.get(j)
        if w is None or not (0 <= w < j):
            raise SchedulerError(f"tile {j}: window {w} must satisfy 0 <= w < {j}")

    order = sorted(present, key=lambda j: (window_of[j], j))
    pos = {j: idx for idx, j in enumerate(order)}

    S = [0.0] * T
    F = [0.0] * T
    R = [0.0] * T
    load_start = {i: 0.0 for i in range(T)}
    started: list[tuple[int, float]] = [(0, 0.0)]  # (tile, load start)
    ends: dict[int, float] = {}
    port_free = 0.0
    li = 0
    feasible = True

    def usage(at: float) -> int:
        u = 0
        for tile, st in started:
            if st <= at and ends.get(tile, INF) > at:
                u += tasks[tile].entries
        return u

    for i in range(T):
        limit = pos.get(i, -1)
        while li <= limit and feasible:
            j = order[li]
            start = max(port_free, S[window_of[j]])
            while usage(start) + tasks[j].entries > capacity:
                nxt = min((f for f in ends.values() if f > start), default=None)
                if nxt is None:
                    feasible = False  # frees can only come from executions this load gates
                    break
                start = nxt
            if not feasible:
                break
            load_start[j] = start
            started.append((j, start))
            R[j] = start + tasks[j].load_time
            port_free = R[j]
            li += 1
        if not feasible:
            break
        prev_f = F[i - 1] if i else 0.0
        S[i] = max(prev_f, R[i])
        F[i] = S[i] + tasks[i].exec_time
        ends[i] = F[i]

    if not feasible:
        return SchedulePlan(dict(window_of), {}, {}, {}, {}, INF, False)

    stalls = {i: S[i] - (F[i - 1] if i else 0.0) for i in range(T)}
    return SchedulePlan(
        window_of={j: window_of[j] for j in present},
        stall_of=stalls,
        load_start=load_start,
        exec_start={i: S[i] for i in range(T)},
        exec_end={i: F[i] for i in range(T)},
        total_stall=sum(stalls.values()),
    )


def baseline_schedule(tasks: list[TileTask], capacity: int) -> SchedulePlan:
    """Load each tile during its immediate predecessor's window."""
    window_of = {j: j - 1 for j in range(1, len(tasks))}
    return evaluate_plan(tasks, capacity, window_of)


def adaptive_refine(plan: SchedulePlan, tasks: list[TileTask], capacity: int) -> SchedulePlan:
    """Relocate stalled loads into earlier windows with spare execution time.

    Stalled tiles are visited in descending stall order (lower id on ties);
    windows are scanned nearest-first. A relocation is kept only when the
    re-evaluated total stall strictly decreases, so the result never loses
    to the input plan.
    """
    cur = plan
    w = dict(plan.window_of)
    stalled = sorted(
        (j for j, s in plan.stall_of.items() if j >= 1 and s > _EPS),
        key=lambda j: (-plan.stall_of[j], j),
    )
    for j in stalled:
        if cur.stall_of.get(j, 0.0) <= _EPS or j < 2:
            continue
        for k in range(j - 2, -1, -1):
            assigned = sum(tasks[x].load_time for x, wx in w.items() if wx == k and x != j)
            if tasks[j].load_time > tasks[k].exec_time - assigned + _EPS:
                continue
            trial = dict(w)
            trial[j] = k
            cand = evaluate_plan(tasks, capacity, trial)
            if cand.feasible and cand.total_stall < cur.total_stall - _EPS:
                w, cur = trial, cand
                break
    return cur


def brute_force_schedule(tasks: list[TileTask], capacity: int, max_tiles: int = 10) -> SchedulePlan:
    """Exhaustive search over window assignments; exact optimum for small n.

    Prunes with a monotone partial-assignment lower bound, deduplicates
    branches that produce identical load timelines, and seeds the incumbent
    with the two-phase heuristic (which shares the evaluator, so optimality
    is preserved).
    """
    T = len(tasks)
    if T > max_tiles:
        raise SchedulerError(f"instance too large for exhaustive search: {T} > {max_tiles} tiles")
    if T <= 1:
        return evaluate_plan(tasks, capacity, {})

    base = baseline_schedule(tasks, capacity)
    best_plan = adaptive_refine(base, tasks, capacity)
    best = best_plan.total_stall

    w: dict[int, int] = {}

    def dfs(i: int):
        nonlocal best, best_plan
        if best <= _EPS:
            return
        seen = set()
        present = range(1, i + 1)
        for k in range(i - 1, -1, -1):
            w[i] = k
            part = evaluate_plan(tasks, capacity, w, loads_present=present)
            if not part.feasible or part.total_stall >= best - _EPS:
                continue
            key = tuple(part.load_start[j] for j in present)
            if key in seen:
                continue
            seen.add(key)
            if i == T - 1:
                best, best_plan = part.total_stall, part
            else:
                dfs(i + 1)
        w.pop(i, None)

    dfs(1)
    return best_plan


def validate_plan(tasks: list[TileTask], capacity: int, plan: SchedulePlan):
    """Independent sweep-line check of a plan's reported timeline.

    Verifies window legality, port serialization, weights-resident-before-
    execution, execution contiguity, and that resident entries never exceed
    capacity at any event point. Raises SchedulerError on any violation.
    """
    T = len(tasks)
    if not plan.feasible:
        raise SchedulerError("plan is marked infeasible")
    tol = 1e-9
    for j, wj in plan.window_of.items():
        if not (0 <= wj < j):
            raise SchedulerError(f"tile {j}: illegal window {wj}")
        if plan.load_start[j] + tol < plan.exec_start[wj]:
            raise SchedulerError(f"tile {j}: load starts before its window opens")
    prev_end = 0.0
    for i in range(T):
        if plan.load_start[i] + tasks[i].load_time > plan.exec_start[i] + tol and i > 0:
            raise SchedulerError(f"tile {i}: executes before its weights are resident")
        if plan.exec_start[i] + tol < prev_end:
            raise SchedulerError(f"tile {i}: executions overlap")
        if abs(plan.exec_end[i] - plan.exec_start[i] - tasks[i].exec_time) > tol:
            raise SchedulerError(f"tile {i}: execution duration mismatch")
        prev_end = plan.exec_end[i]
    loads = sorted((plan.load_start[j], tasks[j].load_time, j) for j in plan.window_of)
    for (s0, l0, a), (s1, _, b) in zip(loads, loads[1:]):
        if s1 + tol < s0 + l0:
            raise SchedulerError(f"loads of tiles {a} and {b} overlap on the params port")
    # interval memory sweep: release events apply before acquires at a tick
    events = []
    for i in range(T):
        s, e = plan.resident_interval(i)
        events.append((s, 1, tasks[i].entries))
        events.append((e, 0, -tasks[i].entries))
    events.sort(key=lambda ev: (ev[0], ev[1]))
    held = 0
    for _, _, delta in events:
        held += delta
        if held > capacity:
            raise SchedulerError(f"resident entries {held} exceed capacity {capacity}")


def peak_usage_in(plan: SchedulePlan, tasks: list[TileTask], t0: float, t1: float) -> int:
    """Peak resident entries over [t0, t1] at the plan's event points."""
    points = {t0}
    for i in range(len(tasks)):
        s = plan.load_start[i]
        if t0 <= s <= t1:
            points.add(s)
    peak = 0
    for t in sorted(points):
        u = 0
        for i in range(len(tasks)):
            s, e = plan.resident_interval(i)
            if s <= t and e > t:
                u += tasks[i].entries
        peak = max(peak, u)
    return peak


def ratios(tasks: list[TileTask], plan: SchedulePlan, capacity: int) -> RatioReport:
    """Per-tile overlap diagnostics.

    time_ratio compares tile i's execution time against tile i+1's load time
    (> 1 means the next load hides completely); memory_ratio is the peak
    resident entries during tile i's window over capacity.
    """
    report = RatioReport()
    T = len(tasks)
    for i in range(T):
        if i + 1 < T and tasks[i + 1].load_time > 0:
            tr = tasks[i].exec_time / tasks[i + 1].load_time
        else:
            tr = INF
        peak = peak_usage_in(plan, tasks, plan.exec_start[i], plan.exec_end[i])
        report.rows.append(
            RatioRow(
                tile_id=i,
                layer_id=tasks[i].layer_id,
                time_ratio=tr,
                memory_ratio=peak / capacity if capacity else INF,
                relocated=plan.relocated(i),
            )
        )
    return report


def _residual_load_fraction(layer: LayerSpec, rows: int, rounds_per_column: int,
                            pu: PUConfig, ports: PortSet) -> float:
    """Share of the params port consumed by residual traffic during one tile
    window of this layer (residuals have priority over weight loads).

    The window streams one residual byte per output (rows bytes per column)
    over rounds_per_column fast cycles per column."""
    if not layer.has_residual or rounds_per_column == 0:
        return 0.0
    rate = ports.params.bytes_per_cycle * ports.params.clock_hz * ports.params.efficiency
    frac = rows * pu.f_fast / (rounds_per_column * rate)
    return min(frac, 0.9)


def tasks_from_model(graph: ModelGraph, pu: PUConfig, ports: PortSet,
                     first_layer: str = "host", steady_state: bool = True) -> list[TileTask]:
    """Flatten a model into the tile sequence the scheduler operates on.

    Load times come from the params port, execution times are each tile's
    compute share. Loads that would overlap a residual-consuming window run
    at the residual-reduced port bandwidth. With steady_state, tile 0's
    reload for the next frame is appended as a final zero-execution task.
    """
    first_id = first_gemm_layer_id(graph)
    raw = []  # (layer, rows, entries, weight_bytes, exec_s)
    for layer in graph:
        if layer.kind == "maxpool":
            continue
        shape = conv_to_gemm(layer)
        mode = resolve_layer_mode(layer, layer.id == first_id, first_layer)
        m_eff = effective_m(layer, shape, mode)
        rounds = ceil_div(m_eff, pu.c_sa)
        exec_s = shape.p * rounds / pu.f_fast
        for tile in tile_layer(shape, pu):
            raw.append((layer, tile.rows, tile.uram_entries, tile.weight_bytes, exec_s, rounds))

    tasks = []
    for tid, (layer, rows, entries, wbytes, exec_s, rounds) in enumerate(raw):
        load_s = hbm.weight_load_time_bytes(wbytes, ports.params)
        if tid > 0:
            prev_layer, prev_rows, _, _, _, prev_rounds = raw[tid - 1]
            frac = _residual_load_fraction(prev_layer, prev_rows, prev_rounds, pu, ports)
            if frac > 0.0:
                load_s /= 1.0 - frac
        tasks.append(TileTask(id=tid, load_time=load_s, exec_time=exec_s,
                              entries=entries, layer_id=layer.id))
    if steady_state and tasks:
        first = tasks[0]
        tasks.append(TileTask(id=len(tasks), load_time=first.load_time, exec_time=0.0,
                              entries=first.entries, layer_id=first.layer_id))
    return tasks


def schedule_model(graph: ModelGraph, pu: PUConfig, ports: PortSet,
                   first_layer: str = "host") -> tuple[list[TileTask], SchedulePlan, SchedulePlan]:
    """Convenience: tasks, baseline plan, adaptive plan for one model/PU."""
    tasks = tasks_from_model(graph, pu, ports, first_layer=first_layer)
    capacity = uram_capacity(pu)
    base = baseline_schedule(tasks, capacity)
    adapt = adaptive_refine(base, tasks, capacity)
    return tasks, base, adapt
