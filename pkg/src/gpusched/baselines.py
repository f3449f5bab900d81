"""Comparison policies sharing the engine's decision surface."""

from __future__ import annotations

from .scheduler import (
    ASYNC,
    OVERLAP,
    URGENGO_VARIANTS,
    Policy,
    SchedulerConfig,
    UrgenGoPolicy,
    cpu_priority_from_rank,
    create_stream_pool,
    normalize_rank,
)


class VanillaPolicy(Policy):
    """Plain CUDA: one default-priority stream per task, async launching."""

    name = "vanilla"

    def bind_stream(self, inst, task_index):
        pool = create_stream_pool(self.pools, self.engine.gpu, (inst.chain_id, task_index), 1)
        return pool[0]


def static_order(chains) -> list[int]:
    """Chain ids, most critical first: tighter deadline, then criticality, then id."""
    return [c.chain_id for c in sorted(chains, key=lambda c: (c.deadline_ns, -c.static_criticality, c.chain_id))]


class StaticCriticalityPolicy(Policy):
    """Fixed per-chain CPU and stream priorities derived from scaled deadlines.

    Instances whose deadline has already passed are dropped at the next task
    boundary.
    """

    name = "static"
    deadline_abort = True

    def attach(self, engine):
        super().attach(engine)
        order = static_order(engine.config.chains)
        n = len(order)
        self.cpu_map = {cid: r for r, cid in enumerate(order, 1)}
        self.level_map = {cid: normalize_rank(r, n, self.num_streams) - 1 for r, cid in enumerate(order, 1)}

    def priority_map(self) -> dict[int, tuple[int, int]]:
        """chain -> (cpu priority, stream priority)."""
        top = self.num_streams - 1
        return {c: (self.cpu_map[c], self.level_map[c] - top) for c in self.cpu_map}

    def on_arrival(self, inst):
        inst.priority = self.cpu_map[inst.chain_id]

    def bind_stream(self, inst, task_index):
        pool = create_stream_pool(self.pools, self.engine.gpu, (inst.chain_id, task_index), self.num_streams)
        return pool[self.level_map[inst.chain_id]]


class _Group:
    __slots__ = ("gid", "members", "util")

    def __init__(self, gid):
        self.gid = gid
        self.members: dict = {}
        self.util = 0.0


def first_fit(utils: list[float], capacity: float = 1.0) -> list[list[int]]:
    """Indices grouped first-fit so each group's summed utilization <= capacity."""
    groups: list[list[int]] = []
    sums: list[float] = []
    for i, u in enumerate(utils):
        for g, s in enumerate(sums):
            if s + u <= capacity + 1e-9:
                groups[g].append(i)
                sums[g] += u
                break
        else:
            groups.append([i])
            sums.append(u)
    return groups


class RoundRobinUtilPolicy(Policy):
    """Utilization grouping with round-robin GPU windows.

    Active task instances join the first group with room (summed mean
    utilization <= capacity). Inside a group a lower-utilization task gets a
    higher stream priority. Groups take turns holding a dispatch window; when
    the window holder has nothing in flight, others may dispatch.
    """

    name = "rr-util"

    def attach(self, engine):
        super().attach(engine)
        self.groups: list[_Group] = []
        self.member_of: dict = {}
        self.turn = 0
        self._gid = 0
        self.capacity = engine.device.capacity
        engine.gpu.gate = self._gate
        engine.push(self.config.rr_window_ns, self._rotate, None)

    def _current(self):
        if not self.groups:
            return None
        return self.groups[self.turn % len(self.groups)]

    def _gate(self, k) -> bool:
        g = self.member_of.get(k.inst)
        cur = self._current()
        if g is None or cur is None or g is cur:
            return True
        for inst in cur.members:
            if inst.launched > inst.completed_kernels:
                return False
        return True

    def _rotate(self, _):
        eng = self.engine
        if self.groups:
            self.turn = (self.turn + 1) % len(self.groups)
            eng.gpu.step(eng.now)
        if eng.now < eng.horizon or eng.active:
            eng.push(eng.now + self.config.rr_window_ns, self._rotate, None)

    def bind_stream(self, inst, task_index):
        eng = self.engine
        pool = create_stream_pool(self.pools, eng.gpu, (inst.chain_id, task_index), self.num_streams)
        u = inst.chain.tasks[task_index].mean_utilization
        grp = None
        for g in self.groups:
            if g.util + u <= self.capacity + 1e-9:
                grp = g
                break
        if grp is None:
            self._gid += 1
            grp = _Group(self._gid)
            self.groups.append(grp)
        grp.members[inst] = u
        grp.util += u
        self.member_of[inst] = grp
        others = [v for m, v in grp.members.items() if m is not inst]
        rank = 1 + sum(1 for v in others if v < u)
        level = normalize_rank(rank, len(others) + 1, self.num_streams) - 1
        return pool[level]

    def on_task_end(self, inst, task_index):
        g = self.member_of.pop(inst, None)
        if g is None:
            return
        g.util -= g.members.pop(inst)
        if not g.members:
            i = self.groups.index(g)
            self.groups.pop(i)
            if self.groups and self.turn > i:
                self.turn -= 1
            if self.groups:
                self.turn %= len(self.groups)
            else:
                self.turn = 0


# --------------------------------------------------------------------------
# Classical orderings on the urgency-aware launch framework


def edf_key(inst, now):
    return inst.t_arr + inst.deadline


def remaining_work(inst) -> float:
    return inst.gpu_suffix[inst.gpu_index] + inst.cpu_suffix[inst.cpu_index]


def sjf_key(inst, now):
    return remaining_work(inst)


def response_ratio(wait: float, remaining: float) -> float:
    return (wait + remaining) / remaining if remaining > 0 else float("inf")


def hrrn_key(inst, now):
    return -response_ratio(now - inst.t_arr, remaining_work(inst))


def lcuf_key(inst, now):
    return inst.chain.utilization


CLASSICAL_KEYS = {"edf": edf_key, "sjf": sjf_key, "hrrn": hrrn_key, "lcuf": lcuf_key}


class ClassicalPolicy(Policy):
    """Total order by a classical key, mapped like UrgenGo's ranks.

    Uses batched launching with overlap, CPU priorities by rank and stream
    levels by rank over the whole pool; no reservation, no delayed launching,
    no early exit.
    """

    uses_akb = True

    def __init__(self, name: str, config: SchedulerConfig | None = None, sync_mode: str = OVERLAP):
        super().__init__(config, sync_mode)
        self.name = name
        self.key = CLASSICAL_KEYS[name]

    def _order(self, inst):
        return (self.key(inst, self.engine.now), inst.chain_id, inst.instance_id)

    def on_cpu_segment_start(self, inst):
        eng = self.engine
        order = sorted(eng.active, key=self._order)
        n = len(order)
        levels = self.config.os_priority_levels
        for r, a in enumerate(order, 1):
            eng.cpu.set_priority(a, cpu_priority_from_rank(r, n, levels))

    def bind_stream(self, inst, task_index):
        eng = self.engine
        pool = create_stream_pool(self.pools, eng.gpu, (inst.chain_id, task_index), self.num_streams)
        mine = self._order(inst)
        others = [self._order(g.inst) for g in eng.akb.groups]
        rank = 1 + sum(1 for o in others if o < mine)
        return pool[normalize_rank(rank, len(others) + 1, len(pool)) - 1]


POLICY_NAMES = ("urgengo", "vanilla", "static", "rr-util", "edf", "sjf", "hrrn", "lcuf")


def make_policy(name: str, config: SchedulerConfig | None = None, variant: str = "full",
                sync_mode: str | None = None) -> Policy:
    """Instantiate a registered policy by name."""
    if name == "urgengo":
        if variant not in URGENGO_VARIANTS:
            raise ValueError(f"unknown urgengo variant {variant!r}; choose from {', '.join(URGENGO_VARIANTS)}")
        return UrgenGoPolicy(config, sync_mode or OVERLAP, variant=variant, **URGENGO_VARIANTS[variant])
    if name == "vanilla":
        return VanillaPolicy(config, sync_mode or ASYNC)
    if name == "static":
        return StaticCriticalityPolicy(config, sync_mode or ASYNC)
    if name == "rr-util":
        return RoundRobinUtilPolicy(config, sync_mode or ASYNC)
    if name in CLASSICAL_KEYS:
        return ClassicalPolicy(name, config, sync_mode or OVERLAP)
    raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")
