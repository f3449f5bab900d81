"""Urgency-aware kernel-launch scheduling.

Holds the pieces every policy builds on (the Active Kernel Buffer, stream
pools, rank normalization, batch planning) and the UrgenGo policy itself.
Policies are driven by the engine through a small decision surface: CPU
priority at segment starts, stream binding at a task's first launch,
launch batching and sync mode, delayed launching, and early exit.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

from .device import InvariantViolation, Stream
from .workload import NS_PER_US

ASYNC = "async"
PER_KERNEL = "per-kernel"
BATCHED = "batched"
OVERLAP = "batched-overlap"
SYNC_MODES = (ASYNC, PER_KERNEL, BATCHED, OVERLAP)

OS_PRIORITY_LEVELS = 99
DEFAULT_CPU_PRIORITY = 50
AKB_OP_NS = 500


@dataclass
class SchedulerConfig:
    delta_eval_ns: int = 500 * NS_PER_US
    sleep_interval_ns: int = 1000 * NS_PER_US
    util_exemption: float = 0.1
    th_percentile: float = 95.0
    num_streams: int | None = None  # None: device NUM_PRI
    os_priority_levels: int = OS_PRIORITY_LEVELS
    rr_window_ns: int = 2000 * NS_PER_US

    def __post_init__(self):
        if self.delta_eval_ns <= 0 or self.sleep_interval_ns <= 0:
            raise ValueError("delta_eval and sleep_interval must be positive")
        if not 0 <= self.util_exemption <= 1:
            raise ValueError("util_exemption must be in [0, 1]")
        if not 0 < self.th_percentile <= 100:
            raise ValueError("th_percentile must be in (0, 100]")
        if self.num_streams is not None and self.num_streams < 1:
            raise ValueError("num_streams must be >= 1")


# --------------------------------------------------------------------------
# Active Kernel Buffer


@dataclass(frozen=True)
class AkbEntry:
    kernel_id: int
    utilization: float
    stream_id: int
    chain_id: int
    cpu_priority: int
    last_eval_time: int
    last_urgency: float


class AkbGroup:
    """Active kernels of one task instance; they share stream and urgency."""

    __slots__ = ("inst", "chain_id", "stream", "cpu_priority", "t_eval", "ul", "batches", "count")

    def __init__(self, inst, stream: Stream):
        self.inst = inst
        self.chain_id = inst.chain_id
        self.stream = stream
        self.cpu_priority = inst.priority
        self.t_eval = inst.t_eval
        self.ul = inst.ul
        self.batches: deque = deque()  # (batch_no, kernel instances)
        self.count = 0


class ActiveKernelBuffer:
    """Per-chain partitions of in-flight kernels with a global read view."""

    def __init__(self):
        self.partitions: dict[int, dict[int, AkbGroup]] = {}
        self.groups: list[AkbGroup] = []
        self.ops = 0
        self.size = 0
        self.peak = 0

    def insert(self, inst, stream: Stream, batch_no: int, kernels) -> int:
        g = inst.akb
        if g is None:
            g = AkbGroup(inst, stream)
            inst.akb = g
            self.partitions.setdefault(inst.chain_id, {})[inst.instance_id] = g
            self.groups.append(g)
        elif g.stream is not stream:
            raise InvariantViolation("task instance launched on two streams")
        n = len(kernels)
        g.batches.append((batch_no, kernels))
        g.count += n
        self.size += n
        if self.size > self.peak:
            self.peak = self.size
        self.ops += n
        return n

    def refresh(self, inst, now: int, ul: float) -> int:
        g = inst.akb
        if g is None:
            return 0
        g.t_eval = now
        g.ul = ul
        g.cpu_priority = inst.priority
        self.ops += 1
        return 1

    def remove_through(self, inst, batch_no: int) -> int:
        """Remove all entries of batches numbered <= batch_no."""
        g = inst.akb
        if g is None or not g.batches or g.batches[0][0] > batch_no:
            raise InvariantViolation(f"AKB double removal for chain {inst.chain_id} batch {batch_no}")
        n = 0
        while g.batches and g.batches[0][0] <= batch_no:
            n += len(g.batches.popleft()[1])
        g.count -= n
        self.size -= n
        self.ops += n
        if not g.batches:
            self._drop(g)
        return n

    def purge(self, inst) -> int:
        g = inst.akb
        if g is None:
            return 0
        n = g.count
        self.size -= n
        self.ops += n
        g.batches.clear()
        g.count = 0
        self._drop(g)
        return n

    def _drop(self, g: AkbGroup):
        part = self.partitions.get(g.chain_id)
        if part is not None:
            part.pop(g.inst.instance_id, None)
            if not part:
                del self.partitions[g.chain_id]
        self.groups.remove(g)
        g.inst.akb = None

    def foreign(self, chain_id: int):
        return [g for g in self.groups if g.chain_id != chain_id]

    def max_urgency(self) -> float | None:
        if not self.groups:
            return None
        return max(g.ul for g in self.groups)

    def entries(self):
        for g in self.groups:
            for _, ks in g.batches:
                for k in ks:
                    yield AkbEntry(k.index, k.util, g.stream.stream_id, g.chain_id, g.cpu_priority, g.t_eval, g.ul)

    def __len__(self):
        return self.size


def update_akb(akb: ActiveKernelBuffer, event: str, inst, **kw) -> int:
    """Apply one launch / evaluation / synchronization event to the AKB."""
    if event == "launch":
        return akb.insert(inst, kw["stream"], kw["batch_no"], kw["kernels"])
    if event == "evaluate":
        return akb.refresh(inst, kw["now"], kw["ul"])
    if event == "sync":
        return akb.remove_through(inst, kw["batch_no"])
    raise ValueError(f"unknown AKB event {event!r}")


# --------------------------------------------------------------------------
# Ranking and normalization


def rank_desc(others, value: float, chain_id: int) -> tuple[int, int]:
    """1-based rank of (value, chain_id) among `others`, most urgent first.

    `others` holds (urgency, chain_id) pairs. Equal urgencies order by the
    smaller chain id; an entry of the newcomer's own chain stays ahead of it.
    Returns (rank, n) with n counting the newcomer.
    """
    ahead = 0
    for u, c in others:
        if u > value or (u == value and c <= chain_id):
            ahead += 1
    return ahead + 1, len(others) + 1


def normalize_rank(rank: int, n: int, levels: int) -> int:
    """Map rank 1..n linearly onto levels 1..levels (bin centres, rounded up)."""
    if not 1 <= rank <= n:
        raise ValueError(f"rank {rank} outside 1..{n}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    return max(1, min(levels, math.ceil((rank - 0.5) * levels / n)))


def cpu_priority_from_rank(rank: int, n: int, os_levels: int = OS_PRIORITY_LEVELS) -> int:
    """OS priority (1 = most urgent) for a rank among n active chains."""
    if n <= os_levels:
        return rank
    return normalize_rank(rank, n, os_levels)


def map_cpu_priority(urgencies: dict, os_levels: int = OS_PRIORITY_LEVELS) -> dict:
    """Rank chains by urgency (descending, ties by smaller id) into priorities.

    `urgencies` maps a sortable id (chain id, or (chain, instance)) to UL.
    """
    order = sorted(urgencies, key=lambda c: (-urgencies[c], c))
    n = len(order)
    return {c: cpu_priority_from_rank(i + 1, n, os_levels) for i, c in enumerate(order)}


def stream_level(ul: float, others, th: float, num_streams: int, chain_id: int = -1) -> int:
    """Stream level (0 = reserved highest) for a new task instance.

    `others` holds (urgency, chain_id) pairs of the active task instances.
    """
    if num_streams <= 1:
        return 0
    if ul >= th:
        return 0
    rank, n = rank_desc(others, ul, chain_id)
    return normalize_rank(rank, n, num_streams - 1)


# --------------------------------------------------------------------------
# Stream pools


class StreamPool:
    """NUM_PRI streams for one task, priorities -(NUM_PRI-1)..0."""

    def __init__(self, gpu, key, num_streams: int):
        self.key = key
        self.streams = [gpu.new_stream(level - (num_streams - 1), label=(key, level)) for level in range(num_streams)]

    def __getitem__(self, level: int) -> Stream:
        return self.streams[level]

    def __len__(self):
        return len(self.streams)

    @property
    def priorities(self):
        return [s.priority for s in self.streams]


def create_stream_pool(pools: dict, gpu, key, num_streams: int) -> StreamPool:
    pool = pools.get(key)
    if pool is None:
        pool = StreamPool(gpu, key, num_streams)
        pools[key] = pool
    return pool


def get_stream_priority(pool: StreamPool, akb: ActiveKernelBuffer, ul: float, th: float, chain_id: int = -1) -> Stream:
    others = [(g.ul, g.chain_id) for g in akb.groups]
    return pool[stream_level(ul, others, th, len(pool), chain_id)]


# --------------------------------------------------------------------------
# Batching


def plan_batches(estimates, delta_eval) -> list[int]:
    """Exclusive end indices of greedy launch batches.

    A batch grows while its estimated time stays below delta_eval; the
    kernel that brings the sum to delta_eval or beyond closes the batch.
    """
    ends = []
    acc = 0
    for i, e in enumerate(estimates):
        acc += e
        if acc >= delta_eval:
            ends.append(i + 1)
            acc = 0
    if not ends or ends[-1] != len(estimates):
        if len(estimates):
            ends.append(len(estimates))
    return ends


def batch_overlap_sync(batch_index: int) -> int | None:
    """Batch whose completion must be awaited before launching `batch_index`."""
    return batch_index - 2 if batch_index >= 2 else None


# --------------------------------------------------------------------------
# Policies


class Policy:
    """Shared decision surface; the defaults describe plain CUDA behaviour."""

    name = "base"
    uses_akb = False  # charge AKB access costs to the CPU
    early_exit_enabled = False
    deadline_abort = False
    delay_enabled = False

    def __init__(self, config: SchedulerConfig | None = None, sync_mode: str = ASYNC):
        self.config = config or SchedulerConfig()
        if sync_mode not in SYNC_MODES:
            raise ValueError(f"unknown sync mode {sync_mode!r}")
        self.sync_mode = sync_mode
        self.engine = None
        self.pools: dict = {}
        self._plans: dict = {}

    def attach(self, engine):
        self.engine = engine
        n = self.config.num_streams or engine.device.num_priorities
        self.num_streams = n

    def describe(self) -> dict:
        return {"policy": self.name, "sync_mode": self.sync_mode}

    # hooks -------------------------------------------------------------
    def on_arrival(self, inst):
        inst.priority = DEFAULT_CPU_PRIORITY

    def on_cpu_segment_start(self, inst):
        pass

    def bind_stream(self, inst, task_index: int) -> Stream:
        pool = create_stream_pool(self.pools, self.engine.gpu, (inst.chain_id, task_index), 1)
        return pool[0]

    def batch_ends(self, inst, task_index: int, seg_index: int, kernels) -> list[int]:
        key = (inst.chain_id, task_index, seg_index)
        ends = self._plans.get(key)
        if ends is None:
            n = len(kernels)
            if self.sync_mode == ASYNC:
                ends = [n]
            elif self.sync_mode == PER_KERNEL:
                ends = list(range(1, n + 1))
            else:
                est = self.engine.kernel_estimates(inst.chain_id, task_index, seg_index)
                ends = plan_batches(est, self.config.delta_eval_ns)
            self._plans[key] = ends
        return ends

    def should_delay(self, inst) -> bool:
        return False

    def early_exit(self, inst) -> bool:
        if self.early_exit_enabled and inst.ul < 0:
            return True
        if self.deadline_abort and self.engine.now >= inst.t_arr + inst.deadline:
            return True
        return False

    def on_task_end(self, inst, task_index: int):
        pass


class UrgenGoPolicy(Policy):
    name = "urgengo"
    uses_akb = True
    early_exit_enabled = True

    def __init__(self, config: SchedulerConfig | None = None, sync_mode: str = OVERLAP,
                 binding: bool = True, delay: bool = True, cpu_mapping: bool = True, variant: str = "full"):
        super().__init__(config, sync_mode)
        self.binding = binding
        self.delay_enabled = delay
        self.cpu_mapping = cpu_mapping
        self.variant = variant
        self.bindings: list[tuple[float, float, int]] = []  # (ul, th, priority) at binding time

    def describe(self):
        d = super().describe()
        d.update(variant=self.variant, binding=self.binding, delay=self.delay_enabled)
        return d

    def on_arrival(self, inst):
        inst.priority = DEFAULT_CPU_PRIORITY

    def on_cpu_segment_start(self, inst):
        if not self.cpu_mapping:
            return
        eng = self.engine
        active = eng.active
        order = sorted(active, key=_urgency_order)
        n = len(order)
        levels = self.config.os_priority_levels
        for r, a in enumerate(order, 1):
            eng.cpu.set_priority(a, cpu_priority_from_rank(r, n, levels))

    def bind_stream(self, inst, task_index):
        eng = self.engine
        pool = create_stream_pool(self.pools, eng.gpu, (inst.chain_id, task_index), self.num_streams)
        if not self.binding:
            return pool[len(pool) - 1]
        th = eng.threshold
        ul = inst.ul
        s = pool[stream_level(ul, [(g.ul, g.chain_id) for g in eng.akb.groups], th, len(pool), inst.chain_id)]
        if len(self.bindings) < 200_000:
            self.bindings.append((ul, th, s.priority - pool[0].priority))
        return s

    def should_delay(self, inst) -> bool:
        if not self.delay_enabled:
            return False
        th = self.engine.threshold
        if inst.ul >= th:
            return False
        cid = inst.chain_id
        for g in self.engine.akb.groups:
            if g.chain_id != cid and g.ul >= th:
                return True
        return False


def _urgency_order(a):
    return (-a.ul, a.chain_id, a.instance_id)


def delay_kernel_launch(akb: ActiveKernelBuffer, chain_id: int, kernel_util: float, own_ul: float, th: float,
                        util_exemption: float = 0.1) -> str:
    """Proceed or Delay for one kernel, per the delayed-launching rule."""
    if kernel_util < util_exemption or own_ul >= th:
        return "Proceed"
    for g in akb.groups:
        if g.chain_id != chain_id and g.ul >= th:
            return "Delay"
    return "Proceed"


def early_chain_exit(ul: float) -> bool:
    return ul < 0


URGENGO_VARIANTS = {
    "full": dict(binding=True, delay=True),
    "no-delay": dict(binding=True, delay=False),
    "no-binding": dict(binding=False, delay=True),
    "neither": dict(binding=False, delay=False),
}
