"""Static workload description: chains, tasks, kernels, scaling factors.

All durations are held as integer nanoseconds once a config has been
loaded; the YAML grammar uses milliseconds/microseconds for readability.
"""

from __future__ import annotations

import csv
import math
import random
import zlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class ConfigError(ValueError):
    """Raised for malformed or invalid configuration text."""


# --------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True, slots=True)
class KernelSpec:
    kernel_id: int
    grid_dim: int
    block_dim: int
    exec_ns: int
    utilization: float
    gpu_segment_id: int
    shared_mem: int = 0
    is_memcpy: bool = False

    def __post_init__(self):
        if self.exec_ns <= 0:
            raise ConfigError(f"kernel {self.kernel_id}: exec time must be > 0")
        if not 0.0 <= self.utilization <= 1.0:
            raise ConfigError(f"kernel {self.kernel_id}: utilization {self.utilization} outside [0, 1]")
        if self.grid_dim < 1 or self.block_dim < 1:
            raise ConfigError(f"kernel {self.kernel_id}: grid/block dims must be positive")
        if self.shared_mem < 0:
            raise ConfigError(f"kernel {self.kernel_id}: shared_mem must be >= 0")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kernels: tuple[KernelSpec, ...]
    cpu_segment_ns: tuple[int, ...]
    library_tag: str = ""
    issues_barrier: bool = False

    def __post_init__(self):
        if len(self.cpu_segment_ns) < 1:
            raise ConfigError(f"task {self.task_id}: needs at least one CPU segment")
        if any(c < 0 for c in self.cpu_segment_ns):
            raise ConfigError(f"task {self.task_id}: negative CPU segment time")
        seg_ids = [k.gpu_segment_id for k in self.kernels]
        seen: list[int] = []
        for s in seg_ids:
            if not seen or seen[-1] != s:
                if seen and s <= seen[-1]:
                    raise ConfigError(
                        f"task {self.task_id}: kernels must be grouped by strictly increasing gpu_segment_id"
                    )
                seen.append(s)
        if not len(seen) <= len(self.cpu_segment_ns) <= len(seen) + 1:
            raise ConfigError(
                f"task {self.task_id}: {len(self.cpu_segment_ns)} CPU segments do not interleave "
                f"with {len(seen)} GPU segments"
            )

    @cached_property
    def gpu_segments(self) -> tuple[tuple[KernelSpec, ...], ...]:
        """Kernels split into contiguous GPU segments, in order."""
        out: list[list[KernelSpec]] = []
        last = None
        for k in self.kernels:
            if k.gpu_segment_id != last:
                out.append([])
                last = k.gpu_segment_id
            out[-1].append(k)
        return tuple(tuple(seg) for seg in out)

    @property
    def gpu_ns(self) -> int:
        return sum(k.exec_ns for k in self.kernels)

    @property
    def mean_utilization(self) -> float:
        ks = [k for k in self.kernels if not k.is_memcpy]
        return sum(k.utilization for k in ks) / len(ks) if ks else 0.0


@dataclass(frozen=True)
class ChainSpec:
    chain_id: int
    period_ns: int
    deadline_ns: int
    tasks: tuple[TaskSpec, ...]
    modality: str = ""
    static_criticality: int = 0
    cpu_sd_ns: int = 0
    gpu_sd_ns: int = 0

    def __post_init__(self):
        if self.period_ns <= 0:
            raise ConfigError(f"chain {self.chain_id}: period must be > 0")
        if self.deadline_ns <= 0:
            raise ConfigError(f"chain {self.chain_id}: deadline must be > 0")
        if not self.tasks:
            raise ConfigError(f"chain {self.chain_id}: tasks must be non-empty")

    @cached_property
    def num_kernels(self) -> int:
        """N: total kernels over all tasks."""
        return sum(len(t.kernels) for t in self.tasks)

    @cached_property
    def num_cpu_segments(self) -> int:
        """M: total CPU segments over all tasks."""
        return sum(len(t.cpu_segment_ns) for t in self.tasks)

    @property
    def cpu_ns(self) -> int:
        return sum(sum(t.cpu_segment_ns) for t in self.tasks)

    @property
    def gpu_ns(self) -> int:
        return sum(t.gpu_ns for t in self.tasks)

    @property
    def utilization(self) -> float:
        """GPU time demand per unit time (E_gpu / period)."""
        return self.gpu_ns / self.period_ns


@dataclass(frozen=True)
class DeviceParams:
    profile: str = "rtx3070ti"
    num_priorities: int = 6
    launch_overhead_ns: int = 21_700
    sync_cost_ns: tuple[int, int] = (10_000, 200_000)
    capacity: float = 1.0
    # calibrated against the 2D/3D detection co-run target, see gpusched.calibration
    contention_alpha: float = 1.172
    barrier_cost_ns: int = 188_000
    kernel_time_scale: float = 1.0
    cpu_cores: int = 8
    context_switch_ns: int = 5_000

    def __post_init__(self):
        if self.num_priorities < 2:
            raise ConfigError("device: num_priorities must be >= 2")
        if self.capacity <= 0:
            raise ConfigError("device: capacity must be > 0")
        lo, hi = self.sync_cost_ns
        if min(self.launch_overhead_ns, lo, hi, self.barrier_cost_ns, self.context_switch_ns) < 0:
            raise ConfigError("device: costs must be >= 0")
        if lo > hi:
            raise ConfigError("device: sync cost range is inverted")
        if self.contention_alpha < 0:
            raise ConfigError("device: contention_alpha must be >= 0")
        if self.cpu_cores < 1:
            raise ConfigError("device: cpu_cores must be >= 1")

    @property
    def priority_range(self) -> range:
        """Stream priorities, most urgent first (e.g. -5..0)."""
        return range(-(self.num_priorities - 1), 1)


DEVICE_PROFILES: dict[str, dict] = {
    "rtx3070ti": {},
    # 8 SMs vs 46 SMs; kernel times stretched by the SM ratio (rough approximation)
    "agx-orin": {"kernel_time_scale": 46 / 8},
}


@dataclass(frozen=True)
class WorkloadConfig:
    chains: tuple[ChainSpec, ...]
    f_a: float = 1.0
    f_d: float = 1.0
    f_tight: float = 0.0
    jitter_ns: int = 15 * NS_PER_MS
    duration_s: float = 600.0
    seed: int = 0
    device: DeviceParams = field(default_factory=DeviceParams)
    policy: str = "urgengo"
    tight_chains: tuple[int, ...] = ()
    scaled: bool = False

    def __post_init__(self):
        if not self.chains:
            raise ConfigError("chains must be non-empty")
        if not 0.0 <= self.f_tight <= 1.0:
            raise ConfigError(f"f_tight={self.f_tight} outside [0, 1]")
        if self.f_a <= 0:
            raise ConfigError(f"f_a={self.f_a} must be > 0")
        if self.f_d <= 0:
            raise ConfigError(f"f_d={self.f_d} must be > 0")
        if self.jitter_ns < 0:
            raise ConfigError("jitter must be >= 0")
        if self.duration_s < 0:
            raise ConfigError("duration must be >= 0")
        ids = [c.chain_id for c in self.chains]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate chain ids")

    def chain(self, chain_id: int) -> ChainSpec:
        for c in self.chains:
            if c.chain_id == chain_id:
                return c
        raise KeyError(chain_id)


# --------------------------------------------------------------------------
# Config grammar (YAML), validated with pydantic; unknown keys rejected.


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KernelRow(_Strict):
    id: int
    grid: int = Field(ge=1)
    block: int = Field(ge=1)
    exec_us: float = Field(gt=0)
    util: float = Field(ge=0, le=1)
    segment: int = 0
    shared_mem: int = Field(default=0, ge=0)
    memcpy: bool = False


class TaskStats(_Strict):
    n_kernels: int = Field(ge=1)
    gpu_ms: float = Field(gt=0)
    sigma: float = Field(default=1.0, ge=0)
    util_mean: float = Field(default=0.4, gt=0, lt=1)
    gpu_segments: int = Field(default=1, ge=1)


class TaskModel(_Strict):
    name: str = ""
    cpu_ms: list[float]
    kernels: list[KernelRow] | None = None
    task_stats: TaskStats | None = None
    barrier: bool = False

    @model_validator(mode="after")
    def _one_kernel_source(self):
        if (self.kernels is None) == (self.task_stats is None):
            raise ValueError("exactly one of 'kernels' or 'task_stats' is required")
        return self


class ChainModel(_Strict):
    id: int
    modality: str = ""
    period_ms: float = Field(gt=0)
    deadline_ms: float = Field(gt=0)
    criticality: int = 0
    cpu_sd_ms: float = Field(default=0.0, ge=0)
    gpu_sd_ms: float = Field(default=0.0, ge=0)
    tasks: list[TaskModel]


class FactorsModel(_Strict):
    f_a: float = 1.0
    f_d: float = 1.0
    f_tight: float = 0.0


class DeviceModel(_Strict):
    profile: Literal["rtx3070ti", "agx-orin"] = "rtx3070ti"
    num_priorities: int | None = None
    launch_overhead_us: float | None = None
    sync_cost_us: tuple[float, float] | None = None
    capacity: float | None = None
    contention_alpha: float | None = None
    barrier_cost_us: float | None = None
    cpu_cores: int | None = None
    context_switch_us: float | None = None


class ConfigModel(_Strict):
    seed: int = 0
    duration: float = 600.0
    jitter_ms: float = 15.0
    policy: str = "urgengo"
    factors: FactorsModel = FactorsModel()
    device: DeviceModel = DeviceModel()
    chains: list[ChainModel]


def _ms(x: float) -> int:
    return int(round(x * NS_PER_MS))


def _us(x: float) -> int:
    return int(round(x * NS_PER_US))


def build_device(model: DeviceModel | None = None, **overrides) -> DeviceParams:
    model = model or DeviceModel()
    kw: dict = dict(DEVICE_PROFILES[model.profile])
    kw["profile"] = model.profile
    if model.num_priorities is not None:
        kw["num_priorities"] = model.num_priorities
    if model.launch_overhead_us is not None:
        kw["launch_overhead_ns"] = _us(model.launch_overhead_us)
    if model.sync_cost_us is not None:
        kw["sync_cost_ns"] = (_us(model.sync_cost_us[0]), _us(model.sync_cost_us[1]))
    if model.capacity is not None:
        kw["capacity"] = model.capacity
    if model.contention_alpha is not None:
        kw["contention_alpha"] = model.contention_alpha
    if model.barrier_cost_us is not None:
        kw["barrier_cost_ns"] = _us(model.barrier_cost_us)
    if model.cpu_cores is not None:
        kw["cpu_cores"] = model.cpu_cores
    if model.context_switch_us is not None:
        kw["context_switch_ns"] = _us(model.context_switch_us)
    kw.update(overrides)
    return DeviceParams(**kw)


def _task_seed(name: str, chain_id: int, task_index: int) -> int:
    # same library -> same synthesized kernels in every chain that uses it
    key = name if name else f"chain{chain_id}.task{task_index}"
    return zlib.crc32(key.encode())


def _build_task(tm: TaskModel, task_id: int, seed: int, where: str) -> TaskSpec:
    if tm.kernels is not None:
        kernels = tuple(
            KernelSpec(
                kernel_id=r.id,
                grid_dim=r.grid,
                block_dim=r.block,
                exec_ns=_us(r.exec_us),
                utilization=r.util,
                gpu_segment_id=r.segment,
                shared_mem=r.shared_mem,
                is_memcpy=r.memcpy,
            )
            for r in tm.kernels
        )
    else:
        st = tm.task_stats
        kernels = synthesize_kernels(st, seed)
    try:
        return TaskSpec(
            task_id=task_id,
            kernels=kernels,
            cpu_segment_ns=tuple(_ms(c) for c in tm.cpu_ms),
            library_tag=tm.name,
            issues_barrier=tm.barrier,
        )
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None


def _format_validation(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def load_workload(config_text: str) -> WorkloadConfig:
    """Parse and validate YAML configuration text into a WorkloadConfig."""
    try:
        raw = yaml.safe_load(config_text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        locus = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"parse error{locus}: {getattr(e, 'problem', e)}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if raw.get("chains") == []:
        raise ConfigError("chains must be non-empty")
    try:
        model = ConfigModel.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from None
    return config_from_model(model)


def config_from_model(model: ConfigModel) -> WorkloadConfig:
    chains = []
    for cm in model.chains:
        if not cm.tasks:
            raise ConfigError(f"chain {cm.id}: tasks must be non-empty")
        tasks = tuple(
            _build_task(tm, i, _task_seed(tm.name, cm.id, i), f"chain {cm.id} task {i}")
            for i, tm in enumerate(cm.tasks)
        )
        chains.append(
            ChainSpec(
                chain_id=cm.id,
                period_ns=_ms(cm.period_ms),
                deadline_ns=_ms(cm.deadline_ms),
                tasks=tasks,
                modality=cm.modality,
                static_criticality=cm.criticality,
                cpu_sd_ns=_ms(cm.cpu_sd_ms),
                gpu_sd_ns=_ms(cm.gpu_sd_ms),
            )
        )
    return WorkloadConfig(
        chains=tuple(chains),
        f_a=model.factors.f_a,
        f_d=model.factors.f_d,
        f_tight=model.factors.f_tight,
        jitter_ns=_ms(model.jitter_ms),
        duration_s=model.duration,
        seed=model.seed,
        device=build_device(model.device),
        policy=model.policy,
    )


BUILTIN_WORKFLOWS = {
    "default": tuple(range(0, 10)),
    "workflow2": tuple(range(6, 11)),
    "full": tuple(range(0, 11)),
}


def builtin_config_text() -> str:
    return resources.files("gpusched.data").joinpath("workflow.yaml").read_text()


def load_config(name_or_path: str | Path) -> WorkloadConfig:
    """Load a built-in workflow by name or a YAML file by path."""
    if str(name_or_path) in BUILTIN_WORKFLOWS:
        cfg = load_workload(builtin_config_text())
        keep = BUILTIN_WORKFLOWS[str(name_or_path)]
        return replace(cfg, chains=tuple(c for c in cfg.chains if c.chain_id in keep))
    path = Path(name_or_path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    return load_workload(text)


# --------------------------------------------------------------------------
# Experiment factors and arrivals


def select_tight_chains(chain_ids: Iterable[int], f_tight: float, seed: int) -> tuple[int, ...]:
    ids = sorted(chain_ids)
    k = math.ceil(f_tight * len(ids) - 1e-9)
    rng = random.Random(f"tight:{seed}")
    return tuple(sorted(rng.sample(ids, k)))


def apply_factors(config: WorkloadConfig) -> WorkloadConfig:
    """Scale periods by 1/f_a and deadlines by f_d; halve the tight subset."""
    tight = select_tight_chains((c.chain_id for c in config.chains), config.f_tight, config.seed)
    chains = []
    for c in config.chains:
        deadline = c.deadline_ns * config.f_d
        if c.chain_id in tight:
            deadline /= 2
        chains.append(
            replace(
                c,
                period_ns=int(round(c.period_ns / config.f_a)),
                deadline_ns=int(round(deadline)),
            )
        )
    return replace(config, chains=tuple(chains), tight_chains=tight, scaled=True)


def generate_arrivals(chain: ChainSpec, duration_s: float, jitter_ns: int, seed: int) -> list[int]:
    """Periodic release times with uniform jitter in [0, jitter], in ns."""
    horizon = int(round(duration_s * NS_PER_S))
    if horizon <= 0:
        return []
    rng = random.Random(f"arrivals:{seed}:{chain.chain_id}")
    out = []
    i = 0
    while i * chain.period_ns < horizon:
        t = i * chain.period_ns + (rng.randint(0, jitter_ns) if jitter_ns else 0)
        if t < horizon:
            out.append(t)
        i += 1
    return out


# --------------------------------------------------------------------------
# Kernel-time synthesis


def synthesize_kernel_times(n_kernels: int, total_ns: int, sigma: float, seed) -> list[int]:
    """Right-skewed per-kernel durations (ns) that sum exactly to total_ns.

    Draws from a lognormal truncated at +-3 sigma, rescales to the total, and
    absorbs integer rounding into the final element.
    """
    if n_kernels < 1 or total_ns <= 0:
        raise ValueError("need n_kernels >= 1 and total > 0")
    if total_ns < n_kernels:
        raise ValueError("total too small for one ns per kernel")
    if n_kernels == 1:
        return [total_ns]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n_kernels)
    z = np.clip(z, -3.0, 3.0)
    x = np.exp(sigma * z)
    times = np.maximum(1, np.floor(x / x.sum() * total_ns)).astype(np.int64)
    times[-1] += total_ns - int(times.sum())
    if times[-1] < 1:
        # push the deficit onto the largest element instead
        deficit = 1 - int(times[-1])
        times[-1] = 1
        times[int(np.argmax(times))] -= deficit
    out = [int(t) for t in times]
    assert sum(out) == total_ns and min(out) >= 1
    return out


def synthesize_kernels(stats: TaskStats, seed) -> tuple[KernelSpec, ...]:
    times = synthesize_kernel_times(stats.n_kernels, _ms(stats.gpu_ms), stats.sigma, seed)
    rng = np.random.default_rng([seed, 7])
    conc = 5.0
    utils = rng.beta(stats.util_mean * conc, (1 - stats.util_mean) * conc, size=stats.n_kernels)
    utils = np.clip(np.round(utils, 3), 0.01, 1.0)
    per_seg = math.ceil(stats.n_kernels / stats.gpu_segments)
    kernels = []
    for i, (t, u) in enumerate(zip(times, utils)):
        block = 256 if i % 3 else 512
        kernels.append(
            KernelSpec(
                kernel_id=i,
                grid_dim=max(1, int(round(float(u) * 46 * 2))),
                block_dim=block,
                exec_ns=t,
                utilization=float(u),
                gpu_segment_id=i // per_seg,
            )
        )
    return tuple(kernels)


# --------------------------------------------------------------------------
# Offline profiling lookup table


class MissingKernel(KeyError):
    """Lookup on an unprofiled (kernel_id, grid, block) key."""


@dataclass(frozen=True, slots=True)
class LookupRow:
    exec_ns: int
    utilization: float
    gpu_segment_id: int


LOOKUP_HEADER = ["kernel_id", "grid", "block", "exec_us", "util_pct", "segment_id"]


class LookupTable:
    """Maps (kernel_id, grid, block) to profiled execution time and utilization.

    Several rows may share a key; they are kept in insertion order and
    lookups return the most recent.
    """

    def __init__(self):
        self._rows: dict[tuple[int, int, int], list[LookupRow]] = {}

    def add(self, kernel_id: int, grid: int, block: int, exec_ns: int, utilization: float, segment_id: int = 0):
        if exec_ns <= 0:
            raise ValueError("exec time must be > 0")
        self._rows.setdefault((kernel_id, grid, block), []).append(LookupRow(exec_ns, utilization, segment_id))

    def __len__(self):
        return sum(len(v) for v in self._rows.values())

    def __contains__(self, key):
        return key in self._rows

    def history(self, kernel_id: int, grid: int, block: int) -> list[LookupRow]:
        return list(self._rows.get((kernel_id, grid, block), ()))

    def lookup(self, kernel_id: int, grid: int, block: int) -> tuple[int, float]:
        rows = self._rows.get((kernel_id, grid, block))
        if not rows:
            raise MissingKernel((kernel_id, grid, block))
        r = rows[-1]
        return r.exec_ns, r.utilization

    @classmethod
    def from_task(cls, task: TaskSpec) -> "LookupTable":
        table = cls()
        for k in task.kernels:
            table.add(k.kernel_id, k.grid_dim, k.block_dim, k.exec_ns, k.utilization, k.gpu_segment_id)
        return table

    @classmethod
    def read_csv(cls, path: str | Path) -> "LookupTable":
        table = cls()
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != LOOKUP_HEADER:
                raise ConfigError(f"{path}: expected header {','.join(LOOKUP_HEADER)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    table.add(
                        int(row["kernel_id"]),
                        int(row["grid"]),
                        int(row["block"]),
                        int(round(float(row["exec_us"]) * NS_PER_US)),
                        float(row["util_pct"]) / 100.0,
                        int(row["segment_id"]),
                    )
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"{path}:{lineno}: {e}") from None
        return table

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOOKUP_HEADER)
            for (kid, grid, block), rows in self._rows.items():
                for r in rows:
                    w.writerow([kid, grid, block, f"{r.exec_ns / NS_PER_US:.3f}", f"{r.utilization * 100:.1f}", r.gpu_segment_id])


def lookup_exec_time(table: LookupTable, kernel_id: int, grid: int, block: int) -> tuple[int, float]:
    return table.lookup(kernel_id, grid, block)
