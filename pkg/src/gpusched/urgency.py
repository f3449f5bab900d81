"""Chain urgency (reciprocal laxity), execution-time predictors, and the
truly-urgent threshold.

Urgency values are in 1/ms. Internally all times are integer ns.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .workload import NS_PER_MS, ChainSpec, LookupTable, MissingKernel

UL_MAX = 1e6
DEFAULT_WINDOW = 8


def urgency(t_arr: int, deadline: int, remaining_gpu: float, remaining_cpu: float, now: int) -> float:
    """1 / (t_arr + D - remaining GPU - remaining CPU - now), in 1/ms.

    The GPU-only form is the special case remaining_cpu == 0.
    """
    denom = t_arr + deadline - remaining_gpu - remaining_cpu - now
    if denom == 0:
        return UL_MAX
    ul = NS_PER_MS / denom
    if ul > UL_MAX:
        return UL_MAX
    if ul < -UL_MAX:
        return -UL_MAX
    return ul


@dataclass
class UrgencyValue:
    value: float
    evaluated_at: int


class ExecTimePredictor:
    """Moving average over the last `window` observations."""

    __slots__ = ("nominal", "_obs", "_sum")

    def __init__(self, nominal: float, window: int = DEFAULT_WINDOW):
        self.nominal = nominal
        self._obs: deque[float] = deque(maxlen=window)
        self._sum = 0.0

    def update(self, observed: float) -> "ExecTimePredictor":
        if observed <= 0:
            raise ValueError("observed time must be > 0")
        if len(self._obs) == self._obs.maxlen:
            self._sum -= self._obs[0]
        self._obs.append(observed)
        self._sum += observed
        return self

    def predict(self) -> float:
        if not self._obs:
            return self.nominal
        return self._sum / len(self._obs)

    def __len__(self):
        return len(self._obs)


def predict_update(predictor: ExecTimePredictor, observed: float) -> ExecTimePredictor:
    return predictor.update(observed)


class ChainPredictor:
    """Per-chain estimates of every kernel's and CPU segment's duration.

    Kernel estimates average recent lookup-table answers for each kernel
    (kept as a ring buffer so a whole task can be pushed at once); CPU
    segment estimates average measured wall-clock segment times.
    """

    def __init__(self, chain: ChainSpec, tables: list[LookupTable] | None = None, window: int = DEFAULT_WINDOW):
        self.chain = chain
        self.window = window
        self.kernel_offsets: list[int] = []
        off = 0
        nominal = []
        self._looked_up: list[np.ndarray] = []
        for ti, task in enumerate(chain.tasks):
            self.kernel_offsets.append(off)
            off += len(task.kernels)
            table = tables[ti] if tables else None
            vals = []
            mean_ns = task.gpu_ns / max(1, len(task.kernels))
            for k in task.kernels:
                nominal.append(k.exec_ns)
                if table is None:
                    vals.append(k.exec_ns)
                    continue
                try:
                    vals.append(table.lookup(k.kernel_id, k.grid_dim, k.block_dim)[0])
                except MissingKernel:
                    # unprofiled kernel: task mean time
                    vals.append(mean_ns)
            self._looked_up.append(np.asarray(vals, dtype=float))
        self._nominal = np.asarray(nominal, dtype=float)
        n = len(nominal)
        self._ring = np.zeros((window, n))
        self._count = np.zeros(n, dtype=np.int64)
        self._pos = np.zeros(len(chain.tasks), dtype=np.int64)
        self.cpu = [
            ExecTimePredictor(float(c), window) for task in chain.tasks for c in task.cpu_segment_ns
        ]

    def record_task_lookups(self, task_index: int):
        """Push the lookup-table answers for every kernel of one task instance."""
        lo = self.kernel_offsets[task_index]
        vals = self._looked_up[task_index]
        hi = lo + len(vals)
        p = self._pos[task_index] % self.window
        self._ring[p, lo:hi] = vals
        self._count[lo:hi] = np.minimum(self._count[lo:hi] + 1, self.window)
        self._pos[task_index] += 1

    def kernel_estimates(self) -> np.ndarray:
        counts = self._count
        with np.errstate(invalid="ignore", divide="ignore"):
            means = self._ring.sum(axis=0) / counts
        return np.where(counts > 0, means, self._nominal)

    def cpu_estimates(self) -> list[float]:
        return [p.predict() for p in self.cpu]

    def suffix_sums(self) -> tuple[list[float], list[float]]:
        """Remaining-work tables: gpu[i] = sum of estimates from kernel i on."""
        est = self.kernel_estimates()
        gpu = np.zeros(len(est) + 1)
        gpu[:-1] = np.cumsum(est[::-1])[::-1]
        cpu_est = self.cpu_estimates()
        cpu = [0.0] * (len(cpu_est) + 1)
        acc = 0.0
        for j in range(len(cpu_est) - 1, -1, -1):
            acc += cpu_est[j]
            cpu[j] = acc
        return gpu.tolist(), cpu


def evaluate_urgency(state, now: int) -> float:
    """Urgency of a chain instance from its suffix-sum caches and indices.

    `state` needs t_arr, deadline, gpu_index, cpu_index, gpu_suffix,
    cpu_suffix and noise attributes (see engine.ChainInstance).
    """
    rem = state.gpu_suffix[state.gpu_index] + state.cpu_suffix[state.cpu_index]
    return urgency(state.t_arr, state.deadline, rem * state.noise, 0.0, now)


# --------------------------------------------------------------------------
# Evaluation triggers

EVAL_TRIGGERS = frozenset({"FrameArrival", "CpuSegmentStart", "KernelLaunch"})


def trigger_points(event_kind: str, batched: bool = False) -> bool:
    """Whether an engine event is an urgency evaluation point."""
    if event_kind in EVAL_TRIGGERS:
        return True
    return batched and event_kind == "BatchSync"


# --------------------------------------------------------------------------
# Truly-urgent threshold


@dataclass
class UrgencyThreshold:
    value: float = math.inf
    percentile: float = 95.0
    samples_used: int = 0

    @property
    def calibrated(self) -> bool:
        return math.isfinite(self.value)


def upper_percentile(values: list[float], percentile: float) -> float:
    """Smallest sample that more than `percentile`% of the samples do not exceed.

    With 95 samples of 0.01 and 5 of 0.05 the 95th percentile is 0.05: the
    threshold sits above the bulk rather than on its edge. Rank arithmetic
    is exact so decimal percentiles never round across a boundary.
    """
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    n = len(ordered)
    rank = min(n, math.floor(Fraction(str(percentile)) * n / 100) + 1)
    return ordered[rank - 1]


def calibrate_threshold(samples, percentile: float = 95.0, min_samples: int = 100) -> UrgencyThreshold:
    """Upper percentile (see upper_percentile) of the non-negative samples.

    With fewer than `min_samples` usable samples the threshold stays at +inf,
    which disables reservation and delayed launching.
    """
    usable = [s for s in samples if s >= 0]
    if len(usable) < min_samples:
        return UrgencyThreshold(math.inf, percentile, len(usable))
    return UrgencyThreshold(upper_percentile(usable, percentile), percentile, len(usable))


class ThresholdCalibrator:
    """Collects max-active-urgency samples and recalibrates on a cadence."""

    def __init__(
        self,
        percentile: float = 95.0,
        warmup_ns: int = 30_000 * NS_PER_MS,
        recalibrate_ns: int = 10_000 * NS_PER_MS,
        sample_period_ns: int = 5 * NS_PER_MS,
        min_samples: int = 100,
        initial: float = math.inf,
    ):
        self.percentile = percentile
        self.warmup_ns = warmup_ns
        self.recalibrate_ns = recalibrate_ns
        self.sample_period_ns = sample_period_ns
        self.min_samples = min_samples
        self.samples: list[float] = []
        self.threshold = UrgencyThreshold(initial, percentile)
        self.next_calibration = warmup_ns

    def sample(self, value: float):
        self.samples.append(value)

    def maybe_recalibrate(self, now: int) -> bool:
        if now < self.next_calibration:
            return False
        self.next_calibration = now + self.recalibrate_ns
        th = calibrate_threshold(self.samples, self.percentile, self.min_samples)
        if th.calibrated:
            self.threshold = th
        return True

    @property
    def value(self) -> float:
        return self.threshold.value
