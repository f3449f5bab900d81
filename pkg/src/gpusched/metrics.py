"""Run metrics: per-chain miss ratios, latency percentiles, kernel
collisions, utilization timelines, and CSV/JSON report files."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .device import CollisionEvent

log = logging.getLogger(__name__)

NS_PER_MS = 1_000_000
MAX_COLLISION_ROWS = 1_000_000

SUMMARY_HEADER = ["chain", "misses", "total", "miss_ratio", "p50", "p95", "p99", "mean"]
TIMELINE_HEADER = ["second", "cpu_util", "gpu_busy", "gpu_util"]
COLLISION_HEADER = ["time_ms", "kind", "chain_a", "chain_b", "prio_a", "prio_b", "ul_a", "ul_b", "active_tasks"]
TRACE_HEADER = ["time_ns", "seq", "kind", "chain", "instance", "detail"]


@dataclass(frozen=True, slots=True)
class InstanceRecord:
    chain_id: int
    instance_id: int
    t_arr: int
    abs_deadline: int
    completion: int | None
    status: str
    early_exited: bool
    shed: bool
    latency_ns: int | None


class UtilizationMeter:
    """Busy time folded into fixed-width buckets (1 s by default)."""

    def __init__(self, width_ns: int):
        self.width = width_ns
        self.cpu_busy: dict[int, int] = defaultdict(int)
        self.gpu_busy: dict[int, int] = defaultdict(int)
        self.gpu_util: dict[int, float] = defaultdict(float)
        self.cores = 8

    def _spread(self, t0: int, t1: int):
        w = self.width
        b = t0 // w
        while t0 < t1:
            end = min(t1, (b + 1) * w)
            yield b, end - t0
            t0 = end
            b += 1

    def cpu(self, t0: int, t1: int):
        if t1 > t0:
            for b, d in self._spread(t0, t1):
                self.cpu_busy[b] += d

    def gpu(self, t0: int, t1: int, busy: bool, util: float):
        if t1 > t0 and busy:
            b = t0 // self.width
            if t1 <= (b + 1) * self.width:
                d = t1 - t0
                self.gpu_busy[b] += d
                self.gpu_util[b] += d * util
                return
            for b, d in self._spread(t0, t1):
                self.gpu_busy[b] += d
                self.gpu_util[b] += d * util

    def samples(self, horizon_ns: int) -> list[tuple[int, float, float, float]]:
        n = math.ceil(horizon_ns / self.width) if horizon_ns > 0 else 0
        w = self.width
        return [
            (b, self.cpu_busy.get(b, 0) / (w * self.cores), self.gpu_busy.get(b, 0) / w, self.gpu_util.get(b, 0.0) / w)
            for b in range(n)
        ]


class MetricsReport:
    def __init__(self, chain_ids):
        self.chain_ids = list(chain_ids)
        self.totals: dict[int, int] = {c: 0 for c in self.chain_ids}
        self.misses: dict[int, int] = {c: 0 for c in self.chain_ids}
        self.latencies: dict[int, list[float]] = {c: [] for c in self.chain_ids}
        self.instances: list[InstanceRecord] = []
        self.collision_rows: list[tuple] = []
        self.collision_hist: dict[tuple[str, int, bool], int] = defaultdict(int)
        self.utilization: list[tuple[int, float, float, float]] = []
        self.overhead_us = 0.0
        self.duration_s = 0.0
        self.end_time_ns = 0
        self.manifest: dict = {}
        self.stats: dict = {}
        self.trace = None

    # ------------------------------------------------------------------
    def add_instance(self, rec: InstanceRecord):
        self.instances.append(rec)
        if rec.status != "Completed":
            self.misses[rec.chain_id] += 1
        if rec.latency_ns is not None:
            self.latencies[rec.chain_id].append(rec.latency_ns / NS_PER_MS)

    def add_collision(self, time, kind, chains, prios, uls, active_tasks, urgent):
        self.collision_hist[(kind, active_tasks, urgent)] += 1
        if urgent and len(self.collision_rows) < MAX_COLLISION_ROWS:
            self.collision_rows.append((time, kind, chains[0], chains[1], prios[0], prios[1], uls[0], uls[1], active_tasks))

    @property
    def collisions(self) -> list[CollisionEvent]:
        return [
            CollisionEvent(r[0], r[1], (r[2], r[3]), (r[4], r[5]), (r[6], r[7]), r[8]) for r in self.collision_rows
        ]

    @property
    def completed(self) -> int:
        return sum(1 for r in self.instances if r.status == "Completed")

    @property
    def throughput(self) -> float:
        """Instances finished by their deadline, per simulated second."""
        return self.completed / self.duration_s if self.duration_s > 0 else 0.0

    def miss_ratio(self) -> float:
        return overall_miss_ratio(self)

    def per_chain(self) -> dict[int, tuple[int, int]]:
        return {c: (self.misses[c], self.totals[c]) for c in self.chain_ids}


# --------------------------------------------------------------------------


def miss_ratio_from_counts(counts) -> float:
    """Unweighted mean of per-chain miss ratios over (misses, total) pairs.

    Chains with zero instances are left out of the mean.
    """
    ratios = []
    for misses, total in counts:
        if total <= 0:
            continue
        if not 0 <= misses <= total:
            raise ValueError(f"misses {misses} outside 0..{total}")
        ratios.append(misses / total)
    if not ratios:
        return 0.0
    return sum(ratios) / len(ratios)


def overall_miss_ratio(report: MetricsReport) -> float:
    counts = []
    for c in report.chain_ids:
        if report.totals[c] == 0:
            log.warning("chain %s has no instances; excluded from the miss ratio", c)
            continue
        counts.append((report.misses[c], report.totals[c]))
    return miss_ratio_from_counts(counts)


def nearest_rank(values, p: float) -> float:
    if not values:
        raise ValueError("no latencies recorded")
    s = sorted(values)
    return s[max(1, math.ceil(p / 100.0 * len(s))) - 1]


def latency_percentiles(report_or_values, chain: int | None = None) -> dict[str, float]:
    """Nearest-rank p50/p95/p99 and mean of instance latencies (ms)."""
    vals = report_or_values.latencies[chain] if chain is not None else list(report_or_values)
    if not vals:
        raise ValueError(f"no latencies recorded for chain {chain}")
    return {
        "p50": nearest_rank(vals, 50),
        "p95": nearest_rank(vals, 95),
        "p99": nearest_rank(vals, 99),
        "mean": sum(vals) / len(vals),
    }


def collision_counts(report: MetricsReport, urgent_only: bool = True, kind: str | None = None) -> dict[int, int]:
    """Collisions keyed by the number of concurrently active tasks."""
    hist: dict[int, int] = defaultdict(int)
    for (k, n, urgent), count in report.collision_hist.items():
        if urgent_only and not urgent:
            continue
        if kind is not None and k != kind:
            continue
        hist[n] += count
    return dict(sorted(hist.items()))


# --------------------------------------------------------------------------


def _fmt_ms(x: float | None) -> str:
    return "" if x is None else f"{x:.3f}"


def config_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def summary_rows(report: MetricsReport) -> list[list[str]]:
    rows = []
    for c in report.chain_ids:
        total = report.totals[c]
        misses = report.misses[c]
        lat = report.latencies[c]
        if lat:
            p = latency_percentiles(lat)
            vals = [_fmt_ms(p["p50"]), _fmt_ms(p["p95"]), _fmt_ms(p["p99"]), _fmt_ms(p["mean"])]
        else:
            vals = ["", "", "", ""]
        ratio = f"{misses / total:.6f}" if total else ""
        rows.append([str(c), str(misses), str(total), ratio, *vals])
    return rows


def _write_csv(path: Path, header, rows):
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def emit_report(report: MetricsReport, path: str | os.PathLike) -> list[Path]:
    """Write summary.csv, timeline.csv, collisions.csv and manifest.json."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e.strerror}") from e
    files = []
    p = out / "summary.csv"
    _write_csv(p, SUMMARY_HEADER, summary_rows(report))
    files.append(p)
    p = out / "timeline.csv"
    _write_csv(p, TIMELINE_HEADER, [(b, f"{c:.4f}", f"{g:.4f}", f"{u:.4f}") for b, c, g, u in report.utilization])
    files.append(p)
    p = out / "collisions.csv"
    _write_csv(
        p,
        COLLISION_HEADER,
        [(f"{r[0] / NS_PER_MS:.3f}", r[1], r[2], r[3], r[4], r[5], f"{r[6]:.6f}", f"{r[7]:.6f}", r[8])
         for r in report.collision_rows],
    )
    files.append(p)
    if report.trace is not None:
        p = out / "trace.csv"
        _write_csv(p, TRACE_HEADER, report.trace)
        files.append(p)
    manifest = dict(report.manifest)
    manifest["config_hash"] = config_hash(report.manifest)
    manifest["overall_miss_ratio"] = round(overall_miss_ratio(report), 6) if report.instances else 0.0
    manifest["throughput_rps"] = round(report.throughput, 4)
    manifest["overhead_us"] = round(report.overhead_us, 1)
    manifest["collisions_urgent"] = sum(collision_counts(report).values())
    manifest["collisions_all"] = sum(collision_counts(report, urgent_only=False).values())
    manifest["stats"] = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in report.stats.items()}
    p = out / "manifest.json"
    try:
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {p}: {e.strerror}") from e
    files.append(p)
    return files
