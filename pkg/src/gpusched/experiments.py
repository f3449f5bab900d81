"""Experiment plans: one simulation per (point, policy, seed) with its own
report directory, and an aggregate `sweep.csv` written once at the end.

Axes left empty collapse to a single point at the base configuration's
value, so a plan with no axes is exactly one run per policy and seed.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .baselines import make_policy
from .engine import RunOptions, run
from .metrics import MetricsReport, collision_counts, emit_report, overall_miss_ratio
from .scheduler import SchedulerConfig
from .workload import DEVICE_PROFILES, NS_PER_US, WorkloadConfig, load_config

log = logging.getLogger(__name__)

SWEEP_HEADER = [
    "point", "policy", "variant", "sync_mode", "seed", "f_a", "f_d", "f_tight", "delta_eval_us", "noise_pct",
    "cudafree_tasks", "streams", "miss_ratio", "throughput_rps", "collisions_urgent", "collisions_all",
    "overhead_us", "status",
]


@dataclass(frozen=True)
class Point:
    """One cell of a sweep; None means "keep the base value"."""

    policy: str
    seed: int
    variant: str = "full"
    sync_mode: str | None = None
    f_a: float | None = None
    f_d: float | None = None
    f_tight: float | None = None
    delta_eval_us: float | None = None
    noise_pct: float = 0.0
    cudafree_tasks: int = 0
    streams: int | None = None

    def slug(self) -> str:
        parts = [self.policy]
        if self.variant != "full":
            parts.append(self.variant)
        if self.sync_mode:
            parts.append(self.sync_mode)
        for name, v in (("fa", self.f_a), ("fd", self.f_d), ("ft", self.f_tight), ("de", self.delta_eval_us),
                        ("streams", self.streams)):
            if v is not None:
                parts.append(f"{name}{v:g}")
        if self.noise_pct:
            parts.append(f"noise{self.noise_pct:g}")
        if self.cudafree_tasks:
            parts.append(f"cudafree{self.cudafree_tasks}")
        parts.append(f"seed{self.seed}")
        return "_".join(parts)


@dataclass
class ExperimentPlan:
    config: str = "default"
    policies: list[str] = field(default_factory=lambda: ["urgengo"])
    seeds: list[int] = field(default_factory=lambda: [0])
    f_a: list[float] = field(default_factory=list)
    f_d: list[float] = field(default_factory=list)
    f_tight: list[float] = field(default_factory=list)
    delta_eval_us: list[float] = field(default_factory=list)
    noise_pct: list[float] = field(default_factory=list)
    cudafree_tasks: list[int] = field(default_factory=list)
    streams: list[int] = field(default_factory=list)
    variants: list[str] = field(default_factory=lambda: ["full"])
    sync_modes: list[str | None] = field(default_factory=lambda: [None])
    duration_s: float | None = None
    device_profile: str | None = None
    sleep_us: float | None = None
    util_exempt: float | None = None
    th_percentile: float | None = None
    trace: bool = False
    out: Path = Path("results")

    def points(self) -> list[Point]:
        axes = [
            self.f_a or [None], self.f_d or [None], self.f_tight or [None], self.delta_eval_us or [None],
            self.noise_pct or [0.0], self.cudafree_tasks or [0], self.streams or [None],
        ]
        out = []
        for fa, fd, ft, de, noise, cf, ns in itertools.product(*axes):
            for policy in self.policies:
                variants = self.variants if policy == "urgengo" else ["full"]
                for variant, mode in itertools.product(variants, self.sync_modes):
                    for seed in self.seeds:
                        out.append(Point(policy, seed, variant, mode, fa, fd, ft, de, noise, cf, ns))
        return out


def _base_config(plan: ExperimentPlan) -> WorkloadConfig:
    cfg = load_config(plan.config)
    if plan.device_profile is not None:
        if plan.device_profile not in DEVICE_PROFILES:
            raise ValueError(f"unknown device profile {plan.device_profile!r}; choose from {', '.join(DEVICE_PROFILES)}")
        fields = {"kernel_time_scale": 1.0, **DEVICE_PROFILES[plan.device_profile]}
        cfg = replace(cfg, device=replace(cfg.device, profile=plan.device_profile, **fields))
    if plan.duration_s is not None:
        cfg = replace(cfg, duration_s=plan.duration_s)
    return cfg


def point_config(base: WorkloadConfig, p: Point) -> WorkloadConfig:
    kw = {"seed": p.seed}
    if p.f_a is not None:
        kw["f_a"] = p.f_a
    if p.f_d is not None:
        kw["f_d"] = p.f_d
    if p.f_tight is not None:
        kw["f_tight"] = p.f_tight
    return replace(base, **kw)


def scheduler_config(plan: ExperimentPlan, p: Point) -> SchedulerConfig:
    kw = {}
    if p.delta_eval_us is not None:
        kw["delta_eval_ns"] = int(round(p.delta_eval_us * NS_PER_US))
    if plan.sleep_us is not None:
        kw["sleep_interval_ns"] = int(round(plan.sleep_us * NS_PER_US))
    if plan.util_exempt is not None:
        kw["util_exemption"] = plan.util_exempt
    if plan.th_percentile is not None:
        kw["th_percentile"] = plan.th_percentile
    if p.streams is not None:
        kw["num_streams"] = p.streams
    return SchedulerConfig(**kw)


def run_point(plan: ExperimentPlan, p: Point, base: WorkloadConfig | None = None) -> MetricsReport:
    """Simulate one point and write its report directory."""
    base = base or _base_config(plan)
    cfg = point_config(base, p)
    policy = make_policy(p.policy, scheduler_config(plan, p), p.variant, p.sync_mode)
    opts = RunOptions(noise_pct=p.noise_pct, cudafree_tasks=p.cudafree_tasks, trace=plan.trace)
    report = run(cfg, policy, opts)
    report.manifest["point"] = {k: v for k, v in asdict(p).items()}
    report.manifest["plan"] = _plan_echo(plan)
    emit_report(report, Path(plan.out) / p.slug())
    return report


def _plan_echo(plan: ExperimentPlan) -> dict:
    d = asdict(plan)
    d["out"] = str(plan.out)
    return d


def _row(p: Point, report: MetricsReport | None, status: str) -> list:
    base = [p.slug(), p.policy, p.variant, p.sync_mode or "", p.seed, _opt(p.f_a), _opt(p.f_d), _opt(p.f_tight),
            _opt(p.delta_eval_us), f"{p.noise_pct:g}", p.cudafree_tasks, _opt(p.streams)]
    if report is None:
        return base + ["", "", "", "", "", status]
    return base + [
        f"{overall_miss_ratio(report):.6f}",
        f"{report.throughput:.4f}",
        sum(collision_counts(report).values()),
        sum(collision_counts(report, urgent_only=False).values()),
        f"{report.overhead_us:.1f}",
        status,
    ]


def _opt(v) -> str:
    return "" if v is None else f"{v:g}"


def sweep(plan: ExperimentPlan, progress=None) -> tuple[Path, int]:
    """Run every point of the plan; returns (sweep.csv path, failure count).

    A failing point is logged, recorded with its error status and skipped.
    """
    base = _base_config(plan)
    out = Path(plan.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    failures = 0
    points = plan.points()
    for i, p in enumerate(points, 1):
        try:
            report = run_point(plan, p, base)
            rows.append(_row(p, report, "ok"))
        except Exception as e:  # one bad point must not sink the whole sweep
            failures += 1
            log.error("point %s failed: %s", p.slug(), e)
            rows.append(_row(p, None, f"error: {type(e).__name__}: {e}".replace("\n", " ")))
        if progress is not None:
            progress(i, len(points), p, rows[-1])
    path = out / "sweep.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        w.writerows(rows)
    return path, failures
