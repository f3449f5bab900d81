"""Contention coefficient calibration.

The 2D-detection task runs alone, then alongside a 3D-detection task that
loops continuously in the background (one release every 22 ms, just above
its own solo latency of about 20 ms, so it never builds a backlog), and the
relative growth of the 2D p95 latency is measured. `calibrate_alpha`
bisects contention_alpha until that growth hits a target (30% by default).
The result is frozen into DeviceParams' default.
"""

from __future__ import annotations

import argparse
from dataclasses import replace

from .workload import NS_PER_MS, ChainSpec, WorkloadConfig, load_config

TARGET_INFLATION = 0.30


def _task(config: WorkloadConfig, name: str):
    for c in config.chains:
        for t in c.tasks:
            if t.library_tag == name:
                return t
    raise KeyError(name)


BACKGROUND_PERIOD_MS = 22


def corun_config(alpha: float, duration_s: float = 120.0, seed: int = 0, with_3d: bool = True,
                 background_period_ms: int = BACKGROUND_PERIOD_MS) -> WorkloadConfig:
    """2D detection (higher static priority) optionally with looping 3D detection."""
    base = load_config("full")
    t2d = _task(base, "2d_detection")
    t3d = _task(base, "3d_detection")
    chains = [
        ChainSpec(0, 100 * NS_PER_MS, 100 * NS_PER_MS, (replace(t2d, cpu_segment_ns=(2 * NS_PER_MS, 3 * NS_PER_MS)),),
                  "Camera", 0, 0, 0),
    ]
    if with_3d:
        chains.append(
            ChainSpec(1, background_period_ms * NS_PER_MS, 200 * NS_PER_MS, (replace(t3d, cpu_segment_ns=(3 * NS_PER_MS, 2 * NS_PER_MS)),),
                      "LiDAR", 0, 0, 0)
        )
    return replace(
        base,
        chains=tuple(chains),
        f_a=1.0, f_d=1.0, f_tight=0.0,
        duration_s=duration_s,
        seed=seed,
        device=replace(base.device, contention_alpha=alpha),
        tight_chains=(),
        scaled=False,
    )


def p95_inflation(alpha: float, duration_s: float = 120.0, seed: int = 0) -> tuple[float, float, float]:
    """(inflation, solo p95 ms, co-run p95 ms) of the 2D-detection latency."""
    from .baselines import make_policy
    from .engine import RunOptions, run
    from .metrics import latency_percentiles

    opts = RunOptions(exec_noise=False, record_collisions=False)
    solo = run(corun_config(alpha, duration_s, seed, with_3d=False), make_policy("static"), opts)
    co = run(corun_config(alpha, duration_s, seed, with_3d=True), make_policy("static"), opts)
    p_solo = latency_percentiles(solo, 0)["p95"]
    p_co = latency_percentiles(co, 0)["p95"]
    return p_co / p_solo - 1.0, p_solo, p_co


def calibrate_alpha(target: float = TARGET_INFLATION, lo: float = 0.0, hi: float = 4.0, iters: int = 14,
                    duration_s: float = 120.0, seed: int = 0) -> float:
    """Bisect contention_alpha so the co-run p95 inflation reaches `target`."""
    f_lo = p95_inflation(lo, duration_s, seed)[0] - target
    f_hi = p95_inflation(hi, duration_s, seed)[0] - target
    if f_lo > 0 or f_hi < 0:
        raise ValueError(f"target {target} not bracketed by alpha in [{lo}, {hi}]")
    for _ in range(iters):
        mid = (lo + hi) / 2
        if p95_inflation(mid, duration_s, seed)[0] < target:
            lo = mid
        else:
            hi = mid
    return round((lo + hi) / 2, 3)


def main(argv=None):
    ap = argparse.ArgumentParser(description="calibrate the GPU contention coefficient")
    ap.add_argument("--target", type=float, default=TARGET_INFLATION)
    ap.add_argument("--duration", type=float, default=120.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--check", type=float, help="only report the inflation at this alpha")
    args = ap.parse_args(argv)
    if args.check is not None:
        infl, solo, co = p95_inflation(args.check, args.duration, args.seed)
        print(f"alpha={args.check} solo_p95={solo:.3f}ms corun_p95={co:.3f}ms inflation={infl:.3f}")
        return 0
    alpha = calibrate_alpha(args.target, duration_s=args.duration, seed=args.seed)
    infl, solo, co = p95_inflation(alpha, args.duration, args.seed)
    print(f"alpha={alpha} inflation={infl:.3f} (solo {solo:.3f} ms, co-run {co:.3f} ms)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
