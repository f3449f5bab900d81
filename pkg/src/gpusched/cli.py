"""Command line entry point: `gpusched run | sweep | ablate | calibrate`.

Exit codes: 0 success, 1 simulation failure (or any failed sweep point),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .baselines import POLICY_NAMES
from .device import InvariantViolation
from .experiments import ExperimentPlan, Point, run_point, sweep
from .metrics import latency_percentiles, overall_miss_ratio
from .scheduler import SYNC_MODES, URGENGO_VARIANTS
from .workload import DEVICE_PROFILES, ConfigError

log = logging.getLogger("gpusched")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def int_range(text: str) -> list[int]:
    """'1..6' -> [1, ..., 6]; '0,2,4' -> [0, 2, 4]."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty range {text!r}")
        return list(range(lo, hi + 1))
    return [int(x) for x in text.split(",") if x]


def float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def policy_name(text: str) -> str:
    if text not in POLICY_NAMES:
        raise argparse.ArgumentTypeError(f"unknown policy {text!r} (choose from {', '.join(POLICY_NAMES)})")
    return text


def _common(p: argparse.ArgumentParser, multi: bool):
    p.add_argument("--config", default="default",
                   help="built-in workflow (default, workflow2, full) or a YAML file (default: %(default)s)")
    p.add_argument("--duration", type=float, help="simulated seconds (default: from config, 600)")
    p.add_argument("--device-profile", choices=sorted(DEVICE_PROFILES))
    p.add_argument("--sleep-us", type=float, help="delayed-launch sleep interval")
    p.add_argument("--util-exempt", type=float, help="utilization below which launches are never delayed")
    p.add_argument("--th-percentile", type=float, help="percentile of the urgent threshold (default 95)")
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory (default: %(default)s)")
    p.add_argument("--trace", action="store_true", help="also write the per-event trace.csv")
    if multi:
        p.add_argument("--policy", type=policy_name, nargs="+", default=None, metavar="POLICY",
                       help=f"one or more of {', '.join(POLICY_NAMES)}")
        p.add_argument("--seed", type=int_range, default=[0], help="seed list or range, e.g. 0..4")
        p.add_argument("--fa", type=float_list, default=[], help="arrival-rate factors, comma separated")
        p.add_argument("--fd", type=float_list, default=[], help="deadline factors")
        p.add_argument("--ftight", type=float_list, default=[], help="fractions of chains with halved deadlines")
        p.add_argument("--delta-eval-us", type=float_list, default=[], help="batch evaluation intervals")
        p.add_argument("--noise-pct", type=float_list, default=[], help="urgency noise levels")
        p.add_argument("--cudafree-tasks", type=int_range, default=[], help="device-barrier task counts")
        p.add_argument("--streams", type=int_range, default=[], help="stream counts per task, e.g. 1..6")
    else:
        p.add_argument("--policy", type=policy_name, default="urgengo",
                       help=f"one of {', '.join(POLICY_NAMES)} (default: %(default)s)")
        p.add_argument("--variant", choices=list(URGENGO_VARIANTS), default="full")
        p.add_argument("--sync-mode", choices=SYNC_MODES)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--fa", type=float)
        p.add_argument("--fd", type=float)
        p.add_argument("--ftight", type=float)
        p.add_argument("--delta-eval-us", type=float)
        p.add_argument("--noise-pct", type=float, default=0.0)
        p.add_argument("--cudafree-tasks", type=int, default=0)
        p.add_argument("--streams", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpusched", description="urgency-aware GPU launch scheduling simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one simulation, one report directory")
    _common(p, multi=False)

    p = sub.add_parser("sweep", help="cartesian product of factor axes x policies x seeds")
    _common(p, multi=True)

    p = sub.add_parser("ablate", help="UrgenGo mechanism and synchronization variants")
    _common(p, multi=True)
    p.add_argument("--skip-sync-modes", action="store_true", help="only the four mechanism variants")

    p = sub.add_parser("calibrate", help="fit the contention coefficient to the co-run target")
    p.add_argument("--target", type=float, default=0.30)
    p.add_argument("--duration", type=float, default=120.0)
    p.add_argument("--seed", type=int, default=0)
    return ap


def _plan(args, **kw) -> ExperimentPlan:
    return ExperimentPlan(
        config=args.config, duration_s=args.duration, device_profile=args.device_profile,
        sleep_us=args.sleep_us, util_exempt=args.util_exempt, th_percentile=args.th_percentile,
        trace=args.trace, out=args.out, **kw,
    )


def cmd_run(args) -> int:
    plan = _plan(args, policies=[args.policy], seeds=[args.seed])
    point = Point(args.policy, args.seed, args.variant, args.sync_mode, args.fa, args.fd, args.ftight,
                  args.delta_eval_us, args.noise_pct, args.cudafree_tasks, args.streams)
    report = run_point(plan, point)
    out = Path(args.out) / point.slug()
    print(f"{point.slug()}: overall miss ratio {overall_miss_ratio(report):.4f}, "
          f"{report.completed}/{len(report.instances)} instances on time")
    for c in report.chain_ids:
        lat = report.latencies[c]
        p95 = f"{latency_percentiles(lat)['p95']:.2f} ms" if lat else "-"
        print(f"  C{c}: {report.misses[c]}/{report.totals[c]} missed, p95 {p95}")
    print(f"report: {out}")
    return EXIT_OK


def _progress(i, n, point, row):
    status = row[-1]
    ratio = row[-6]
    print(f"[{i}/{n}] {point.slug()}: {ratio if status == 'ok' else status}", flush=True)


def cmd_sweep(args) -> int:
    plan = _plan(
        args, policies=args.policy or ["urgengo"], seeds=args.seed, f_a=args.fa, f_d=args.fd,
        f_tight=args.ftight, delta_eval_us=args.delta_eval_us, noise_pct=args.noise_pct,
        cudafree_tasks=args.cudafree_tasks, streams=args.streams,
    )
    path, failures = sweep(plan, _progress)
    print(f"aggregate: {path}" + (f" ({failures} failed points)" if failures else ""))
    return EXIT_FAILED if failures else EXIT_OK


def cmd_ablate(args) -> int:
    common = dict(seeds=args.seed, f_a=args.fa, f_d=args.fd, f_tight=args.ftight, delta_eval_us=args.delta_eval_us,
                  noise_pct=args.noise_pct, cudafree_tasks=args.cudafree_tasks, streams=args.streams)
    failures = 0
    plan = _plan(args, policies=["urgengo"], variants=list(URGENGO_VARIANTS), **common)
    plan.out = Path(args.out) / "mechanisms"
    path, f = sweep(plan, _progress)
    failures += f
    print(f"mechanisms: {path}")
    if not args.skip_sync_modes:
        plan = _plan(args, policies=["urgengo"], sync_modes=list(SYNC_MODES), **common)
        plan.out = Path(args.out) / "sync-modes"
        path, f = sweep(plan, _progress)
        failures += f
        print(f"sync modes: {path}")
    return EXIT_FAILED if failures else EXIT_OK


def cmd_calibrate(args) -> int:
    from .calibration import calibrate_alpha, p95_inflation

    alpha = calibrate_alpha(args.target, duration_s=args.duration, seed=args.seed)
    infl, solo, co = p95_inflation(alpha, args.duration, args.seed)
    print(f"contention_alpha={alpha} inflation={infl:.3f} (solo p95 {solo:.3f} ms, co-run p95 {co:.3f} ms)")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "ablate": cmd_ablate, "calibrate": cmd_calibrate}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        print(f"gpusched: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as e:
        print(f"gpusched: simulation invariant violated: {e}", file=sys.stderr)
        return EXIT_FAILED
    except OSError as e:
        print(f"gpusched: error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
