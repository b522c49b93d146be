import argparse
import sys
from typing import List, Optional

from errors import RailsprayError
from tebench.report import format_table, write_report
from tebench.runner import run_failure_timeline, run_sensitivity, run_sweep
from tebench.scenario import BenchScenario
from topology.enums import ClockMode, Policy
from utils import human_bytes, parse_size

POLICY_FLAGS = {"rr": Policy.ROUND_ROBIN, "hash": Policy.HASH, "telemetry": Policy.TELEMETRY}


def _sizes(text: str) -> List[int]:
    return [parse_size(part) for part in text.split(",") if part.strip()]


def _ints(text: str) -> List[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _floats(text: str) -> List[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tebench", description="Multi-rail transfer engine benchmark")
    parser.add_argument("--mode", choices=("sweep", "timeline", "sensitivity"), default="sweep")
    parser.add_argument("--fabric", default="uniform8", help="canonical fabric name or path to a fabric JSON")
    parser.add_argument("--policy", choices=sorted(POLICY_FLAGS), default="telemetry")
    parser.add_argument("--block", type=_sizes, default=[4 << 20], help="comma-separated sizes, e.g. 4K,64K,4M")
    parser.add_argument("--batch", type=_ints, default=[1], help="comma-separated batch sizes")
    parser.add_argument("--threads", type=int, default=1)
    runs = parser.add_mutually_exclusive_group()
    runs.add_argument("--duration", type=float, help="seconds of (virtual) time per cell")
    runs.add_argument("--iters", type=int, help="measured batches per submitter")
    parser.add_argument("--warmup", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--faults", help="canonical fault schedule name or path")
    parser.add_argument("--clock", choices=[c.value for c in ClockMode], default=ClockMode.VIRTUAL.value)
    parser.add_argument("--backends", default=None, help="comma-separated backend kinds")
    parser.add_argument("--penalty", type=_floats, default=None, help="tier-2 penalties for --mode sensitivity")
    parser.add_argument("--probe-period", type=float, default=None)
    parser.add_argument("--window-ms", type=float, default=10.0)
    parser.add_argument("--out", default="tebench-out")
    return parser


def scenario_from_args(args: argparse.Namespace) -> BenchScenario:
    clock = ClockMode(args.clock)
    if args.backends:
        backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    else:
        backends = ["simulated", "memory"] if clock is ClockMode.VIRTUAL else ["tcp", "memory"]
    fields = dict(
        fabric=args.fabric,
        backends=backends,
        policy=POLICY_FLAGS[args.policy],
        blocks=args.block,
        batches=args.batch,
        threads=args.threads,
        warmup=args.warmup,
        seed=args.seed,
        faults=args.faults,
        clock=clock,
        penalties=args.penalty or [],
        probe_period_s=args.probe_period,
        window_ms=args.window_ms,
    )
    if args.duration is not None:
        fields.update(iters=None, duration_s=args.duration)
    elif args.iters is not None:
        fields.update(iters=args.iters)
    return BenchScenario(**fields)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = scenario_from_args(args)
    except (RailsprayError, ValueError) as e:
        print(f"❌ Invalid scenario: {e}")
        return 2

    print(f"🚀 tebench {args.mode}: fabric={scenario.fabric} policy={scenario.policy.value} "
          f"blocks={[human_bytes(b) for b in scenario.blocks]} batches={scenario.batches} "
          f"threads={scenario.threads} clock={scenario.clock.value}")

    try:
        timeline = None
        if args.mode == "timeline":
            timeline = run_failure_timeline(scenario)
            cells = [timeline.cell]
        elif args.mode == "sensitivity":
            cells = run_sensitivity(scenario).cells
        else:
            cells = run_sweep(scenario).cells
    except RailsprayError as e:
        print(f"❌ Run failed: {e}")
        return 1

    print()
    print(format_table(cells))
    written = write_report(cells, args.out, timeline)
    print(f"\n📊 Wrote {', '.join(str(p) for p in written.values())}")

    if timeline is not None:
        for transition in timeline.transitions:
            print(f"  🔁 {transition.at * 1e3:9.3f} ms  {transition.rail_id}: "
                  f"{transition.previous.value} -> {transition.current.value} ({transition.reason})")

    failures = sum(cell.failures for cell in cells)
    if failures:
        print(f"\n⚠️ {failures} batches failed")
        return 1
    print("\n✅ Done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
