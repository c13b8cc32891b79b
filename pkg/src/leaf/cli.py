"""``leaf <command> --config <path> [--seed N] [--out DIR]``"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness as H


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leaf", description="Confounder detection and counterfactual distillation.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*H.PIPELINE, "run-all", "sweep", "show-config"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config (JSON); built-in defaults when omitted")
        sp.add_argument("--seed", type=int, help="run one seed instead of the config's seed list")
        sp.add_argument("--out", help="output directory (overrides the config)")
        if name == "sweep":
            sp.add_argument("--axis", required=True, choices=H.SWEEP_AXES)
            sp.add_argument("--values", help="comma-separated values; the axis default grid when omitted")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = H.load_config(args.config)
        out = Path(args.out or cfg.out)
        seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
        if args.command == "show-config":
            print(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        elif args.command == "sweep":
            rows = H.stage_sweep(cfg, seeds, out, args.axis, H.parse_values(args.axis, args.values))
            print(f"wrote {out / f'sweep_{args.axis}.csv'} ({len(rows)} rows)")
        else:
            stages = H.PIPELINE if args.command == "run-all" else (args.command,)
            for seed in seeds:
                for stage in stages:
                    H.run_stage(stage, cfg, seed, out)
                    print(f"seed {seed}: {stage} done -> {H.run_dir(out, seed)}")
    except (OSError, ValueError, KeyError) as e:
        print(f"leaf {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
