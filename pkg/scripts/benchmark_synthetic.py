"""Generate a synthetic market and run the CLI benchmark on it.

    python3 scripts/benchmark_synthetic.py --out runs/bench --days 6 --episodes 20
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from tempbid.cli import main as cli
from tempbid.experiments import SMOKE_SAC, SMOKE_TTFE
from tempbid.report import read_report_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    ap.add_argument("--days", type=int, default=6)
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--profile", default="ar1_with_spikes")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--strategies", default="pio,dmpc-persistence,dmpc-ema,mlp-drl,tempdrl")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    cfg = {
        "synth": {"seed": args.seed, "spot_profile": args.profile},
        "ttfe": asdict(SMOKE_TTFE),
        "env": {"seg_len": SMOKE_TTFE.seg_len},
        "sac": asdict(SMOKE_SAC),
        "train": {"episodes": args.episodes},
        "bench": {"lookahead": 24, "soc_grid_step": 0.1, "power_levels": 3},
    }
    cfg_path = args.out / "config.json"
    cfg_path.write_text(json.dumps(cfg, indent=1))
    common = ["--config", str(cfg_path), "--seed", str(args.seed)]
    if cli(common + ["--out", str(args.out / "data"), "gen-data", "--n-intervals", str(288 * args.days)]):
        raise SystemExit("gen-data failed")
    data = str(args.out / "data" / "prices.csv")
    if cli(common + ["--out", str(args.out / "report"), "benchmark", "--data", data, "--strategies", args.strategies]):
        raise SystemExit("benchmark failed")
    for row in read_report_csv(args.out / "report" / "benchmark.csv"):
        print(f"{row['strategy']:18s} {row['mode']:10s} total {float(row['total']):10.1f}")


if __name__ == "__main__":
    main()
