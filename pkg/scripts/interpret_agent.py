"""Train a small TempDRL agent on synthetic data and write the three probe reports."""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from tempbid.cli import main as cli
from tempbid.experiments import SMOKE_SAC, SMOKE_TTFE


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/interpret"))
    ap.add_argument("--days", type=int, default=4)
    ap.add_argument("--episodes", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    cfg = {
        "synth": {"seed": args.seed, "spot_profile": "ar1_with_spikes"},
        "ttfe": asdict(SMOKE_TTFE),
        "env": {"seg_len": SMOKE_TTFE.seg_len},
        "sac": asdict(SMOKE_SAC),
        "train": {"episodes": args.episodes, "train_fraction": 0.75},
    }
    cfg_path = args.out / "config.json"
    cfg_path.write_text(json.dumps(cfg, indent=1))
    common = ["--config", str(cfg_path), "--seed", str(args.seed)]
    steps = [
        ["--out", str(args.out / "data"), "gen-data", "--n-intervals", str(288 * args.days)],
        ["--out", str(args.out / "run"), "train", "--data", str(args.out / "data" / "prices.csv")],
        ["--out", str(args.out / "probes"), "interpret", "--data", str(args.out / "data" / "prices.csv"),
         "--checkpoint", str(args.out / "run" / "checkpoint.npz")],
    ]
    for s in steps:
        if cli(common + s):
            raise SystemExit(f"step failed: {s[2]}")
    print("reports in", args.out / "probes")


if __name__ == "__main__":
    main()
