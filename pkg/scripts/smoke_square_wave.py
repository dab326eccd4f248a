"""Square-wave learning smoke test: TempDRL and MLP-DRL against PIO on a held-out day.

    python3 scripts/smoke_square_wave.py --seeds 0 1 2 --episodes 60 --out runs/smoke.json
"""

import argparse
import json
from dataclasses import asdict, replace
from pathlib import Path

from tempbid.experiments import SmokeConfig, run_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--episodes", type=int, default=SmokeConfig.episodes)
    ap.add_argument("--period", type=int, default=SmokeConfig.period)
    ap.add_argument("--agents", choices=["tempdrl", "mlp-drl", "both"], default="both")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = replace(SmokeConfig(), episodes=args.episodes, period=args.period)
    flags = {"tempdrl": [True], "mlp-drl": [False], "both": [True, False]}[args.agents]
    results = []
    for seed in args.seeds:
        for use_ttfe in flags:
            r = run_smoke(use_ttfe, seed, cfg)
            name = "tempdrl" if use_ttfe else "mlp-drl"
            print(f"seed {seed} {name:8s} final-{cfg.final_window} mean {r.final_mean:8.1f} / PIO {r.pio_cash:.1f} = {r.ratio:.2f}  ({r.seconds:.0f}s)")
            results.append({"seed": seed, "agent": name, **asdict(r), "ratio": r.ratio})
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"config": asdict(cfg), "results": results}, indent=1))


if __name__ == "__main__":
    main()
