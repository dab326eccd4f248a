"""Contingency response of a joint-market agent when FCAS prices dwarf spot spreads."""

import argparse
import json
from dataclasses import replace

from tempbid.experiments import FcasConfig, run_fcas_response


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=FcasConfig.episodes)
    ap.add_argument("--mlp", action="store_true", help="train MLP-DRL instead of TempDRL")
    args = ap.parse_args()

    res = run_fcas_response(not args.mlp, args.seed, replace(FcasConfig(), episodes=args.episodes))
    st = res.stats
    print(f"raise delivered {st.raise_delivered}/{st.raise_occurred} ({res.ratio('raise'):.2f})")
    print(f"lower delivered {st.lower_delivered}/{st.lower_occurred} ({res.ratio('lower'):.2f})")
    print(json.dumps(st.to_dict()["bid_power_mw_intervals"]))
    print(f"{res.seconds:.0f}s")


if __name__ == "__main__":
    main()
