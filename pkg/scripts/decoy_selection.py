"""Backward selection with injected N(0,1) decoys next to informative phantom features.

Reads the feature table of a finished run and repeats the experiment over several seeds.

    python scripts/decoy_selection.py runs/phantom/features/features.csv --seeds 0 1 2
"""

import argparse

from lesionkit.harness.experiments import INFORMATIVE, decoy_selection, informative_columns


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("features_csv")
    ap.add_argument("--features", nargs="+", default=list(INFORMATIVE))
    ap.add_argument("--decoys", type=int, default=10)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    x, y = informative_columns(args.features_csv, args.features)
    for seed in args.seeds:
        res = decoy_selection(x, y, seed=seed, n_decoys=args.decoys)
        print(f"seed {seed}: {res.removed_before_informative}/{res.n_decoys} decoys removed before any of "
              f"{', '.join(args.features)}")


if __name__ == "__main__":
    main()
