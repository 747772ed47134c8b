"""Single-feature AUC of every radiomics feature in a feature table, best first.

    python scripts/feature_ranking.py runs/phantom/features/features.csv --top 15
"""

import argparse

from lesionkit.harness.experiments import feature_aucs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("features_csv")
    ap.add_argument("--top", type=int, default=15)
    args = ap.parse_args()
    for auc, name in feature_aucs(args.features_csv)[: args.top]:
        print(f"{name:28s} {auc:.4f}")


if __name__ == "__main__":
    main()
