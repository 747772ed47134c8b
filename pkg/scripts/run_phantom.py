"""Run every pipeline stage on a config and print per-stage wall time.

Each stage prints its own results (CNN validation AUCs, GBM zoo, ensemble, evaluation).

    python scripts/run_phantom.py --config src/lesionkit/configs/phantom.yaml --out runs/phantom
"""

import argparse
from pathlib import Path

from lesionkit.harness.config import load_config
from lesionkit.harness.experiments import timed_run

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "lesionkit" / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=CONFIGS / "phantom.yaml")
    ap.add_argument("--out", type=Path, default=Path("runs/phantom"))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    _, times = timed_run(load_config(args.config), args.out, jobs=args.jobs)
    for stage, t in times.items():
        print(f"{stage:16s} {t:8.1f} s")
    print(f"{'total':16s} {sum(times.values()):8.1f} s")


if __name__ == "__main__":
    main()
