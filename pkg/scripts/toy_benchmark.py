"""Linear probe vs LayerNorm tuning vs TTC (TIS and random channels) on the toy task."""

import argparse

from ttc_tuning.benchmark import ToyBenchConfig, margins, run_benchmark


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--random-sets", type=int, default=3)
    args = p.parse_args()
    cfg = ToyBenchConfig(seeds=tuple(args.seeds), epochs=args.epochs, random_sets=args.random_sets)
    results = run_benchmark(cfg, log=print)
    for name, v in margins(results).items():
        print(f"{name:24s} {v:+.2f} pts")


if __name__ == "__main__":
    main()
