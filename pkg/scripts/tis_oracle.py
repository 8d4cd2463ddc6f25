"""Taylor importance scores vs exact row-removal loss change on random toy MLPs."""

import argparse

import numpy as np
from scipy.stats import spearmanr

from ttc_tuning.tis import exact_removal_scores, taylor_channel_scores
from ttc_tuning.toy import MLPSpec, toy_problem


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--aggregate", choices=("row", "element", "signed"), default="row")
    p.add_argument("--weight-scale", type=float, default=MLPSpec.weight_scale)
    args = p.parse_args()
    rhos, hits = [], 0
    for seed in range(args.seeds):
        model, batch = toy_problem(seed, spec=MLPSpec(weight_scale=args.weight_scale))
        t = taylor_channel_scores(model, [batch], "fc2.weight", args.aggregate)
        e = exact_removal_scores(model, batch, "fc2.weight")
        rho = spearmanr(t, e)[0]
        rhos.append(rho)
        hits += int(np.argmax(t) == np.argmax(e))
        print(f"seed {seed:3d}: spearman {rho:+.3f} top-1 {'yes' if np.argmax(t) == np.argmax(e) else 'no'}")
    print(f"mean spearman {np.mean(rhos):.3f}, top-1 agreement {hits}/{args.seeds}")


if __name__ == "__main__":
    main()
