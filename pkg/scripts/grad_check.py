"""Central-difference check of autograd gradients on a small transformer."""

import argparse

import numpy as np

from ttc_tuning import autograd as ag
from ttc_tuning.vit import ModelSpec, TransformerModel


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--samples", type=int, default=8, help="entries checked per tensor")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    spec = ModelSpec()
    m = TransformerModel(spec, seed=args.seed)
    m.params["head.weight"].data[...] = ag.rng(args.seed, "head").normal(size=m.params["head.weight"].shape)
    x = ag.rng(args.seed, "x").normal(size=(2, spec.channels, spec.image_size, spec.image_size))
    y = np.array([0, 1])
    m.set_trainable(list(m.params))
    ag.backward(m.loss(x, y))
    grads = {n: t.grad.copy() for n, t in m.params.items()}
    m.set_trainable([])
    g = np.random.default_rng(args.seed)
    worst = 0.0
    with ag.no_grad():
        for name, t in m.params.items():
            flat = t.data.reshape(-1)
            errs = []
            for i in g.choice(flat.size, size=min(args.samples, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + args.step
                up = m.loss(x, y).item()
                flat[i] = old - args.step
                down = m.loss(x, y).item()
                flat[i] = old
                num, ana = (up - down) / (2 * args.step), grads[name].reshape(-1)[i]
                errs.append(abs(num - ana) / max(abs(num), abs(ana), 1e-6))
            worst = max(worst, max(errs))
            print(f"{name:32s} max rel err {max(errs):.2e}")
    print(f"worst {worst:.2e}")


if __name__ == "__main__":
    main()
