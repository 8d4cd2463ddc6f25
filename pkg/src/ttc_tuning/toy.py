"""Two-layer MLP with a linear readout, used to check importance scores against removal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class MLPSpec:
    inputs: int = 8
    hidden: int = 32
    dim: int = 8
    classes: int = 3
    depth: int = 2
    weight_scale: float = 0.1
    row_spread: float = 1.0


class ToyMLP:
    """``head(fc2(relu(fc1(x))))``; rows of ``fc2.weight`` produce the scored channels."""

    def __init__(self, spec: MLPSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        g = ag.rng(seed, "toy-mlp", "init")
        s = spec
        w2 = g.standard_normal((s.dim, s.hidden)) * s.weight_scale / np.sqrt(s.hidden)
        if s.row_spread:
            w2 = w2 * np.exp(s.row_spread * g.standard_normal((s.dim, 1)))
        self.params = {
            "fc1.weight": Tensor(g.standard_normal((s.hidden, s.inputs)) / np.sqrt(s.inputs)),
            "fc1.bias": Tensor(0.1 * g.standard_normal(s.hidden)),
            "fc2.weight": Tensor(w2),
            "fc2.bias": Tensor(0.1 * g.standard_normal(s.dim)),
            "head.weight": Tensor(g.standard_normal((s.classes, s.dim)) / np.sqrt(s.dim)),
        }

    def clone(self) -> "ToyMLP":
        new = ToyMLP.__new__(ToyMLP)
        new.spec, new.seed = self.spec, self.seed
        new.params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return new

    def forward(self, x) -> Tensor:
        P = self.params
        h = ag.relu(ag.linear(Tensor(x), P["fc1.weight"], P["fc1.bias"]))
        return ag.linear(ag.linear(h, P["fc2.weight"], P["fc2.bias"]), P["head.weight"])

    def loss(self, x, y) -> Tensor:
        return ag.softmax_crossentropy(self.forward(x), y)


def toy_problem(seed: int, batch: int = 16, spec: MLPSpec | None = None):
    """A random MLP and one labelled batch from a random linear teacher."""
    spec = spec or MLPSpec()
    model = ToyMLP(spec, seed)
    g = ag.rng(seed, "toy-mlp", "data")
    x = g.standard_normal((batch, spec.inputs))
    teacher = g.standard_normal((spec.classes, spec.inputs))
    y = np.argmax(x @ teacher.T, axis=1)
    return model, (x, y)
