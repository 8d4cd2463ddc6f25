"""Taylor-expansion channel importance, exact removal oracle and top-K selection.

A channel ``i`` of a feature map is produced by row ``i`` of a weight matrix
``W`` (stored out x in). Its importance is estimated from ``g * w`` products,
``g = dL/dW``, aggregated over the row. Three aggregations are offered:

``row``      ``(sum_j g_ij w_ij)^2``  first-order estimate of zeroing the row (default)
``element``  ``sum_j (g_ij w_ij)^2``  per-weight squared terms summed over the row
``signed``   ``sum_j g_ij w_ij``      raw signed first-order sum
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .vit import SITE_WEIGHT

AGGREGATES = ("row", "element", "signed")
SELECTORS = ("tis", "l2norm", "random")


@dataclass
class SiteScores:
    layer: int
    site: str
    weight: str
    scores: np.ndarray
    selected: list[int]


@dataclass
class ImportanceReport:
    sites: dict = field(default_factory=dict)
    k: int = 0
    selector: str = "tis"
    aggregate: str = "row"
    num_batches: int = 0
    seed: int = 0
    dim: int = 0
    depth: int = 0

    def check_model(self, model) -> None:
        if (self.dim, self.depth) != (model.spec.dim, model.spec.depth):
            raise ValueError(
                f"importance report is for dim={self.dim}, depth={self.depth}; model has "
                f"dim={model.spec.dim}, depth={model.spec.depth}"
            )

    def to_dict(self) -> dict:
        return {
            "selector": self.selector,
            "aggregate": self.aggregate,
            "k": self.k,
            "num_batches": self.num_batches,
            "seed": self.seed,
            "model": {"dim": self.dim, "depth": self.depth},
            "sites": [
                {
                    "layer": s.layer,
                    "site": s.site,
                    "weight": s.weight,
                    "scores": [float(v) for v in s.scores],
                    "selected": [int(i) for i in s.selected],
                }
                for s in self.sites.values()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceReport":
        rep = cls(
            k=int(d["k"]),
            selector=d["selector"],
            aggregate=d.get("aggregate", "row"),
            num_batches=int(d["num_batches"]),
            seed=int(d["seed"]),
            dim=int(d["model"]["dim"]),
            depth=int(d["model"]["depth"]),
        )
        for s in d["sites"]:
            rep.sites[(int(s["layer"]), s["site"])] = SiteScores(
                layer=int(s["layer"]),
                site=s["site"],
                weight=s["weight"],
                scores=np.array(s["scores"], dtype=np.float64),
                selected=[int(i) for i in s["selected"]],
            )
        return rep

    def save(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "ImportanceReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------- helpers


def site_weight(site) -> str:
    """Name of the weight whose rows produce the channels at ``site``.

    ``site`` is ``(layer, "after_mlp" | "after_mhsa")`` or a weight name.
    """
    if isinstance(site, str):
        return site
    layer, pos = site
    if pos not in SITE_WEIGHT:
        raise ValueError(f"site {pos!r} has no producing weight")
    return f"layers.{layer}.{SITE_WEIGHT[pos]}"


@contextmanager
def _grads_for(model, names):
    """Temporarily make exactly ``names`` require grad; restore flags and grads after."""
    saved = {n: (t.requires_grad, t.grad) for n, t in model.params.items()}
    try:
        for n, t in model.params.items():
            t.requires_grad = n in names
            t.grad = None
        yield
    finally:
        for n, (flag, grad) in saved.items():
            model.params[n].requires_grad = flag
            model.params[n].grad = grad


def _aggregate(g: np.ndarray, w: np.ndarray, how: str) -> np.ndarray:
    gw = g * w
    if how == "row":
        return gw.sum(axis=1) ** 2
    if how == "element":
        return (gw * gw).sum(axis=1)
    if how == "signed":
        return gw.sum(axis=1)
    raise ValueError(f"aggregate must be one of {AGGREGATES}, got {how!r}")


# ---------------------------------------------------------------- scoring


def exact_removal_score(model, batch, weight_name: str, row: int) -> float:
    """``(L(row zeroed) - L)^2`` on ``batch``; the model is restored afterwards."""
    if weight_name not in model.params:
        raise KeyError(f"unknown weight {weight_name!r}")
    w = model.params[weight_name].data
    if not 0 <= row < w.shape[0]:
        raise IndexError(f"row {row} out of range for {weight_name} with {w.shape[0]} rows")
    x, y = batch
    saved = w[row].copy()
    with ag.no_grad():
        base = model.loss(x, y).item()
        try:
            w[row] = 0.0
            removed = model.loss(x, y).item()
        finally:
            w[row] = saved
    return (removed - base) ** 2


def exact_removal_scores(model, batch, weight_name: str) -> np.ndarray:
    """The removal score of every row of ``weight_name``."""
    rows = model.params[weight_name].shape[0]
    return np.array([exact_removal_score(model, batch, weight_name, i) for i in range(rows)])


def _batch_terms(model, batch, names, aggregate, loss_scale):
    with _grads_for(model, set(names)):
        loss = model.loss(*batch)
        if loss_scale != 1.0:
            loss = ag.scale(loss, loss_scale)
        ag.backward(loss)
        out = []
        for n in names:
            t = model.params[n]
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            out.append(_aggregate(g, t.data, aggregate))
    return out


def taylor_scores(model, batches, sites, aggregate: str = "row", loss_scale: float = 1.0,
                  threads: int = 1) -> dict:
    """Per-site scores averaged over ``batches`` with one backward per batch.

    Returns ``{site: scores}``. Parallel runs use model clones; per-batch terms
    are summed in batch order so the result does not depend on ``threads``.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("taylor scoring needs at least one batch")
    sites = list(sites)
    names = [site_weight(s) for s in sites]
    for n in names:
        if n not in model.params:
            raise KeyError(f"unknown weight {n!r}")
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}, got {aggregate!r}")

    if threads > 1 and len(batches) > 1:
        def work(batch):
            return _batch_terms(model.clone(), batch, names, aggregate, loss_scale)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_batch = list(pool.map(work, batches))
    else:
        per_batch = [_batch_terms(model, b, names, aggregate, loss_scale) for b in batches]

    totals = [np.zeros_like(t) for t in per_batch[0]]
    for terms in per_batch:
        for acc, t in zip(totals, terms):
            acc += t
    return {s: acc / len(batches) for s, acc in zip(sites, totals)}


def taylor_channel_scores(model, batches, site, aggregate: str = "row",
                          loss_scale: float = 1.0) -> np.ndarray:
    return taylor_scores(model, batches, [site], aggregate, loss_scale)[site]


# ---------------------------------------------------------------- selection


def select_topk(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, ties to the lower index, sorted ascending."""
    s = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= s.size:
        raise ValueError(f"K={k} outside [1, {s.size}]")
    order = np.argsort(-s, kind="stable")
    return sorted(int(i) for i in order[:k])


def select_random(d: int, k: int, seed: int, *names) -> list[int]:
    if not 1 <= k <= d:
        raise ValueError(f"K={k} outside [1, {d}]")
    gen = ag.rng(seed, "select", "random", *names)
    return sorted(int(i) for i in gen.choice(d, size=k, replace=False))


def l2norm_scores(features: np.ndarray) -> np.ndarray:
    """Per-channel L2 norm of ``features`` over every leading axis."""
    f = np.asarray(features, dtype=np.float64)
    return np.sqrt((f.reshape(-1, f.shape[-1]) ** 2).sum(axis=0))


def select_channels(strategy: str, k: int, *, scores=None, features=None, dim=None,
                    seed: int = 0, stream=()) -> list[int]:
    """Pick ``k`` channels by ``strategy`` (``tis`` scores, ``l2norm`` features, ``random``)."""
    if strategy == "tis":
        if scores is None:
            raise ValueError("tis selection needs scores")
        return select_topk(scores, k)
    if strategy == "l2norm":
        if features is None:
            raise ValueError("l2norm selection needs features")
        return select_topk(l2norm_scores(features), k)
    if strategy == "random":
        if dim is None:
            raise ValueError("random selection needs dim")
        return select_random(dim, k, seed, *stream)
    raise ValueError(f"selector must be one of {SELECTORS}, got {strategy!r}")


def score_model(model, batches, sites, k: int, selector: str = "tis", aggregate: str = "row",
                seed: int = 0, threads: int = 1) -> ImportanceReport:
    """Score every site of ``model`` and select its top-K channel set."""
    batches = list(batches)
    sites = list(sites)
    if not batches:
        raise ValueError("scoring needs at least one batch")
    spec = model.spec
    report = ImportanceReport(k=k, selector=selector, aggregate=aggregate,
                              num_batches=len(batches), seed=seed,
                              dim=spec.dim, depth=spec.depth)
    if selector == "tis":
        table = taylor_scores(model, batches, sites, aggregate, threads=threads)
    elif selector == "l2norm":
        feats = {s: [] for s in sites}
        with ag.no_grad():
            for x, _ in batches:
                trace = model.forward(x, trace=True).trace
                for s in sites:
                    feats[s].append(trace[s])
        table = {s: l2norm_scores(np.concatenate(feats[s], axis=0)) for s in sites}
    elif selector == "random":
        table = {s: np.zeros(spec.dim) for s in sites}
    else:
        raise ValueError(f"selector must be one of {SELECTORS}, got {selector!r}")
    for s in sites:
        layer, pos = s
        if selector == "random":
            chosen = select_random(spec.dim, k, seed, layer, pos)
        else:
            chosen = select_topk(table[s], k)
        report.sites[s] = SiteScores(layer=layer, site=pos, weight=site_weight(s),
                                     scores=table[s], selected=chosen)
    return report
