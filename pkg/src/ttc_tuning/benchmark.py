"""Toy-scale method comparison on the shifted-palette task.

One pretrained backbone is shared by every seed. Per seed we train a linear
probe, LayerNorm tuning (stage 1), TTC on top of stage 1 with TIS-selected
channels and TTC with several random channel sets on the same stage-1 model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSpec, generate
from .diagnostics import knn_probe
from .petl import LN_GLOB
from .pipeline import (PretrainConfig, evaluate, features, pretrained_backbone, run_stage1, run_stage2,
                       score_stage1, train)
from .plan import TrainPlan
from .ttc import stage2_trainable
from .vit import ModelSpec


@dataclass
class ToyBenchConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    random_sets: int = 3
    stage1_lr: float = 3e-3
    stage2_lr: float = 1.5e-3
    epochs: int = 15
    batch_size: int = 32
    train: int = 1000
    test: int = 500
    model: ModelSpec = field(default_factory=ModelSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)


@dataclass
class SeedResult:
    seed: int
    linear: float
    layernorm: float
    ttc_tis: float
    ttc_random: list[float]
    knn_frozen: float
    knn_stage1: float


def run_seed(backbone, cfg: ToyBenchConfig, seed: int) -> SeedResult:
    data = generate(DatasetSpec(classes=cfg.model.num_classes, image_size=cfg.model.image_size,
                                train=cfg.train, val=0, test=cfg.test, seed=seed))
    plan = TrainPlan(lr=cfg.stage1_lr, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed)

    lin = backbone.clone()
    train(lin, plan.with_(trainable=["head.*"]), data.train, stage="linear")

    s1, _ = run_stage1(backbone, data.train, plan.with_(trainable=[LN_GLOB, "head.*"]))
    k = max(1, cfg.model.dim // 8)
    s2_plan = plan.with_(lr=cfg.stage2_lr, trainable=stage2_trainable())

    def stage2(selector: str, sel_seed: int) -> float:
        report = score_stage1(s1, data.train, k, selector=selector, seed=sel_seed)
        model, _ = run_stage2(s1, data.train, report, s2_plan)
        return evaluate(model, data.test)

    f0_tr, f0_te = features(backbone, data.train), features(backbone, data.test)
    f1_tr, f1_te = features(s1, data.train), features(s1, data.test)
    return SeedResult(
        seed=seed,
        linear=evaluate(lin, data.test),
        layernorm=evaluate(s1, data.test),
        ttc_tis=stage2("tis", seed),
        ttc_random=[stage2("random", 1000 * seed + r) for r in range(cfg.random_sets)],
        knn_frozen=knn_probe(f0_tr, data.train.labels, f0_te, data.test.labels, 1),
        knn_stage1=knn_probe(f1_tr, data.train.labels, f1_te, data.test.labels, 1),
    )


def run_benchmark(cfg: ToyBenchConfig | None = None, log=None) -> list[SeedResult]:
    cfg = cfg or ToyBenchConfig()
    t0 = time.perf_counter()
    backbone = pretrained_backbone(cfg.model, cfg.pretrain)
    if log:
        log(f"pretrained backbone in {time.perf_counter() - t0:.1f}s")
    out = []
    for s in cfg.seeds:
        r = run_seed(backbone, cfg, s)
        out.append(r)
        if log:
            log(f"seed {s}: linear {r.linear:.3f} layernorm {r.layernorm:.3f} ttc {r.ttc_tis:.3f} "
                f"random {np.mean(r.ttc_random):.3f} knn {r.knn_frozen:.3f}->{r.knn_stage1:.3f} "
                f"({time.perf_counter() - t0:.1f}s)")
    return out


def margins(results: list[SeedResult]) -> dict[str, float]:
    """Mean accuracy gaps in percentage points."""
    m = lambda f: 100.0 * float(np.mean([f(r) for r in results]))
    return {
        "layernorm_minus_linear": m(lambda r: r.layernorm - r.linear),
        "ttc_minus_layernorm": m(lambda r: r.ttc_tis - r.layernorm),
        "tis_minus_random": m(lambda r: r.ttc_tis - float(np.mean(r.ttc_random))),
    }
