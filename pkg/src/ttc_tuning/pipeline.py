"""Stage orchestration: LayerNorm alignment, channel scoring, TTC tuning, baselines."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .data import Dataset, DatasetSpec, TaskData, generate
from .optim import lr_at, make_optimizer
from .petl import LN_GLOB, METHODS, attach_method, freezing_policy
from .plan import TrainPlan
from .tis import score_model
from .ttc import insert_ttc, inserted_layers, positions_for, stage2_trainable
from .vit import TransformerModel, count_params, glob_match

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """A plan or config that contradicts the stage it is used for."""


@dataclass
class EpochStat:
    epoch: int
    train_loss: float
    eval_acc: float
    lr: float


@dataclass
class RunRecord:
    method: str = ""
    stage: str = ""
    config: dict = field(default_factory=dict)
    trainable: list[str] = field(default_factory=list)
    epochs: list[EpochStat] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    trainable_params: int = 0
    total_params: int = 0
    wall_time: float = 0.0
    checkpoints: list[str] = field(default_factory=list)

    @property
    def final_eval_acc(self) -> float:
        return self.epochs[-1].eval_acc if self.epochs else float("nan")


def param_hash(model, names) -> str:
    h = hashlib.sha256()
    for n in names:
        h.update(n.encode())
        h.update(model.params[n].data.tobytes())
    return h.hexdigest()


def evaluate(model, ds: Dataset, batch_size: int = 250) -> float:
    if len(ds) == 0:
        return float("nan")
    correct = 0
    with ag.no_grad():
        for x, y in ds.batches(batch_size):
            correct += int((model.forward(x).logits.data.argmax(axis=1) == y).sum())
    return correct / len(ds)


def features(model, ds: Dataset, batch_size: int = 250) -> np.ndarray:
    """Final-LayerNorm CLS vectors of every sample."""
    out = []
    with ag.no_grad():
        for x, _ in ds.batches(batch_size):
            out.append(model.forward(x).cls_tokens.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.spec.dim))


def dataset_loss(model, ds: Dataset, batch_size: int = 250) -> float:
    total = 0.0
    with ag.no_grad():
        for x, y in ds.batches(batch_size):
            total += model.loss(x, y).item() * len(y)
    return total / len(ds)


def train(model, plan: TrainPlan, train_set: Dataset, eval_set: Dataset | None = None,
          stage: str = "train") -> RunRecord:
    """Train ``model`` in place; epoch 0 of the record is the untrained state."""
    t0 = time.perf_counter()
    names = plan.resolve(model)
    model.set_trainable(names)
    params = [model.params[n] for n in names]
    frozen = [n for n in model.params if n not in set(names)]
    before = param_hash(model, frozen)
    rec = RunRecord(stage=stage, trainable=names,
                    trainable_params=count_params(model, names),
                    total_params=count_params(model))
    acc0 = evaluate(model, eval_set) if eval_set is not None else float("nan")
    rec.epochs.append(EpochStat(0, float("nan"), acc0, 0.0))
    opt = make_optimizer(plan, params)
    for epoch in range(plan.epochs):
        lr = lr_at(plan, epoch)
        opt.lr = lr
        order = ag.rng(plan.seed, stage, "shuffle", epoch).permutation(len(train_set))
        total, seen = 0.0, 0
        for x, y in train_set.batches(plan.batch_size, order):
            model.zero_grad()
            loss = model.loss(x, y)
            ag.backward(loss)
            opt.step()
            total += loss.item() * len(y)
            seen += len(y)
        acc = evaluate(model, eval_set) if eval_set is not None else float("nan")
        rec.epochs.append(EpochStat(epoch + 1, total / max(seen, 1), acc, lr))
        log.debug("%s epoch %d loss %.4f acc %.4f", stage, epoch + 1, total / max(seen, 1), acc)
    model.set_trainable([])
    if param_hash(model, frozen) != before:
        raise RuntimeError("frozen parameters changed during training")
    rec.wall_time = time.perf_counter() - t0
    return rec


# ---------------------------------------------------------------- pretraining


def pretrain(model, train_set: Dataset, epochs: int = 20, lr: float = 1e-3,
             batch_size: int = 32, seed: int = 0, head_std: float = 0.02) -> RunRecord:
    """Full training of a fresh backbone on a source task; the head is re-zeroed after."""
    head = model.params["head.weight"]
    head.data[...] = ag.trunc_normal(ag.rng(seed, "pretrain", "head"), head.shape, head_std)
    plan = TrainPlan(trainable=["*"], lr=lr, epochs=epochs, batch_size=batch_size,
                     weight_decay=0.05, schedule="cosine", seed=seed)
    rec = train(model, plan, train_set, None, stage="pretrain")
    reset_head(model)
    return rec


@dataclass
class PretrainConfig:
    """Source task used to pretrain a backbone in-process (stand-in for a public checkpoint)."""

    enabled: bool = True
    classes: int = 12
    train: int = 2000
    variant: int = 0
    shift: float = 0.0
    noise: float = 0.2
    epochs: int = 15
    lr: float = 2e-3
    batch_size: int = 64
    data_seed: int = 100
    checkpoint: str = ""


def pretrained_backbone(spec, cfg: PretrainConfig, model_seed: int = 0) -> TransformerModel:
    """A ``spec``-shaped backbone trained on the source palette, with a zero head."""
    model = TransformerModel(spec, seed=model_seed)
    if not cfg.enabled or cfg.epochs == 0:
        return model
    src = TransformerModel(replace(spec, num_classes=cfg.classes), seed=model_seed)
    data = generate(DatasetSpec(classes=cfg.classes, image_size=spec.image_size, train=cfg.train,
                                val=0, test=1, shift=cfg.shift, noise=cfg.noise,
                                variant=cfg.variant, seed=cfg.data_seed))
    pretrain(src, data.train, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
             seed=model_seed)
    for n, t in src.params.items():
        if not n.startswith("head."):
            model.params[n].data[...] = t.data
    return model


def reset_head(model) -> None:
    """Fresh zero head; the source task's classifier is discarded."""
    model.params["head.weight"].data[...] = 0.0
    model.params["head.bias"].data[...] = 0.0


# ---------------------------------------------------------------- stages


def _only(names, patterns, what: str) -> None:
    bad = [n for n in names if not any(glob_match(n, p) for p in patterns)]
    if bad:
        raise ConfigurationError(f"{what} may only train {patterns}; plan also trains {bad[:4]}")


def run_stage1(model, train_set: Dataset, plan: TrainPlan, eval_set: Dataset | None = None):
    """Tune LayerNorm scale/shift and the head; everything else stays frozen."""
    out = model.clone()
    _only(plan.resolve(out), [LN_GLOB, "head.*"], "stage 1")
    rec = train(out, plan, train_set, eval_set, stage="stage1")
    rec.method = "layernorm"
    return out, rec


def score_stage1(model, train_set: Dataset, k: int, *, selector: str = "tis",
                 position: str = "after_mlp", depth: int | None = None, aggregate: str = "row",
                 batch_size: int = 100, max_batches: int | None = None, seed: int = 0,
                 threads: int = 1):
    """ImportanceReport for the TTC sites of ``model`` from one pass over ``train_set``."""
    depth = model.spec.depth if depth is None else depth
    sites = [(i, p) for i in inserted_layers(depth, model.spec.depth) for p in positions_for(position)]
    batches = list(train_set.batches(batch_size))
    if max_batches is not None:
        batches = batches[:max_batches]
    return score_model(model, batches, sites, k, selector=selector, aggregate=aggregate,
                       seed=seed, threads=threads)


def run_stage2(model_stage1, train_set: Dataset, report, plan: TrainPlan,
               eval_set: Dataset | None = None, *, depth: int | None = None,
               position: str = "after_mlp", bias: bool = True, mode: str = "channels",
               tune_ln: bool = True):
    """Insert TTC at the reported sites and tune LN + TTC + head jointly."""
    report.check_model(model_stage1)
    model = insert_ttc(model_stage1, report, depth=depth, position=position, bias=bias, mode=mode)
    allowed = stage2_trainable(tune_ln)
    _only(plan.resolve(model), allowed, "stage 2")
    rec = train(model, plan, train_set, eval_set, stage="stage2")
    rec.method = "ttc"
    return model, rec


# ---------------------------------------------------------------- full protocols


@dataclass
class MethodConfig:
    """Everything run_method needs besides the backbone and data."""

    stage1: TrainPlan = field(default_factory=lambda: TrainPlan(lr=1e-3))
    stage2: TrainPlan = field(default_factory=lambda: TrainPlan(lr=5e-4))
    stage1_enabled: bool = True
    tune_ln: bool = True
    k: int | None = None
    depth: int | None = None
    position: str = "after_mlp"
    selector: str = "tis"
    aggregate: str = "row"
    bias: bool = True
    mode: str = "channels"
    score_batches: int | None = None
    adapter_dim: int | None = None
    adapter_act: str = "relu"
    prompt_len: int = 10
    ssf_patch_embed: bool = False
    protocol: str = "direct"
    lr_scales: tuple[float, ...] = (1.0,)
    seed: int = 0
    threads: int = 1


@dataclass
class MethodResult:
    record: RunRecord
    model: TransformerModel
    stage1_model: TransformerModel | None = None
    report: object = None
    stage_records: list = field(default_factory=list)


def _scaled(plan: TrainPlan, s: float, **kw) -> TrainPlan:
    return plan.with_(lr=plan.lr * s, **kw)


def fit_method(method: str, backbone, train_set: Dataset, eval_set: Dataset | None,
               cfg: MethodConfig, lr_scale: float = 1.0, final_epochs: int | None = None) -> MethodResult:
    """One training run of ``method`` on ``train_set``; per-epoch eval on ``eval_set``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method != "ttc":
        model = backbone.clone()
        attach_method(model, method, adapter_dim=cfg.adapter_dim, adapter_act=cfg.adapter_act,
                      prompt_len=cfg.prompt_len, ssf_patch_embed=cfg.ssf_patch_embed)
        base = cfg.stage1
        kw = {} if final_epochs is None else {"epochs": final_epochs}
        plan = freezing_policy(method, model, **_plan_kwargs(_scaled(base, lr_scale, **kw)))
        rec = train(model, plan, train_set, eval_set, stage=method)
        rec.method = method
        return MethodResult(record=rec, model=model, stage_records=[rec])

    spec = backbone.spec
    k = cfg.k or max(1, spec.dim // 8)
    recs = []
    if cfg.stage1_enabled:
        s1_plan = _scaled(cfg.stage1, lr_scale).with_(trainable=[LN_GLOB, "head.*"])
        s1_model, r1 = run_stage1(backbone, train_set, s1_plan, eval_set)
    else:
        # scores need a non-zero head: probe the head alone before scoring
        s1_plan = _scaled(cfg.stage1, lr_scale).with_(trainable=["head.*"])
        s1_model = backbone.clone()
        r1 = train(s1_model, s1_plan, train_set, eval_set, stage="stage1")
        r1.method = "linear"
    recs.append(r1)
    report = score_stage1(s1_model, train_set, k, selector=cfg.selector, position=cfg.position,
                          depth=cfg.depth, aggregate=cfg.aggregate,
                          max_batches=cfg.score_batches, seed=cfg.seed, threads=cfg.threads)
    kw = {} if final_epochs is None else {"epochs": final_epochs}
    s2_plan = _scaled(cfg.stage2, lr_scale, **kw).with_(trainable=stage2_trainable(cfg.tune_ln))
    model, r2 = run_stage2(s1_model, train_set, report, s2_plan, eval_set, depth=cfg.depth,
                           position=cfg.position, bias=cfg.bias, mode=cfg.mode, tune_ln=cfg.tune_ln)
    recs.append(r2)
    rec = RunRecord(method="ttc", stage="two-stage", trainable=r2.trainable, epochs=r2.epochs,
                    trainable_params=r2.trainable_params, total_params=r2.total_params,
                    wall_time=r1.wall_time + r2.wall_time)
    rec.metrics["stage1_final_eval_acc"] = r1.final_eval_acc
    return MethodResult(record=rec, model=model, stage1_model=s1_model, report=report,
                        stage_records=recs)


def _plan_kwargs(plan: TrainPlan) -> dict:
    return {
        "optimizer": plan.optimizer, "lr": plan.lr, "weight_decay": plan.weight_decay,
        "momentum": plan.momentum, "betas": plan.betas, "epochs": plan.epochs,
        "batch_size": plan.batch_size, "schedule": plan.schedule, "seed": plan.seed,
    }


def run_method(method: str, backbone, data: TaskData, cfg: MethodConfig) -> MethodResult:
    """Full protocol for ``method``.

    ``direct``: train on the whole training pool, report test accuracy.
    ``select``: train on the fit split for every lr scale, pick (lr, epoch) by
    validation accuracy, retrain on the whole pool with that choice, report test.
    """
    t0 = time.perf_counter()
    if cfg.protocol == "direct":
        res = fit_method(method, backbone, data.train, data.test, cfg)
        chosen = {"lr_scale": 1.0, "epochs": len(res.record.epochs) - 1}
    elif cfg.protocol == "select":
        if data.val_size <= 0:
            raise ConfigurationError("select protocol needs a validation split")
        best = None
        for s in cfg.lr_scales:
            trial = fit_method(method, backbone, data.fit, data.val, cfg, lr_scale=s)
            for st in trial.record.epochs[1:]:
                key = (st.eval_acc, -st.epoch)
                if best is None or key > best[0]:
                    best = (key, s, st.epoch)
        _, scale_, ep = best
        res = fit_method(method, backbone, data.train, data.test, cfg, lr_scale=scale_, final_epochs=ep)
        chosen = {"lr_scale": scale_, "epochs": ep}
    else:
        raise ConfigurationError(f"protocol must be direct or select, got {cfg.protocol!r}")
    rec = res.record
    rec.metrics.update({"test_acc": evaluate(res.model, data.test), **{f"chosen_{k}": v for k, v in chosen.items()}})
    rec.wall_time = time.perf_counter() - t0
    return res
