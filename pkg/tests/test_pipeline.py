import numpy as np
import pytest

from ttc_tuning import autograd as ag
from ttc_tuning.data import DatasetSpec, generate
from ttc_tuning.petl import METHODS, LN_GLOB, freezing_policy, attach_method
from ttc_tuning.pipeline import (ConfigurationError, MethodConfig, PretrainConfig, evaluate, fit_method,
                                 param_hash, pretrained_backbone, run_method, run_stage1, run_stage2,
                                 score_stage1, train)
from ttc_tuning.plan import TrainPlan
from ttc_tuning.vit import ModelSpec, TransformerModel


@pytest.fixture(scope="module")
def data():
    return generate(DatasetSpec(train=96, val=32, test=64, seed=3))


def backbone(seed=0):
    return TransformerModel(ModelSpec(), seed=seed)


def small(**kw):
    base = dict(stage1=TrainPlan(lr=3e-3, epochs=2, batch_size=32),
                stage2=TrainPlan(lr=1.5e-3, epochs=2, batch_size=32))
    base.update(kw)
    return MethodConfig(**base)


def test_zero_epochs_leaves_model_unchanged(data):
    m = backbone()
    before = param_hash(m, list(m.params))
    rec = train(m, TrainPlan(trainable=["*"], epochs=0), data.train, data.test)
    assert param_hash(m, list(m.params)) == before
    assert len(rec.epochs) == 1


@pytest.mark.parametrize("method", METHODS)
def test_frozen_tensors_byte_identical(method, data):
    base = backbone()
    res = fit_method(method, base, data.train, None, small())
    trained = set(res.record.trainable)
    for n, t in base.params.items():
        if n not in trained:
            assert t.data.tobytes() == res.model.params[n].data.tobytes(), n
    # the input backbone is never modified
    assert param_hash(base, list(base.params)) == param_hash(backbone(), list(base.params))


def test_every_method_trains_something(data):
    base = backbone()
    for method in METHODS:
        res = fit_method(method, base, data.train, None, small())
        changed = [n for n in res.record.trainable
                   if n in base.params and not np.array_equal(base.params[n].data, res.model.params[n].data)]
        added = [n for n in res.model.params if n not in base.params]
        assert changed or added, method


def test_stage1_rejects_other_params(data):
    with pytest.raises(ConfigurationError):
        run_stage1(backbone(), data.train, TrainPlan(trainable=[LN_GLOB, "layers.0.attn.qkv.weight"]))


def test_stage2_rejects_backbone_weights(data):
    s1, _ = run_stage1(backbone(), data.train, TrainPlan(trainable=[LN_GLOB, "head.*"], epochs=1))
    rep = score_stage1(s1, data.train, 4, max_batches=1)
    with pytest.raises(ConfigurationError):
        run_stage2(s1, data.train, rep, TrainPlan(trainable=["*"], epochs=1))


def test_stage2_step0_equals_stage1_final(data):
    res = fit_method("ttc", backbone(), data.train, data.test, small())
    s1, s2 = res.stage_records
    assert s2.epochs[0].eval_acc == s1.final_eval_acc
    assert evaluate(res.stage1_model, data.test) == s1.final_eval_acc


def test_deterministic(data):
    a = fit_method("ttc", backbone(), data.train, data.test, small())
    b = fit_method("ttc", backbone(), data.train, data.test, small())
    assert all(param_hash(a.model, [n]) == param_hash(b.model, [n]) for n in a.model.params)
    assert [e.train_loss for e in a.record.epochs[1:]] == [e.train_loss for e in b.record.epochs[1:]]


def test_linear_is_stage1_without_ln(data):
    cfg = small()
    lin = fit_method("linear", backbone(), data.train, data.test, cfg)
    ref = backbone()
    train(ref, cfg.stage1.with_(trainable=["head.*"]), data.train, data.test, stage="linear")
    assert all(lin.model.params[n].data.tobytes() == ref.params[n].data.tobytes() for n in ref.params)


def test_head_only_training_reduces_loss(data):
    m = backbone()
    rec = train(m, TrainPlan(lr=3e-3, epochs=4, schedule="constant"), data.train)
    losses = [e.train_loss for e in rec.epochs[1:]]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_grid_one_record_per_cell(data):
    rows = []
    for s in (0.5, 1.0):
        for method in ("linear", "layernorm"):
            rows.append((method, s, fit_method(method, backbone(), data.train, None, small(), lr_scale=s).record))
    assert len({(m, s) for m, s, _ in rows}) == 4
    assert rows[0][2].trainable_params == rows[2][2].trainable_params


def test_select_protocol(data):
    res = run_method("layernorm", backbone(), data, small(protocol="select", lr_scales=(0.5, 1.0)))
    assert res.record.metrics["chosen_lr_scale"] in (0.5, 1.0)
    assert 1 <= res.record.metrics["chosen_epochs"] <= 2
    assert 0.0 <= res.record.metrics["test_acc"] <= 1.0


def test_select_needs_validation():
    d = generate(DatasetSpec(train=32, val=0, test=8))
    with pytest.raises(ConfigurationError):
        run_method("linear", backbone(), d, small(protocol="select"))
    with pytest.raises(ConfigurationError):
        run_method("linear", backbone(), d, small(protocol="kfold"))


def test_without_stage1_probes_head_first(data):
    res = fit_method("ttc", backbone(), data.train, None, small(stage1_enabled=False))
    assert res.stage_records[0].method == "linear"
    assert res.stage1_model.params["head.weight"].data.any()
    ln = freezing_policy("layernorm", res.stage1_model).resolve(res.stage1_model)
    base = backbone()
    assert all(np.array_equal(res.stage1_model.params[n].data, base.params[n].data)
               for n in ln if not n.startswith("head."))


def test_pretrained_backbone_disabled_is_random_init():
    m = pretrained_backbone(ModelSpec(), PretrainConfig(enabled=False))
    ref = backbone()
    assert all(np.array_equal(m.params[n].data, ref.params[n].data) for n in m.params)


def test_pretrained_backbone_short_run():
    cfg = PretrainConfig(train=64, epochs=1, batch_size=32)
    m = pretrained_backbone(ModelSpec(), cfg)
    ref = backbone()
    assert not m.params["head.weight"].data.any()
    assert not np.array_equal(m.params["layers.0.attn.qkv.weight"].data, ref.params["layers.0.attn.qkv.weight"].data)


def test_adapter_attachment_is_transparent():
    m = backbone()
    m.params["head.weight"].data[...] = ag.rng(0, "h").normal(size=(32, 5))
    x = ag.rng(1, "x").normal(size=(2, 3, 16, 16))
    a = m.clone()
    attach_method(a, "adapter")
    assert a.forward(x).logits.data.tobytes() == m.forward(x).logits.data.tobytes()
