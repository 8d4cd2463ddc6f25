import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttc_tuning import autograd as ag
from ttc_tuning.autograd import ShapeError, Tensor
from ttc_tuning.petl import Prompt
from ttc_tuning.vit import ModelSpec, TransformerModel, count_params, glob_match, layernorm, named_parameters

from oracles import vit_loss


def images(b, spec=ModelSpec(), seed=0):
    return ag.rng(seed, "test-images").normal(size=(b, spec.channels, spec.image_size, spec.image_size))


# ---------------------------------------------------------------- spec


@pytest.mark.parametrize("kw", [dict(image_size=15), dict(dim=30, heads=4), dict(eps=0.0), dict(depth=-1)])
def test_spec_rejects_invalid(kw):
    with pytest.raises(ValueError):
        ModelSpec(**kw)


def test_spec_token_counts():
    s = ModelSpec()
    assert (s.num_patches, s.tokens, s.hidden) == (16, 17, 128)


# ---------------------------------------------------------------- layernorm


def test_layernorm_constant_row_maps_to_beta():
    beta = Tensor([0.5, -1.0, 2.0])
    out = layernorm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones(3)), beta)
    np.testing.assert_array_equal(out.data, [beta.data])


def test_layernorm_worked_row():
    out = ag.layernorm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 0.0)
    # mean 2, population variance 2/3
    expect = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0 / 3.0)
    np.testing.assert_allclose(out.data[0], expect, atol=1e-12)
    np.testing.assert_allclose(out.data[0], [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_layernorm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    beta = Tensor([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(layernorm(x, Tensor(np.zeros(3)), beta).data, np.tile(beta.data, (4, 1)))


def test_layernorm_width_mismatch():
    with pytest.raises(ShapeError):
        layernorm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-100, 100, allow_nan=False)))
def test_layernorm_row_statistics(x):
    spread = x.max(axis=1) - x.min(axis=1)
    if (spread < 1e-3).any():
        return
    out = ag.layernorm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-12).data
    assert np.abs(out.mean(axis=1)).max() < 1e-10
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-6


# ---------------------------------------------------------------- forward


def test_forward_shapes():
    m = TransformerModel(ModelSpec())
    out = m.forward(images(3))
    assert out.logits.shape == (3, 5)
    assert out.cls_tokens.shape == (3, 32)


def test_forward_rejects_wrong_image_shape():
    with pytest.raises(ShapeError):
        TransformerModel(ModelSpec()).forward(np.zeros((2, 3, 8, 8)))


def test_zero_params_give_head_bias():
    m = TransformerModel(ModelSpec())
    for t in m.params.values():
        t.data[...] = 0.0
    m.params["head.bias"].data[...] = [1.0, -2.0, 0.5, 3.0, 0.0]
    out = m.forward(images(4))
    np.testing.assert_array_equal(out.logits.data, np.tile(m.params["head.bias"].data, (4, 1)))


def test_token_count_with_and_without_prompts():
    m = TransformerModel(ModelSpec())
    tr = m.forward(images(1), trace=True).trace
    assert tr[(1, "input_tokens")] == 17
    m.attach(Prompt(layer=0, length=3))
    tr = m.forward(images(1), trace=True).trace
    assert tr[(0, "input_tokens")] == 17 + 3
    assert tr[(1, "input_tokens")] == 17 + 3


def test_forward_matches_numpy_oracle():
    m = TransformerModel(ModelSpec(), seed=4)
    m.params["head.weight"].data[...] = ag.rng(1, "head").normal(size=(32, 5))
    x, y = images(3), np.array([0, 2, 4])
    ref = vit_loss({n: t.data for n, t in m.params.items()}, m.spec, x, y)
    assert m.loss(x, y).item() == pytest.approx(ref, abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.permutations(list(range(5))))
def test_forward_batch_permutation_covariant(perm):
    m = TransformerModel(ModelSpec(), seed=2)
    m.params["head.weight"].data[...] = ag.rng(2, "head").normal(size=(32, 5))
    x = images(5)
    full = m.forward(x).logits.data
    np.testing.assert_allclose(m.forward(x[list(perm)]).logits.data, full[list(perm)], atol=1e-12)


def test_only_trainable_params_get_grads():
    m = TransformerModel(ModelSpec())
    m.params["head.weight"].data[...] = 0.1
    names = [n for n, _ in named_parameters(m, "*.norm*.{gamma,beta}")] + ["head.weight"]
    m.set_trainable(names)
    ag.backward(m.loss(images(2), np.array([0, 1])))
    for n, t in m.params.items():
        assert (t.grad is not None) == (n in names), n


# ---------------------------------------------------------------- naming


def test_ln_glob_count_l4_d64():
    m = TransformerModel(ModelSpec(depth=4, dim=64, heads=4))
    ln = named_parameters(m, "*.norm*.{gamma,beta}")
    assert count_params(m, [n for n, _ in ln]) == (2 * 4 + 1) * 2 * 64 == 1152
    assert all(n.endswith((".gamma", ".beta")) for n, _ in ln)


def test_head_glob():
    m = TransformerModel(ModelSpec())
    head = named_parameters(m, "head.*")
    assert [(n, t.shape) for n, t in head] == [("head.weight", (32, 5)), ("head.bias", (5,))]


def test_full_glob_unique_and_deterministic():
    a = [n for n, _ in named_parameters(TransformerModel(ModelSpec()), "*")]
    b = [n for n, _ in named_parameters(TransformerModel(ModelSpec()), "*")]
    assert a == b and len(a) == len(set(a))
    assert named_parameters(TransformerModel(ModelSpec()), "nothing.*") == []


def test_glob_brace_expansion():
    assert glob_match("layers.0.norm1.gamma", "*.norm*.{gamma,beta}")
    assert glob_match("encoder.norm.beta", "*.norm*.{gamma,beta}")
    assert not glob_match("layers.0.attn.qkv.bias", "*.norm*.{gamma,beta}")


def test_init_is_seeded():
    a, b = TransformerModel(ModelSpec(), seed=1), TransformerModel(ModelSpec(), seed=1)
    c = TransformerModel(ModelSpec(), seed=2)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    assert not np.array_equal(a.params["pos_embed"].data, c.params["pos_embed"].data)
    assert not a.params["head.weight"].data.any()


def test_clone_is_deep():
    a = TransformerModel(ModelSpec())
    b = a.clone()
    b.params["cls_token"].data[0] += 1.0
    assert a.params["cls_token"].data[0] != b.params["cls_token"].data[0]
