import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttc_tuning import autograd as ag
from ttc_tuning.autograd import Tensor
from ttc_tuning.tis import (ImportanceReport, exact_removal_score, exact_removal_scores, l2norm_scores,
                            score_model, select_channels, select_random, select_topk, site_weight,
                            taylor_channel_scores, taylor_scores)
from ttc_tuning.toy import MLPSpec, ToyMLP, toy_problem
from ttc_tuning.vit import ModelSpec, TransformerModel


class Quadratic:
    """L(w) = sum(w^2) / 2 with one weight per row."""

    def __init__(self, w):
        self.params = {"w": Tensor(np.asarray(w, dtype=np.float64).reshape(-1, 1))}

    def loss(self, x, y):
        w = self.params["w"]
        return ag.scale(ag.tsum(ag.mul(w, w)), 0.5)

    def clone(self):
        return Quadratic(self.params["w"].data.copy())


def vit(seed=0):
    m = TransformerModel(ModelSpec(), seed=seed)
    m.params["head.weight"].data[...] = ag.rng(seed, "head").normal(size=(32, 5))
    return m


def vit_batches(n=2, seed=0):
    g = ag.rng(seed, "tis-data")
    return [(g.normal(size=(4, 3, 16, 16)), g.integers(0, 5, 4)) for _ in range(n)]


# ---------------------------------------------------------------- removal oracle


def test_removal_of_zero_row_is_zero():
    model, batch = toy_problem(0)
    model.params["fc2.weight"].data[3] = 0.0
    assert exact_removal_score(model, batch, "fc2.weight", 3) == 0.0


def test_removal_scalar_quadratic():
    assert exact_removal_score(Quadratic([2.0]), (None, None), "w", 0) == 4.0


def test_removal_matches_independent_reforward():
    model, (x, y) = toy_problem(5)
    scores = exact_removal_scores(model, (x, y), "fc2.weight")
    P = {n: t.data for n, t in model.params.items()}

    def loss(w2):
        h = np.maximum(x @ P["fc1.weight"].T + P["fc1.bias"], 0.0)
        z = (h @ w2.T + P["fc2.bias"]) @ P["head.weight"].T
        z = z - z.max(1, keepdims=True)
        return np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(len(y)), y])

    base = loss(P["fc2.weight"])
    for i in range(8):
        w = P["fc2.weight"].copy()
        w[i] = 0.0
        assert scores[i] == pytest.approx((loss(w) - base) ** 2, abs=1e-12)


def test_removal_restores_model_bitwise():
    model, batch = toy_problem(1)
    before = {n: t.data.tobytes() for n, t in model.params.items()}
    exact_removal_scores(model, batch, "fc2.weight")
    assert before == {n: t.data.tobytes() for n, t in model.params.items()}


def test_removal_errors():
    model, batch = toy_problem(0)
    with pytest.raises(KeyError):
        exact_removal_score(model, batch, "nope", 0)
    with pytest.raises(IndexError):
        exact_removal_score(model, batch, "fc2.weight", 8)


# ---------------------------------------------------------------- taylor scores


def test_zero_gradient_gives_zero_scores():
    model = Quadratic(np.zeros(4))
    np.testing.assert_array_equal(taylor_channel_scores(model, [(None, None)], "w"), np.zeros(4))


def test_single_weight_rows():
    w = np.array([2.0, -1.0, 0.5])
    s = taylor_channel_scores(Quadratic(w), [(None, None)], "w", aggregate="element")
    np.testing.assert_array_equal(s, (w * w) ** 2)  # g = w
    np.testing.assert_array_equal(taylor_channel_scores(Quadratic(w), [(None, None)], "w"), (w * w) ** 2)


def test_aggregates_match_definitions():
    model, batch = toy_problem(2)
    model.params["fc2.weight"].requires_grad = True
    ag.backward(model.loss(*batch))
    g, w = model.params["fc2.weight"].grad, model.params["fc2.weight"].data
    model.params["fc2.weight"].requires_grad = False
    model.params["fc2.weight"].grad = None
    np.testing.assert_allclose(taylor_channel_scores(model, [batch], "fc2.weight", "row"),
                               (g * w).sum(1) ** 2, rtol=1e-12)
    np.testing.assert_allclose(taylor_channel_scores(model, [batch], "fc2.weight", "element"),
                               ((g * w) ** 2).sum(1), rtol=1e-12)
    np.testing.assert_allclose(taylor_channel_scores(model, [batch], "fc2.weight", "signed"),
                               (g * w).sum(1), rtol=1e-12)


def test_scores_leave_params_and_flags_untouched():
    m = vit()
    m.params["head.bias"].requires_grad = True
    before = {n: t.data.tobytes() for n, t in m.params.items()}
    taylor_scores(m, vit_batches(), [(0, "after_mlp"), (1, "after_mhsa")])
    assert before == {n: t.data.tobytes() for n, t in m.params.items()}
    assert [n for n, t in m.params.items() if t.requires_grad] == ["head.bias"]


def test_scores_deterministic_and_thread_invariant():
    m = vit()
    sites = [(0, "after_mlp"), (1, "after_mlp")]
    a = taylor_scores(m, vit_batches(3), sites)
    b = taylor_scores(m, vit_batches(3), sites)
    c = taylor_scores(m, vit_batches(3), sites, threads=3)
    for s in sites:
        assert a[s].tobytes() == b[s].tobytes() == c[s].tobytes()


def test_scores_errors():
    m = vit()
    with pytest.raises(ValueError):
        taylor_scores(m, [], [(0, "after_mlp")])
    with pytest.raises(ValueError):
        site_weight((0, "input_tokens"))
    with pytest.raises(ValueError):
        taylor_scores(m, vit_batches(1), [(0, "after_mlp")], aggregate="abs")


def test_site_weight_mapping():
    assert site_weight((3, "after_mlp")) == "layers.3.mlp.fc2.weight"
    assert site_weight((0, "after_mhsa")) == "layers.0.attn.proj.weight"


def test_separable_linear_toy_top1_agrees():
    # orthonormal inputs, identity readout, one dominant row
    spec = MLPSpec(inputs=4, hidden=4, dim=4, classes=4, row_spread=0.0)
    m = ToyMLP(spec, seed=0)
    m.params["fc1.weight"].data[...] = np.eye(4)
    m.params["fc1.bias"].data[...] = 0.0
    m.params["fc2.bias"].data[...] = 0.0
    m.params["head.weight"].data[...] = np.eye(4)
    m.params["fc2.weight"].data[...] = np.diag([0.1, 0.2, 1.5, 0.3])
    x, y = np.eye(4), np.arange(4)
    t = taylor_channel_scores(m, [(x, y)], "fc2.weight")
    e = exact_removal_scores(m, (x, y), "fc2.weight")
    assert int(np.argmax(t)) == int(np.argmax(e)) == 2


# ---------------------------------------------------------------- selection


def test_topk_examples():
    assert select_topk([3, 1, 2], 2) == [0, 2]
    assert select_topk([0.5, 2.0, 1.0, 2.0], 2) == [1, 3]
    assert select_topk([1.0, 1.0, 1.0, 1.0], 2) == [0, 1]


@pytest.mark.parametrize("k", [0, 4])
def test_topk_range(k):
    with pytest.raises(ValueError):
        select_topk([1.0, 2.0, 3.0], k)


def test_random_selector_reproducible():
    a = select_random(32, 4, 7, "x")
    assert a == select_random(32, 4, 7, "x")
    assert a != select_random(32, 4, 8, "x")
    assert len(set(a)) == 4


def test_l2norm_selector():
    f = np.zeros((5, 6, 4))
    f[..., 0] = 10.0
    assert select_channels("l2norm", 1, features=f) == [0]
    np.testing.assert_allclose(l2norm_scores(f)[0], 10.0 * np.sqrt(30))


def test_strategies_have_size_k():
    m = vit()
    for sel in ("tis", "l2norm", "random"):
        rep = score_model(m, vit_batches(1), [(0, "after_mlp"), (1, "after_mlp")], 5, selector=sel)
        assert all(len(s.selected) == 5 for s in rep.sites.values())
    with pytest.raises(ValueError):
        select_channels("magnitude", 2, scores=[1.0, 2.0])


def test_report_roundtrip(tmp_path):
    rep = score_model(vit(), vit_batches(1), [(0, "after_mlp"), (1, "after_mhsa")], 4, seed=3)
    rep.save(tmp_path / "s.json")
    back = ImportanceReport.load(tmp_path / "s.json")
    assert back.to_dict() == rep.to_dict()
    assert all(np.array_equal(back.sites[k].scores, rep.sites[k].scores) for k in rep.sites)


def test_report_model_mismatch():
    rep = score_model(vit(), vit_batches(1), [(0, "after_mlp")], 4)
    with pytest.raises(ValueError):
        rep.check_model(TransformerModel(ModelSpec(dim=16, heads=4)))


# ---------------------------------------------------------------- properties


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e6)), st.data())
def test_topk_is_the_k_largest(s, data):
    k = data.draw(st.integers(1, s.size))
    sel = select_topk(s, k)
    assert sel == sorted(sel) and len(sel) == k
    rest = np.delete(s, sel)
    if rest.size:
        assert s[sel].min() >= rest.max()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_nonnegative_and_scale_invariant(seed, c):
    model, batch = toy_problem(seed % 50)
    s1 = taylor_channel_scores(model, [batch], "fc2.weight")
    sc = taylor_channel_scores(model, [batch], "fc2.weight", loss_scale=c)
    assert (s1 >= 0).all() and np.isfinite(s1).all()
    np.testing.assert_allclose(sc, c * c * s1, rtol=1e-9, atol=1e-300)
    for k in range(1, 9):
        assert select_topk(s1, k) == select_topk(sc, k)
