"""Feature-shift divergences, KNN probing, complexity accounting and LN shift tables.

Report file schemas (all written atomically):

``complexity.txt``  ``method``, ``params_formula``, ``params_closed``, ``params_counted``,
                    ``flops_formula``, ``flops_closed``, ``flops_counted`` per line, tab separated
``jsd_hist.csv``    ``bin_lo,bin_hi,count`` header-led, followed by a ``# mode=...`` comment
``knn.txt``         ``key = value`` lines (``k``, ``acc_frozen``, ``acc_tuned``)
``ln_shift.csv``    ``layer,norm,gamma_l2,beta_l2``
``embeddings.csv``  ``f0,...,f{D-1},label``
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .petl import ssf_sites
from .ttc import ttc_param_count

SMOOTHING = 1e-12
DIST_MODES = ("softmax", "histogram")


# ---------------------------------------------------------------- divergences


def _check_dist(p: np.ndarray, name: str) -> None:
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D distribution")
    if (p < 0).any() or not np.isfinite(p).all():
        raise ValueError(f"{name} has negative or non-finite mass")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not normalized (sum {p.sum():.12g})")


def kl(p, q) -> float:
    """KL(p || q) in nats; cells with p = 0 contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support sizes differ: {p.shape} vs {q.shape}")
    _check_dist(p, "p")
    _check_dist(q, "q")
    mask = p > 0
    if (q[mask] == 0).any():
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats, bounded by ln 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support sizes differ: {p.shape} vs {q.shape}")
    _check_dist(p, "p")
    _check_dist(q, "q")
    m = 0.5 * (p + q)
    # summing the two halves in a fixed order keeps jsd(p, q) == jsd(q, p) exactly
    a, b = kl(p, m), kl(q, m)
    val = 0.5 * (min(a, b) + max(a, b))
    return float(min(max(val, 0.0), np.log(2.0)))


@dataclass
class Binning:
    lo: float = -4.0
    hi: float = 4.0
    bins: int = 16


def to_distribution(vec, mode: str = "softmax", binning: Binning | None = None) -> np.ndarray:
    """One CLS vector as a distribution over channels (softmax) or value bins (histogram)."""
    v = np.asarray(vec, dtype=np.float64)
    if mode == "softmax":
        e = np.exp(v - v.max())
        return e / e.sum()
    if mode == "histogram":
        b = binning or Binning()
        counts, _ = np.histogram(np.clip(v, b.lo, b.hi), bins=b.bins, range=(b.lo, b.hi))
        c = counts.astype(np.float64) + SMOOTHING
        return c / c.sum()
    raise ValueError(f"mode must be one of {DIST_MODES}, got {mode!r}")


@dataclass
class ShiftReport:
    values: np.ndarray
    mode: str
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def _cls_features(model, images, batch_size: int = 250) -> np.ndarray:
    out = []
    with ag.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model.forward(images[s:s + batch_size]).cls_tokens.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.spec.dim))


def _same_spec(a, b) -> None:
    if a.spec != b.spec:
        raise ValueError("models do not share a spec")


def feature_shift_report(model_a, model_b, dataset, mode: str = "softmax",
                         binning: Binning | None = None, hist_bins: int = 20) -> ShiftReport:
    """Per-sample JSD between the CLS distributions of two models."""
    _same_spec(model_a, model_b)
    fa = _cls_features(model_a, dataset.images)
    fb = _cls_features(model_b, dataset.images)
    vals = np.array([jsd(to_distribution(x, mode, binning), to_distribution(y, mode, binning))
                     for x, y in zip(fa, fb)])
    counts, edges = np.histogram(vals, bins=hist_bins, range=(0.0, float(np.log(2.0))))
    return ShiftReport(values=vals, mode=mode, hist_counts=counts, hist_edges=edges)


# ---------------------------------------------------------------- knn


def knn_predict(train_feats, train_labels, test_feats, k: int = 1) -> np.ndarray:
    tr = np.asarray(train_feats, dtype=np.float64)
    te = np.asarray(test_feats, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.int64)
    if len(tr) == 0:
        raise ValueError("knn probe needs a non-empty train set")
    if k < 1:
        raise ValueError("k must be >= 1")
    if tr.ndim != 2 or te.ndim != 2 or tr.shape[1] != te.shape[1]:
        raise ValueError(f"feature dims differ: {tr.shape} vs {te.shape}")
    k = min(k, len(tr))
    d2 = (te * te).sum(1)[:, None] - 2.0 * te @ tr.T + (tr * tr).sum(1)[None, :]
    dist = np.sqrt(np.maximum(d2, 0.0))
    preds = np.empty(len(te), dtype=np.int64)
    for i, row in enumerate(dist):
        nn = np.argsort(row, kind="stable")[:k]
        votes: dict[int, list[float]] = {}
        for j in nn:
            v = votes.setdefault(int(labels[j]), [0, 0.0])
            v[0] += 1
            v[1] += row[j]
        # most votes, then smallest distance sum, then lowest label
        preds[i] = min(votes, key=lambda c: (-votes[c][0], votes[c][1], c))
    return preds


def knn_probe(train_feats, train_labels, test_feats, test_labels, k: int = 1) -> float:
    preds = knn_predict(train_feats, train_labels, test_feats, k)
    y = np.asarray(test_labels, dtype=np.int64)
    return float((preds == y).mean()) if len(y) else float("nan")


# ---------------------------------------------------------------- complexity


@dataclass
class Complexity:
    method: str
    params_formula: str
    params_closed: int
    params_counted: int
    flops_formula: str
    flops_closed: int
    flops_counted: int
    sites: str = ""

    @property
    def consistent(self) -> bool:
        return self.params_closed == self.params_counted and self.flops_closed == self.flops_counted


def _extra_names(model, base_names) -> list[str]:
    return [n for n in model.params if n not in base_names]


def _flops_one_image(model) -> dict:
    spec = model.spec
    x = np.zeros((1, spec.channels, spec.image_size, spec.image_size))
    with ag.no_grad(), ag.count_flops() as counts:
        model.forward(x)
    return dict(counts)


def complexity_report(model, method: str, backbone=None) -> Complexity:
    """Closed-form extra parameters and FLOPs of ``method`` next to counted values.

    ``model`` carries the method's attachments; ``backbone`` (default: ``model``
    with attachments removed) provides the reference for counting. FLOPs are
    for one image with ``N`` tokens including CLS.
    """
    from .vit import backbone_shapes

    spec = model.spec
    L, D, N = spec.depth, spec.dim, spec.tokens
    base = set(backbone_shapes(spec))
    extra = _extra_names(model, base)
    counted_params = int(sum(model.params[n].size for n in extra))
    counts = _flops_one_image(model)
    sites = ""
    by_kind: dict[str, list] = {}
    for att in model.attachments:
        by_kind.setdefault(att.kind, []).append(att)

    if method == "adapter":
        atts = by_kind.get("adapter", [])
        d_ = atts[0].hidden if atts else 0
        n_layers = len(atts)
        pc, pf = 2 * n_layers * D * d_, "2LDD'"
        fc, ff = 2 * N * n_layers * D * d_, "2NLDD'"
        flops = counts.get("adapter", 0)
    elif method in ("vpt-deep", "vpt-shallow"):
        atts = by_kind.get("vpt", [])
        n = atts[0].length if atts else 0
        pc, pf = len(atts) * n * D, "nLD" if method == "vpt-deep" else "nD"
        fc, ff = 2 * n * (2 * N + n) * L * D, "2n(2N+n)LD"
        plain = model.clone()
        plain.attachments = []
        flops = counts.get("attn", 0) - _flops_one_image(plain).get("attn", 0)
    elif method == "ssf":
        atts = by_kind.get("ssf", [])
        m = sum(2 * sum(a.widths(spec).values()) for a in atts if a.layer >= 0) // (D * max(L, 1))
        pe = sum(2 * D for a in atts if a.layer == -1)
        pc, pf = m * L * D + pe, "mLD"
        fc, ff = m * N * L * D + (pe * (N - 1)), "mNLD"
        flops = counts.get("ssf:ew", 0)
        sites = ",".join(f"{k}={v}" for k, v in ssf_sites(spec).items()) + (f",patch_embed={D}" if pe else "")
    elif method == "ttc":
        atts = by_kind.get("ttc", [])
        k = len(atts[0].selected) if atts else 0
        bias = bool(atts) and atts[0].bias
        pc = ttc_param_count(len(atts), k, bias)
        pf = "LKK+LK" if bias else "LKK"
        fc, ff = N * len(atts) * k * k, "NLKK"
        flops = counts.get("ttc", 0)
    else:
        pc, pf, fc, ff = counted_params, "counted", 0, "0"
        flops = 0
    return Complexity(method=method, params_formula=pf, params_closed=int(pc),
                      params_counted=counted_params, flops_formula=ff, flops_closed=int(fc),
                      flops_counted=int(flops), sites=sites)


def ssf_m(spec) -> int:
    """Scale and shift vectors per layer, measured in units of D."""
    return 2 * sum(ssf_sites(spec).values()) // spec.dim


# ---------------------------------------------------------------- LN shift


def ln_shift_report(model_before, model_after) -> list[tuple[str, str, float, float]]:
    """``(layer, norm, ||d gamma||, ||d beta||)`` for every LayerNorm."""
    _same_spec(model_before, model_after)
    rows = []
    keys = [(str(i), f"layers.{i}.{nm}", nm) for i in range(model_before.spec.depth)
            for nm in ("norm1", "norm2")]
    keys.append(("final", "encoder.norm", "norm"))
    for layer, prefix, nm in keys:
        dg = model_after.params[prefix + ".gamma"].data - model_before.params[prefix + ".gamma"].data
        db = model_after.params[prefix + ".beta"].data - model_before.params[prefix + ".beta"].data
        rows.append((layer, nm, float(np.linalg.norm(dg)), float(np.linalg.norm(db))))
    return rows


# ---------------------------------------------------------------- files


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_complexity(path: str, rows: list[Complexity]) -> None:
    lines = ["method\tparams_formula\tparams_closed\tparams_counted\tflops_formula\tflops_closed\tflops_counted"]
    for r in rows:
        lines.append(f"{r.method}\t{r.params_formula}\t{r.params_closed}\t{r.params_counted}\t"
                     f"{r.flops_formula}\t{r.flops_closed}\t{r.flops_counted}")
        if r.sites:
            lines.append(f"# {r.method} site widths per layer, each with a scale and a shift: {r.sites}")
    _atomic_write(path, "\n".join(lines) + "\n")


def write_jsd_hist(path: str, rep: ShiftReport) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    for lo, hi, c in zip(rep.hist_edges[:-1], rep.hist_edges[1:], rep.hist_counts):
        w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])
    buf.write(f"# mode={rep.mode} samples={len(rep.values)} mean={float(np.mean(rep.values)) if len(rep.values) else 0.0:.6g}\n")
    _atomic_write(path, buf.getvalue())


def write_knn(path: str, k: int, acc_frozen: float, acc_tuned: float) -> None:
    _atomic_write(path, f"k = {k}\nacc_frozen = {acc_frozen:.6f}\nacc_tuned = {acc_tuned:.6f}\n")


def write_ln_shift(path: str, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "norm", "gamma_l2", "beta_l2"])
    for layer, nm, g, b in rows:
        w.writerow([layer, nm, f"{g:.10g}", f"{b:.10g}"])
    _atomic_write(path, buf.getvalue())


def export_embeddings(path: str, feats, labels) -> None:
    f = np.asarray(feats, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{j}" for j in range(f.shape[1])] + ["label"])
    for row, y in zip(f, labels):
        w.writerow([repr(float(v)) for v in row] + [int(y)])
    _atomic_write(path, buf.getvalue())
