"""Task-relevant channel adapter: gather top-K channels, residual K x K linear, scatter back."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .petl import LN_GLOB
from .vit import SITE_WEIGHT, Attachment, ModelSpec, register_attachment

POSITIONS = ("after_mhsa", "after_mlp", "both")
MODES = ("channels", "weights")

_SHORT = {"after_mhsa": "mhsa", "after_mlp": "mlp"}


def _check_indices(selected, d: int) -> np.ndarray:
    idx = np.asarray(selected, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= d)):
        raise IndexError(f"selected channels {list(idx)} out of range for width {d}")
    if idx.size > 1 and not (np.diff(idx) > 0).all():
        raise ValueError("selected channels must be strictly increasing")
    return idx


def ttc_forward(x: Tensor, selected, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Replace channels ``selected`` of ``x`` by ``x' + x' W^T + b`` with ``x' = x[..., selected]``.

    All other channels are copied unchanged.
    """
    idx = _check_indices(selected, x.shape[-1])
    k = idx.size
    if weight.shape != (k, k):
        raise ag.ShapeError(f"ttc: weight {list(weight.shape)} for K={k}")
    sub = ag.take(x, idx, axis=-1)
    return ag.put_add(x, idx, ag.linear(sub, weight, bias), axis=-1)


def ttc_param_count(layers: int, k: int, bias: bool = True) -> int:
    return int(layers) * (k * k + (k if bias else 0))


def weight_tuning_param_count(layers: int, k: int, row_width: int) -> int:
    """Trainable entries when tuning the K selected rows of the producing weight instead."""
    return int(layers) * k * row_width


@register_attachment
@dataclass
class TTC(Attachment):
    layer: int
    position: str
    selected: list[int] = field(default_factory=list)
    bias: bool = True
    kind = "ttc"

    def __post_init__(self) -> None:
        if self.position not in ("after_mhsa", "after_mlp"):
            raise ValueError(f"TTC position must be after_mhsa or after_mlp, got {self.position!r}")
        self.selected = [int(i) for i in self.selected]

    @property
    def site(self) -> str:
        return self.position

    @property
    def prefix(self) -> str:
        return f"layers.{self.layer}.ttc_{_SHORT[self.position]}."

    def param_shapes(self, spec: ModelSpec) -> dict:
        _check_indices(self.selected, spec.dim)
        k = len(self.selected)
        shapes = {self.prefix + "weight": (k, k)}
        if self.bias:
            shapes[self.prefix + "bias"] = (k,)
        return shapes

    def apply(self, model, x: Tensor) -> Tensor:
        b = model.params.get(self.prefix + "bias") if self.bias else None
        return ttc_forward(x, self.selected, model.params[self.prefix + "weight"], b)


@register_attachment
@dataclass
class TTCWeights(Attachment):
    """Comparison arm: a trainable delta on the K selected rows of the producing weight."""

    layer: int
    position: str
    selected: list[int] = field(default_factory=list)
    kind = "ttc_weights"
    site = "weights"

    def __post_init__(self) -> None:
        if self.position not in ("after_mhsa", "after_mlp"):
            raise ValueError(f"TTC position must be after_mhsa or after_mlp, got {self.position!r}")
        self.selected = [int(i) for i in self.selected]

    @property
    def target(self) -> str:
        return SITE_WEIGHT[self.position]

    @property
    def name(self) -> str:
        return f"layers.{self.layer}.ttc_{_SHORT[self.position]}_rows.delta"

    def param_shapes(self, spec: ModelSpec) -> dict:
        _check_indices(self.selected, spec.dim)
        width = spec.hidden if self.position == "after_mlp" else spec.dim
        return {self.name: (len(self.selected), width)}

    def apply_weight(self, model, w: Tensor) -> Tensor:
        with ag.flop_scope(self.kind):
            return ag.put_add(w, self.selected, model.params[self.name], axis=0)


def inserted_layers(depth: int, total: int) -> list[int]:
    """The last ``depth`` layers of a ``total``-layer model."""
    if not 0 <= depth <= total:
        raise ValueError(f"insert depth {depth} outside [0, {total}]")
    return list(range(total - depth, total))


def positions_for(position: str) -> list[str]:
    if position == "both":
        return ["after_mhsa", "after_mlp"]
    if position not in POSITIONS:
        raise ValueError(f"position must be one of {POSITIONS}, got {position!r}")
    return [position]


def insert_ttc(model, report, depth: int | None = None, position: str = "after_mlp",
               bias: bool = True, mode: str = "channels"):
    """Copy of ``model`` with a TTC module at each requested site of the last ``depth`` layers."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    spec = model.spec
    depth = spec.depth if depth is None else depth
    report.check_model(model)
    out = model.clone()
    for layer in inserted_layers(depth, spec.depth):
        for pos in positions_for(position):
            if (layer, pos) not in report.sites:
                raise KeyError(f"importance report has no scores for layer {layer} {pos}")
            sel = report.sites[(layer, pos)].selected
            if mode == "channels":
                out.attach(TTC(layer=layer, position=pos, selected=sel, bias=bias))
            else:
                out.attach(TTCWeights(layer=layer, position=pos, selected=sel))
    return out


def stage2_trainable(tune_ln: bool = True) -> list[str]:
    globs = ["*.ttc_*"]
    if tune_ln:
        globs.insert(0, LN_GLOB)
    return globs + ["head.*"]
