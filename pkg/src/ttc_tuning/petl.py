"""Baseline PETL attachments (Adapter, VPT, SSF) and per-method freezing policies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .plan import TrainPlan
from .vit import Attachment, ModelSpec, register_attachment

METHODS = ("linear", "bias", "layernorm", "adapter", "vpt-shallow", "vpt-deep", "ssf", "ttc")

LN_GLOB = "*.norm*.{gamma,beta}"

_POLICIES = {
    "linear": [],
    "bias": ["*.bias"],
    "layernorm": [LN_GLOB],
    "adapter": ["*.adapter.*"],
    "vpt-shallow": ["*.prompt"],
    "vpt-deep": ["*.prompt"],
    "ssf": ["*.ssf.*"],
    "ttc": [LN_GLOB, "*.ttc_*"],
}


def adapter_forward(x: Tensor, w_down: Tensor, w_up: Tensor, activation: str = "relu") -> Tensor:
    """Residual bottleneck ``x + act(x W_down^T) W_up^T``."""
    d = x.shape[-1]
    d_small = w_down.shape[0]
    if w_down.shape != (d_small, d) or w_up.shape != (d, d_small):
        raise ag.ShapeError(
            f"adapter: x {list(x.shape)}, W_down {list(w_down.shape)}, W_up {list(w_up.shape)}"
        )
    act = {"relu": ag.relu, "gelu": ag.gelu}[activation]
    return ag.add(x, ag.linear(act(ag.linear(x, w_down)), w_up))


def vpt_concat(x: Tensor, prompts: Tensor) -> Tensor:
    """Append prompt rows after the existing tokens of every sample."""
    if prompts.shape[0] == 0:
        return x
    if prompts.ndim != 2 or prompts.shape[1] != x.shape[-1]:
        raise ag.ShapeError(f"vpt: tokens {list(x.shape)} vs prompts {list(prompts.shape)}")
    if x.ndim == 2:
        return ag.concat([x, prompts], axis=0)
    return ag.concat([x, ag.broadcast_leading(prompts, x.shape[:-2])], axis=-2)


def ssf_forward(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    w = x.shape[-1]
    if scale.shape != (w,) or shift.shape != (w,):
        raise ag.ShapeError(f"ssf: width {w} vs scale {list(scale.shape)}, shift {list(shift.shape)}")
    return ag.add(ag.mul(x, scale), shift)


@register_attachment
@dataclass
class Adapter(Attachment):
    layer: int
    hidden: int
    activation: str = "relu"
    kind = "adapter"
    site = "after_mlp"

    def __post_init__(self) -> None:
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"adapter activation must be relu or gelu, got {self.activation!r}")

    def _names(self) -> tuple[str, str]:
        p = f"layers.{self.layer}.adapter."
        return p + "down", p + "up"

    def param_shapes(self, spec: ModelSpec) -> dict:
        if not 0 < self.hidden < spec.dim:
            raise ValueError(f"adapter width {self.hidden} must lie in (0, {spec.dim})")
        down, up = self._names()
        return {down: (self.hidden, spec.dim), up: (spec.dim, self.hidden)}

    def init_param(self, name, shape, seed):
        if name.endswith(".up"):
            return np.zeros(shape)
        return ag.trunc_normal(ag.rng(seed, "init", name), shape, std=0.02)

    def apply(self, model, x: Tensor) -> Tensor:
        down, up = self._names()
        return adapter_forward(x, model.params[down], model.params[up], self.activation)


@register_attachment
@dataclass
class Prompt(Attachment):
    """Prompt tokens entering ``layer``; ``replace`` swaps the previous layer's prompts."""

    layer: int
    length: int
    replace: bool = False
    kind = "vpt"
    site = "input_tokens"

    @property
    def name(self) -> str:
        return f"layers.{self.layer}.prompt"

    def param_shapes(self, spec: ModelSpec) -> dict:
        if self.length < 1:
            raise ValueError("prompt length must be >= 1")
        return {self.name: (self.length, spec.dim)}

    def init_param(self, name, shape, seed):
        return ag.trunc_normal(ag.rng(seed, "init", name), shape, std=0.02)

    def apply(self, model, x: Tensor) -> Tensor:
        if self.replace:
            x = x[:, : x.shape[1] - self.length]
        return vpt_concat(x, model.params[self.name])


# widths of the in-layer SSF sites, as multiples of D (fc1 is mlp_ratio * D)
def ssf_sites(spec: ModelSpec) -> dict[str, int]:
    d = spec.dim
    return {"norm1": d, "qkv": 3 * d, "proj": d, "norm2": d, "fc1": spec.hidden, "fc2": d}


@register_attachment
@dataclass
class SSF(Attachment):
    """Scale-and-shift after every Linear/LayerNorm output of one layer.

    ``layer == -1`` places a single site on the patch embedding.
    """

    layer: int
    kind = "ssf"
    site = "ops"

    def widths(self, spec: ModelSpec) -> dict[str, int]:
        if self.layer == -1:
            return {"patch_embed": spec.dim}
        return ssf_sites(spec)

    def _prefix(self, op: str) -> str:
        if self.layer == -1:
            return f"patch_embed.ssf.{op}."
        return f"layers.{self.layer}.ssf.{op}."

    def param_shapes(self, spec: ModelSpec) -> dict:
        out = {}
        for op, w in self.widths(spec).items():
            out[self._prefix(op) + "scale"] = (w,)
            out[self._prefix(op) + "shift"] = (w,)
        return out

    def init_param(self, name, shape, seed):
        return np.ones(shape) if name.endswith(".scale") else np.zeros(shape)

    def apply_op(self, model, op: str, y: Tensor) -> Tensor:
        p = self._prefix(op)
        if p + "scale" not in model.params:
            return y
        with ag.flop_scope(self.kind):
            return ssf_forward(y, model.params[p + "scale"], model.params[p + "shift"])


def attach_method(model, method: str, *, adapter_dim: int | None = None,
                  adapter_act: str = "relu", prompt_len: int = 10,
                  ssf_patch_embed: bool = False):
    """Register the attachments a baseline method needs (in place)."""
    spec = model.spec
    if method == "adapter":
        hidden = adapter_dim or max(1, spec.dim // 16)
        for i in range(spec.depth):
            model.attach(Adapter(layer=i, hidden=hidden, activation=adapter_act))
    elif method == "vpt-shallow":
        model.attach(Prompt(layer=0, length=prompt_len))
    elif method == "vpt-deep":
        for i in range(spec.depth):
            model.attach(Prompt(layer=i, length=prompt_len, replace=i > 0))
    elif method == "ssf":
        if ssf_patch_embed:
            model.attach(SSF(layer=-1))
        for i in range(spec.depth):
            model.attach(SSF(layer=i))
    elif method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return model


def freezing_policy(method: str, model=None, **plan_kwargs) -> TrainPlan:
    """TrainPlan whose trainable globs define ``method``; the head is always trainable."""
    if method not in _POLICIES:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    plan = TrainPlan(trainable=_POLICIES[method] + ["head.*"], **plan_kwargs)
    if model is not None:
        plan.resolve(model)
    return plan
