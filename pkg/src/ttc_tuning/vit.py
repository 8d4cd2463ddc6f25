"""Plain pre-norm ViT backbone with addressable parameters and PETL hooks."""

from __future__ import annotations

import copy
import fnmatch
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import autograd as ag
from .autograd import Tensor

SITES = ("input_tokens", "after_mhsa", "after_mlp", "ops", "weights")

# producing weight of each TTC insertion point
SITE_WEIGHT = {"after_mhsa": "attn.proj.weight", "after_mlp": "mlp.fc2.weight"}


@dataclass
class ModelSpec:
    image_size: int = 16
    patch_size: int = 4
    depth: int = 2
    dim: int = 32
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 5
    eps: float = 1e-6
    channels: int = 3

    def __post_init__(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} must be a positive multiple of "
                f"patch_size {self.patch_size}"
            )
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.depth < 0 or self.num_classes < 1 or self.mlp_ratio < 1:
            raise ValueError("depth >= 0, num_classes >= 1 and mlp_ratio >= 1 required")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        """Tokens per image entering layer 0 (patches plus CLS)."""
        return self.num_patches + 1

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


def _expand_braces(pattern: str) -> list[str]:
    m = re.search(r"\{([^{}]*)\}", pattern)
    if not m:
        return [pattern]
    out = []
    for alt in m.group(1).split(","):
        out.extend(_expand_braces(pattern[: m.start()] + alt + pattern[m.end():]))
    return out


def glob_match(name: str, pattern: str) -> bool:
    """fnmatch with one-level ``{a,b}`` alternation; ``*`` crosses dots."""
    return any(fnmatch.fnmatchcase(name, p) for p in _expand_braces(pattern))


def backbone_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    d, h = spec.dim, spec.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, spec.patch_dim),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (spec.tokens, d),
    }
    for i in range(spec.depth):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "norm1.gamma": (d,),
                p + "norm1.beta": (d,),
                p + "attn.qkv.weight": (3 * d, d),
                p + "attn.qkv.bias": (3 * d,),
                p + "attn.proj.weight": (d, d),
                p + "attn.proj.bias": (d,),
                p + "norm2.gamma": (d,),
                p + "norm2.beta": (d,),
                p + "mlp.fc1.weight": (h, d),
                p + "mlp.fc1.bias": (h,),
                p + "mlp.fc2.weight": (d, h),
                p + "mlp.fc2.bias": (d,),
            }
        )
    shapes["encoder.norm.gamma"] = (d,)
    shapes["encoder.norm.beta"] = (d,)
    shapes["head.weight"] = (d, spec.num_classes)
    shapes["head.bias"] = (spec.num_classes,)
    return shapes


def _init_backbone(name: str, shape, seed: int) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("head."):
        return np.zeros(shape)
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta", "bias"):
        return np.zeros(shape)
    return ag.trunc_normal(ag.rng(seed, "init", name), shape, std=0.02)


# ---------------------------------------------------------------- attachments

ATTACHMENT_KINDS: dict[str, type] = {}


def register_attachment(cls):
    ATTACHMENT_KINDS[cls.kind] = cls
    return cls


class Attachment:
    """A PETL module living inside a model at one (layer, site).

    Subclasses declare ``kind`` and ``site``, list their parameter shapes and
    implement the hook matching their site.
    """

    kind = ""
    site = ""

    def param_shapes(self, spec: ModelSpec) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def init_param(self, name: str, shape, seed: int) -> np.ndarray:
        return np.zeros(shape)

    def describe(self) -> dict:
        return asdict(self)

    @classmethod
    def from_description(cls, desc: dict) -> "Attachment":
        return cls(**desc)


def attachment_from_description(kind: str, desc: dict) -> Attachment:
    try:
        cls = ATTACHMENT_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown attachment kind {kind!r}") from None
    return cls.from_description(desc)


# ---------------------------------------------------------------- model


@dataclass
class ForwardOutput:
    logits: Tensor
    cls_tokens: Tensor
    trace: dict = field(default_factory=dict)


class TransformerModel:
    """A ViT with an ordered name -> Tensor parameter map."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {
            name: Tensor(_init_backbone(name, shape, self.seed))
            for name, shape in backbone_shapes(spec).items()
        }
        self.attachments: list[Attachment] = []

    # -- parameters

    def named_parameters(self, pattern: str = "*") -> list[tuple[str, Tensor]]:
        return named_parameters(self, pattern)

    def attach(self, att: Attachment) -> Attachment:
        if att.site not in SITES:
            raise ValueError(f"unknown attachment site {att.site!r}")
        if not (-1 <= att.layer < self.spec.depth):
            raise ValueError(f"layer {att.layer} outside model of depth {self.spec.depth}")
        shapes = att.param_shapes(self.spec)
        clash = [n for n in shapes if n in self.params]
        if clash:
            raise ValueError(f"parameter names already present: {clash}")
        for name, shape in shapes.items():
            self.params[name] = Tensor(att.init_param(name, shape, self.seed))
        self.attachments.append(att)
        return att

    def attachments_at(self, layer: int, site: str) -> list[Attachment]:
        return [a for a in self.attachments if a.layer == layer and a.site == site]

    def clone(self) -> "TransformerModel":
        new = TransformerModel.__new__(TransformerModel)
        new.spec = self.spec
        new.seed = self.seed
        new.params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        new.attachments = copy.deepcopy(self.attachments)
        return new

    def set_trainable(self, names: Iterable[str]) -> None:
        keep = set(names)
        unknown = keep - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        for n, t in self.params.items():
            t.requires_grad = n in keep
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward

    def _weight(self, layer: int, name: str) -> Tensor:
        w = self.params[f"layers.{layer}.{name}"]
        for att in self.attachments_at(layer, "weights"):
            if att.target == name:
                w = att.apply_weight(self, w)
        return w

    def _ops(self, layer: int, op: str, y: Tensor) -> Tensor:
        for att in self.attachments_at(layer, "ops"):
            y = att.apply_op(self, op, y)
        return y

    def _site(self, layer: int, site: str, y: Tensor, trace: dict | None) -> Tensor:
        if trace is not None:
            trace[(layer, site)] = y.data.copy()
        for att in self.attachments_at(layer, site):
            with ag.flop_scope(att.kind):
                y = att.apply(self, y)
        return y

    def _attention(self, layer: int, x: Tensor) -> Tensor:
        spec = self.spec
        b, t, d = x.shape
        h, dh = spec.heads, spec.dim // spec.heads
        p = f"layers.{layer}."
        qkv = ag.linear(x, self._weight(layer, "attn.qkv.weight"), self.params[p + "attn.qkv.bias"])
        qkv = self._ops(layer, "qkv", qkv)
        qkv = ag.transpose(ag.reshape(qkv, (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        with ag.flop_scope("attn"):
            scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            ctx = ag.matmul(ag.softmax(scores, axis=-1), v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        out = ag.linear(ctx, self._weight(layer, "attn.proj.weight"), self.params[p + "attn.proj.bias"])
        return self._ops(layer, "proj", out)

    def _mlp(self, layer: int, x: Tensor) -> Tensor:
        p = f"layers.{layer}."
        y = ag.linear(x, self._weight(layer, "mlp.fc1.weight"), self.params[p + "mlp.fc1.bias"])
        y = ag.gelu(self._ops(layer, "fc1", y))
        y = ag.linear(y, self._weight(layer, "mlp.fc2.weight"), self.params[p + "mlp.fc2.bias"])
        return self._ops(layer, "fc2", y)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        spec = self.spec
        imgs = np.asarray(images, dtype=np.float64)
        expect = (spec.channels, spec.image_size, spec.image_size)
        if imgs.ndim != 4 or imgs.shape[1:] != expect:
            raise ag.ShapeError(f"images must be B x {list(expect)}, got {list(imgs.shape)}")
        b = imgs.shape[0]
        g, ps = spec.image_size // spec.patch_size, spec.patch_size
        x = imgs.reshape(b, spec.channels, g, ps, g, ps).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, spec.patch_dim)

    def forward(self, images, trace: bool = False) -> ForwardOutput:
        spec, P = self.spec, self.params
        patches = Tensor(self.patchify(images))
        b = patches.shape[0]
        record: dict | None = {} if trace else None
        x = ag.linear(patches, P["patch_embed.weight"], P["patch_embed.bias"])
        x = self._ops(-1, "patch_embed", x)
        cls = ag.broadcast_leading(ag.reshape(P["cls_token"], (1, spec.dim)), (b,))
        x = ag.add(ag.concat([cls, x], axis=1), P["pos_embed"])
        for i in range(spec.depth):
            for att in self.attachments_at(i, "input_tokens"):
                x = att.apply(self, x)
            if record is not None:
                record[(i, "input_tokens")] = x.shape[1]
            p = f"layers.{i}."
            a = ag.layernorm(x, P[p + "norm1.gamma"], P[p + "norm1.beta"], spec.eps)
            a = self._ops(i, "norm1", a)
            a = self._site(i, "after_mhsa", self._attention(i, a), record)
            x = ag.add(x, a)
            m = ag.layernorm(x, P[p + "norm2.gamma"], P[p + "norm2.beta"], spec.eps)
            m = self._ops(i, "norm2", m)
            m = self._site(i, "after_mlp", self._mlp(i, m), record)
            x = ag.add(x, m)
        x = ag.layernorm(x, P["encoder.norm.gamma"], P["encoder.norm.beta"], spec.eps)
        cls_out = x[:, 0]
        logits = ag.add(ag.matmul(cls_out, P["head.weight"]), P["head.bias"])
        return ForwardOutput(logits=logits, cls_tokens=cls_out, trace=record or {})

    def loss(self, images, labels) -> Tensor:
        return ag.softmax_crossentropy(self.forward(images).logits, labels)

    __call__ = forward


def named_parameters(model, pattern: str = "*") -> list[tuple[str, Tensor]]:
    """Parameters whose dotted name matches ``pattern``, in model order."""
    return [(n, t) for n, t in model.params.items() if glob_match(n, pattern)]


def resolve_globs(model, patterns: Iterable[str]) -> list[str]:
    """Names matched by any of ``patterns``, in model order, without duplicates."""
    pats = list(patterns)
    return [n for n in model.params if any(glob_match(n, p) for p in pats)]


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    return ag.layernorm(x, gamma, beta, eps)


def count_params(model, names: Iterable[str] | None = None) -> int:
    if names is None:
        names = model.params
    return int(sum(model.params[n].size for n in names))
