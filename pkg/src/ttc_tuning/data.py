"""Synthetic desk-scale tasks, raw ingestion and on-disk datasets.

``texture``: a 4x4 grid of textured cells. Each class owns a (texture, colour)
pair; about half of the cells carry it, the rest are random distractors.
``count``: the label is the number of blobs in the image minus one.

``shift`` moves every colour (foreground and background) from the source
palette towards a channel-rotated, contrast-compressed target palette.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from .autograd import rng

TASKS = ("texture", "count")

_TEXTURES = np.array(
    [
        [[1, 1, 1, 1], [0, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 0]],  # horizontal
        [[1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0]],  # vertical
        [[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]],  # checker
        [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]],  # diagonal
        [[0, 0, 0, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]],  # centre
        [[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]],  # ring
    ],
    dtype=np.float64,
)

_PALETTE = np.array(
    [
        [0.9, 0.1, 0.1],
        [0.1, 0.8, 0.2],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.1],
        [0.8, 0.2, 0.8],
        [0.1, 0.8, 0.8],
    ]
)
_BACKGROUND = np.array([0.15, 0.15, 0.15])


@dataclass
class DatasetSpec:
    task: str = "texture"
    classes: int = 5
    image_size: int = 16
    train: int = 1000
    val: int = 200
    test: int = 500
    shift: float = 1.0
    noise: float = 0.2
    variant: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.image_size % 4:
            raise ValueError("image_size must be a multiple of 4")
        if not 0 <= self.val < self.train:
            raise ValueError("need 0 <= val < train")
        if self.test < 0 or self.noise < 0:
            raise ValueError("test and noise must be non-negative")
        max_classes = {"texture": len(_TEXTURES) * len(_PALETTE), "count": (self.image_size // 4) ** 2}
        if not 2 <= self.classes <= max_classes[self.task]:
            raise ValueError(f"{self.task} supports 2..{max_classes[self.task]} classes")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be B x C x H x W with one label each")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])

    def batches(self, batch_size: int, order=None):
        idx = np.arange(len(self)) if order is None else order
        for start in range(0, len(idx), batch_size):
            sel = idx[start:start + batch_size]
            yield self.images[sel], self.labels[sel]


@dataclass
class TaskData:
    """Training pool (fit + val tail) and a disjoint test split."""

    train: Dataset
    test: Dataset
    val_size: int = 0

    @property
    def fit(self) -> Dataset:
        return self.train.subset(slice(0, len(self.train) - self.val_size))

    @property
    def val(self) -> Dataset:
        return self.train.subset(slice(len(self.train) - self.val_size, len(self.train)))


# ---------------------------------------------------------------- generation


def class_table(spec: DatasetSpec) -> np.ndarray:
    """(texture, colour) pair of each class; ``variant`` picks a different subset."""
    pairs = np.array([(t, c) for t in range(len(_TEXTURES)) for c in range(len(_PALETTE))])
    order = rng(0, "classes", spec.variant).permutation(len(pairs))
    return pairs[order[: spec.classes]]


def shifted(colors: np.ndarray, shift: float) -> np.ndarray:
    target = 0.4 + 0.25 * np.roll(colors, 1, axis=-1)
    return (1.0 - shift) * colors + shift * target


def _texture_images(spec: DatasetSpec, labels: np.ndarray, gen) -> np.ndarray:
    n, g = len(labels), spec.image_size // 4
    table = class_table(spec)
    signal = gen.random((n, g, g)) < 0.5
    tex = gen.integers(0, len(_TEXTURES), (n, g, g))
    col = gen.integers(0, len(_PALETTE), (n, g, g))
    tex = np.where(signal, table[labels, 0][:, None, None], tex)
    col = np.where(signal, table[labels, 1][:, None, None], col)
    masks = _TEXTURES[tex]  # n, g, g, 4, 4
    fg = shifted(_PALETTE, spec.shift)[col]  # n, g, g, 3
    bg = shifted(_BACKGROUND, spec.shift)
    pix = bg + masks[..., None] * (fg[:, :, :, None, None, :] - bg)  # n, g, g, 4, 4, 3
    return pix.transpose(0, 5, 1, 3, 2, 4).reshape(n, 3, spec.image_size, spec.image_size)


def _count_images(spec: DatasetSpec, labels: np.ndarray, gen) -> np.ndarray:
    n, g = len(labels), spec.image_size // 4
    bg = shifted(_BACKGROUND, spec.shift)
    pal = shifted(_PALETTE, spec.shift)
    imgs = np.broadcast_to(bg[:, None, None], (n, 3, spec.image_size, spec.image_size)).copy()
    for b in range(n):
        cells = gen.choice(g * g, size=labels[b] + 1, replace=False)
        color = pal[gen.integers(0, len(pal))]
        for cell in cells:
            r, c = divmod(int(cell), g)
            dy, dx = gen.integers(0, 2, 2)
            imgs[b, :, 4 * r + dy: 4 * r + dy + 3, 4 * c + dx: 4 * c + dx + 3] = color[:, None, None]
    return imgs


def _generate_split(spec: DatasetSpec, n: int, split: str) -> Dataset:
    gen = rng(spec.seed, "data", spec.task, spec.variant, split)
    labels = gen.permutation(np.arange(n) % spec.classes)
    if spec.task == "texture":
        imgs = _texture_images(spec, labels, gen)
    else:
        imgs = _count_images(spec, labels, gen)
    imgs = imgs + spec.noise * gen.standard_normal(imgs.shape)
    return Dataset(imgs, labels)


def generate(spec: DatasetSpec) -> TaskData:
    """Deterministic in ``spec``; train and test come from independent streams."""
    return TaskData(
        train=_generate_split(spec, spec.train, "train"),
        test=_generate_split(spec, spec.test, "test"),
        val_size=spec.val,
    )


# ---------------------------------------------------------------- disk


def _atomic_save_npy(path: str, arr: np.ndarray) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.save(fh, arr)
    os.replace(tmp, path)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_split(ds: Dataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    _atomic_save_npy(os.path.join(directory, "images.npy"), ds.images)
    _atomic_write_text(os.path.join(directory, "labels.txt"), "".join(f"{int(v)}\n" for v in ds.labels))


def load_split(directory: str) -> Dataset:
    images = np.load(os.path.join(directory, "images.npy"), allow_pickle=False)
    with open(os.path.join(directory, "labels.txt"), encoding="utf-8") as fh:
        labels = [int(line) for line in fh if line.strip()]
    return Dataset(images, np.array(labels, dtype=np.int64))


def spec_to_text(spec: DatasetSpec) -> str:
    return "".join(f"{f.name} = {getattr(spec, f.name)}\n" for f in fields(spec))


def spec_from_text(text: str) -> DatasetSpec:
    kinds = {f.name: f.type for f in fields(DatasetSpec)}
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in kinds:
            raise ValueError(f"unknown dataset key {key!r}")
        values[key] = val if kinds[key] == "str" else (float(val) if kinds[key] == "float" else int(val))
    return DatasetSpec(**values)


def save_dataset(data: TaskData, directory: str, spec: DatasetSpec | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    save_split(data.train, os.path.join(directory, "train"))
    save_split(data.test, os.path.join(directory, "test"))
    meta = spec_to_text(spec) if spec is not None else f"val = {data.val_size}\n"
    _atomic_write_text(os.path.join(directory, "dataset.cfg"), meta)


def load_dataset(directory: str, val: int | None = None) -> TaskData:
    """Load ``train/`` and ``test/`` splits; ``val`` overrides the stored tail size."""
    train = load_split(os.path.join(directory, "train"))
    test = load_split(os.path.join(directory, "test"))
    val_size = 0
    meta = os.path.join(directory, "dataset.cfg")
    if os.path.exists(meta):
        with open(meta, encoding="utf-8") as fh:
            for line in fh:
                key, _, value = (s.strip() for s in line.partition("="))
                if key == "val":
                    val_size = int(value)
    if val is not None:
        val_size = val
    return TaskData(train=train, test=test, val_size=val_size)
