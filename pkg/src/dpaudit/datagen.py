"""Deterministic synthetic image datasets.

Three generators mirror the data regimes the experiments need: a small
binary set with a hard 80:20 class imbalance, a larger multi-class set with
power-law class frequencies, and a segmentation set whose target structure
(a tiny bright dot inside a larger organ-like disk) covers only a fraction
of a percent of each image. Everything is a pure function of the spec and
its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .container import read_container, write_container
from .errors import ParameterError
from .numerics import Rng

SEGMENTATION_CLASSES = 3  # 0 background, 1 organ, 2 tumour


@dataclass(frozen=True)
class DatasetSpec:
    kind: str  # binary_imbalanced | multiclass_powerlaw | segmentation
    n_samples: int = 2500
    image_size: int = 16
    channels: int = 1
    ratio: tuple[float, ...] = (0.8, 0.2)
    exponent: float = 1.5
    n_classes: int = 2
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ParameterError("image size must be at least 8")
        if abs(sum(self.ratio) - 1.0) > 1e-9:
            raise ParameterError(f"class ratio must sum to 1, got {self.ratio}")
        if not 0 <= self.test_fraction < 1:
            raise ParameterError("test fraction must be in [0, 1)")

    def to_json(self) -> dict:
        return {"kind": self.kind, "n_samples": self.n_samples,
                "image_size": self.image_size, "channels": self.channels,
                "ratio": list(self.ratio), "exponent": self.exponent,
                "n_classes": self.n_classes, "test_fraction": self.test_fraction,
                "seed": self.seed}

    @staticmethod
    def from_json(d: dict) -> "DatasetSpec":
        d = dict(d)
        d["ratio"] = tuple(d.get("ratio", (0.8, 0.2)))
        return DatasetSpec(**d)


@dataclass
class Dataset:
    """Images plus labels (class ids) or masks, split into train and test."""

    spec: DatasetSpec
    train_images: np.ndarray  # (N, H, W, C)
    train_labels: np.ndarray  # (N,) ints, or (N, H, W) masks for segmentation
    test_images: np.ndarray
    test_labels: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    clamped_channels: tuple[int, ...] = field(default_factory=tuple)

    @property
    def normalized(self) -> bool:
        return self.mean is not None

    @property
    def n_train(self) -> int:
        return len(self.train_images)

    def denormalize(self, images: np.ndarray) -> np.ndarray:
        if not self.normalized:
            return images
        return images * self.std + self.mean

    def all_images(self) -> np.ndarray:
        return np.concatenate([self.train_images, self.test_images])

    def all_labels(self) -> np.ndarray:
        return np.concatenate([self.train_labels, self.test_labels])


def _grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _disk(size, cy, cx, r):
    yy, xx = _grid(size)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2


def _paint(size, mask, intensity):
    img = np.zeros((size, size))
    img[mask] = intensity
    return img


def _shape_image(size: int, shape_id: int, rng: Rng) -> np.ndarray:
    """One of ten distinct parametric shapes, jittered per sample."""
    s = size
    cy = s / 2 + rng.uniform(low=-s / 8, high=s / 8)
    cx = s / 2 + rng.uniform(low=-s / 8, high=s / 8)
    amp = rng.uniform(low=0.7, high=1.0)
    yy, xx = _grid(s)
    k = shape_id % 10
    if k == 0:  # filled disk
        r = rng.uniform(low=0.22 * s, high=0.3 * s)
        m = _disk(s, cy, cx, r)
    elif k == 1:  # disk with a small hole somewhere inside; differs from
        # class 0 in only a handful of pixels, the first feature noise drowns
        r = rng.uniform(low=0.22 * s, high=0.3 * s)
        hole_r = rng.uniform(low=0.09 * s, high=0.13 * s)
        ang = rng.uniform(low=0, high=2 * np.pi)
        off = rng.uniform(low=0, high=max(r - hole_r - 1.0, 0.0))
        m = _disk(s, cy, cx, r) & ~_disk(s, cy + off * np.sin(ang),
                                         cx + off * np.cos(ang), hole_r)
    elif k == 2:  # cross
        w = 0.1 * s
        m = (np.abs(yy - cy) < w) | (np.abs(xx - cx) < w)
    elif k == 3:  # filled square
        r = rng.uniform(low=0.18 * s, high=0.26 * s)
        m = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
    elif k == 4:  # horizontal bars
        m = (yy.astype(int) // max(2, s // 8)) % 2 == 0
    elif k == 5:  # vertical bars
        m = (xx.astype(int) // max(2, s // 8)) % 2 == 0
    elif k == 6:  # main diagonal band
        m = np.abs(yy - xx) < 0.12 * s
    elif k == 7:  # checkerboard
        step = max(2, s // 4)
        m = ((yy.astype(int) // step) + (xx.astype(int) // step)) % 2 == 0
    elif k == 8:  # four-dot grid
        m = np.zeros((s, s), dtype=bool)
        for dy in (-0.22 * s, 0.22 * s):
            for dx in (-0.22 * s, 0.22 * s):
                m |= _disk(s, cy + dy, cx + dx, 0.1 * s)
    else:  # wedge (lower triangle of a square)
        r = 0.3 * s
        m = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r) & (yy - cy > xx - cx)
    return _paint(s, m, amp)


def _class_counts_binary(n: int, ratio: tuple[float, ...]) -> tuple[int, int]:
    n_minor = round(ratio[1] * n)
    n_major = n - n_minor
    if n_minor < 1 or n_major < 1:
        raise ParameterError(f"n={n} too small to honor ratio {ratio}")
    return n_major, n_minor


def _powerlaw_counts(n: int, n_classes: int, exponent: float) -> list[int]:
    weights = np.array([(k + 1.0) ** (-exponent) for k in range(n_classes)])
    shares = weights / weights.sum() * n
    counts = np.floor(shares).astype(int)
    remainder = shares - counts
    for idx in np.argsort(-remainder)[: n - counts.sum()]:
        counts[idx] += 1
    # coverage guard: every class appears at least once
    for k in range(n_classes):
        if counts[k] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[k] = 1
    return counts.tolist()


def _stratified_split(images, labels, strata, test_fraction, rng: Rng):
    test_idx = []
    for cls in np.unique(strata):
        members = np.flatnonzero(strata == cls)
        members = members[rng.permutation(len(members))]
        n_test = int(round(test_fraction * len(members)))
        test_idx.extend(members[:n_test].tolist())
    test_mask = np.zeros(len(images), dtype=bool)
    test_mask[test_idx] = True
    return (images[~test_mask], labels[~test_mask],
            images[test_mask], labels[test_mask])


def _assemble(spec, images, labels, strata, rng) -> Dataset:
    order = rng.permutation(len(images))
    images, labels, strata = images[order], labels[order], strata[order]
    tr_x, tr_y, te_x, te_y = _stratified_split(images, labels, strata,
                                               spec.test_fraction, rng.split("split"))
    return Dataset(spec, tr_x, tr_y, te_x, te_y)


def gen_binary_imbalanced(spec: DatasetSpec) -> Dataset:
    """Binary dataset: bright disks (majority) vs rings (minority)."""
    rng = Rng(spec.seed).split("binary")
    n_major, n_minor = _class_counts_binary(spec.n_samples, spec.ratio)
    images, labels = [], []
    for cls, count in ((0, n_major), (1, n_minor)):
        for _ in range(count):
            img = _shape_image(spec.image_size, cls, rng)  # 0 = disk, 1 = ring
            images.append(img)
            labels.append(cls)
    images = np.stack(images)[..., None].repeat(spec.channels, axis=-1)
    labels = np.array(labels, dtype=np.int64)
    return _assemble(spec, images, labels, labels, rng)


def gen_multiclass_powerlaw(spec: DatasetSpec) -> Dataset:
    """Multi-class dataset with class frequencies proportional to rank^-s."""
    if spec.n_classes < 3:
        raise ParameterError("power-law generator needs at least 3 classes")
    rng = Rng(spec.seed).split("powerlaw")
    counts = _powerlaw_counts(spec.n_samples, spec.n_classes, spec.exponent)
    images, labels = [], []
    for cls, count in enumerate(counts):
        for _ in range(count):
            images.append(_shape_image(spec.image_size, cls, rng))
            labels.append(cls)
    images = np.stack(images)[..., None].repeat(spec.channels, axis=-1)
    labels = np.array(labels, dtype=np.int64)
    return _assemble(spec, images, labels, labels, rng)


def gen_segmentation(spec: DatasetSpec) -> Dataset:
    """Organ disk with one tiny bright tumour dot; mask classes {0, 1, 2}."""
    if spec.image_size < 32:
        raise ParameterError("segmentation images must be at least 32x32")
    rng = Rng(spec.seed).split("segmentation")
    s = spec.image_size
    images, masks = [], []
    for _ in range(spec.n_samples):
        organ_r = rng.uniform(low=0.25 * s, high=0.40 * s)
        cy = s / 2 + rng.uniform(low=-0.05 * s, high=0.05 * s)
        cx = s / 2 + rng.uniform(low=-0.05 * s, high=0.05 * s)
        tumour_r = rng.uniform(low=0.02 * s, high=0.05 * s)
        # tumour fully inside the organ disk
        max_off = max(organ_r - tumour_r - 1.0, 0.0)
        ang = rng.uniform(low=0, high=2 * np.pi)
        off = rng.uniform(low=0, high=max_off)
        ty, tx = cy + off * np.sin(ang), cx + off * np.cos(ang)
        organ = _disk(s, cy, cx, organ_r)
        tumour = _disk(s, ty, tx, tumour_r) & organ
        img = np.zeros((s, s))
        img[organ] = 0.5 + rng.uniform(low=-0.05, high=0.05)
        img[tumour] = 0.95
        mask = np.zeros((s, s), dtype=np.int64)
        mask[organ] = 1
        mask[tumour] = 2
        images.append(img)
        masks.append(mask)
    images = np.stack(images)[..., None]
    masks = np.stack(masks)
    has_tumour = (masks == 2).any(axis=(1, 2)).astype(np.int64)
    return _assemble(spec, images, masks, has_tumour, rng)


_GENERATORS = {
    "binary_imbalanced": gen_binary_imbalanced,
    "multiclass_powerlaw": gen_multiclass_powerlaw,
    "segmentation": gen_segmentation,
}


def generate(spec: DatasetSpec) -> Dataset:
    if spec.kind not in _GENERATORS:
        raise ParameterError(
            f"unknown dataset kind {spec.kind!r}; valid: {sorted(_GENERATORS)}")
    return _GENERATORS[spec.kind](spec)


def normalize(dataset: Dataset) -> Dataset:
    """Per-channel standardization using training-split statistics only.

    Channels with zero spread are clamped to unit std and flagged in
    ``clamped_channels`` so reconstruction de-normalization stays exact.
    """
    if dataset.normalized:
        return dataset
    if dataset.n_train == 0:
        raise ParameterError("cannot normalize an empty training split")
    axes = tuple(range(dataset.train_images.ndim - 1))
    mean = dataset.train_images.mean(axis=axes)
    std = dataset.train_images.std(axis=axes)
    clamped = tuple(int(c) for c in np.flatnonzero(std == 0))
    std = np.where(std == 0, 1.0, std)
    return replace(
        dataset,
        train_images=(dataset.train_images - mean) / std,
        test_images=(dataset.test_images - mean) / std,
        mean=mean, std=std, clamped_channels=clamped)


def save_dataset(path, dataset: Dataset) -> None:
    tensors = {"train_images": dataset.train_images,
               "train_labels": dataset.train_labels,
               "test_images": dataset.test_images,
               "test_labels": dataset.test_labels}
    if dataset.normalized:
        tensors["mean"] = dataset.mean
        tensors["std"] = dataset.std
    meta = {"spec": dataset.spec.to_json(), "normalized": dataset.normalized,
            "clamped_channels": list(dataset.clamped_channels)}
    write_container(path, tensors, meta)


def load_dataset(path) -> Dataset:
    tensors, meta = read_container(path)
    return Dataset(
        spec=DatasetSpec.from_json(meta["spec"]),
        train_images=tensors["train_images"],
        train_labels=tensors["train_labels"],
        test_images=tensors["test_images"],
        test_labels=tensors["test_labels"],
        mean=tensors.get("mean"),
        std=tensors.get("std"),
        clamped_channels=tuple(meta.get("clamped_channels", ())))
