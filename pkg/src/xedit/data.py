"""Procedural oriented-bar datasets, the XEDS file format, splits, and edit/anchor harvesting."""

from __future__ import annotations

from dataclasses import asdict, dataclass
import math
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, MissingArtifactError
from .model import TinyViT, predict

SPLITS = ("train", "val", "test")
XEDS_MAGIC = b"XEDS"
XEDS_VERSION = 1

# rendering constants (intensity units)
_BACKGROUND = 40.0
_FOREGROUND = 200.0
_HALF_WIDTH = 1.6


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    image_size: int = 32
    pixel_noise_sigma: float = 35.0
    # angle jitter as a fraction of the inter-class angle; at 0.5 neighbouring classes touch,
    # so the default leaves a small angular gap and label noise comes from pixels only
    shape_jitter: float = 0.45
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= 16:
            raise ConfigError(f"n_classes must be in [2, 16], got {self.n_classes}")
        if self.pixel_noise_sigma < 0 or self.shape_jitter < 0:
            raise ConfigError("noise sigma and jitter must be non-negative")
        if self.image_size > 255:
            raise ConfigError("image_size must fit in the XEDS header")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray  # (n, S, S) uint8
    labels: np.ndarray  # (n,) uint8
    n_classes: int
    split: str = "train"
    ids: np.ndarray | None = None  # stable sample ids; provenance across splits

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if len(self.images) != len(self.labels):
            raise FormatError("images and labels differ in length")
        if len(self.labels) and int(self.labels.max()) >= self.n_classes:
            raise FormatError("label out of range")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, split or self.split, self.ids[idx])


@dataclass
class SampleSet:
    """Edit or anchor samples with the split they were drawn from."""

    images: np.ndarray
    labels: np.ndarray
    provenance: str
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.images[idx], self.labels[idx], self.provenance, self.ids[idx])


EditSet = SampleSet
AnchorSet = SampleSet


def _render(angle: float, offset: tuple[float, float], size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    px, py = xx - c - offset[0], yy - c - offset[1]
    # distance to the line through the (shifted) centre with the given orientation
    dist = np.abs(-math.sin(angle) * px + math.cos(angle) * py)
    weight = np.clip(_HALF_WIDTH + 0.5 - dist, 0.0, 1.0)
    return _BACKGROUND + (_FOREGROUND - _BACKGROUND) * weight


def gen_dataset(synth: SyntheticSpec, n_per_class: int) -> Dataset:
    """Class ``c`` is a bar at ``c * 180 / n_classes`` degrees plus jitter and pixel noise."""
    if n_per_class <= 0:
        raise ConfigError("n_per_class must be positive")
    rng = np.random.default_rng(synth.seed)
    step = math.pi / synth.n_classes
    n = synth.n_classes * n_per_class
    labels = np.repeat(np.arange(synth.n_classes), n_per_class)
    images = np.empty((n, synth.image_size, synth.image_size), dtype=np.uint8)
    max_shift = synth.image_size / 8.0
    for i, c in enumerate(labels):
        u = rng.uniform(-1.0, 1.0)
        shift = rng.uniform(-1.0, 1.0, size=2)
        angle = (c + synth.shape_jitter * u) * step
        off = tuple(min(synth.shape_jitter, 1.0) * max_shift * shift)
        img = _render(angle, off, synth.image_size)
        if synth.pixel_noise_sigma > 0:
            img = img + rng.normal(0.0, synth.pixel_noise_sigma, size=img.shape)
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, synth.n_classes, "train")


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified, disjoint, exhaustive split into (train, val, test)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fr[0] * len(idx)))
        n_val = int(round(fr[1] * len(idx)))
        n_train = min(n_train, len(idx))
        n_val = min(n_val, len(idx) - n_train)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train : n_train + n_val])
        parts[2].append(idx[n_train + n_val :])
    out = []
    for name, chunks in zip(SPLITS, parts):
        idx = np.sort(np.concatenate(chunks))
        if len(idx) == 0:
            raise ConfigError(f"split {name!r} would be empty")
        out.append(dataset.subset(idx, split=name))
    return tuple(out)


def save_dataset(path, ds: Dataset) -> None:
    n, size = len(ds), ds.image_size
    head = XEDS_MAGIC + struct.pack("<HIHH", XEDS_VERSION, n, size, ds.n_classes)
    recs = np.concatenate([ds.images.reshape(n, size * size), ds.labels.reshape(n, 1)], axis=1)
    Path(path).write_bytes(head + recs.astype(np.uint8).tobytes())


def load_dataset(path, split_tag: str | None = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"dataset not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != XEDS_MAGIC or len(buf) < 14:
        raise FormatError(f"{path}: not an XEDS file")
    version, n, size, n_classes = struct.unpack("<HIHH", buf[4:14])
    if version != XEDS_VERSION:
        raise FormatError(f"{path}: unsupported XEDS version {version}")
    rec = size * size + 1
    body = np.frombuffer(buf[14:], dtype=np.uint8)
    if body.size != n * rec:
        raise FormatError(f"{path}: expected {n} records of {rec} bytes, found {body.size} bytes")
    body = body.reshape(n, rec)
    tag = split_tag or next((s for s in SPLITS if s in path.stem), "train")
    return Dataset(body[:, :-1].reshape(n, size, size).copy(), body[:, -1].copy(), n_classes, tag)


def _predict_all(model: TinyViT, images, batch: int = 256) -> np.ndarray:
    out = [predict(model, images[i : i + batch])[0] for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def harvest_edit_set(model: TinyViT, val: Dataset, max_m: int) -> SampleSet:
    """First ``max_m`` misclassified samples, in dataset order."""
    pred = _predict_all(model, val.images)
    idx = np.flatnonzero(pred != val.labels)[: max(max_m, 0)]
    return SampleSet(val.images[idx], val.labels[idx], val.split, val.ids[idx])


def harvest_anchor_set(model: TinyViT, train: Dataset, k: int, seed: int = 0) -> SampleSet:
    """``k`` correctly classified samples, label-stratified, seeded."""
    if k < 0:
        raise ConfigError("anchor count must be non-negative")
    pred = _predict_all(model, train.images)
    correct = np.flatnonzero(pred == train.labels)
    if len(correct) < k:
        raise ConfigError(f"need {k} correctly classified anchors but only {len(correct)} exist (short by {k - len(correct)})")
    rng = np.random.default_rng(seed)
    pools = []
    for c in range(train.n_classes):
        pool = correct[train.labels[correct] == c]
        pools.append(list(pool[rng.permutation(len(pool))]))
    # round-robin over classes keeps the draw stratified; exhausted classes drop out
    chosen: list[int] = []
    while len(chosen) < k:
        for pool in pools:
            if pool and len(chosen) < k:
                chosen.append(pool.pop(0))
    idx = np.sort(np.asarray(chosen, dtype=np.int64))
    return SampleSet(train.images[idx], train.labels[idx], train.split, train.ids[idx])
