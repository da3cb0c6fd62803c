"""Few-shot datasets: model, FSDS file format, splits, synthetic generation.

FSDS layout (little-endian)::

    b"FSDS" | u32 version=1 | u32 num_classes | u32 sample_dim
    per class: u32 class_id | u32 super_category (0xFFFFFFFF if none)
               | u32 num_samples | num_samples x sample_dim f32
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .rng import RandomStream

MAGIC = b"FSDS"
VERSION = 1
NO_SUPER = 0xFFFFFFFF


class ConfigError(ValueError):
    pass


@dataclass
class ClassRecord:
    class_id: int
    samples: np.ndarray  # (n, dim) float32
    super_category: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or len(self.samples) == 0:
            raise ValueError(f"class {self.class_id} needs a non-empty (n, dim) sample array")


@dataclass
class FewShotDataset:
    classes: list[ClassRecord]
    sample_dim: int
    name: str = "dataset"

    def __post_init__(self):
        for i, c in enumerate(self.classes):
            if c.class_id != i:
                raise ValueError(f"class ids must be dense 0..n-1; position {i} has id {c.class_id}")
            if c.samples.shape[1] != self.sample_dim:
                raise ValueError(f"class {i} has sample dim {c.samples.shape[1]}, expected {self.sample_dim}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def super_categories(self) -> list[int]:
        tags = {c.super_category for c in self.classes}
        if None in tags:
            raise ConfigError(f"dataset {self.name!r} has classes without a super-category tag")
        return sorted(tags)

    def subset(self, keep: dict[int, int] | None = None, name: str | None = None) -> FewShotDataset:
        """Copy keeping only the first ``keep[class_id]`` samples of listed classes."""
        classes = []
        for c in self.classes:
            n = keep.get(c.class_id, len(c.samples)) if keep else len(c.samples)
            classes.append(ClassRecord(c.class_id, c.samples[:n].copy(), c.super_category))
        return FewShotDataset(classes, self.sample_dim, name or self.name)


# -- file format -------------------------------------------------------------------


def encode_dataset(ds: FewShotDataset) -> bytes:
    out = [MAGIC, binio.u32(VERSION), binio.u32(ds.num_classes), binio.u32(ds.sample_dim)]
    for c in ds.classes:
        sup = NO_SUPER if c.super_category is None else c.super_category
        out += [binio.u32(c.class_id), binio.u32(sup), binio.u32(len(c.samples)),
                binio.f32_array(c.samples)]
    return b"".join(out)


def decode_dataset(buf: bytes, name: str = "dataset") -> FewShotDataset:
    r = binio.Reader(buf)
    magic = r.raw(4, "magic")
    if magic != MAGIC:
        raise binio.FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise binio.FormatError(f"unsupported dataset version {version}", 4)
    num_classes = r.u32("num_classes")
    dim = r.u32("sample_dim")
    classes = []
    for i in range(num_classes):
        start = r.pos
        cid = r.u32("class_id")
        if cid != i:
            raise binio.FormatError(f"class ids must be dense; expected {i}, found {cid}", start)
        sup = r.u32("super_category")
        n = r.u32("num_samples")
        if n == 0:
            raise binio.FormatError(f"class {cid} has no samples", r.pos - 4)
        samples = r.f32_array(n * dim, f"samples of class {cid}").reshape(n, dim)
        classes.append(ClassRecord(cid, samples, None if sup == NO_SUPER else sup))
    if not r.at_end():
        raise binio.FormatError("trailing bytes after last class", r.pos)
    return FewShotDataset(classes, dim, name)


def save_dataset(ds: FewShotDataset, path, manifest: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_dataset(ds))
    if manifest is not None:
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> FewShotDataset:
    path = Path(path)
    return decode_dataset(path.read_bytes(), name=path.stem)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


# -- synthetic data ----------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Hierarchical Gaussian classes grouped into super-categories.

    super centers ~ N(0, super_scale^2 I); class centers ~ N(super center,
    class_scale^2 I); samples ~ N(class center, noise_scale^2 I).
    """

    num_super_categories: int = 12
    classes_per_super: int = 5
    samples_per_class: int = 200
    sample_dim: int = 32
    super_scale: float = 3.0
    class_scale: float = 1.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        counts = (self.num_super_categories, self.classes_per_super,
                  self.samples_per_class, self.sample_dim)
        if min(counts) < 1:
            raise ConfigError(f"counts must be >= 1: {self}")
        if min(self.super_scale, self.class_scale, self.noise_scale) < 0:
            raise ConfigError(f"scales must be non-negative: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def generate_synthetic(spec: SyntheticSpec, name: str = "synthetic") -> FewShotDataset:
    root = RandomStream.from_seed(spec.seed).child("data")
    dim = spec.sample_dim
    supers = root.child("super").normal(spec.num_super_categories * dim).reshape(-1, dim)
    supers *= spec.super_scale
    classes = []
    for s in range(spec.num_super_categories):
        for j in range(spec.classes_per_super):
            cid = s * spec.classes_per_super + j
            center = supers[s] + spec.class_scale * root.child("class", cid).normal(dim)
            noise = root.child("noise", cid).normal(spec.samples_per_class * dim)
            samples = center + spec.noise_scale * noise.reshape(spec.samples_per_class, dim)
            classes.append(ClassRecord(cid, samples.astype(np.float32), s))
    return FewShotDataset(classes, dim, name)


# -- splits ------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    base: tuple[int, ...]
    val: tuple[int, ...]
    novel: tuple[int, ...]
    holdout_fraction: float = 0.1
    mode: str = "custom"
    seed: int = 0

    def __post_init__(self):
        for attr in ("base", "val", "novel"):
            object.__setattr__(self, attr, tuple(int(c) for c in getattr(self, attr)))
        sets = [set(self.base), set(self.val), set(self.novel)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigError("base/val/novel class sets overlap")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout fraction must be in (0, 1), got {self.holdout_fraction}")

    def validate_against(self, ds: FewShotDataset) -> None:
        for cid in (*self.base, *self.val, *self.novel):
            if not 0 <= cid < ds.num_classes:
                raise ConfigError(f"split references class {cid}, dataset has {ds.num_classes}")

    def holdout_count(self, n_samples: int) -> int:
        """Number of trailing samples of a base class reserved as unseen images."""
        return int(min(max(round(self.holdout_fraction * n_samples), 1), n_samples - 1))

    def to_dict(self) -> dict:
        return {"base": list(self.base), "val": list(self.val), "novel": list(self.novel),
                "holdout_fraction": self.holdout_fraction, "mode": self.mode, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> SplitSpec:
        return cls(tuple(d["base"]), tuple(d["val"]), tuple(d["novel"]),
                   d.get("holdout_fraction", 0.1), d.get("mode", "custom"), d.get("seed", 0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> SplitSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))


def allocate(total: int, weights) -> list[int]:
    """Split ``total`` items into integer parts proportional to ``weights``.

    Largest-remainder rounding; ties go to the earlier part. Every part gets at
    least one item.
    """
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != 3 or np.any(w <= 0):
        raise ConfigError(f"need three positive split fractions, got {list(weights)}")
    if total < 3:
        raise ConfigError(f"need at least 3 units to split three ways, got {total}")
    exact = w / w.sum() * total
    parts = np.floor(exact).astype(int)
    order = sorted(range(3), key=lambda i: (-(exact[i] - parts[i]), i))
    for i in order[: total - parts.sum()]:
        parts[i] += 1
    for i in range(3):
        while parts[i] < 1:
            donor = int(np.argmax(parts))
            parts[donor] -= 1
            parts[i] += 1
    return [int(p) for p in parts]


def _partition(ids: list[int], weights, stream: RandomStream) -> tuple[list[int], list[int], list[int]]:
    order = [ids[i] for i in stream.permutation(len(ids))]
    nb, nv, _ = allocate(len(ids), weights)
    return order[:nb], order[nb : nb + nv], order[nb + nv :]


def split_by_supercategory(ds: FewShotDataset, fractions=(8, 2, 2), seed: int = 0,
                           holdout_fraction: float = 0.1) -> SplitSpec:
    """Assign whole super-categories to base/val/novel."""
    supers = ds.super_categories()
    if len(supers) < 3:
        raise ConfigError(f"need at least 3 super-categories, dataset has {len(supers)}")
    stream = RandomStream.from_seed(seed).child("split", "super")
    groups = _partition(supers, fractions, stream)
    by_super: dict[int, list[int]] = {}
    for c in ds.classes:
        by_super.setdefault(c.super_category, []).append(c.class_id)
    base, val, novel = (sorted(cid for s in g for cid in by_super[s]) for g in groups)
    return SplitSpec(tuple(base), tuple(val), tuple(novel), holdout_fraction, "super", seed)


def split_shuffled(ds: FewShotDataset, fractions=(40, 10, 10), seed: int = 0,
                   holdout_fraction: float = 0.1) -> SplitSpec:
    """Shuffle all classes, ignoring super-categories, then partition."""
    if ds.num_classes < 3:
        raise ConfigError(f"need at least 3 classes, dataset has {ds.num_classes}")
    stream = RandomStream.from_seed(seed).child("split", "shuffled")
    base, val, novel = _partition(list(range(ds.num_classes)), fractions, stream)
    return SplitSpec(tuple(sorted(base)), tuple(sorted(val)), tuple(sorted(novel)),
                     holdout_fraction, "shuffled", seed)


def matched_fractions(ds: FewShotDataset, super_fractions) -> tuple[int, int, int]:
    """Class counts a super-category split would produce, for a like-sized shuffled split."""
    split = split_by_supercategory(ds, super_fractions)
    return len(split.base), len(split.val), len(split.novel)


# -- sample pools ------------------------------------------------------------------


@dataclass
class SamplePool:
    """Per-class sample indices an episode sampler may draw from."""

    indices: dict[int, np.ndarray] = field(default_factory=dict)
    label: str = "pool"

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.indices)


def train_pool(ds: FewShotDataset, split: SplitSpec) -> SamplePool:
    """Base-class samples usable for training (holdout excluded)."""
    out = {}
    for cid in split.base:
        n = len(ds.classes[cid].samples)
        out[cid] = np.arange(n - split.holdout_count(n))
    return SamplePool(out, "base_train")


def holdout_pool(ds: FewShotDataset, split: SplitSpec) -> SamplePool:
    """Unseen base-class images, used only for base-class generalization."""
    out = {}
    for cid in split.base:
        n = len(ds.classes[cid].samples)
        out[cid] = np.arange(n - split.holdout_count(n), n)
    return SamplePool(out, "base_unseen")


def class_pool(ds: FewShotDataset, class_ids, label: str) -> SamplePool:
    return SamplePool({cid: np.arange(len(ds.classes[cid].samples)) for cid in class_ids}, label)


def split_pool(ds: FewShotDataset, split: SplitSpec, which: str) -> SamplePool:
    if which == "base_unseen":
        return holdout_pool(ds, split)
    if which == "base_train":
        return train_pool(ds, split)
    if which in ("val", "novel"):
        return class_pool(ds, getattr(split, which), which)
    raise ConfigError(f"unknown split {which!r}")
