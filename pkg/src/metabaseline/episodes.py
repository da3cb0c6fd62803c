"""N-way K-shot episode sampling and deterministic task streams."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FewShotDataset, SamplePool
from .rng import RandomStream


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.q_query < 1:
            raise ValueError(f"need n_way >= 2, k_shot >= 1, q_query >= 1: {self}")

    @property
    def per_class(self) -> int:
        return self.k_shot + self.q_query


@dataclass
class EpisodeIndex:
    """Which samples make up an episode, without the data."""

    class_ids: np.ndarray  # (N,) dataset class ids; position = within-task label
    support_idx: np.ndarray  # (N, K) sample indices within each class
    query_idx: np.ndarray  # (N, Q)


@dataclass
class Episode:
    index: EpisodeIndex
    support: np.ndarray  # (N*K, dim), grouped by way
    support_labels: np.ndarray
    query: np.ndarray  # (N*Q, dim)
    query_labels: np.ndarray

    @property
    def class_ids(self) -> np.ndarray:
        return self.index.class_ids

    @property
    def n_way(self) -> int:
        return len(self.index.class_ids)


def check_feasible(pool: SamplePool, spec: EpisodeSpec) -> None:
    classes = pool.class_ids
    if len(classes) < spec.n_way:
        raise SamplingError(f"{pool.label}: {spec.n_way}-way task needs {spec.n_way} classes, "
                            f"pool has {len(classes)}")
    short = [(c, len(pool.indices[c])) for c in classes if len(pool.indices[c]) < spec.per_class]
    if short:
        cid, have = short[0]
        raise SamplingError(f"{pool.label}: class {cid} has {have} samples, task needs "
                            f"{spec.per_class} (K={spec.k_shot} + Q={spec.q_query}); "
                            f"{len(short)} classes short")


def sample_index(pool: SamplePool, spec: EpisodeSpec, stream: RandomStream) -> EpisodeIndex:
    """Draw classes, then K+Q distinct samples per class; first K go to support."""
    classes = pool.class_ids
    picked = [classes[i] for i in stream.choice(len(classes), spec.n_way)]
    support = np.empty((spec.n_way, spec.k_shot), dtype=np.int64)
    query = np.empty((spec.n_way, spec.q_query), dtype=np.int64)
    for way, cid in enumerate(picked):
        avail = pool.indices[cid]
        chosen = avail[stream.choice(len(avail), spec.per_class)]
        support[way] = chosen[: spec.k_shot]
        query[way] = chosen[spec.k_shot :]
    return EpisodeIndex(np.asarray(picked, dtype=np.int64), support, query)


def materialize(ds: FewShotDataset, index: EpisodeIndex) -> Episode:
    n, k = index.support_idx.shape
    q = index.query_idx.shape[1]
    support = np.concatenate([ds.classes[c].samples[index.support_idx[w]]
                              for w, c in enumerate(index.class_ids)])
    query = np.concatenate([ds.classes[c].samples[index.query_idx[w]]
                            for w, c in enumerate(index.class_ids)])
    return Episode(index, support, np.repeat(np.arange(n), k), query, np.repeat(np.arange(n), q))


def sample_episode(ds: FewShotDataset, pool: SamplePool, spec: EpisodeSpec,
                   stream: RandomStream) -> Episode:
    check_feasible(pool, spec)
    return materialize(ds, sample_index(pool, spec, stream))


def episode_stream(seed: int, i: int) -> RandomStream:
    """The stream episode ``i`` of a consistent task stream draws from."""
    return RandomStream.from_seed(seed).child("episode", i)


def consistent_indices(pool: SamplePool, spec: EpisodeSpec, seed: int, count: int,
                       start: int = 0) -> list[EpisodeIndex]:
    check_feasible(pool, spec)
    return [sample_index(pool, spec, episode_stream(seed, i)) for i in range(start, start + count)]


def consistent_task_stream(ds: FewShotDataset, pool: SamplePool, spec: EpisodeSpec, seed: int,
                           count: int = 800) -> list[Episode]:
    """Episode ``i`` depends only on (seed, i, dataset, pool, spec)."""
    return [materialize(ds, idx) for idx in consistent_indices(pool, spec, seed, count)]


def dump_audit(indices, path) -> None:
    """JSONL, one line per episode: class ids and per-way sample indices."""
    with Path(path).open("w") as fh:
        for i, idx in enumerate(indices):
            idx = idx.index if isinstance(idx, Episode) else idx
            fh.write(json.dumps({
                "episode": i,
                "class_ids": idx.class_ids.tolist(),
                "support": idx.support_idx.tolist(),
                "query": idx.query_idx.tolist(),
            }) + "\n")
