"""Episodic evaluation with 95% confidence intervals, and generalization curves."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as E
from .data import ConfigError, FewShotDataset, SamplePool, SplitSpec, split_pool
from .episodes import EpisodeIndex, EpisodeSpec, SamplingError, check_feasible, consistent_indices
from .heads import score_array

log = logging.getLogger(__name__)

DEFAULT_TASKS = 800


@dataclass
class EvalResult:
    mean_accuracy: float  # percent
    ci95_halfwidth: float  # percent
    num_tasks: int
    episode_spec: EpisodeSpec
    metric: str = "cosine"
    split: str = "novel"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["episode_spec"] = asdict(self.episode_spec)
        return d

    def __str__(self) -> str:
        s = self.episode_spec
        return (f"{self.split:<12} {s.n_way}-way {s.k_shot}-shot {self.metric:<12} "
                f"{self.mean_accuracy:6.2f} +- {self.ci95_halfwidth:5.2f}  ({self.num_tasks} tasks)")


def summarize(per_task: np.ndarray) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width, in percent."""
    acc = 100.0 * np.asarray(per_task, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("no tasks to summarize")
    return float(acc.mean()), float(1.96 * acc.std() / math.sqrt(acc.size))


class EmbeddingTable:
    """Embeddings of every sample of the given classes, addressable by (class, index)."""

    def __init__(self, params: E.EncoderParams, ds: FewShotDataset, class_ids):
        class_ids = sorted(class_ids)
        self.offset = np.zeros(ds.num_classes, dtype=np.int64)
        pos = 0
        for cid in class_ids:
            self.offset[cid] = pos
            pos += len(ds.classes[cid].samples)
        dtype = params.layers[0][0].dtype
        batch = np.concatenate([ds.classes[c].samples for c in class_ids]).astype(dtype)
        self.emb = E.embed(params, batch)

    def gather(self, class_ids: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self.emb[self.offset[class_ids][..., None] + idx]


def task_accuracies(table: EmbeddingTable, indices: list[EpisodeIndex], metric: str = "cosine") -> np.ndarray:
    """Fraction of queries whose argmax logit is their own way, per task."""
    cls = np.stack([ix.class_ids for ix in indices])  # (T, N)
    sup = table.gather(cls, np.stack([ix.support_idx for ix in indices]))  # (T, N, K, d)
    qry = table.gather(cls, np.stack([ix.query_idx for ix in indices]))  # (T, N, Q, d)
    n_tasks, n_way, q = qry.shape[:3]
    cents = sup.mean(axis=2)
    logits = score_array(qry.reshape(n_tasks, n_way * q, -1), cents, metric)
    pred = logits.argmax(axis=-1)
    truth = np.repeat(np.arange(n_way), q)
    return (pred == truth).mean(axis=1)


def evaluate(params: E.EncoderParams, ds: FewShotDataset, pool: SamplePool, spec: EpisodeSpec,
             seed: int = 0, num_tasks: int = DEFAULT_TASKS, metric: str = "cosine",
             indices: list[EpisodeIndex] | None = None) -> EvalResult:
    """Accuracy over the first ``num_tasks`` tasks of the consistent stream for ``seed``.

    The temperature never changes an argmax, so it is not an input here.
    """
    if indices is None:
        indices = consistent_indices(pool, spec, seed, num_tasks)
    table = EmbeddingTable(params, ds, pool.class_ids)
    mean, ci = summarize(task_accuracies(table, indices, metric))
    return EvalResult(mean, ci, len(indices), spec, metric, pool.label)


@dataclass
class Monitor:
    """Evaluates one encoder on fixed task sets for several splits and shots.

    Task indices are drawn once, so every epoch sees the same tasks.
    """

    ds: FewShotDataset
    split: SplitSpec
    specs: tuple[EpisodeSpec, ...] = (EpisodeSpec(5, 1, 15),)
    splits: tuple[str, ...] = ("base_unseen", "val", "novel")
    num_tasks: int = DEFAULT_TASKS
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def feasible(cls, ds: FewShotDataset, split: SplitSpec, specs: tuple[EpisodeSpec, ...],
                 splits: tuple[str, ...] = ("base_unseen", "val", "novel"), **kw) -> Monitor:
        """Like the constructor, but drops splits too small for some spec (with a warning)."""
        keep = []
        for which in splits:
            pool = split_pool(ds, split, which)
            try:
                for spec in specs:
                    check_feasible(pool, spec)
            except SamplingError as e:
                log.warning("not monitoring %s: %s", which, e)
                continue
            keep.append(which)
        return cls(ds, split, tuple(specs), tuple(keep), **kw)

    def _tasks(self, which: str, spec: EpisodeSpec):
        key = (which, spec)
        if key not in self._cache:
            pool = split_pool(self.ds, self.split, which)
            self._cache[key] = (pool, consistent_indices(pool, spec, self.seed, self.num_tasks))
        return self._cache[key]

    def __call__(self, params: E.EncoderParams, metric: str = "cosine") -> dict[str, EvalResult]:
        out = {}
        tables: dict[str, EmbeddingTable] = {}
        for which in self.splits:
            for spec in self.specs:
                pool, indices = self._tasks(which, spec)
                if which not in tables:
                    tables[which] = EmbeddingTable(params, self.ds, pool.class_ids)
                mean, ci = summarize(task_accuracies(tables[which], indices, metric))
                out[result_key(which, spec)] = EvalResult(mean, ci, len(indices), spec, metric, which)
        return out


def result_key(which: str, spec: EpisodeSpec) -> str:
    return f"{which}/{spec.n_way}w{spec.k_shot}s"


# -- generalization curves -------------------------------------------------------------


@dataclass
class CurvePoint:
    epoch: int
    base_gen: float
    base_gen_ci: float
    novel_gen: float
    novel_gen_ci: float
    train_loss: float | None
    tau: float | None


@dataclass
class GeneralizationCurve:
    points: list[CurvePoint]

    def __post_init__(self):
        epochs = [p.epoch for p in self.points]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"curve epochs must be strictly increasing: {epochs}")

    @property
    def epochs(self) -> list[int]:
        return [p.epoch for p in self.points]

    @property
    def base(self) -> np.ndarray:
        return np.array([p.base_gen for p in self.points])

    @property
    def novel(self) -> np.ndarray:
        return np.array([p.novel_gen for p in self.points])

    def to_csv(self, path) -> None:
        cols = list(CurvePoint.__dataclass_fields__)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for p in self.points:
                w.writerow(["" if getattr(p, c) is None else _fmt(getattr(p, c)) for c in cols])

    @classmethod
    def from_csv(cls, path) -> GeneralizationCurve:
        points = []
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                vals = {k: (None if v == "" else float(v)) for k, v in row.items()}
                vals["epoch"] = int(vals["epoch"])
                points.append(CurvePoint(**vals))
        return cls(points)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def track_generalization(records, shot_key: str = "5w1s") -> GeneralizationCurve:
    """Curve of base-class vs novel-class generalization from per-epoch metric records."""
    points = []
    for r in records:
        if f"base_unseen/{shot_key}" not in r.evals or f"novel/{shot_key}" not in r.evals:
            raise ConfigError(f"epoch {r.epoch} has no base_unseen/novel {shot_key} evaluation")
        base = r.evals[f"base_unseen/{shot_key}"]
        novel = r.evals[f"novel/{shot_key}"]
        points.append(CurvePoint(r.epoch, base.mean_accuracy, base.ci95_halfwidth,
                                 novel.mean_accuracy, novel.ci95_halfwidth, r.train_loss, r.tau))
    return GeneralizationCurve(points)


def write_results_jsonl(results, path) -> None:
    with Path(path).open("w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def format_results(results) -> str:
    return "\n".join(str(r) for r in results)
