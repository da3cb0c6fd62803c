"""Desk-scale diagnostic experiments.

* dataset-property sweep: super-category vs shuffled splits, small vs large
  training sets, reporting the meta-stage gain over the classifier
* metric ablation: cosine vs squared-Euclidean, at evaluation and in meta-training
* from-scratch ablation: meta-learning with and without classification training
* generalization curves: base-class (held-out images) vs novel-class accuracy
  through meta-training

Every run is memoized in a :class:`Runner`, so the tables can share training runs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FewShotDataset, SplitSpec, SyntheticSpec, generate_synthetic, split_by_supercategory, split_shuffled
from .episodes import EpisodeSpec
from .evaluation import GeneralizationCurve, Monitor, result_key, track_generalization
from .pipelines import TrainResult, classification_config, meta_config, train_classification, train_meta
from .rng import RandomStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskPreset:
    """Dataset, model and schedule sizes for the desk-scale experiments."""

    num_super_categories: int = 12
    classes_per_super: int = 5
    samples_per_class: int = 200
    sample_dim: int = 32
    super_scale: float = 3.0
    class_scale: float = 1.0
    noise_scale: float = 3.0
    super_fractions: tuple[int, int, int] = (8, 2, 2)
    hidden_dims: tuple[int, ...] = (128,)
    embed_dim: int = 64
    cls_epochs: int = 30
    meta_epochs: int = 20
    meta_batches: int = 200
    meta_lr: float = 0.01
    meta_lr_sq_euclidean: float = 0.001  # 0.01 diverges: squared distances of raw embeddings are large
    scratch_epochs: int = 40
    scratch_lr: float = 0.01
    eval_tasks: int = 800
    eval_seed: int = 0
    n_way: int = 5
    q_query: int = 15
    small_class_fraction: float = 0.6
    small_sample_fraction: float = 0.5

    def synthetic(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(self.num_super_categories, self.classes_per_super, self.samples_per_class,
                             self.sample_dim, self.super_scale, self.class_scale, self.noise_scale, seed)

    def to_dict(self) -> dict:
        return asdict(self)


QUICK = DeskPreset( cls_epochs=4, meta_epochs=3, meta_batches=20,
                   scratch_epochs=4, eval_tasks=100, hidden_dims=(32,), embed_dim=16)


def shrink_training_set(ds: FewShotDataset, split: SplitSpec, class_fraction: float,
                        sample_fraction: float, seed: int) -> tuple[FewShotDataset, SplitSpec]:
    """Keep a random subset of base classes and the first part of each one's samples.

    Validation and novel classes are untouched; the held-out tail of each kept
    base class is recomputed on the shortened class.
    """
    stream = RandomStream.from_seed(seed).child("shrink")
    n_keep = max(1, round(class_fraction * len(split.base)))
    kept = sorted(split.base[i] for i in stream.choice(len(split.base), n_keep))
    keep = {cid: max(2, round(sample_fraction * len(ds.classes[cid].samples))) for cid in kept}
    small = ds.subset(keep, name=f"{ds.name}-small")
    return small, replace(split, base=tuple(kept))


@dataclass
class Runner:
    """Builds and memoizes datasets, splits and training runs for one preset."""

    preset: DeskPreset = field(default_factory=DeskPreset)
    _memo: dict = field(default_factory=dict, repr=False)

    def _cached(self, key, build):
        if key not in self._memo:
            self._memo[key] = build()
        return self._memo[key]

    def dataset(self, seed: int) -> FewShotDataset:
        return self._cached(("ds", seed), lambda: generate_synthetic(self.preset.synthetic(seed),
                                                                     name=f"synthetic-{seed}"))

    def setting(self, mode: str, size: str, seed: int) -> tuple[FewShotDataset, SplitSpec]:
        def build():
            ds = self.dataset(seed)
            ref = split_by_supercategory(ds, self.preset.super_fractions, seed)
            if mode == "super":
                split = ref
            elif mode == "shuffled":
                split = split_shuffled(ds, (len(ref.base), len(ref.val), len(ref.novel)), seed)
            else:
                raise ValueError(f"unknown split mode {mode!r}")
            if size == "small":
                return shrink_training_set(ds, split, self.preset.small_class_fraction,
                                           self.preset.small_sample_fraction, seed)
            if size != "large":
                raise ValueError(f"unknown size {size!r}")
            return ds, split
        return self._cached(("setting", mode, size, seed), build)

    def monitor(self, mode: str, size: str, seed: int) -> Monitor:
        def build():
            ds, split = self.setting(mode, size, seed)
            p = self.preset
            specs = tuple(EpisodeSpec(p.n_way, k, p.q_query) for k in (1, 5))
            return Monitor.feasible(ds, split, specs, num_tasks=p.eval_tasks, seed=p.eval_seed)
        return self._cached(("monitor", mode, size, seed), build)

    def classifier(self, mode: str, size: str, seed: int, head: str = "linear") -> TrainResult:
        def build():
            ds, split = self.setting(mode, size, seed)
            p = self.preset
            cfg = classification_config(p.cls_epochs, hidden_dims=p.hidden_dims, embed_dim=p.embed_dim,
                                        seed=seed, head=head, eval_tasks=p.eval_tasks,
                                        eval_seed=p.eval_seed, eval_query=p.q_query,
                                        episode=EpisodeSpec(p.n_way, 1, p.q_query))
            log.info("classification %s/%s seed %d", mode, size, seed)
            return train_classification(ds, split, cfg, monitor=self.monitor(mode, size, seed))
        return self._cached(("cls", mode, size, seed, head), build)

    def meta(self, mode: str, size: str, seed: int, shot: int, metric: str = "cosine",
             scratch: bool = False) -> TrainResult:
        def build():
            ds, split = self.setting(mode, size, seed)
            p = self.preset
            init = None if scratch else self.classifier(mode, size, seed).encoder
            cfg = meta_config(p.scratch_epochs if scratch else p.meta_epochs,
                              batches_per_epoch=p.meta_batches,
                              lr=p.scratch_lr if scratch else
                              (p.meta_lr_sq_euclidean if metric == "sq_euclidean" else p.meta_lr),
                              hidden_dims=p.hidden_dims, embed_dim=p.embed_dim, seed=seed,
                              metric=metric, episode=EpisodeSpec(p.n_way, shot, p.q_query),
                              eval_tasks=p.eval_tasks, eval_seed=p.eval_seed, eval_query=p.q_query)
            log.info("meta %s/%s seed %d %d-shot %s%s", mode, size, seed, shot, metric,
                     " scratch" if scratch else "")
            return train_meta(init, ds, split, cfg, monitor=self.monitor(mode, size, seed))
        return self._cached(("meta", mode, size, seed, shot, metric, scratch), build)


def selected_record(result: TrainResult):
    """The per-epoch record of the validation-selected model."""
    if result.best_epoch is None:
        return result.records[-1]
    return next(r for r in result.records if r.epoch == result.best_epoch)


def _acc(record, which, shot, preset: DeskPreset) -> float:
    return record.evals[result_key(which, EpisodeSpec(preset.n_way, shot, preset.q_query))].mean_accuracy


# -- tables ---------------------------------------------------------------------------------


@dataclass
class Table:
    title: str
    columns: list[str]
    rows: list[dict]

    def format(self) -> str:
        widths = {c: max(len(c), *(len(_cell(r.get(c))) for r in self.rows)) for c in self.columns}
        lines = [self.title, "  ".join(c.ljust(widths[c]) for c in self.columns)]
        lines.append("  ".join("-" * widths[c] for c in self.columns))
        for r in self.rows:
            lines.append("  ".join(_cell(r.get(c)).ljust(widths[c]) for c in self.columns))
        return "\n".join(lines)

    def write_jsonl(self, path) -> None:
        with Path(path).open("w") as fh:
            for r in self.rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return "" if v is None else str(v)


def run_dataset_property_sweep(runner: Runner, seeds=(0, 1, 2), modes=("super", "shuffled"),
                               sizes=("small", "large"), shots=(1, 5)) -> Table:
    """Classifier vs Meta novel accuracy and their difference, averaged over seeds."""
    p = runner.preset
    rows = []
    for shot in shots:
        for size in sizes:
            for mode in modes:
                cls_acc, meta_acc = [], []
                for seed in seeds:
                    cls_acc.append(_acc(selected_record(runner.classifier(mode, size, seed)), "novel", shot, p))
                    meta_acc.append(_acc(selected_record(runner.meta(mode, size, seed, shot)), "novel", shot, p))
                c, m = float(np.mean(cls_acc)), float(np.mean(meta_acc))
                rows.append({"shot": shot, "size": size, "split": mode, "classifier": c, "meta": m,
                             "delta": m - c, "delta_per_seed": [b - a for a, b in zip(cls_acc, meta_acc)]})
    return Table("Effect of dataset properties (novel 5-way accuracy %, mean over seeds)",
                 ["shot", "size", "split", "classifier", "meta", "delta"], rows)


def run_metric_ablation(runner: Runner, seeds=(0, 1, 2), shots=(1, 5), mode: str = "super",
                        size: str = "large") -> Table:
    """Cosine vs squared-Euclidean nearest-centroid, for both baselines."""
    p = runner.preset
    rows = []
    for name, metric, meta in (("Classifier-Baseline", "cosine", False),
                               ("Classifier-Baseline (Euc.)", "sq_euclidean", False),
                               ("Meta-Baseline", "cosine", True),
                               ("Meta-Baseline (Euc.)", "sq_euclidean", True)):
        row = {"method": name}
        for shot in shots:
            accs = []
            for seed in seeds:
                if meta:
                    rec = selected_record(runner.meta(mode, size, seed, shot, metric=metric))
                    accs.append(_acc(rec, "novel", shot, p))
                else:
                    # evaluation-only change: same trained encoder, different metric
                    res = runner.classifier(mode, size, seed)
                    mon = runner.monitor(mode, size, seed)
                    evals = mon(res.selected, metric)
                    accs.append(evals[result_key("novel", EpisodeSpec(p.n_way, shot, p.q_query))].mean_accuracy)
            row[f"{shot}-shot"] = float(np.mean(accs))
        rows.append(row)
    return Table("Importance of inheriting a good metric (novel 5-way accuracy %)",
                 ["method"] + [f"{s}-shot" for s in shots], rows)


def run_scratch_ablation(runner: Runner, seeds=(0, 1, 2), shots=(1,), mode: str = "super",
                         size: str = "large") -> Table:
    """Meta-Baseline with and without the classification training stage."""
    p = runner.preset
    rows = []
    for shot in shots:
        for name, scratch in (("w/ ClsTr", False), ("w/o ClsTr", True)):
            base, novel = [], []
            for seed in seeds:
                rec = selected_record(runner.meta(mode, size, seed, shot, scratch=scratch))
                base.append(_acc(rec, "base_unseen", shot, p))
                novel.append(_acc(rec, "novel", shot, p))
            rows.append({"shot": shot, "training": name, "base_gen": float(np.mean(base)),
                         "novel_gen": float(np.mean(novel))})
    return Table("Meta-Baseline from scratch (5-way accuracy %)",
                 ["shot", "training", "base_gen", "novel_gen"], rows)


def run_generalization(runner: Runner, seeds=(0, 1, 2), shot: int = 1, mode: str = "super",
                       size: str = "large") -> tuple[GeneralizationCurve, list[GeneralizationCurve]]:
    """Per-seed base/novel curves through meta-training, and their mean."""
    key = f"{runner.preset.n_way}w{shot}s"
    curves = [track_generalization(runner.meta(mode, size, seed, shot).records, key) for seed in seeds]
    return mean_curve(curves), curves


def mean_curve(curves: list[GeneralizationCurve]) -> GeneralizationCurve:
    from .evaluation import CurvePoint

    points = []
    for pts in zip(*(c.points for c in curves)):
        losses = [p.train_loss for p in pts if p.train_loss is not None]
        taus = [p.tau for p in pts if p.tau is not None]
        points.append(CurvePoint(
            pts[0].epoch,
            float(np.mean([p.base_gen for p in pts])), float(np.mean([p.base_gen_ci for p in pts])),
            float(np.mean([p.novel_gen for p in pts])), float(np.mean([p.novel_gen_ci for p in pts])),
            float(np.mean(losses)) if losses else None,
            float(np.mean(taus)) if taus else None,
        ))
    return GeneralizationCurve(points)


def discrepancy_drop(curve: GeneralizationCurve) -> tuple[float, int, int]:
    """Largest novel-accuracy fall from its running peak over a stretch where base never falls.

    Returns ``(drop, start, end)`` as indices into the curve; ``drop`` is 0 if
    no such stretch exists.
    """
    base, novel = curve.base, curve.novel
    best = (0.0, 0, 0)
    for a in range(len(base)):
        for b in range(a + 1, len(base)):
            if base[b] < base[b - 1]:
                break
            drop = float(novel[: a + 1].max() - novel[b])
            if drop > best[0]:
                best = (drop, a, b)
    return best
