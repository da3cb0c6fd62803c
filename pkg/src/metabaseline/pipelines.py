"""Classification stage, meta-learning stage, SGD, and resumable checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import binio
from . import encoder as E
from . import tensor as T
from .data import ConfigError, FewShotDataset, SplitSpec, train_pool
from .episodes import EpisodeSpec, check_feasible, sample_episode
from .evaluation import EvalResult, Monitor, result_key
from .heads import CosineHead, LinearHead, MetricConfig, classifier_logits, episodes_loss, init_head
from .rng import RandomStream
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

STAGES = ("classification", "meta")


@dataclass
class TrainConfig:
    stage: str = "classification"
    epochs: int = 50
    batches_per_epoch: int | None = None  # classification: None means one pass over the data
    batch_size: int = 128  # samples (classification) or tasks (meta)
    lr: float = 0.1
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    head: str = "linear"
    metric: str = "cosine"
    tau_init: float | None = None
    hidden_dims: tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    seed: int = 0
    eval_tasks: int = 800
    eval_seed: int = 0
    eval_shots: tuple[int, ...] = (1, 5)
    eval_query: int = 15

    def __post_init__(self):
        if isinstance(self.episode, dict):
            self.episode = EpisodeSpec(**self.episode)
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        self.hidden_dims = tuple(self.hidden_dims)
        self.eval_shots = tuple(self.eval_shots)

    def validate(self) -> None:
        problems = []
        if self.stage not in STAGES:
            problems.append(f"stage must be one of {STAGES}")
        if not self.lr >= 0:
            problems.append("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            problems.append("epochs must be >= 0 and batch_size >= 1")
        if self.stage == "meta" and (self.batches_per_epoch or 0) < 1 and self.epochs > 0:
            problems.append("meta stage needs batches_per_epoch >= 1")
        if self.head not in ("linear", "cosine"):
            problems.append(f"unknown head {self.head!r}")
        if self.metric not in ("cosine", "sq_euclidean"):
            problems.append(f"unknown metric {self.metric!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["episode"] = asdict(self.episode)
        for k in ("lr_decay_epochs", "hidden_dims", "eval_shots"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def classification_config(epochs: int = 50, **overrides) -> TrainConfig:
    """lr 0.1, x0.1 at 60% and 80% of training, momentum 0.9, wd 5e-4."""
    cfg = TrainConfig(stage="classification", epochs=epochs, batch_size=128, lr=0.1,
                      lr_decay_epochs=(int(0.6 * epochs), int(0.8 * epochs)),
                      momentum=0.9, weight_decay=5e-4)
    return replace(cfg, **overrides)


def meta_config(epochs: int = 20, **overrides) -> TrainConfig:
    """Fixed lr 0.001, momentum 0.9, 4 tasks per batch, 200 batches per epoch."""
    cfg = TrainConfig(stage="meta", epochs=epochs, batches_per_epoch=200, batch_size=4,
                      lr=0.001, momentum=0.9, weight_decay=5e-4)
    return replace(cfg, **overrides)


# -- optimizer ------------------------------------------------------------------------


def sgd_step(params: list[Tensor], grads: list[np.ndarray | None], velocity: list[np.ndarray],
             lr: float, momentum: float, weight_decay) -> None:
    """In place: g = grad + wd * p; v = momentum * v + g; p -= lr * v.

    ``weight_decay`` is one value for all params or one per param.
    """
    if not isinstance(weight_decay, (list, tuple)):
        weight_decay = [weight_decay] * len(params)
    for p, g, v, wd in zip(params, grads, velocity, weight_decay):
        dt = p.dtype.type
        step = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=True)
        if wd:
            step += dt(wd) * p.data
        v *= dt(momentum)
        v += step
        p.data -= dt(lr) * v


class SGD:
    def __init__(self, params: list[Tensor], decay_mask: list[bool], momentum: float,
                 weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.wd = [weight_decay if m else 0.0 for m in decay_mask]
        self.velocity = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.velocity, lr, self.momentum, self.wd)


# -- records and results ------------------------------------------------------------------


@dataclass
class MetricsRecord:
    stage: str
    epoch: int
    lr: float | None
    train_loss: float | None
    train_acc: float | None
    tau: float | None
    evals: dict[str, EvalResult] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("stage", "epoch", "lr", "train_loss", "train_acc", "tau")}
        d["evals"] = {k: v.to_dict() for k, v in self.evals.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetricsRecord:
        evals = {}
        for k, v in d["evals"].items():
            v = dict(v)
            v["episode_spec"] = EpisodeSpec(**v["episode_spec"])
            evals[k] = EvalResult(**v)
        return cls(d["stage"], d["epoch"], d["lr"], d["train_loss"], d["train_acc"], d["tau"], evals)

    def flat(self) -> dict:
        row = {k: getattr(self, k) for k in ("stage", "epoch", "lr", "train_loss", "train_acc", "tau")}
        for k, v in sorted(self.evals.items()):
            row[f"{k}/acc"] = v.mean_accuracy
            row[f"{k}/ci95"] = v.ci95_halfwidth
        return row


def write_metrics(records: list[MetricsRecord], jsonl_path=None, csv_path=None) -> None:
    if jsonl_path is not None:
        with Path(jsonl_path).open("w") as fh:
            for r in records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    if csv_path is not None and records:
        rows = [r.flat() for r in records]
        cols = list(rows[0])
        for row in rows[1:]:
            cols += [c for c in row if c not in cols]
        with Path(csv_path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v))
                            for k, v in row.items()})


@dataclass
class TrainResult:
    encoder: E.EncoderParams
    records: list[MetricsRecord]
    head: LinearHead | CosineHead | None = None
    metric: MetricConfig | None = None
    best_encoder: E.EncoderParams | None = None
    best_tau: float | None = None
    best_epoch: int | None = None

    @property
    def tau(self) -> float | None:
        return None if self.metric is None else self.metric.tau_value

    @property
    def selected(self) -> E.EncoderParams:
        return self.best_encoder if self.best_encoder is not None else self.encoder


# -- checkpoint sections --------------------------------------------------------------------


def _arrays_bytes(arrays: list[np.ndarray]) -> bytes:
    out = [binio.u32(len(arrays))]
    for a in arrays:
        out += [binio.u32(a.ndim)] + [binio.u32(s) for s in a.shape] + [binio.f32_array(a)]
    return b"".join(out)


def _arrays_from(buf: bytes) -> list[np.ndarray]:
    r = binio.Reader(buf)
    arrays = []
    for _ in range(r.u32()):
        shape = tuple(r.u32() for _ in range(r.u32()))
        arrays.append(r.f32_array(int(np.prod(shape))).reshape(shape))
    return arrays


def model_sections(head=None, metric: MetricConfig | None = None) -> dict[str, bytes]:
    sections = {}
    if metric is not None:
        sections["TAU_"] = binio.f32(metric.tau_value)
        sections["METR"] = metric.metric.encode()
    if head is not None:
        sections["HEAD"] = head.kind.encode() + b"\0" + _arrays_bytes([t.data for t in head.tensors()])
    return sections


def _head_from(buf: bytes) -> LinearHead | CosineHead:
    kind, _, rest = buf.partition(b"\0")
    a, b = (Tensor(x, requires_grad=True) for x in _arrays_from(rest))
    return LinearHead(a, b) if kind == b"linear" else CosineHead(a, b)


def save_model(path, result: TrainResult, use_best: bool = True) -> None:
    """FSCK file with the encoder (best-by-validation by default) and its head/temperature."""
    enc = result.selected if use_best else result.encoder
    metric = result.metric
    if metric is not None and use_best and result.best_tau is not None:
        metric = MetricConfig.create(metric.metric, result.best_tau)
    E.save_checkpoint(path, enc, model_sections(result.head, metric))


def load_model(path) -> tuple[E.EncoderParams, dict]:
    params, sections = E.load_checkpoint(path)
    extras: dict = {}
    if "TAU_" in sections:
        extras["tau"] = binio.Reader(sections["TAU_"]).f32()
        extras["metric"] = sections.get("METR", b"cosine").decode()
    if "HEAD" in sections:
        extras["head"] = _head_from(sections["HEAD"])
    return params, extras


@dataclass
class _State:
    encoder: E.EncoderParams
    extra: list[Tensor]  # head tensors or [tau]
    optimizer: SGD
    epoch: int = 0  # epochs completed
    records: list[MetricsRecord] = field(default_factory=list)
    best_encoder: E.EncoderParams | None = None
    best_extra: list[np.ndarray] | None = None
    best_epoch: int | None = None
    best_score: float = -math.inf


def _save_state(path, st: _State, cfg: TrainConfig) -> None:
    sections = {
        "XTRA": _arrays_bytes([t.data for t in st.extra]),
        "VELO": _arrays_bytes(st.optimizer.velocity),
        "STAT": json.dumps({
            "config": cfg.to_dict(),
            "epoch": st.epoch,
            "records": [r.to_dict() for r in st.records],
            "best_epoch": st.best_epoch,
            "best_score": None if st.best_score == -math.inf else st.best_score,
        }, sort_keys=True).encode(),
    }
    if st.best_encoder is not None:
        sections["BEST"] = E.encode_checkpoint(st.best_encoder, {"XTRA": _arrays_bytes(st.best_extra)})
    tmp = Path(str(path) + ".tmp")
    E.save_checkpoint(tmp, st.encoder, sections)
    tmp.replace(path)


def _load_state(path, st: _State, cfg: TrainConfig) -> None:
    enc, sections = E.load_checkpoint(path)
    stat = json.loads(sections["STAT"])
    if stat["config"] != cfg.to_dict():
        raise ConfigError(f"checkpoint {path} was written with a different config")
    for (w, b), (w2, b2) in zip(st.encoder.layers, enc.layers):
        w.data[...] = w2.data
        b.data[...] = b2.data
    for t, a in zip(st.extra, _arrays_from(sections["XTRA"])):
        t.data[...] = a
    for v, a in zip(st.optimizer.velocity, _arrays_from(sections["VELO"])):
        v[...] = a
    st.epoch = stat["epoch"]
    st.records = [MetricsRecord.from_dict(r) for r in stat["records"]]
    st.best_epoch = stat["best_epoch"]
    st.best_score = -math.inf if stat["best_score"] is None else stat["best_score"]
    if "BEST" in sections:
        st.best_encoder, inner = E.decode_checkpoint(sections["BEST"])
        st.best_extra = _arrays_from(inner["XTRA"])


def _check_finite(loss: float, stage: str, step: int) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"{stage} loss is {loss} at step {step}; lower the learning rate")


def _consider_best(st: _State, record: MetricsRecord, select_key: str | None) -> None:
    if select_key is None or select_key not in record.evals:
        return
    score = record.evals[select_key].mean_accuracy
    if score > st.best_score:
        st.best_score = score
        st.best_epoch = record.epoch
        st.best_encoder = st.encoder.copy(requires_grad=False)
        st.best_extra = [t.data.copy() for t in st.extra]


def default_monitor(ds: FewShotDataset, split: SplitSpec, cfg: TrainConfig) -> Monitor:
    specs = tuple(EpisodeSpec(cfg.episode.n_way, k, cfg.eval_query) for k in cfg.eval_shots)
    if cfg.episode not in specs and cfg.stage == "meta":
        specs = specs + (cfg.episode,)
    return Monitor.feasible(ds, split, specs, num_tasks=cfg.eval_tasks, seed=cfg.eval_seed)


def _select_key(cfg: TrainConfig, monitor: Monitor | None) -> str | None:
    if monitor is None or "val" not in monitor.splits:
        return None
    spec = EpisodeSpec(cfg.episode.n_way, cfg.episode.k_shot, cfg.eval_query)
    if spec not in monitor.specs:
        spec = monitor.specs[0]
    return result_key("val", spec)


def _finish(st: _State, head=None, metric=None) -> TrainResult:
    best_tau = None
    if metric is not None and st.best_extra is not None:
        best_tau = float(st.best_extra[0])
    return TrainResult(st.encoder, st.records, head, metric, st.best_encoder, best_tau,
                       st.best_epoch)


# -- classification stage ----------------------------------------------------------------------


def train_classification(ds: FewShotDataset, split: SplitSpec, cfg: TrainConfig,
                         monitor: Monitor | None | str = "default", checkpoint_path=None,
                         resume: bool = False,
                         on_epoch: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    """Cross-entropy over all base classes; the encoder is the model minus its head."""
    cfg.validate()
    split.validate_against(ds)
    if not split.base:
        raise ConfigError("classification stage needs at least one base class")
    if monitor == "default":
        monitor = default_monitor(ds, split, cfg)
    select_key = _select_key(cfg, monitor)

    pool = train_pool(ds, split)
    dtype = np.float32
    xs = np.concatenate([ds.classes[c].samples[pool.indices[c]] for c in split.base]).astype(dtype)
    ys = np.concatenate([np.full(len(pool.indices[c]), i) for i, c in enumerate(split.base)])

    root = RandomStream.from_seed(cfg.seed)
    enc = E.init_params(E.EncoderSpec(ds.sample_dim, cfg.hidden_dims, cfg.embed_dim),
                        root.child("init"), dtype)
    head = init_head(cfg.head, len(split.base), cfg.embed_dim, root.child("head"), dtype,
                     tau_init=cfg.tau_init or 10.0)
    params = enc.tensors() + head.tensors()
    decay = [True, False] * len(enc.layers) + ([True, False])
    opt = SGD(params, decay, cfg.momentum, cfg.weight_decay)
    st = _State(enc, head.tensors(), opt)
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        _load_state(checkpoint_path, st, cfg)

    n = len(xs)
    nb = cfg.batches_per_epoch or math.ceil(n / cfg.batch_size)
    for epoch in range(st.epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = root.child("cls-batches", epoch).permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for b in range(nb):
            start = (b * cfg.batch_size) % n
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            logits = classifier_logits(head, E.forward(enc, Tensor(xs[idx])))
            loss = T.softmax_cross_entropy(logits, ys[idx])
            _check_finite(loss.item(), "classification", epoch * nb + b)
            loss.backward()
            opt.step(lr)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == ys[idx]).sum())
            seen += len(idx)
        record = MetricsRecord("classification", epoch + 1, lr, loss_sum / seen, correct / seen,
                               head.tau.item() if isinstance(head, CosineHead) else None)
        if monitor is not None:
            record.evals = monitor(enc, "cosine")
        st.records.append(record)
        st.epoch = epoch + 1
        _consider_best(st, record, select_key)
        log.info("cls epoch %d loss %.4f acc %.3f", epoch + 1, record.train_loss, record.train_acc)
        if on_epoch:
            on_epoch(record)
        if checkpoint_path is not None:
            _save_state(checkpoint_path, st, cfg)
    return _finish(st, head=head)


# -- meta-learning stage -------------------------------------------------------------------------


def train_meta(encoder_init: E.EncoderParams | None, ds: FewShotDataset, split: SplitSpec,
               cfg: TrainConfig, monitor: Monitor | None | str = "default", checkpoint_path=None,
               resume: bool = False,
               on_epoch: Callable[[MetricsRecord], None] | None = None,
               on_batch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Episodic training of encoder and temperature on the nearest-centroid loss.

    ``encoder_init=None`` trains from a fresh initialization.
    """
    cfg.validate()
    split.validate_against(ds)
    pool = train_pool(ds, split)
    check_feasible(pool, cfg.episode)
    if monitor == "default":
        monitor = default_monitor(ds, split, cfg)
    select_key = _select_key(cfg, monitor)

    root = RandomStream.from_seed(cfg.seed)
    if encoder_init is None:
        enc = E.init_params(E.EncoderSpec(ds.sample_dim, cfg.hidden_dims, cfg.embed_dim),
                            root.child("init"), np.float32)
    else:
        enc = encoder_init.copy(requires_grad=True)
    metric = MetricConfig.create(cfg.metric, cfg.tau_init, enc.layers[0][0].dtype)
    params = enc.tensors() + [metric.tau]
    opt = SGD(params, [True, False] * len(enc.layers) + [False], cfg.momentum, cfg.weight_decay)
    st = _State(enc, [metric.tau], opt)
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        _load_state(checkpoint_path, st, cfg)

    if st.epoch == 0 and not st.records:
        record = MetricsRecord("meta", 0, None, None, None, metric.tau_value)
        if monitor is not None:
            record.evals = monitor(enc, cfg.metric)
        st.records.append(record)
        _consider_best(st, record, select_key)
        if on_epoch:
            on_epoch(record)

    for epoch in range(st.epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses = []
        for b in range(cfg.batches_per_epoch):
            step = epoch * cfg.batches_per_epoch + b
            episodes = [sample_episode(ds, pool, cfg.episode, root.child("meta", step, j))
                        for j in range(cfg.batch_size)]
            opt.zero_grad()
            loss = episodes_loss(episodes, enc, metric)
            losses.append(loss.item())
            _check_finite(losses[-1], "meta", step)
            loss.backward()
            opt.step(lr)
            metric.clamp()
            if on_batch:
                on_batch(step, losses[-1])
        record = MetricsRecord("meta", epoch + 1, lr, float(np.mean(losses)), None, metric.tau_value)
        if monitor is not None:
            record.evals = monitor(enc, cfg.metric)
        st.records.append(record)
        st.epoch = epoch + 1
        _consider_best(st, record, select_key)
        log.info("meta epoch %d loss %.4f tau %.3f", epoch + 1, record.train_loss, record.tau)
        if on_epoch:
            on_epoch(record)
        if checkpoint_path is not None:
            _save_state(checkpoint_path, st, cfg)
    return _finish(st, metric=metric)

