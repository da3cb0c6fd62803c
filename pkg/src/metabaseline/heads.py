"""Classification heads and nearest-centroid metric heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import encoder as E
from . import tensor as T
from .episodes import Episode
from .rng import RandomStream
from .tensor import ContractError, DimensionError, Tensor

METRICS = ("cosine", "sq_euclidean")
DEFAULT_TAU = {"cosine": 10.0, "sq_euclidean": 0.1}
TAU_FLOOR = 1e-4
NORM_EPS = 1e-12


@dataclass
class MetricConfig:
    metric: str = "cosine"
    tau: Tensor | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.tau is None:
            self.tau = Tensor(np.float32(DEFAULT_TAU[self.metric]), requires_grad=True)

    @classmethod
    def create(cls, metric: str = "cosine", tau_init: float | None = None,
               dtype=np.float32) -> MetricConfig:
        value = DEFAULT_TAU[metric] if tau_init is None else tau_init
        return cls(metric, Tensor(np.asarray(value, dtype=dtype), requires_grad=True))

    @property
    def tau_value(self) -> float:
        return self.tau.item()

    def clamp(self) -> None:
        np.maximum(self.tau.data, self.tau.dtype.type(TAU_FLOOR), out=self.tau.data)


def centroids(support: Tensor, labels, n_way: int) -> Tensor:
    """Mean support embedding per way, as an (N, d) tensor."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_way)
    if len(counts) > n_way or np.any(counts == 0):
        raise ContractError(f"every way needs at least one support sample, got counts {counts.tolist()}")
    avg = np.zeros((n_way, len(labels)), dtype=support.dtype)
    avg[labels, np.arange(len(labels))] = 1.0
    avg /= counts[:, None].astype(support.dtype)
    return T.matmul(Tensor(avg), support)


def score(query: Tensor, cents: Tensor, cfg: MetricConfig | None = None) -> Tensor:
    """Query-by-centroid logits. ``cfg=None`` means unscaled cosine similarity."""
    if query.ndim != 2 or cents.ndim != 2 or query.shape[1] != cents.shape[1]:
        raise DimensionError(f"score: query {query.shape} and centroids {cents.shape} disagree")
    metric = "cosine" if cfg is None else cfg.metric
    if metric == "cosine":
        logits = T.matmul(T.l2_normalize(query, NORM_EPS), T.transpose(T.l2_normalize(cents, NORM_EPS)))
    else:
        logits = T.neg(T.pairwise_sq_dist(query, cents))
    if cfg is not None:
        logits = T.mul(logits, cfg.tau)
    return logits


def score_array(query: np.ndarray, cents: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Unscaled logits on plain arrays; the argmax is what evaluation needs."""
    if metric == "cosine":
        qn = query / (np.linalg.norm(query, axis=-1, keepdims=True) + NORM_EPS)
        cn = cents / (np.linalg.norm(cents, axis=-1, keepdims=True) + NORM_EPS)
        return qn @ np.swapaxes(cn, -1, -2)
    diff = query[..., :, None, :] - cents[..., None, :, :]
    return -(diff * diff).sum(axis=-1)


def episodes_loss(episodes: Sequence[Episode], params: E.EncoderParams, cfg: MetricConfig) -> Tensor:
    """Mean over tasks of the query cross-entropy; all tasks share one encoder pass."""
    dtype = params.layers[0][0].dtype
    blocks, offsets = [], []
    pos = 0
    for ep in episodes:
        blocks += [ep.support, ep.query]
        offsets.append((pos, pos + len(ep.support), pos + len(ep.support) + len(ep.query)))
        pos = offsets[-1][2]
    emb = E.forward(params, Tensor(np.concatenate(blocks).astype(dtype)))
    losses = []
    for ep, (a, b, c) in zip(episodes, offsets):
        cents = centroids(T.take_rows(emb, slice(a, b)), ep.support_labels, ep.n_way)
        logits = score(T.take_rows(emb, slice(b, c)), cents, cfg)
        losses.append(T.softmax_cross_entropy(logits, ep.query_labels))
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(losses))


def episode_loss(episode: Episode, params: E.EncoderParams, cfg: MetricConfig) -> Tensor:
    return episodes_loss([episode], params, cfg)


# -- whole-classification heads --------------------------------------------------------


@dataclass
class LinearHead:
    weight: Tensor  # (C, d)
    bias: Tensor  # (C,)

    kind = "linear"

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class CosineHead:
    weight: Tensor  # (C, d)
    tau: Tensor

    kind = "cosine"

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.tau]


def init_head(kind: str, num_classes: int, embed_dim: int, stream: RandomStream,
              dtype=np.float32, tau_init: float = 10.0) -> LinearHead | CosineHead:
    s = np.sqrt(6.0 / (num_classes + embed_dim))
    w = ((2.0 * stream.uniform(num_classes * embed_dim) - 1.0) * s).reshape(num_classes, embed_dim)
    weight = Tensor(w.astype(dtype), requires_grad=True)
    if kind == "linear":
        return LinearHead(weight, Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True))
    if kind == "cosine":
        return CosineHead(weight, Tensor(np.asarray(tau_init, dtype=dtype), requires_grad=True))
    raise ValueError(f"unknown head kind {kind!r}")


def classifier_logits(head: LinearHead | CosineHead, emb: Tensor) -> Tensor:
    if emb.ndim != 2 or emb.shape[1] != head.weight.shape[1]:
        raise DimensionError(f"head expects width {head.weight.shape[1]}, got {emb.shape}")
    if isinstance(head, LinearHead):
        return T.add_bias(T.matmul(emb, T.transpose(head.weight)), head.bias)
    cos = T.matmul(T.l2_normalize(emb, NORM_EPS), T.transpose(T.l2_normalize(head.weight, NORM_EPS)))
    return T.mul(cos, head.tau)
