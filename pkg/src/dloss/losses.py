"""Trainable objectives: D-loss plus the three comparison baselines.

The D-loss turns the decidability index of the within-batch genuine and
impostor dissimilarity-score distributions into a minimization target:

    decidability = |mu_I - mu_G| / sqrt((var_G + var_I) / 2)
    loss         = 1 / (decidability + 1e-6)

Scores are plain Euclidean distances between embedding rows; every sample
in the batch participates, there is no anchor and no pair mining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigError,
    InsufficientPairsError,
    InsufficientScoresError,
    LabelError,
)

# Keeps 1/decidability finite when the two distributions coincide.
DLOSS_EPS = 1e-6
# Keeps the decidability denominator finite for zero-variance partitions;
# orders of magnitude below the 1e-9 agreement tolerance elsewhere.
VARIANCE_EPS = 1e-24


@dataclass
class ScorePartition:
    """Genuine (same-class) and impostor (cross-class) distance selections.

    Both are differentiable selections from a pairwise distance matrix,
    over unordered index pairs i < j.
    """

    genuine: Tensor
    impostor: Tensor


@dataclass
class DecidabilityStats:
    """Moments of the two score distributions and the resulting index."""

    mu_genuine: Tensor
    mu_impostor: Tensor
    var_genuine: Tensor
    var_impostor: Tensor
    decidability: Tensor


@dataclass(frozen=True)
class TripletParams:
    margin: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"triplet margin must be >= 0, got {self.margin}")


@dataclass(frozen=True)
class MultiSimilarityParams:
    alpha: float = 2.0          # positive-pair scaling
    beta: float = 50.0          # negative-pair scaling
    offset: float = 1.0         # similarity offset (lambda)
    mining_margin: float = 0.1  # epsilon around the relative-similarity bound

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")


def pair_indices(labels: np.ndarray, ordered: bool = False):
    """Flat indices of genuine and impostor entries of an n x n matrix.

    Unordered (i < j) by default; ``ordered`` enumerates both (i, j) and
    (j, i), which is what the loss algorithm's literal double loop does.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    i, j = np.triu_indices(n, k=1)
    if ordered:
        i, j = np.concatenate([i, j]), np.concatenate([j, i])
    same = labels[i] == labels[j]
    flat = i * n + j
    return flat[same], flat[~same]


def partition_scores(dist: Tensor, labels: np.ndarray,
                     ordered: bool = False) -> ScorePartition:
    """Split a pairwise distance matrix into genuine and impostor scores."""
    labels = np.asarray(labels)
    n = dist.shape[0]
    if dist.values.ndim != 2 or dist.shape != (n, n) or labels.shape != (n,):
        raise ConfigError(
            f"distance matrix {dist.shape} and labels {labels.shape} are inconsistent")
    genuine_idx, impostor_idx = pair_indices(labels, ordered=ordered)
    if genuine_idx.size == 0:
        raise InsufficientScoresError("genuine", 0, 1)
    if impostor_idx.size == 0:
        raise InsufficientScoresError("impostor", 0, 1)
    return ScorePartition(
        genuine=ad.take(dist, genuine_idx),
        impostor=ad.take(dist, impostor_idx),
    )


def decidability(p: ScorePartition) -> DecidabilityStats:
    """Separation index of the two score distributions (population moments).

    Differentiable everywhere except mu_I == mu_G exactly, where the
    subgradient 0 is used.
    """
    for tag, scores in (("genuine", p.genuine), ("impostor", p.impostor)):
        if scores.values.shape[0] < 2:
            raise InsufficientScoresError(tag, scores.values.shape[0], 2)
    mu_g, var_g = ad.masked_moments(p.genuine, name="genuine")
    mu_i, var_i = ad.masked_moments(p.impostor, name="impostor")
    spread = ad.sqrt((var_g + var_i) * 0.5 + VARIANCE_EPS)
    index = ad.absolute(mu_i - mu_g) / spread
    return DecidabilityStats(mu_g, mu_i, var_g, var_i, index)


def d_loss(embeddings: Tensor, labels: np.ndarray) -> Tensor:
    """Reciprocal decidability of the batch's score distributions."""
    dist = ad.pairwise_distances(embeddings)
    stats = decidability(partition_scores(dist, labels))
    return 1.0 / (stats.decidability + DLOSS_EPS)


def triplet_semihard_loss(embeddings: Tensor, labels: np.ndarray,
                          params: TripletParams = TripletParams()) -> Tensor:
    """Semi-hard triplet loss with squared distances inside the hinge.

    For every ordered anchor-positive pair, the negative is the closest one
    farther from the anchor than the positive (semi-hard); if none exists,
    the farthest negative. Mining is done on detached distance values; ties
    resolve to the lowest index.
    """
    labels = np.asarray(labels)
    dist = ad.pairwise_distances(embeddings)
    d = dist.values
    n = d.shape[0]

    ap_idx: list[int] = []
    an_idx: list[int] = []
    for a in range(n):
        positives = np.flatnonzero((labels == labels[a]) & (np.arange(n) != a))
        negatives = np.flatnonzero(labels != labels[a])
        if positives.size == 0 or negatives.size == 0:
            continue
        d_neg = d[a, negatives]
        for pos in positives:
            beyond = d_neg > d[a, pos]
            if beyond.any():
                masked = np.where(beyond, d_neg, np.inf)
                neg = negatives[int(np.argmin(masked))]
            else:
                neg = negatives[int(np.argmax(d_neg))]
            ap_idx.append(a * n + pos)
            an_idx.append(a * n + neg)
    if not ap_idx:
        raise InsufficientPairsError("no anchor has both a positive and a negative")

    squared = ad.mul(dist, dist)
    d_ap = ad.take(squared, np.asarray(ap_idx))
    d_an = ad.take(squared, np.asarray(an_idx))
    hinge = ad.relu(d_ap - d_an + params.margin)
    return ad.tensor_sum(hinge) * (1.0 / len(ap_idx))


def multi_similarity_loss(embeddings: Tensor, labels: np.ndarray,
                          params: MultiSimilarityParams = MultiSimilarityParams()) -> Tensor:
    """Two-step pair mining + weighting on cosine similarities.

    Expects L2-normalized embeddings so the Gram matrix holds cosines.
    Per anchor, positives harder than the hardest negative (within the
    mining margin) and negatives harder than the easiest positive are kept;
    when the opposite set is empty the bound is vacuous and everything is
    kept. Anchors without positives are skipped.
    """
    labels = np.asarray(labels)
    sims = ad.matmul(embeddings, ad.transpose(embeddings))
    s = sims.values
    n = s.shape[0]

    terms: list[Tensor] = []
    anchors = 0
    for a in range(n):
        positives = np.flatnonzero((labels == labels[a]) & (np.arange(n) != a))
        if positives.size == 0:
            continue
        anchors += 1
        negatives = np.flatnonzero(labels != labels[a])

        pos_keep = positives
        if negatives.size:
            pos_keep = positives[s[a, positives] < s[a, negatives].max() + params.mining_margin]
        neg_keep = negatives[s[a, negatives] > s[a, positives].min() - params.mining_margin] \
            if negatives.size else negatives

        if pos_keep.size:
            sel = ad.take(sims, a * n + pos_keep)
            pos_sum = ad.tensor_sum(ad.exp((sel - params.offset) * (-params.alpha)))
            terms.append(ad.log(pos_sum + 1.0) * (1.0 / params.alpha))
        if neg_keep.size:
            sel = ad.take(sims, a * n + neg_keep)
            neg_sum = ad.tensor_sum(ad.exp((sel - params.offset) * params.beta))
            terms.append(ad.log(neg_sum + 1.0) * (1.0 / params.beta))

    if anchors == 0:
        raise InsufficientPairsError("no anchor has a positive pair")
    if not terms:
        return embeddings.graph.constant(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / anchors)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Computed via log-sum-exp with per-row max subtraction, so huge logits
    do not overflow.
    """
    labels = np.asarray(labels)
    if logits.values.ndim != 2:
        raise ConfigError(f"logits must be a matrix, got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ConfigError(f"labels shape {labels.shape} does not match batch {n}")
    labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= c:
        bad = labels[(labels < 0) | (labels >= c)]
        raise LabelError(f"labels {sorted(set(int(b) for b in bad))} outside [0, {c})")

    row_max = logits.values.max(axis=1)
    graph = logits.graph
    shifted = logits - graph.constant(np.repeat(row_max[:, None], c, axis=1))
    log_sum = ad.log(ad.tensor_sum(ad.exp(shifted), axis=1)) + graph.constant(row_max)
    picked = ad.take(logits, np.arange(n) * c + labels)
    return ad.tensor_sum(log_sum - picked) * (1.0 / n)
