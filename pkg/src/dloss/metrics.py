"""Verification-style evaluation of embeddings.

Scores are Euclidean dissimilarities: a pair is accepted when its score is
strictly below the criterion threshold, rejected otherwise. Everything
here is plain numpy on detached values (the differentiable path lives in
the losses module).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, InsufficientScoresError, SingletonClassError
from .losses import pair_indices

DEFAULT_THRESHOLDS = 10_000
DEFAULT_BINS = 100
DEFAULT_KS = (1, 2, 4, 8)


@dataclass
class Histogram:
    bin_edges: np.ndarray  # ascending, length B+1
    counts: np.ndarray     # length B
    tag: str = ""


@dataclass
class ErrorCurve:
    thresholds: np.ndarray
    far: np.ndarray  # fraction of impostor scores accepted (score < C)
    frr: np.ndarray  # fraction of genuine scores rejected (score >= C)


@dataclass
class ScoreStats:
    mu_genuine: float
    mu_impostor: float
    var_genuine: float
    var_impostor: float
    decidability: float


@dataclass
class EvalConfig:
    num_thresholds: int = DEFAULT_THRESHOLDS
    num_bins: int = DEFAULT_BINS
    ks: tuple = DEFAULT_KS


@dataclass
class EvalReport:
    eer: float
    stats: ScoreStats
    curve: ErrorCurve
    recall_at_k: dict
    hist_genuine: Histogram
    hist_impostor: Histogram
    num_genuine: int
    num_impostor: int
    genuine_scores: np.ndarray = field(repr=False, default=None)
    impostor_scores: np.ndarray = field(repr=False, default=None)

    @property
    def car(self) -> np.ndarray:
        return 1.0 - self.curve.frr


def _scores(values) -> np.ndarray:
    arr = getattr(values, "values", values)
    return np.asarray(arr, dtype=np.float64).reshape(-1)


def histogram(scores, num_bins: int, value_range: tuple | None = None,
              tag: str = "") -> Histogram:
    """Equal-width frequency counts; right-open bins except the last."""
    scores = _scores(scores)
    if scores.size == 0:
        raise DataFormatError("cannot histogram an empty score list")
    if num_bins < 1:
        raise ConfigError(f"num_bins must be >= 1, got {num_bins}")
    counts, edges = np.histogram(scores, bins=num_bins, range=value_range)
    return Histogram(bin_edges=edges, counts=counts, tag=tag)


def error_curve(genuine, impostor, num_thresholds: int = DEFAULT_THRESHOLDS) -> ErrorCurve:
    """FAR/FRR over evenly spaced criteria spanning [0, max score]."""
    genuine = np.sort(_scores(genuine))
    impostor = np.sort(_scores(impostor))
    for tag, part in (("genuine", genuine), ("impostor", impostor)):
        if part.size == 0:
            raise InsufficientScoresError(tag, 0, 1)
    if num_thresholds < 2:
        raise ConfigError(f"num_thresholds must be >= 2, got {num_thresholds}")
    top = max(genuine[-1], impostor[-1])
    thresholds = np.linspace(0.0, top, num_thresholds)
    far = np.searchsorted(impostor, thresholds, side="left") / impostor.size
    frr = (genuine.size - np.searchsorted(genuine, thresholds, side="left")) / genuine.size
    return ErrorCurve(thresholds=thresholds, far=far, frr=frr)


def eer(curve: ErrorCurve) -> float:
    """Common FAR/FRR value where the curves cross, linearly interpolated.

    If they touch over an interval, the midpoint of the interval is used.
    When no crossing exists on the grid (all scores identical, so FAR never
    rises), the midpoint value at the last threshold is returned, which is
    exactly 0.5 for coinciding distributions.
    """
    diff = curve.far - curve.frr
    if diff[-1] < 0:
        return float((curve.far[-1] + curve.frr[-1]) / 2.0)
    zeros = np.flatnonzero(diff == 0)
    if zeros.size:
        mid = zeros[(zeros.size - 1) // 2]
        return float((curve.far[mid] + curve.frr[mid]) / 2.0)
    k = int(np.flatnonzero(diff > 0)[0])
    # diff[k-1] < 0 < diff[k]; interpolate the crossing of far and frr
    t = -diff[k - 1] / (diff[k] - diff[k - 1])
    return float(curve.far[k - 1] + t * (curve.far[k] - curve.far[k - 1]))


def distance_matrix(embeddings: np.ndarray) -> np.ndarray:
    """Plain (non-differentiable) pairwise Euclidean distances."""
    e = np.asarray(embeddings, dtype=np.float64)
    sq = (e * e).sum(axis=1)
    dot = e @ e.T
    inner = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (0.5 * (dot + dot.T)), 0.0)
    np.fill_diagonal(inner, 0.0)
    return np.sqrt(inner)


def partition_arrays(dist: np.ndarray, labels: np.ndarray):
    """Genuine and impostor score vectors over unordered pairs i < j."""
    genuine_idx, impostor_idx = pair_indices(labels)
    flat = dist.reshape(-1)
    return flat[genuine_idx], flat[impostor_idx]


def decidability_stats(genuine, impostor) -> ScoreStats:
    """Two-pass population moments and the decidability index."""
    genuine = _scores(genuine)
    impostor = _scores(impostor)
    for tag, part in (("genuine", genuine), ("impostor", impostor)):
        if part.size < 2:
            raise InsufficientScoresError(tag, part.size, 2)
    mu_g = math.fsum(genuine) / genuine.size
    mu_i = math.fsum(impostor) / impostor.size
    var_g = math.fsum((genuine - mu_g) ** 2) / genuine.size
    var_i = math.fsum((impostor - mu_i) ** 2) / impostor.size
    spread = math.sqrt((var_g + var_i) / 2.0)
    index = abs(mu_i - mu_g) / spread if spread > 0 else 0.0
    return ScoreStats(mu_g, mu_i, var_g, var_i, index)


def recall_at_k(embeddings: np.ndarray, labels: np.ndarray, ks) -> dict:
    """Fraction of queries whose k nearest gallery rows share their class.

    The query is excluded from its own gallery; distance ties break to the
    lower index.
    """
    labels = np.asarray(labels)
    ks = [int(k) for k in ks]
    n = labels.shape[0]
    if sorted(ks) != ks or len(ks) == 0 or ks[0] < 1 or ks[-1] >= n:
        raise ConfigError(f"ks must be ascending with max k < {n}, got {ks}")
    classes, counts = np.unique(labels, return_counts=True)
    singles = classes[counts < 2]
    if singles.size:
        raise SingletonClassError(singles)

    dist = distance_matrix(embeddings)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    neighbor_match = labels[order[:, :ks[-1]]] == labels[:, None]
    hits = {k: float(np.mean(neighbor_match[:, :k].any(axis=1))) for k in ks}
    return hits


def evaluate(embeddings, labels, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Full verification report for a set of embeddings."""
    emb = np.asarray(getattr(embeddings, "values", embeddings), dtype=np.float64)
    labels = np.asarray(labels)
    dist = distance_matrix(emb)
    genuine, impostor = partition_arrays(dist, labels)
    for tag, part in (("genuine", genuine), ("impostor", impostor)):
        if part.size < 2:
            raise InsufficientScoresError(tag, part.size, 2)

    stats = decidability_stats(genuine, impostor)
    curve = error_curve(genuine, impostor, config.num_thresholds)
    pooled = (float(min(genuine.min(), impostor.min())),
              float(max(genuine.max(), impostor.max())))
    return EvalReport(
        eer=eer(curve),
        stats=stats,
        curve=curve,
        recall_at_k=recall_at_k(emb, labels, config.ks),
        hist_genuine=histogram(genuine, config.num_bins, pooled, tag="genuine"),
        hist_impostor=histogram(impostor, config.num_bins, pooled, tag="impostor"),
        num_genuine=int(genuine.size),
        num_impostor=int(impostor.size),
        genuine_scores=genuine,
        impostor_scores=impostor,
    )
