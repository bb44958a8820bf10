"""Shared fixtures and independent oracle implementations.

The oracles here are deliberately written as plain loops over Python
floats, independent of the package's vectorized paths.
"""

import math
import os
from pathlib import Path

import numpy as np
import pytest


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture
def rng1():
    return rng(1)


# -- independent oracles ------------------------------------------------------

def oracle_pairwise(e):
    """Naive double-loop Euclidean distance matrix."""
    n = len(e)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = math.sqrt(sum((a - b) ** 2 for a, b in zip(e[i], e[j])))
    return out


def oracle_partition(dist, labels, ordered=False):
    """Literal double loop: genuine if same label and i != j, else impostor."""
    n = len(labels)
    genuine, impostor = [], []
    for i in range(n):
        for j in range(n):
            if ordered:
                if i == j:
                    continue
            elif j <= i:
                continue
            if labels[i] == labels[j]:
                genuine.append(dist[i][j])
            else:
                impostor.append(dist[i][j])
    return genuine, impostor


def oracle_decidability(genuine, impostor):
    """Two-pass scalar moments and the separation index."""
    def moments(xs):
        mu = sum(xs) / len(xs)
        var = sum((x - mu) ** 2 for x in xs) / len(xs)
        return mu, var

    mu_g, var_g = moments([float(x) for x in genuine])
    mu_i, var_i = moments([float(x) for x in impostor])
    return abs(mu_i - mu_g) / math.sqrt((var_g + var_i) / 2.0)


def oracle_triplet_semihard(embeddings, labels, margin):
    """Exhaustive mining over all (anchor, positive, negative) triples."""
    dist = oracle_pairwise(embeddings)
    n = len(labels)
    hinges = []
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            negatives = [j for j in range(n) if labels[j] != labels[a]]
            if not negatives:
                continue
            semihard = [j for j in negatives if dist[a][j] > dist[a][p]]
            pool = semihard if semihard else negatives
            if semihard:
                best = min(pool, key=lambda j: (dist[a][j], j))
            else:
                best = max(pool, key=lambda j: (dist[a][j], -j))
            hinges.append(max(0.0, dist[a][p] ** 2 - dist[a][best] ** 2 + margin))
    return sum(hinges) / len(hinges)


def oracle_multi_similarity(embeddings, labels, alpha, beta, offset, margin):
    """Per-anchor scalar mining + weighting with cosine similarities."""
    e = np.asarray(embeddings, dtype=np.float64)
    sims = e @ e.T
    n = len(labels)
    total, anchors = 0.0, 0
    for a in range(n):
        pos = [j for j in range(n) if j != a and labels[j] == labels[a]]
        if not pos:
            continue
        anchors += 1
        neg = [j for j in range(n) if labels[j] != labels[a]]
        if neg:
            hardest_neg = max(sims[a][j] for j in neg)
            pos_keep = [j for j in pos if sims[a][j] < hardest_neg + margin]
        else:
            pos_keep = pos
        easiest_pos = min(sims[a][j] for j in pos)
        neg_keep = [j for j in neg if sims[a][j] > easiest_pos - margin]
        if pos_keep:
            total += math.log1p(sum(math.exp(-alpha * (sims[a][j] - offset))
                                    for j in pos_keep)) / alpha
        if neg_keep:
            total += math.log1p(sum(math.exp(beta * (sims[a][j] - offset))
                                    for j in neg_keep)) / beta
    return total / anchors


def oracle_softmax_ce(logits, labels):
    """Naive exp/sum cross entropy in float64."""
    total = 0.0
    for row, y in zip(logits, labels):
        exps = [math.exp(v) for v in row]
        total += -math.log(exps[int(y)] / sum(exps))
    return total / len(labels)


def oracle_far_frr(genuine, impostor, threshold):
    far = sum(1 for s in impostor if s < threshold) / len(impostor)
    frr = sum(1 for s in genuine if s >= threshold) / len(genuine)
    return far, frr


def oracle_recall_at_k(embeddings, labels, k):
    """Full sort of all gallery distances per query, ties to lower index."""
    dist = oracle_pairwise(embeddings)
    n = len(labels)
    hits = 0
    for q in range(n):
        others = sorted((j for j in range(n) if j != q),
                        key=lambda j: (dist[q][j], j))
        if any(labels[j] == labels[q] for j in others[:k]):
            hits += 1
    return hits / n


# -- shared data helpers -------------------------------------------------------

def random_batch(seed, n=20, classes=4, dim=8):
    g = rng(seed)
    x = g.normal(size=(n, dim))
    labels = np.arange(n, dtype=np.int64) % classes
    return x, labels


def mnist_dir():
    """Directory with the real MNIST IDX files, if available."""
    candidates = []
    env = os.environ.get("DLOSS_MNIST_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).resolve().parent.parent / "data" / "mnist")
    for cand in candidates:
        for suffix in ("", ".gz"):
            if (cand / ("train-images-idx3-ubyte" + suffix)).exists():
                return cand
    return None


requires_mnist = pytest.mark.skipif(
    mnist_dir() is None,
    reason="real MNIST IDX files not present (set DLOSS_MNIST_DIR or place them "
           "under data/mnist; see scripts/fetch_mnist.py)")
