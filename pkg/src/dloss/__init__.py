"""Decidability-based deep metric learning toolkit.

Trains embedding models with the D-loss (reciprocal decidability of the
genuine/impostor score distributions) and three baselines on a minimal
reverse-mode autodiff engine, and evaluates them with biometric
verification metrics (EER, FAR/FRR, ROC, Recall@K, decidability).
"""

import os

# Cap kernel parallelism before numpy is first imported; no effect if the
# interpreter already loaded numpy.
_threads = os.environ.get("DLOSS_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import autodiff, data, losses, metrics, model, trainer  # noqa: E402
from .autodiff import (  # noqa: E402
    Graph,
    Tensor,
    backward,
    finite_difference_check,
    l2_normalize_rows,
    masked_moments,
    matmul,
    pairwise_distances,
    relu,
)
from .data import Dataset, LabeledBatch, SamplerConfig, load_idx, synthetic_blobs  # noqa: E402
from .losses import (  # noqa: E402
    DecidabilityStats,
    MultiSimilarityParams,
    ScorePartition,
    TripletParams,
    d_loss,
    decidability,
    multi_similarity_loss,
    partition_scores,
    softmax_cross_entropy,
    triplet_semihard_loss,
)
from .metrics import EvalConfig, EvalReport, eer, error_curve, evaluate, histogram, recall_at_k  # noqa: E402
from .model import ClassifierHead, EmbeddingNet, build_mlp, classify, embed  # noqa: E402
from .trainer import (  # noqa: E402
    AdamState,
    Checkpoint,
    History,
    TrainConfig,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    train,
)
