"""Training loop: Adam updates, epoch management, checkpoints, history.

Determinism contract: (seed, config, dataset) fully determines the batch
sequence, the parameter trajectory and the recorded history, bit-exactly,
across runs and across resumes. The batch order is derived statelessly
from (seed, epoch), which is also what makes the fair-comparison protocol
hold: for a fixed seed every loss kind sees the identical batch sequence.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import losses as lossmod
from . import metrics as metricsmod
from .errors import (
    CheckpointVersionError,
    ConfigError,
    DataFormatError,
    GradientCoverageError,
    InsufficientPairsError,
    InsufficientScoresError,
    IntegrityError,
    TrainingAbortedError,
)
from .model import ClassifierHead, EmbeddingNet, build_head, build_mlp, classify

log = logging.getLogger(__name__)

LOSS_KINDS = ("dloss", "triplet", "multisim", "softmax")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"DLOSSCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    loss: str = "dloss"
    loss_params: dict = field(default_factory=dict)
    batch_size: int = 400
    epochs: int = 20
    learning_rate: float = 1e-3
    seed: int = 1
    embedding_dim: int = 256
    layer_sizes: list = field(default_factory=lambda: [784, 256, 256])
    eval_every: int = 1
    precision: int = 32
    sampler: str = "uniform"
    normalize: bool = True

    def validate(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if len(self.layer_sizes) < 2:
            raise ConfigError(f"layer_sizes needs >= 2 entries, got {self.layer_sizes}")
        if self.layer_sizes[-1] != self.embedding_dim:
            raise ConfigError(
                f"last layer size {self.layer_sizes[-1]} != embedding_dim {self.embedding_dim}")
        return self

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_decidability: float
    val_eer: float
    seconds: float = 0.0  # deterministic placeholder; wall-clock lives in the manifest
    skipped_batches: int = 0


@dataclass
class History:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    @property
    def last(self) -> EpochRecord | None:
        return self.records[-1] if self.records else None

    @property
    def best_val_eer(self) -> float:
        evaluated = [r.val_eer for r in self.records if not np.isnan(r.val_eer)]
        return min(evaluated) if evaluated else float("nan")


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    params: dict            # name -> ndarray (net and, for softmax, head)
    adam: AdamState
    epoch: int              # completed epochs
    rng_state: dict         # sampler derivation record (stateless: seed only)
    history: History
    num_classes: int


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update with bias correction, in place; t advances once.

    Every trainable parameter must have a gradient entry; a missing one is
    a wiring bug and raises immediately.
    """
    for name in params:
        if name not in grads:
            raise GradientCoverageError(f"no gradient for trainable parameter {name!r}")
    state.t += 1
    t = state.t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.dtype)


def _batch_loss(config: TrainConfig, net: EmbeddingNet, head: ClassifierHead | None,
                batch: datamod.LabeledBatch, graph: ad.Graph):
    bound = net.bind(graph)
    embeddings = net.forward(graph.constant(batch.inputs), bound)
    if config.loss == "dloss":
        loss = lossmod.d_loss(embeddings, batch.labels)
    elif config.loss == "triplet":
        loss = lossmod.triplet_semihard_loss(
            embeddings, batch.labels, lossmod.TripletParams(**config.loss_params))
    elif config.loss == "multisim":
        loss = lossmod.multi_similarity_loss(
            embeddings, batch.labels, lossmod.MultiSimilarityParams(**config.loss_params))
    else:
        head_bound = head.bind(graph)
        bound.update(head_bound)
        logits = classify(head, embeddings, head_bound)
        loss = lossmod.softmax_cross_entropy(logits, batch.labels)
    return loss, bound


def _validation_metrics(net: EmbeddingNet, val: datamod.Dataset) -> tuple[float, float]:
    embeddings = net.embed_array(val.samples)
    dist = metricsmod.distance_matrix(embeddings)
    genuine, impostor = metricsmod.partition_arrays(dist, val.labels)
    stats = metricsmod.decidability_stats(genuine, impostor)
    curve = metricsmod.error_curve(genuine, impostor)
    return stats.decidability, metricsmod.eer(curve)


def train(config: TrainConfig, train_ds: datamod.Dataset, val_ds: datamod.Dataset,
          resume: Checkpoint | None = None, progress=None):
    """Run the optimization loop; returns (net, history, checkpoint).

    Batches whose score partitions degenerate (e.g. no genuine pair) are
    skipped with a warning; more than half an epoch skipped aborts the run.
    ``progress`` receives one EpochRecord per epoch when given.
    """
    config.validate()
    if train_ds.num_features != config.layer_sizes[0]:
        raise ConfigError(
            f"dataset width {train_ds.num_features} != first layer {config.layer_sizes[0]}")
    if config.batch_size > train_ds.num_samples:
        raise ConfigError(
            f"batch size {config.batch_size} exceeds training set {train_ds.num_samples}")

    dtype = config.dtype
    num_classes = train_ds.num_classes
    if resume is not None:
        if not _config_compatible(resume.config, config):
            raise ConfigError("resume checkpoint was produced by a different config")
        net, head = _rebuild_models(config, resume.params, num_classes)
        # private copies: training must not mutate the caller's checkpoint
        adam = AdamState(m={k: np.array(v) for k, v in resume.adam.m.items()},
                         v={k: np.array(v) for k, v in resume.adam.v.items()},
                         t=resume.adam.t)
        history = History(list(resume.history.records))
        start_epoch = resume.epoch
    else:
        net = build_mlp(config.layer_sizes, config.seed, config.normalize, dtype)
        head = (build_head(config.embedding_dim, num_classes, config.seed, dtype)
                if config.loss == "softmax" else None)
        adam = AdamState()
        history = History()
        start_epoch = 0

    params = dict(net.params)
    if head is not None:
        params.update(head.params)

    sampler = datamod.SamplerConfig(batch_size=config.batch_size, seed=config.seed,
                                    strategy=config.sampler)
    per_epoch = datamod.batches_per_epoch(train_ds.num_samples, config.batch_size)

    for epoch in range(start_epoch, config.epochs):
        batch_losses = []
        skipped = 0
        for offset in range(per_epoch):
            step = epoch * per_epoch + offset
            batch = sample_cast(train_ds, sampler, step, dtype)
            graph = ad.Graph(dtype)
            try:
                loss, bound = _batch_loss(config, net, head, batch, graph)
            except (InsufficientScoresError, InsufficientPairsError) as exc:
                skipped += 1
                log.warning("skipping batch at step %d: %s", step, exc)
                continue
            gmap = ad.backward(loss)
            grads = {name: gmap[tensor.node_id] for name, tensor in bound.items()
                     if tensor.node_id in gmap}
            adam_step(params, grads, adam, config.learning_rate)
            batch_losses.append(loss.item())
        if skipped * 2 > per_epoch:
            raise TrainingAbortedError(
                f"epoch {epoch}: {skipped}/{per_epoch} batches skipped; "
                f"sampler cannot form usable batches")

        if (epoch + 1) % config.eval_every == 0:
            val_dec, val_eer = _validation_metrics(net, val_ds)
        else:
            val_dec, val_eer = float("nan"), float("nan")
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)) if batch_losses else float("nan"),
            val_decidability=val_dec,
            val_eer=val_eer,
            skipped_batches=skipped,
        )
        history.append(record)
        if progress is not None:
            progress(record)

    checkpoint = Checkpoint(
        version=CHECKPOINT_VERSION,
        config=config,
        params={name: np.array(value) for name, value in params.items()},
        adam=AdamState(m={k: np.array(v) for k, v in adam.m.items()},
                       v={k: np.array(v) for k, v in adam.v.items()},
                       t=adam.t),
        epoch=config.epochs,
        rng_state={"kind": "stateless", "seed": config.seed},
        history=history,
        num_classes=num_classes,
    )
    return net, history, checkpoint


def sample_cast(ds, sampler, step, dtype):
    batch = datamod.sample_batch(ds, sampler, step)
    return datamod.LabeledBatch(inputs=batch.inputs.astype(dtype),
                                labels=batch.labels, indices=batch.indices)


def _config_compatible(saved: TrainConfig, requested: TrainConfig) -> bool:
    # Resuming to a larger epoch budget is the point of resuming; everything
    # else must match exactly or the trajectory would diverge.
    a, b = asdict(saved), asdict(requested)
    a.pop("epochs")
    b.pop("epochs")
    return a == b


def _rebuild_models(config: TrainConfig, params: dict, num_classes: int):
    net = build_mlp(config.layer_sizes, config.seed, config.normalize, config.dtype)
    for name in net.params:
        net.params[name] = np.array(params[name])
    head = None
    if config.loss == "softmax":
        head = build_head(config.embedding_dim, num_classes, config.seed, config.dtype)
        for name in head.params:
            head.params[name] = np.array(params[name])
    return net, head


def rebuild_net(checkpoint: Checkpoint) -> EmbeddingNet:
    net, _ = _rebuild_models(checkpoint.config, checkpoint.params, checkpoint.num_classes)
    return net


# -- checkpoint container ----------------------------------------------------
#
# magic "DLOSSCKPT" | u32 version | u64 meta length | meta JSON |
# u32 array count | per array: u32 name length, name, u32 ndim, u32 dims...,
# u64 byte length, raw little-endian floats | 8-byte blake2b of everything
# after the version field.


def _meta_dict(cp: Checkpoint) -> dict:
    return {
        "config": asdict(cp.config),
        "epoch": cp.epoch,
        "num_classes": cp.num_classes,
        "rng_state": cp.rng_state,
        "adam_t": cp.adam.t,
        "history": [asdict(r) for r in cp.history.records],
    }


def save_checkpoint(cp: Checkpoint, path) -> None:
    dtype = "<f8" if cp.config.precision == 64 else "<f4"
    arrays = []
    for prefix, group in (("param/", cp.params), ("adam_m/", cp.adam.m), ("adam_v/", cp.adam.v)):
        for name in sorted(group):
            arrays.append((prefix + name, np.ascontiguousarray(group[name], dtype=dtype)))

    meta = json.dumps(_meta_dict(cp), sort_keys=True, separators=(",", ":")).encode()
    body = bytearray()
    body += struct.pack("<Q", len(meta))
    body += meta
    body += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        encoded = name.encode()
        body += struct.pack("<I", len(encoded))
        body += encoded
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        raw = arr.tobytes()
        body += struct.pack("<Q", len(raw))
        body += raw
    digest = hashlib.blake2b(bytes(body), digest_size=8).digest()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(body)
        f.write(digest)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 or not raw.startswith(CHECKPOINT_MAGIC):
        raise DataFormatError(f"{path}: not a DLOSSCKPT checkpoint")
    version = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, this build supports {CHECKPOINT_VERSION}")
    body = raw[len(CHECKPOINT_MAGIC) + 4:-8]
    digest = raw[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise IntegrityError(f"{path}: payload checksum mismatch")

    view = memoryview(body)
    pos = 0

    def unpack(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    try:
        (meta_len,) = unpack("<Q")
        meta = json.loads(bytes(view[pos:pos + meta_len]).decode())
        pos += meta_len
        config = TrainConfig(**meta["config"])
        dtype = "<f8" if config.precision == 64 else "<f4"

        (count,) = unpack("<I")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = unpack("<I")
            name = bytes(view[pos:pos + name_len]).decode()
            pos += name_len
            (ndim,) = unpack("<I")
            shape = unpack(f"<{ndim}I")
            (nbytes,) = unpack("<Q")
            arrays[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: malformed checkpoint body ({exc})") from exc
    if pos != len(body):
        raise IntegrityError(f"{path}: {len(body) - pos} trailing bytes after arrays")

    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    adam = AdamState(
        m={k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
        t=meta["adam_t"],
    )
    history = History([EpochRecord(**r) for r in meta["history"]])
    return Checkpoint(version=version, config=config, params=params, adam=adam,
                      epoch=meta["epoch"], rng_state=meta["rng_state"],
                      history=history, num_classes=meta["num_classes"])
