"""Command-line surface: train, evaluate, export-scores, gradcheck.

Exit codes are a stable contract: 0 success, 1 gradient-check failure,
2 configuration error, 3 data/IO error, 4 training abort, 5 metric
precondition violation.

Every run directory holds exactly one manifest.json (resolved config,
dataset fingerprints, timestamps, final metrics), a checkpoint.bin and a
history.csv. history.csv is byte-reproducible for identical invocations;
wall-clock timing therefore lives in the manifest and on stdout only.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import data as datamod
from . import losses as lossmod
from . import metrics as metricsmod
from . import trainer as trainermod
from .errors import (
    CheckpointVersionError,
    ConfigError,
    DataFormatError,
    DlossError,
    InsufficientPairsError,
    InsufficientScoresError,
    IntegrityError,
    LabelError,
    ShapeError,
    SingletonClassError,
    StratificationError,
    TrainingAbortedError,
)
from .model import build_head

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ABORTED = 4
EXIT_METRIC = 5

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

DATASET_DEFAULTS = {
    "kind": "idx",
    "classes": 5,
    "dim": 16,
    "center_spread": 2.0,
    "within_std": 0.15,
    "per_class": 50,
    "seed": 7,
}

CONFIG_DEFAULTS = {
    "loss": "dloss",
    "loss_params": {},
    "batch_size": 400,
    "epochs": 20,
    "learning_rate": 1e-3,
    "seed": 1,
    "embedding_dim": 256,
    "layer_sizes": [784, 256, 256],
    "eval_every": 1,
    "precision": 32,
    "sampler": "uniform",
    "normalize": True,
    "val_fraction": 0.3,
    "subset": None,
    "dataset": DATASET_DEFAULTS,
    "data_dir": None,
}


def _fmt(x) -> str:
    """Round-trip-exact decimal rendering for CSV fields."""
    return repr(float(x))


def _write_lines(path: Path, lines) -> None:
    path.write_text("\n".join(lines) + "\n")


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _resolve_config(args) -> dict:
    """Merge defaults <- config file <- command-line flags."""
    resolved = json.loads(json.dumps(CONFIG_DEFAULTS))  # deep copy
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(resolved)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        dataset = {**resolved["dataset"], **loaded.pop("dataset", {})}
        resolved.update(loaded)
        resolved["dataset"] = dataset
    overrides = {
        "loss": args.loss,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "precision": args.precision,
        "sampler": args.sampler,
        "val_fraction": args.val_fraction,
        "subset": args.subset,
        "data_dir": args.data_dir,
    }
    if args.layer_sizes:
        overrides["layer_sizes"] = [int(s) for s in args.layer_sizes.split(",")]
        overrides["embedding_dim"] = overrides["layer_sizes"][-1]
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _train_config(resolved: dict) -> trainermod.TrainConfig:
    fields = {k: resolved[k] for k in (
        "loss", "loss_params", "batch_size", "epochs", "learning_rate", "seed",
        "embedding_dim", "layer_sizes", "eval_every", "precision", "sampler",
        "normalize")}
    return trainermod.TrainConfig(**fields).validate()


def _find_idx_pair(data_dir: Path, names) -> tuple[Path, Path]:
    pair = []
    for stem in names:
        for candidate in (data_dir / stem, data_dir / (stem + ".gz")):
            if candidate.exists():
                pair.append(candidate)
                break
        else:
            raise DataFormatError(f"missing {stem}[.gz] in {data_dir}")
    return pair[0], pair[1]


def _load_dataset(resolved: dict, split_files=TRAIN_FILES) -> datamod.Dataset:
    spec = resolved["dataset"]
    if spec["kind"] == "blobs":
        return datamod.synthetic_blobs(
            classes=spec["classes"], dim=spec["dim"],
            center_spread=spec["center_spread"], within_std=spec["within_std"],
            per_class=spec["per_class"], seed=spec["seed"])
    if spec["kind"] != "idx":
        raise ConfigError(f"unknown dataset kind {spec['kind']!r}")
    if not resolved.get("data_dir"):
        raise ConfigError("dataset kind 'idx' needs --data-dir")
    images, labels = _find_idx_pair(Path(resolved["data_dir"]), split_files)
    return datamod.load_idx(images, labels)


def _train_val_split(resolved: dict):
    ds = _load_dataset(resolved)
    if resolved["subset"]:
        ds = datamod.stratified_subset(ds, int(resolved["subset"]), resolved["seed"])
    return datamod.split_train_val(ds, resolved["val_fraction"], resolved["seed"])


def cmd_train(args) -> int:
    resolved = _resolve_config(args)
    config = _train_config(resolved)
    train_ds, val_ds = _train_val_split(resolved)

    resume = trainermod.load_checkpoint(args.resume) if args.resume else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _utc_now()
    t0 = time.perf_counter()
    last_tick = [t0]

    def progress(record):
        now = time.perf_counter()
        line = (f"epoch {record.epoch + 1}/{config.epochs} "
                f"loss {record.train_loss:.6f} "
                f"val_eer {record.val_eer:.4%} "
                f"val_decidability {record.val_decidability:.4f} "
                f"[{now - last_tick[0]:.1f}s]")
        if record.skipped_batches:
            line += f" (skipped {record.skipped_batches} batches)"
        print(line)
        last_tick[0] = now

    net, history, checkpoint = trainermod.train(config, train_ds, val_ds,
                                                resume=resume, progress=progress)
    finished = _utc_now()

    trainermod.save_checkpoint(checkpoint, out / "checkpoint.bin")
    _write_history_csv(out / "history.csv", history)

    last = history.last
    manifest = {
        "tool_version": __version__,
        "config": resolved,
        "dataset_fingerprints": {"train": train_ds.fingerprint(),
                                 "val": val_ds.fingerprint()},
        "started_at": started,
        "finished_at": finished,
        "total_seconds": time.perf_counter() - t0,
        "final_metrics": {
            "train_loss": last.train_loss if last else None,
            "val_eer": last.val_eer if last else None,
            "val_decidability": last.val_decidability if last else None,
            "best_val_eer": history.best_val_eer if last else None,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"run complete: {out}/checkpoint.bin, manifest.json, history.csv")
    return EXIT_OK


def _write_history_csv(path: Path, history: trainermod.History) -> None:
    lines = ["epoch,train_loss,val_decidability,val_eer,seconds"]
    for r in history.records:
        lines.append(",".join([str(r.epoch), _fmt(r.train_loss), _fmt(r.val_decidability),
                               _fmt(r.val_eer), _fmt(r.seconds)]))
    _write_lines(path, lines)


def _load_run(args):
    checkpoint = trainermod.load_checkpoint(args.checkpoint)
    manifest_path = Path(args.checkpoint).parent / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"no manifest.json next to {args.checkpoint}")
    resolved = json.loads(manifest_path.read_text())["config"]
    if args.data_dir:
        resolved["data_dir"] = args.data_dir
    return checkpoint, resolved


def _split_dataset(resolved: dict, split: str) -> datamod.Dataset:
    if split == "test":
        if resolved["dataset"]["kind"] != "idx":
            raise DataFormatError("synthetic datasets have no test split")
        return _load_dataset(resolved, split_files=TEST_FILES)
    train_ds, val_ds = _train_val_split(resolved)
    return train_ds if split == "train" else val_ds


def _embeddings_for(checkpoint, dataset):
    net = trainermod.rebuild_net(checkpoint)
    return net.embed_array(dataset.samples.astype(checkpoint.config.dtype))


def _write_scores_csv(path: Path, genuine, impostor) -> None:
    lines = ["pair_type,score"]
    lines += [f"genuine,{_fmt(s)}" for s in genuine]
    lines += [f"impostor,{_fmt(s)}" for s in impostor]
    _write_lines(path, lines)


def _write_hist_csv(path: Path, hist_genuine, hist_impostor) -> None:
    lines = ["bin_lo,bin_hi,genuine,impostor"]
    edges = hist_genuine.bin_edges
    for i in range(len(hist_genuine.counts)):
        lines.append(",".join([_fmt(edges[i]), _fmt(edges[i + 1]),
                               str(int(hist_genuine.counts[i])),
                               str(int(hist_impostor.counts[i]))]))
    _write_lines(path, lines)


def _write_roc_csv(path: Path, curve) -> None:
    lines = ["threshold,far,frr,car"]
    for c, far, frr in zip(curve.thresholds, curve.far, curve.frr):
        lines.append(",".join([_fmt(c), _fmt(far), _fmt(frr), _fmt(1.0 - frr)]))
    _write_lines(path, lines)


def cmd_evaluate(args) -> int:
    checkpoint, resolved = _load_run(args)
    dataset = _split_dataset(resolved, args.split)
    embeddings = _embeddings_for(checkpoint, dataset)
    report = metricsmod.evaluate(embeddings, dataset.labels)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "split": args.split,
        "eer": report.eer,
        "decidability": report.stats.decidability,
        "mu_genuine": report.stats.mu_genuine,
        "mu_impostor": report.stats.mu_impostor,
        "var_genuine": report.stats.var_genuine,
        "var_impostor": report.stats.var_impostor,
        "recall_at_k": {str(k): v for k, v in report.recall_at_k.items()},
        "num_genuine": report.num_genuine,
        "num_impostor": report.num_impostor,
        "num_samples": int(dataset.num_samples),
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_roc_csv(out / "roc.csv", report.curve)
    _write_hist_csv(out / "hist.csv", report.hist_genuine, report.hist_impostor)
    _write_scores_csv(out / "scores.csv", report.genuine_scores, report.impostor_scores)
    print(f"eer {report.eer:.4%}  decidability {report.stats.decidability:.4f}  "
          f"recall@1 {report.recall_at_k[1]:.4f}")
    return EXIT_OK


def cmd_export_scores(args) -> int:
    checkpoint, resolved = _load_run(args)
    dataset = _split_dataset(resolved, args.split)
    embeddings = _embeddings_for(checkpoint, dataset)
    dist = metricsmod.distance_matrix(embeddings)
    genuine, impostor = metricsmod.partition_arrays(dist, dataset.labels)
    pooled = (float(min(genuine.min(), impostor.min())),
              float(max(genuine.max(), impostor.max())))
    hist_g = metricsmod.histogram(genuine, args.bins, pooled, tag="genuine")
    hist_i = metricsmod.histogram(impostor, args.bins, pooled, tag="impostor")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_scores_csv(out / "scores.csv", genuine, impostor)
    _write_hist_csv(out / "hist.csv", hist_g, hist_i)
    print(f"wrote {genuine.size} genuine and {impostor.size} impostor scores")
    return EXIT_OK


def _gradcheck_fn(loss: str, labels: np.ndarray, classes: int, dim: int, seed: int):
    head = (build_head(dim, classes, seed, dtype=np.float64)
            if loss == "softmax" else None)

    def fn(x):
        emb = ad.l2_normalize_rows(x)
        if loss == "dloss":
            return lossmod.d_loss(emb, labels)
        if loss == "triplet":
            return lossmod.triplet_semihard_loss(emb, labels)
        if loss == "multisim":
            return lossmod.multi_similarity_loss(emb, labels)
        logits = ad.matmul(emb, x.graph.constant(head.params["head.w"])) \
            + x.graph.constant(head.params["head.b"])
        return lossmod.softmax_cross_entropy(logits, labels)

    return fn


def cmd_gradcheck(args) -> int:
    if args.batch < 2 * args.classes:
        raise ConfigError("need at least two samples per class for score partitions")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([args.seed, 7])))
    x = rng.normal(size=(args.batch, args.dim))
    labels = np.arange(args.batch, dtype=np.int64) % args.classes
    fn = _gradcheck_fn(args.loss, labels, args.classes, args.dim, args.seed)
    worst, (pi, coord, analytic, numeric) = ad.finite_difference_report(fn, [x], args.step)
    print(f"{args.loss}: max relative gradient error {worst:.3e} (tolerance {args.tolerance:.1e})")
    if worst < args.tolerance:
        return EXIT_OK
    print(f"worst coordinate: flat index {coord}, analytic {analytic!r}, "
          f"numeric {numeric!r}", file=sys.stderr)
    return EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dloss",
        description="Train and evaluate embedding models with the decidability-based loss")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model and write a run directory")
    train.add_argument("--config", help="JSON config file mirroring the training fields")
    train.add_argument("--data-dir", help="directory with IDX files (MNIST layout)")
    train.add_argument("--loss", choices=trainermod.LOSS_KINDS)
    train.add_argument("--out", required=True, help="run directory to create")
    train.add_argument("--resume", help="checkpoint.bin to continue from")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--eval-every", type=int)
    train.add_argument("--precision", type=int, choices=(32, 64))
    train.add_argument("--sampler", choices=("uniform", "class-balanced"))
    train.add_argument("--val-fraction", type=float)
    train.add_argument("--subset", type=int, help="stratified training subset size")
    train.add_argument("--layer-sizes", help="comma-separated, e.g. 784,256,256")
    train.set_defaults(func=cmd_train)

    for name, func in (("evaluate", cmd_evaluate), ("export-scores", cmd_export_scores)):
        cmd = sub.add_parser(name, help=f"{name} a trained checkpoint")
        cmd.add_argument("--checkpoint", required=True)
        cmd.add_argument("--data-dir")
        cmd.add_argument("--split", choices=("train", "val", "test"), default="val")
        cmd.add_argument("--out", required=True)
        if name == "export-scores":
            cmd.add_argument("--bins", type=int, default=metricsmod.DEFAULT_BINS)
        cmd.set_defaults(func=func)

    grad = sub.add_parser("gradcheck", help="finite-difference check of a loss gradient")
    grad.add_argument("--loss", choices=trainermod.LOSS_KINDS, required=True)
    grad.add_argument("--seed", type=int, default=1)
    grad.add_argument("--batch", type=int, default=20)
    grad.add_argument("--classes", type=int, default=4)
    grad.add_argument("--dim", type=int, default=8)
    grad.add_argument("--step", type=float, default=1e-5)
    grad.add_argument("--tolerance", type=float, default=1e-4)
    grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingletonClassError, InsufficientScoresError, InsufficientPairsError,
            LabelError) as exc:
        print(f"metric precondition failed: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except TrainingAbortedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (DataFormatError, StratificationError, CheckpointVersionError, IntegrityError,
            ShapeError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DlossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
