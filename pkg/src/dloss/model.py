"""Embedding networks and the linear classifier head.

Desk-scale stand-ins for the paper-style conv nets: plain affine+ReLU
stacks ending in an optionally L2-normalized embedding. He-uniform
initialization from a seed; identical seed gives bit-identical parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

NORMALIZE_EPS = 1e-12


class EmbeddingNet:
    """Affine+ReLU stack producing row embeddings.

    Parameters live in ``params`` as plain arrays keyed ``fc{i}.w`` /
    ``fc{i}.b``; each training step binds them as leaf tensors on that
    step's graph.
    """

    def __init__(self, layer_sizes: list[int], params: dict[str, np.ndarray],
                 normalize: bool = True):
        self.layer_sizes = list(layer_sizes)
        self.params = params
        self.normalize = normalize

    @property
    def embedding_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def bind(self, graph: ad.Graph) -> dict[str, ad.Tensor]:
        """Create requires-grad leaves for all parameters on ``graph``."""
        return {name: graph.tensor(self.params[name], requires_grad=True)
                for name in self.parameter_names()}

    def forward(self, x: ad.Tensor, bound: dict[str, ad.Tensor]) -> ad.Tensor:
        if x.values.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                f"input shape {x.shape} does not match first layer width {self.input_dim}")
        h = x
        last = len(self.layer_sizes) - 2
        for i in range(len(self.layer_sizes) - 1):
            h = ad.matmul(h, bound[f"fc{i}.w"]) + bound[f"fc{i}.b"]
            if i < last:
                h = ad.relu(h)
        if self.normalize:
            h = ad.l2_normalize_rows(h, NORMALIZE_EPS)
        return h

    def embed_array(self, x: np.ndarray) -> np.ndarray:
        """Inference forward pass without recording a graph."""
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(
                f"input shape {x.shape} does not match first layer width {self.input_dim}")
        h = np.asarray(x, dtype=next(iter(self.params.values())).dtype)
        last = len(self.layer_sizes) - 2
        for i in range(len(self.layer_sizes) - 1):
            h = h @ self.params[f"fc{i}.w"] + self.params[f"fc{i}.b"]
            if i < last:
                h = np.maximum(h, 0)
        if self.normalize:
            norms = np.sqrt((h * h).sum(axis=1))
            h = h / np.maximum(norms, NORMALIZE_EPS)[:, None]
        return h


def build_mlp(layer_sizes: list[int], seed: int, normalize: bool = True,
              dtype=np.float32) -> EmbeddingNet:
    """He-uniform initialized MLP; biases start at zero."""
    if len(layer_sizes) < 2 or any(int(s) <= 0 for s in layer_sizes):
        raise ConfigError(f"layer_sizes must be >= 2 positive integers, got {layer_sizes}")
    sizes = [int(s) for s in layer_sizes]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0])))
    params: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / fan_in)
        params[f"fc{i}.w"] = rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)
        params[f"fc{i}.b"] = np.zeros(fan_out, dtype=dtype)
    return EmbeddingNet(sizes, params, normalize=normalize)


class ClassifierHead:
    """Per-class affine map on top of the embedding (softmax baseline)."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @property
    def num_classes(self) -> int:
        return self.params["head.w"].shape[1]

    @property
    def input_dim(self) -> int:
        return self.params["head.w"].shape[0]

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def bind(self, graph: ad.Graph) -> dict[str, ad.Tensor]:
        return {name: graph.tensor(self.params[name], requires_grad=True)
                for name in self.parameter_names()}


def build_head(embedding_dim: int, num_classes: int, seed: int,
               dtype=np.float32) -> ClassifierHead:
    if embedding_dim <= 0 or num_classes <= 0:
        raise ConfigError("embedding_dim and num_classes must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 1])))
    limit = np.sqrt(6.0 / embedding_dim)
    params = {
        "head.w": rng.uniform(-limit, limit, (embedding_dim, num_classes)).astype(dtype),
        "head.b": np.zeros(num_classes, dtype=dtype),
    }
    return ClassifierHead(params)


def embed(net: EmbeddingNet, inputs, graph: ad.Graph | None = None,
          bound: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    """Record the forward pass of a batch on a graph.

    ``inputs`` may be a LabeledBatch-like object (with ``.inputs``) or a
    plain array. A fresh float32 graph is created when none is given.
    """
    x = getattr(inputs, "inputs", inputs)
    if graph is None:
        graph = ad.Graph()
    if bound is None:
        bound = net.bind(graph)
    return net.forward(graph.constant(np.asarray(x)), bound)


def classify(head: ClassifierHead, embeddings: ad.Tensor,
             bound: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    """Affine logits; softmax itself lives inside the loss."""
    if embeddings.values.ndim != 2 or embeddings.shape[1] != head.input_dim:
        raise ShapeError(
            f"embedding shape {embeddings.shape} does not match head width {head.input_dim}")
    if bound is None:
        bound = head.bind(embeddings.graph)
    return ad.matmul(embeddings, bound["head.w"]) + bound["head.b"]
