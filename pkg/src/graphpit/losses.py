"""Structural regularisers on the final part features."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .optim import ParamStore
from .tensor import Tensor

EDGE_MLP = "losses.edge_mlp"


@dataclass(frozen=True)
class LossConfig:
    lambda_g: float = 1.0
    lambda_r: float = 1.0
    # fraction of non-edges kept for the edge loss; 1.0 uses every pair
    neg_fraction: float = 1.0

    def __post_init__(self):
        if self.lambda_g < 0 or self.lambda_r < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.neg_fraction <= 1.0:
            raise ValueError("neg_fraction must lie in (0, 1]")


@dataclass
class LossReport:
    smooth: float
    rel: float
    graph_total: float
    fm: float
    grand_total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def pair_index(segments: Sequence[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """All unordered pairs i<j inside each segment, and a per-pair weight.

    Weights average over pairs within a graph and then over graphs, so a
    batch of graphs gives the mean of the per-graph losses.
    """
    pairs, weights = [], []
    n_graphs = len(segments)
    for start, stop in segments:
        n = stop - start
        npairs = n * (n - 1) // 2
        for i in range(start, stop):
            for j in range(i + 1, stop):
                pairs.append((i, j))
                weights.append(1.0 / (npairs * n_graphs))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2), np.asarray(weights)


def smoothness_loss(h_super: Tensor, a_super: np.ndarray,
                    segments: Sequence[tuple[int, int]] | None = None) -> Tensor:
    """Sum over pairs i<j of A_ij ||h_i - h_j||^2, divided by the pair count N(N-1)/2."""
    segments = segments or [(0, h_super.shape[0])]
    pairs, w = pair_index(segments)
    if len(pairs) == 0:
        return T.Tensor(0.0)
    w = w * np.asarray(a_super)[pairs[:, 0], pairs[:, 1]]
    diff = T.sub(T.take_rows(h_super, pairs[:, 0]), T.take_rows(h_super, pairs[:, 1]))
    return T.sum(T.mul(T.sum(T.square(diff), axis=1), w))


def init_edge_mlp(store: ParamStore, dim: int, rng: np.random.Generator | None = None,
                  name: str = EDGE_MLP) -> None:
    rng = rng if rng is not None else np.random.default_rng(0)
    nn.add_mlp(store, name, 2 * dim, max(dim // 2, 1), 1, rng)


def edge_logits(h_super: Tensor, pairs: np.ndarray, store: ParamStore,
                name: str = EDGE_MLP) -> Tensor:
    """MLP_edge([h_i; h_j]) per ordered pair; (i, j) and (j, i) may differ."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = h_super.shape[0]
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise IndexError(f"pair index out of range for {n} nodes")
    x = T.concat([T.take_rows(h_super, pairs[:, 0]), T.take_rows(h_super, pairs[:, 1])], axis=1)
    return T.reshape(nn.mlp(x, store, name), (len(pairs),))


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Elementwise max(l, 0) - l*y + log(1 + exp(-|l|))."""
    return T.sub(T.softplus(logits), T.mul(logits, np.asarray(labels, dtype=np.float64)))


def relational_loss(logits: Tensor, a_super: np.ndarray, pairs: np.ndarray,
                    weights: np.ndarray | None = None) -> Tensor:
    """Binary cross-entropy of edge logits against adjacency labels.

    Plain mean over pairs unless per-pair ``weights`` (summing to 1) are given.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return T.Tensor(0.0)
    labels = np.asarray(a_super)[pairs[:, 0], pairs[:, 1]]
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("adjacency labels must be 0 or 1")
    per = bce_with_logits(logits, labels)
    if weights is None:
        return T.mean(per)
    return T.sum(T.mul(per, weights))


def subsample_pairs(pairs: np.ndarray, weights: np.ndarray, a_super: np.ndarray,
                    fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Keep every edge and a random ``fraction`` of non-edges, renormalising weights."""
    if fraction >= 1.0 or len(pairs) == 0:
        return pairs, weights
    labels = np.asarray(a_super)[pairs[:, 0], pairs[:, 1]]
    keep = (labels == 1) | (rng.random(len(pairs)) < fraction)
    w = weights[keep]
    return pairs[keep], w / w.sum()


def total_graph_loss(smooth, rel, cfg: LossConfig = LossConfig()):
    """lambda_g * smooth + lambda_r * rel (Tensors or floats)."""
    if isinstance(smooth, Tensor) or isinstance(rel, Tensor):
        return T.add(T.mul(T.as_tensor(smooth), cfg.lambda_g), T.mul(T.as_tensor(rel), cfg.lambda_r))
    return cfg.lambda_g * smooth + cfg.lambda_r * rel
