"""Hierarchical graph aggregator.

Each layer runs GAT over the part graph, GCN within each part's tokens,
a gated top-down (part -> token) update, a gated bottom-up (token -> part)
update, and residual LayerNorm on both tiers. After ``n_layers`` layers the
token rows are the refined condition tokens handed to the prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .hiergraph import GraphError, HierGraph
from .optim import ParamStore
from .tensor import Tensor

LEAKY_SLOPE = 0.2


@dataclass
class AggregatorParams:
    """View over the ``aggregator.`` entries of a ParamStore."""

    store: ParamStore
    n_layers: int
    dim: int
    prefix: str = "aggregator"

    def name(self, layer: int, part: str) -> str:
        return f"{self.prefix}.l{layer}.{part}"

    def __getitem__(self, key: tuple[int, str]) -> Tensor:
        return self.store[self.name(*key)]

    @property
    def hidden(self) -> int:
        return max(self.dim // 2, 1)


def init_aggregator(store: ParamStore, dim: int, n_layers: int = 2,
                    rng: np.random.Generator | None = None,
                    prefix: str = "aggregator") -> AggregatorParams:
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = AggregatorParams(store, n_layers, dim, prefix)
    h = params.hidden
    for l in range(n_layers):
        store.add(params.name(l, "gat.W"), nn.uniform_init(rng, dim, (dim, dim)))
        store.add(params.name(l, "gat.a_src"), nn.uniform_init(rng, 2 * dim, (dim, 1)))
        store.add(params.name(l, "gat.a_dst"), nn.uniform_init(rng, 2 * dim, (dim, 1)))
        store.add(params.name(l, "gcn.W"), nn.uniform_init(rng, dim, (dim, dim)))
        nn.add_mlp(store, params.name(l, "mlp_sc"), 2 * dim, h, 1, rng)
        nn.add_mlp(store, params.name(l, "mlp_cs"), 2 * dim, h, 1, rng)
        nn.add_layer_norm(store, params.name(l, "ln_super"), dim)
        nn.add_layer_norm(store, params.name(l, "ln_sub"), dim)
    return params


# ---------------------------------------------------------------------------
# constant graph operators


def gat_mask(n: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    """Boolean attention mask: neighbours plus self-loops."""
    mask = np.eye(n, dtype=bool)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"super edge ({i}, {j}) out of range for {n} nodes")
        mask[i, j] = mask[j, i] = True
    return mask


def gcn_operator(part_of_sub: np.ndarray, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 over sub-nodes, as one (d, d) block per part.

    Edges must stay inside a part, so the full operator is block diagonal.
    """
    part_of_sub = np.asarray(part_of_sub)
    n = len(part_of_sub)
    n_parts = int(part_of_sub.max()) + 1 if n else 0
    d = n // max(n_parts, 1)
    if not np.array_equal(part_of_sub, np.repeat(np.arange(n_parts), d)):
        raise GraphError("sub-nodes must be grouped by part with equal counts")
    blocks = np.tile(np.eye(d), (n_parts, 1, 1))
    if len(edges):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.min() < 0 or e.max() >= n:
            raise GraphError(f"sub edge out of range for {n} nodes")
        cross = part_of_sub[e[:, 0]] != part_of_sub[e[:, 1]]
        if cross.any():
            p, q = e[np.argmax(cross)]
            raise GraphError(f"sub edge ({p}, {q}) crosses parts")
        part, p, q = part_of_sub[e[:, 0]], e[:, 0] % d, e[:, 1] % d
        blocks[part, p, q] = 1.0
        blocks[part, q, p] = 1.0
    inv_sqrt = 1.0 / np.sqrt(blocks.sum(axis=2))
    return blocks * inv_sqrt[:, :, None] * inv_sqrt[:, None, :]


# ---------------------------------------------------------------------------
# layer pieces


def gat_super_layer(h_super: Tensor, mask: np.ndarray, W: Tensor, a_src: Tensor,
                    a_dst: Tensor) -> Tensor:
    """Single-head GAT: softmax_j LeakyReLU(a_src.Wh_i + a_dst.Wh_j) over masked j."""
    wh = T.matmul(h_super, W)
    scores = T.leaky_relu(T.add(T.matmul(wh, a_src), T.transpose(T.matmul(wh, a_dst))), LEAKY_SLOPE)
    return T.matmul(T.softmax_rows(scores, mask), wh)


def gcn_sub_layer(h_sub: Tensor, operator: np.ndarray, W: Tensor) -> Tensor:
    """Normalised propagation within each part; ``operator`` is (N, d, d) from gcn_operator."""
    n, d, _ = operator.shape
    hw = T.reshape(T.matmul(h_sub, W), (n, d, W.shape[1]))
    return T.reshape(T.bmm(T.Tensor(operator), hw), (n * d, W.shape[1]))


def top_down_update(h_super_p: Tensor, h_sub_p: Tensor, part_of_sub: np.ndarray,
                    store: ParamStore, mlp_name: str) -> tuple[Tensor, Tensor]:
    """h_sub'' = h_sub' + alpha * h_super'[part], alpha = sigmoid(MLP_sc([super'; sub']))."""
    sup = T.take_rows(h_super_p, part_of_sub)
    alpha = T.sigmoid(nn.mlp(T.concat([sup, h_sub_p], axis=1), store, mlp_name))
    return T.add(h_sub_p, T.mul(alpha, sup)), alpha


def bottom_up_update(h_sub_p: Tensor, h_super_p: Tensor, part_of_sub: np.ndarray, d: int,
                     store: ParamStore, mlp_name: str) -> tuple[Tensor, Tensor]:
    """h_super'' = (1/d) sum_k beta_k h_sub'_k, beta = sigmoid(MLP_cs([sub'; super'])).

    The primed super feature only enters through the gate.
    """
    n = h_super_p.shape[0]
    sup = T.take_rows(h_super_p, part_of_sub)
    beta = T.sigmoid(nn.mlp(T.concat([h_sub_p, sup], axis=1), store, mlp_name))
    gated = T.reshape(T.mul(beta, h_sub_p), (n, d, h_sub_p.shape[1]))
    return T.mul(T.sum(gated, axis=1), 1.0 / d), beta


def layer_finalize(h2: Tensor, h_prev: Tensor, gain: Tensor, bias: Tensor,
                   eps: float = 1e-5) -> Tensor:
    return T.layer_norm(T.add(h2, h_prev), gain, bias, eps)


@dataclass
class AggregatorOutput:
    h_sub: Tensor
    h_super: Tensor
    alphas: list[Tensor]
    betas: list[Tensor]


def aggregate_forward(g: HierGraph, params: AggregatorParams,
                      x0: Tensor | None = None) -> AggregatorOutput:
    """Run all layers over ``g``; returns refined token rows and final part rows.

    ``x0`` overrides ``g.x0`` (e.g. to differentiate with respect to the inputs).
    """
    x0 = T.Tensor(g.x0) if x0 is None else x0
    n, d = g.n_parts, g.tokens_per_part
    h_super = T.take_rows(x0, np.arange(n))
    h_sub = T.take_rows(x0, np.arange(n, n + n * d))
    if params.n_layers == 0:
        return AggregatorOutput(h_sub, h_super, [], [])
    part_of_sub = g.part_of_sub
    mask = gat_mask(n, g.e_super)
    op = gcn_operator(part_of_sub, g.intra_edges)
    alphas, betas = [], []
    s = params.store
    for l in range(params.n_layers):
        sup_p = gat_super_layer(h_super, mask, params[l, "gat.W"], params[l, "gat.a_src"],
                                params[l, "gat.a_dst"])
        sub_p = gcn_sub_layer(h_sub, op, params[l, "gcn.W"])
        sub_pp, alpha = top_down_update(sup_p, sub_p, part_of_sub, s, params.name(l, "mlp_sc"))
        sup_pp, beta = bottom_up_update(sub_p, sup_p, part_of_sub, d, s, params.name(l, "mlp_cs"))
        h_super = layer_finalize(sup_pp, h_super, params[l, "ln_super.gain"], params[l, "ln_super.bias"])
        h_sub = layer_finalize(sub_pp, h_sub, params[l, "ln_sub.gain"], params[l, "ln_sub.bias"])
        alphas.append(alpha)
        betas.append(beta)
    return AggregatorOutput(h_sub, h_super, alphas, betas)
