"""Graph-conditioned prior: aggregator + structural losses + flow-matching denoiser."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .aggregator import AggregatorOutput, AggregatorParams, aggregate_forward, init_aggregator
from .hiergraph import HierGraph, TokenGrid, assemble_hier_graph, batch_graphs
from .losses import (EDGE_MLP, LossConfig, LossReport, edge_logits, init_edge_mlp, pair_index,
                     relational_loss, smoothness_loss, subsample_pairs, total_graph_loss)
from .optim import ParamStore
from .prior import PriorParams, denoiser_forward, init_prior, sample
from .synth import SLOT_DIM, FlowBatch, LayoutConcept, PlantedExample, unflatten_layout
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_max: int = 6
    tokens_per_part: int = 4
    dim: int = 32
    n_layers: int = 2
    width: int = 32
    key_dim: int = 32
    n_blocks: int = 2
    time_dim: int = 16


class GraphPiT:
    """All learned parameters live in one ParamStore under ``aggregator.``,
    ``losses.`` and ``prior.`` prefixes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        self.agg = init_aggregator(self.store, cfg.dim, cfg.n_layers, np.random.default_rng(rng.integers(2**31)))
        init_edge_mlp(self.store, cfg.dim, np.random.default_rng(rng.integers(2**31)))
        self.prior = init_prior(self.store, cfg.n_max, SLOT_DIM, cfg.dim, cfg.width, cfg.key_dim,
                                cfg.n_blocks, cfg.time_dim, np.random.default_rng(rng.integers(2**31)))

    def with_layers(self, n_layers: int) -> AggregatorParams:
        return AggregatorParams(self.store, n_layers, self.cfg.dim, self.agg.prefix)


@dataclass
class Conditioning:
    cond: Tensor
    owner: np.ndarray
    graph: HierGraph | None = None
    agg: AggregatorOutput | None = None


def build_graph(tokens: Sequence[TokenGrid], adjacency: np.ndarray) -> HierGraph:
    return assemble_hier_graph(tokens, adjacency)


def graph_condition(model: GraphPiT, token_sets: Sequence[Sequence[TokenGrid]],
                    adjacencies: Sequence[np.ndarray],
                    agg: AggregatorParams | None = None) -> Conditioning:
    """Refine every example's tokens on its graph; all examples share one disjoint-union pass."""
    graph = batch_graphs([build_graph(tk, a) for tk, a in zip(token_sets, adjacencies)])
    out = aggregate_forward(graph, agg if agg is not None else model.agg)
    owner = np.repeat([i for i, tk in enumerate(token_sets) for _ in tk], graph.tokens_per_part)
    return Conditioning(out.h_sub, owner, graph, out)


def baseline_mode(token_sets: Sequence[Sequence[TokenGrid]]) -> Conditioning:
    """Condition on the raw concatenated tokens, without any graph."""
    rows = [tg.tokens for tk in token_sets for tg in tk]
    owner = np.concatenate([np.full(tg.d, i) for i, tk in enumerate(token_sets) for tg in tk])
    return Conditioning(T.Tensor(np.concatenate(rows, axis=0)), owner.astype(np.int64))


def fm_loss(pred: Tensor, batch: FlowBatch) -> Tensor:
    """Masked mean squared error against the target velocity x1 - x0."""
    target = (batch.x1 - batch.x0) * batch.mask
    diff = T.mul(T.sub(pred, target), batch.mask)
    return T.mul(T.sum(T.square(diff)), 1.0 / batch.mask.sum())


def interpolate(batch: FlowBatch) -> np.ndarray:
    t = batch.t[:, None]
    return (1.0 - t) * batch.x0 + t * batch.x1


def joint_loss(model: GraphPiT, batch: FlowBatch, loss_cfg: LossConfig = LossConfig(),
               rng: np.random.Generator | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    ex = batch.examples
    c = graph_condition(model, [e.tokens for e in ex], [e.adjacency for e in ex])
    g, h_super = c.graph, c.agg.h_super
    pairs, w = pair_index(g.segments)
    smooth = smoothness_loss(h_super, g.a_super, g.segments)
    if rng is not None:
        pairs, w = subsample_pairs(pairs, w, g.a_super, loss_cfg.neg_fraction, rng)
    rel = relational_loss(edge_logits(h_super, pairs, model.store, EDGE_MLP), g.a_super, pairs, w)
    graph_total = total_graph_loss(smooth, rel, loss_cfg)
    valid = batch.mask.reshape(len(ex), model.cfg.n_max, SLOT_DIM)[:, :, 0] > 0
    pred = denoiser_forward(T.Tensor(interpolate(batch)), batch.t, c.cond, c.owner, model.prior, valid)
    fm = fm_loss(pred, batch)
    total = T.add(fm, graph_total)
    return total, {"smooth": smooth, "rel": rel, "graph_total": graph_total, "fm": fm}


def fm_train_step(batch: FlowBatch, model: GraphPiT, loss_cfg: LossConfig = LossConfig(),
                  rng: np.random.Generator | None = None) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Forward + backward of fm + lambda_g*smooth + lambda_r*rel; returns report and gradients."""
    model.store.zero_grad()
    total, parts = joint_loss(model, batch, loss_cfg, rng)
    total.backward()
    report = LossReport(smooth=parts["smooth"].item(), rel=parts["rel"].item(),
                        graph_total=parts["graph_total"].item(), fm=parts["fm"].item(),
                        grand_total=total.item())
    return report, model.store.grads()


def sample_layouts(model: GraphPiT, examples: Sequence[PlantedExample], steps: int = 32,
                   seed: int = 0, adjacencies: Sequence[np.ndarray] | None = None,
                   baseline: bool = False) -> list[LayoutConcept]:
    """Generate one layout per example, conditioned on its (or an overriding) graph."""
    token_sets = [e.tokens for e in examples]
    with T.no_grad():
        if baseline:
            c = baseline_mode(token_sets)
        else:
            adj = adjacencies if adjacencies is not None else [e.adjacency for e in examples]
            c = graph_condition(model, token_sets, adj)
    masks = np.stack([e.layout.mask for e in examples])
    coord_mask = np.repeat(masks.astype(np.float64), SLOT_DIM, axis=1)
    z = sample(c.cond, c.owner, model.prior, steps, seed, len(examples), coord_mask)
    return [unflatten_layout(zi, m, e.layout.canvas) for zi, m, e in zip(z, masks, examples)]
