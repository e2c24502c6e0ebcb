"""Two-tier part graph: super-nodes per part, sub-nodes per token."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class GraphError(ValueError):
    pass


@dataclass
class TokenGrid:
    """d x D embedding tokens of one part."""

    part: int
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or min(self.tokens.shape) < 1:
            raise GraphError(f"token grid must be a non-empty d x D matrix, got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise GraphError("token grid has non-finite entries")

    @property
    def d(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class HierGraph:
    n_parts: int
    tokens_per_part: int
    dim: int
    x0: np.ndarray
    a_super: np.ndarray
    e_super: list[tuple[int, int]]
    e_sub: list[tuple[int, int]]
    intra_edges: list[tuple[int, int]]
    # part ranges of the member graphs when several graphs are batched as one
    segments: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.segments:
            self.segments = [(0, self.n_parts)]

    @property
    def n_sub(self) -> int:
        return self.n_parts * self.tokens_per_part

    @property
    def super_x0(self) -> np.ndarray:
        return self.x0[: self.n_parts]

    @property
    def sub_x0(self) -> np.ndarray:
        return self.x0[self.n_parts:]

    @property
    def part_of_sub(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_parts), self.tokens_per_part)


def edges_from_adjacency(a: np.ndarray) -> list[tuple[int, int]]:
    i, j = np.nonzero(np.triu(a, k=1))
    return [(int(p), int(q)) for p, q in zip(i, j)]


def validate_adjacency(a: np.ndarray, n: int | None = None) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got {a.shape}")
    if n is not None and a.shape[0] != n:
        raise GraphError(f"adjacency is {a.shape[0]}x{a.shape[0]} but there are {n} parts")
    if not ((a == 0) | (a == 1)).all():
        raise GraphError("adjacency must be binary")
    if not np.array_equal(a, a.T):
        raise GraphError("adjacency must be symmetric")
    if np.any(np.diag(a)):
        raise GraphError("adjacency diagonal must be zero")
    return a.astype(np.int64)


def assemble_hier_graph(tokens: Sequence[TokenGrid], a_super: np.ndarray) -> HierGraph:
    if not tokens:
        raise GraphError("need at least one part")
    d, dim = tokens[0].tokens.shape
    for tg in tokens:
        if tg.tokens.shape != (d, dim):
            raise GraphError(f"inconsistent token grid shape {tg.tokens.shape}, expected {(d, dim)}")
    n = len(tokens)
    a_super = validate_adjacency(a_super, n)
    sub = np.concatenate([tg.tokens for tg in tokens], axis=0)
    sup = sub.reshape(n, d, dim).mean(axis=1)
    e_sub = [(i, i * d + k) for i in range(n) for k in range(d)]
    intra = [(i * d + k, i * d + m) for i in range(n) for k in range(d) for m in range(k + 1, d)]
    return HierGraph(n, d, dim, np.concatenate([sup, sub], axis=0), a_super,
                     edges_from_adjacency(a_super), e_sub, intra)


def batch_graphs(graphs: Sequence[HierGraph]) -> HierGraph:
    """Disjoint union of graphs sharing d and D, with per-graph segments kept."""
    d, dim = graphs[0].tokens_per_part, graphs[0].dim
    if any(g.tokens_per_part != d or g.dim != dim for g in graphs):
        raise GraphError("batched graphs must share tokens_per_part and dim")
    n = sum(g.n_parts for g in graphs)
    a = np.zeros((n, n), dtype=np.int64)
    segments, e_super, intra = [], [], []
    off = 0
    for g in graphs:
        a[off:off + g.n_parts, off:off + g.n_parts] = g.a_super
        segments.extend((s + off, e + off) for s, e in g.segments)
        e_super.extend((i + off, j + off) for i, j in g.e_super)
        intra.extend((p + off * d, q + off * d) for p, q in g.intra_edges)
        off += g.n_parts
    sup = np.concatenate([g.super_x0 for g in graphs])
    sub = np.concatenate([g.sub_x0 for g in graphs])
    e_sub = [(i, i * d + k) for i in range(n) for k in range(d)]
    return HierGraph(n, d, dim, np.concatenate([sup, sub]), a, e_super, e_sub, intra, segments)


# ---------------------------------------------------------------------------
# user-supplied adjacency files: {"n_parts": N, "edges": [[i, j], ...]}


def adjacency_to_json(a: np.ndarray) -> str:
    a = validate_adjacency(a)
    return json.dumps({"n_parts": int(a.shape[0]),
                       "edges": [list(e) for e in edges_from_adjacency(a)]})


def adjacency_from_json(text: str) -> np.ndarray:
    doc = json.loads(text)
    try:
        n = int(doc["n_parts"])
        edges = doc["edges"]
    except (KeyError, TypeError) as exc:
        raise GraphError("graph file needs 'n_parts' and 'edges'") from exc
    if n < 1:
        raise GraphError("n_parts must be at least 1")
    a = np.zeros((n, n), dtype=np.int64)
    for e in edges:
        if len(e) != 2:
            raise GraphError(f"edge {e!r} is not a pair")
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"edge {e!r} out of range for {n} parts")
        if i == j:
            raise GraphError(f"self-loop {e!r} not allowed")
        a[i, j] = a[j, i] = 1
    return a


def load_adjacency(path: str | Path) -> np.ndarray:
    return adjacency_from_json(Path(path).read_text())


def save_adjacency(path: str | Path, a: np.ndarray) -> None:
    Path(path).write_text(adjacency_to_json(a) + "\n")
