"""Planted part layouts, a frozen pseudo-encoder, and the edge-accuracy metric.

A layout places up to ``n_max`` axis-aligned boxes on a square canvas. Each
new box touches a randomly chosen earlier box, so the touching pairs form a
spanning tree; any further pairs that the adjacency rule picks up become the
extra proximity edges of the planted graph.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import BBox, GraphPriorConfig, adjacent, build_adjacency
from .hiergraph import TokenGrid, edges_from_adjacency

APPEARANCE_DIM = 4
SLOT_DIM = 4 + APPEARANCE_DIM
ENCODER_SEED = 20240611


class GenerationError(RuntimeError):
    """Layout sampling ran out of retries; reseed."""


@dataclass
class LayoutConcept:
    boxes: np.ndarray        # (n_max, 4): x_min, y_min, w, h in canvas units
    appearance: np.ndarray   # (n_max, APPEARANCE_DIM)
    mask: np.ndarray         # (n_max,) bool
    canvas: float = 1024.0

    @property
    def n_max(self) -> int:
        return len(self.mask)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def bboxes(self, min_size: float = 0.0) -> list[BBox]:
        out = []
        for x, y, w, h in self.boxes[self.mask]:
            w2, h2 = max(w, min_size), max(h, min_size)
            # clamping keeps the centre fixed
            out.append(BBox(x + (w - w2) / 2, y + (h - h2) / 2, w2, h2))
        return out


@dataclass
class PlantedExample:
    layout: LayoutConcept
    adjacency: np.ndarray
    seed: int
    tokens: list[TokenGrid] = field(default_factory=list)

    @property
    def n_parts(self) -> int:
        return self.layout.n_valid


@dataclass(frozen=True)
class SynthConfig:
    n_max: int = 6
    n_min: int = 3
    tokens_per_part: int = 4
    dim: int = 32
    canvas: float = 1024.0
    size_range: tuple[float, float] = (200.0, 330.0)
    token_noise: float = 0.01
    encoder_seed: int = ENCODER_SEED
    max_retries: int = 200

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        lo, hi = self.size_range
        if not 0 < lo <= hi < self.canvas:
            raise ValueError("size_range must satisfy 0 < lo <= hi < canvas")


# ---------------------------------------------------------------------------
# layout vectors


def flatten_layout(layout: LayoutConcept) -> np.ndarray:
    """Per slot: centre x, centre y in [-1, 1], 4w/C - 1, 4h/C - 1, appearance."""
    c = layout.canvas
    x, y, w, h = layout.boxes.T
    geo = np.stack([2 * (x + w / 2) / c - 1, 2 * (y + h / 2) / c - 1, 4 * w / c - 1, 4 * h / c - 1], axis=1)
    vec = np.concatenate([geo, layout.appearance], axis=1)
    vec[~layout.mask] = 0.0
    return vec.reshape(-1)


def unflatten_layout(vec: np.ndarray, mask: np.ndarray, canvas: float = 1024.0) -> LayoutConcept:
    v = np.asarray(vec, dtype=np.float64).reshape(len(mask), SLOT_DIM)
    cx, cy = (v[:, 0] + 1) * canvas / 2, (v[:, 1] + 1) * canvas / 2
    w, h = (v[:, 2] + 1) * canvas / 4, (v[:, 3] + 1) * canvas / 4
    boxes = np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)
    mask = np.asarray(mask, dtype=bool)
    boxes[~mask] = 0.0
    app = v[:, 4:].copy()
    app[~mask] = 0.0
    return LayoutConcept(boxes, app, mask, canvas)


def slot_mask(mask: np.ndarray) -> np.ndarray:
    """Expand a per-part mask to a per-coordinate mask of the layout vector."""
    return np.repeat(np.asarray(mask, dtype=np.float64), SLOT_DIM)


# ---------------------------------------------------------------------------
# sampling


def _touching_box(parent: BBox, w: float, h: float, rng: np.random.Generator) -> BBox:
    side = rng.integers(4)
    if side in (0, 1):  # left / right
        x = parent.x_min - w if side == 0 else parent.x_max
        y = rng.uniform(parent.y_min - h * 0.8, parent.y_max - h * 0.2)
    else:  # above / below
        y = parent.y_min - h if side == 2 else parent.y_max
        x = rng.uniform(parent.x_min - w * 0.8, parent.x_max - w * 0.2)
    return BBox(x, y, w, h)


def _inside(b: BBox, canvas: float) -> bool:
    return b.x_min >= 0 and b.y_min >= 0 and b.x_max <= canvas and b.y_max <= canvas


def sample_layout(n_parts: int, cfg: GraphPriorConfig = GraphPriorConfig(),
                  seed: int = 0, synth: SynthConfig = SynthConfig()) -> tuple[LayoutConcept, np.ndarray]:
    """Random touching spanning-tree layout plus its certified adjacency."""
    if not 1 <= n_parts <= synth.n_max:
        raise ValueError(f"n_parts must lie in [1, {synth.n_max}]")
    rng = np.random.default_rng(seed)
    lo, hi = synth.size_range
    c = synth.canvas
    for _ in range(synth.max_retries):
        w, h = rng.uniform(lo, hi, 2)
        boxes = [BBox(rng.uniform(0, c - w), rng.uniform(0, c - h), w, h)]
        planted = np.zeros((n_parts, n_parts), dtype=np.int64)
        tree: list[tuple[int, int]] = []
        for k in range(1, n_parts):
            for _ in range(50):
                parent = int(rng.integers(k))
                w, h = rng.uniform(lo, hi, 2)
                cand = _touching_box(boxes[parent], w, h, rng)
                if _inside(cand, c) and all(_overlap_area(cand, b) == 0 for b in boxes):
                    break
            else:
                break
            boxes.append(cand)
            tree.append((parent, k))
            for j in range(k):
                if j == parent or adjacent(cand, boxes[j], cfg):
                    planted[j, k] = planted[k, j] = 1
        if len(boxes) != n_parts:
            continue
        # certify: the adjacency rule must reproduce the planted graph, tree edges included
        if not np.array_equal(build_adjacency(boxes, cfg), planted):
            continue
        appearance = np.zeros((synth.n_max, APPEARANCE_DIM))
        appearance[:n_parts] = rng.uniform(-1, 1, (n_parts, APPEARANCE_DIM))
        arr = np.zeros((synth.n_max, 4))
        arr[:n_parts] = [(b.x_min, b.y_min, b.w, b.h) for b in boxes]
        mask = np.arange(synth.n_max) < n_parts
        return LayoutConcept(arr, appearance, mask, c), planted
    raise GenerationError(f"no valid layout for seed {seed} after {synth.max_retries} retries")


def _overlap_area(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(iw, 0.0) * max(ih, 0.0)


# ---------------------------------------------------------------------------
# pseudo-encoder


def _encoder_matrix(synth: SynthConfig) -> np.ndarray:
    n_in = APPEARANCE_DIM + 2 + synth.tokens_per_part + synth.n_max
    rng = np.random.default_rng(synth.encoder_seed)
    return rng.standard_normal((n_in, synth.dim)) / np.sqrt(n_in / 4)


def encode_parts(layout: LayoutConcept, seed: int, synth: SynthConfig = SynthConfig()) -> list[TokenGrid]:
    """Frozen random linear map of [appearance; size; token one-hot; slot one-hot] plus noise."""
    m = _encoder_matrix(synth)
    rng = np.random.default_rng([seed, 1])
    d = synth.tokens_per_part
    grids = []
    for i in np.flatnonzero(layout.mask):
        _, _, w, h = layout.boxes[i]
        size = [4 * w / layout.canvas - 1, 4 * h / layout.canvas - 1]
        desc = np.zeros((d, m.shape[0]))
        desc[:, :APPEARANCE_DIM] = layout.appearance[i]
        desc[:, APPEARANCE_DIM:APPEARANCE_DIM + 2] = size
        desc[:, APPEARANCE_DIM + 2:APPEARANCE_DIM + 2 + d] = np.eye(d)
        desc[:, APPEARANCE_DIM + 2 + d + i] = 1.0
        tokens = desc @ m + synth.token_noise * rng.standard_normal((d, synth.dim))
        grids.append(TokenGrid(int(i), tokens))
    return grids


def make_example(n_parts: int, seed: int, cfg: GraphPriorConfig = GraphPriorConfig(),
                 synth: SynthConfig = SynthConfig()) -> PlantedExample:
    layout, adj = sample_layout(n_parts, cfg, seed, synth)
    return PlantedExample(layout, adj, seed, encode_parts(layout, seed, synth))


def generate_dataset(size: int, seed: int, cfg: GraphPriorConfig = GraphPriorConfig(),
                     synth: SynthConfig = SynthConfig()) -> list[PlantedExample]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(size):
        ex_seed = int(rng.integers(2**31))
        n = int(rng.integers(synth.n_min, synth.n_max + 1))
        out.append(make_example(n, ex_seed, cfg, synth))
    return out


# ---------------------------------------------------------------------------
# metric


def edge_accuracy(generated: LayoutConcept, a_input: np.ndarray,
                  cfg: GraphPriorConfig = GraphPriorConfig(), min_size: float = 1.0) -> float:
    """Fraction of unordered part pairs whose adjacency matches ``a_input``.

    Edges and non-edges both count. Boxes are clamped to ``min_size`` first.
    A single part has no pairs and scores 1.
    """
    boxes = generated.bboxes(min_size)
    n = len(boxes)
    if n < 1:
        raise ValueError("generated layout has no valid parts")
    a_input = np.asarray(a_input)
    if a_input.shape != (n, n):
        raise ValueError(f"adjacency shape {a_input.shape} does not match {n} parts")
    if n == 1:
        return 1.0
    a_gen = build_adjacency(boxes, cfg)
    iu = np.triu_indices(n, k=1)
    return float(np.mean(a_gen[iu] == a_input[iu]))


# ---------------------------------------------------------------------------
# batches


@dataclass
class FlowBatch:
    x1: np.ndarray
    x0: np.ndarray
    t: np.ndarray
    mask: np.ndarray
    examples: list[PlantedExample]


def make_batch(examples: Sequence[PlantedExample], batch_size: int, seed) -> FlowBatch:
    if not examples:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    if batch_size > len(examples):
        order = np.concatenate([order, rng.integers(len(examples), size=batch_size - len(examples))])
    chosen = [examples[i] for i in order[:batch_size]]
    x1 = np.stack([flatten_layout(e.layout) for e in chosen])
    mask = np.stack([slot_mask(e.layout.mask) for e in chosen])
    x0 = rng.standard_normal(x1.shape) * mask
    t = rng.random(batch_size)
    return FlowBatch(x1, x0, t, mask, chosen)


# ---------------------------------------------------------------------------
# dataset files: one JSON object per line, tokens regenerated from seeds


def example_to_json(ex: PlantedExample) -> str:
    n = ex.n_parts
    return json.dumps({
        "seed": ex.seed,
        "n_parts": n,
        "boxes": ex.layout.boxes[:n].tolist(),
        "appearance": ex.layout.appearance[:n].tolist(),
        "canvas": ex.layout.canvas,
        "edges": [list(e) for e in edges_from_adjacency(ex.adjacency)],
    }, sort_keys=True)


def example_from_json(line: str, synth: SynthConfig = SynthConfig()) -> PlantedExample:
    doc = json.loads(line)
    n = int(doc["n_parts"])
    boxes = np.zeros((synth.n_max, 4))
    app = np.zeros((synth.n_max, APPEARANCE_DIM))
    boxes[:n] = doc["boxes"]
    app[:n] = doc["appearance"]
    layout = LayoutConcept(boxes, app, np.arange(synth.n_max) < n, float(doc["canvas"]))
    adj = np.zeros((n, n), dtype=np.int64)
    for i, j in doc["edges"]:
        adj[i, j] = adj[j, i] = 1
    return PlantedExample(layout, adj, int(doc["seed"]), encode_parts(layout, int(doc["seed"]), synth))


def save_dataset(path: str | Path, examples: Sequence[PlantedExample]) -> None:
    Path(path).write_text("".join(example_to_json(e) + "\n" for e in examples))


def load_dataset(path: str | Path, synth: SynthConfig = SynthConfig()) -> list[PlantedExample]:
    return [example_from_json(line, synth) for line in Path(path).read_text().splitlines() if line.strip()]


def dataset_hash(examples: Sequence[PlantedExample]) -> str:
    h = hashlib.sha256()
    for e in examples:
        h.update(example_to_json(e).encode())
        h.update(b"\n")
    return h.hexdigest()
