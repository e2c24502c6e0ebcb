"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 8 train the desk preset (3 variants x 3 seeds) once per
session and take roughly 20 minutes on one CPU core.
"""

import json
import math
import time

import numpy as np
import pytest

from graphpit import cli, harness
from graphpit.aggregator import aggregate_forward, init_aggregator
from graphpit.config import RunConfig, save_config
from graphpit.geometry import BBox, build_adjacency, iou
from graphpit.hiergraph import TokenGrid, assemble_hier_graph
from graphpit.losses import LossConfig, relational_loss, smoothness_loss, total_graph_loss
from graphpit.model import GraphPiT, baseline_mode, graph_condition
from graphpit.optim import ParamStore
from graphpit.prior import denoiser_forward
from graphpit.synth import SLOT_DIM, generate_dataset, sample_layout
from graphpit.tensor import Tensor
from oracles import random_int_box_pair, raster_adjacent, raster_iou

DESK = RunConfig()


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, detail


def test_c1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    errs = harness.gradcheck(seed=0)
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + f"; {dt:.1f}s"
    report(capsys, 1, worst < 1e-3 and dt < 60 and set(errs) == {"aggregator", "losses", "prior"}, detail)


def test_c2_geometry_oracle(capsys):
    rng = np.random.default_rng(2024)
    worst, mismatches = 0.0, 0
    for _ in range(500):
        a, b = random_int_box_pair(rng)
        worst = max(worst, abs(iou(BBox(*a), BBox(*b)) - raster_iou(a, b)))
        adj = build_adjacency([BBox(*a), BBox(*b)], DESK.graph)
        mismatches += int(adj[0, 1] != int(raster_adjacent(a, b, 0.0, 512.0, True)))
    ok = worst <= 1e-6 and mismatches == 0 and DESK.tau_iou == 0.0 and DESK.iou_strict and DESK.tau_dist == 512.0
    report(capsys, 2, ok, f"max |iou - raster| {worst:.1e}, adjacency mismatches {mismatches}/500")


def test_c3_permutation_equivariance(capsys):
    rng = np.random.default_rng(3)
    params = init_aggregator(ParamStore(), DESK.dim, DESK.n_layers, rng)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 6))
        tokens = [TokenGrid(i, rng.normal(size=(DESK.tokens_per_part, DESK.dim))) for i in range(n)]
        a = np.triu((rng.random((n, n)) < 0.5).astype(int), 1)
        a = a + a.T
        perm = rng.permutation(n)
        out = aggregate_forward(assemble_hier_graph(tokens, a), params)
        outp = aggregate_forward(assemble_hier_graph([tokens[p] for p in perm], a[np.ix_(perm, perm)]), params)
        d = DESK.tokens_per_part
        worst = max(worst, np.abs(outp.h_super.data - out.h_super.data[perm]).max(),
                    np.abs(outp.h_sub.data.reshape(n, d, -1) - out.h_sub.data.reshape(n, d, -1)[perm]).max())
    report(capsys, 3, worst <= 1e-10, f"max deviation over 50 graphs {worst:.1e}")


def test_c4_degeneration(capsys):
    model = GraphPiT(DESK.model, seed=4)
    data = generate_dataset(20, 4, DESK.graph, DESK.synth)
    rng = np.random.default_rng(4)
    worst = 0.0
    for ex in data:
        base = baseline_mode([ex.tokens])
        flat = graph_condition(model, [ex.tokens], [ex.adjacency], model.with_layers(0))
        z, t = rng.normal(size=(1, DESK.n_max * SLOT_DIM)), rng.random(1)
        a = denoiser_forward(Tensor(z), t, base.cond, base.owner, model.prior).data
        b = denoiser_forward(Tensor(z), t, flat.cond, flat.owner, model.prior).data
        worst = max(worst, np.abs(a - b).max())
    report(capsys, 4, worst == 0.0, f"max |baseline - L=0| over 20 inputs {worst:.1e}")


def test_c5_loss_closed_forms(capsys):
    h = Tensor([[1.0, 0.0], [-1.0, 0.0]])
    sm = smoothness_loss(h, np.array([[0, 1], [1, 0]])).item()
    rel = relational_loss(Tensor(np.zeros(3)), np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]]),
                          np.array([[0, 1], [0, 2], [1, 2]])).item()
    rng = np.random.default_rng(5)
    lin = 0.0
    for _ in range(5):
        s, r, lg, lr = rng.uniform(0, 3, size=4)
        lin = max(lin, abs(total_graph_loss(s, r, LossConfig(lg, lr)) - (lg * s + lr * r)))
    ok = abs(sm - 4.0) <= 1e-12 and abs(rel - math.log(2)) <= 1e-12 and lin <= 1e-12
    report(capsys, 5, ok, f"smooth {sm!r}, rel {rel!r}, linearity residual {lin:.1e}")


def test_c6_planted_certification(capsys):
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, DESK.n_max + 1))
        layout, a = sample_layout(n, DESK.graph, int(rng.integers(2**31)), DESK.synth)
        bad += int(not np.array_equal(build_adjacency(layout.bboxes(), DESK.graph), a))
    report(capsys, 6, bad == 0, f"{1000 - bad}/1000 planted graphs certified")


@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    t0 = time.perf_counter()
    res = harness.ablate(DESK, out_dir=tmp_path_factory.mktemp("ablate"), shuffled=True)
    return res, time.perf_counter() - t0


def test_c7_ablation_direction(capsys, desk_ablation):
    res, dt = desk_ablation
    full, nolap, norel = (res.median(v) for v in ("Full model", "w/o Laplacian", "w/o EdgeLoss"))
    gap = full - norel
    between = (norel <= nolap <= full) or abs(nolap - full) <= 0.05
    ok = gap >= 0.05 and between and dt <= 1800
    with capsys.disabled():
        print("\n" + res.table())
    report(capsys, 7, ok, f"median full {full:.3f}, w/o Laplacian {nolap:.3f}, w/o EdgeLoss {norel:.3f}; "
                          f"full - w/o EdgeLoss {gap:+.3f}; {dt / 60:.1f} min")


def test_c8_conditioning_effect(capsys, desk_ablation):
    res, _ = desk_ablation
    cond = res.median("Full model")
    shuf = res.median("Full model", "edge_accuracy_shuffled")
    report(capsys, 8, cond - shuf >= 0.15,
           f"median conditioned {cond:.3f}, shuffled {shuf:.3f}, gap {cond - shuf:+.3f}")


def test_c9_determinism(capsys, tmp_path):
    cfg = DESK.replace(steps=40, ckpt_every=20)
    p = tmp_path / "cfg.json"
    save_config(p, cfg)
    outs = []
    for tag in ("a", "b"):
        code = cli.main(["train", "--config", str(p), "--out", str(tmp_path / tag)])
        outs.append((code, json.loads(capsys.readouterr().out)))
    names = sorted(f.name for f in (tmp_path / "a").iterdir())
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    ok = all(c == 0 for c, _ in outs) and same and "metrics.jsonl" in names and len(names) == 4
    report(capsys, 9, ok, f"{len(names)} files byte-identical across two runs: {same}")
