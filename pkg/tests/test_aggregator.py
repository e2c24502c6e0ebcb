import math

import numpy as np
import pytest

from graphpit import tensor as T
from graphpit.aggregator import (aggregate_forward, bottom_up_update, gat_mask, gat_super_layer,
                                 gcn_operator, gcn_sub_layer, init_aggregator, layer_finalize,
                                 top_down_update)
from graphpit.hiergraph import (GraphError, TokenGrid, adjacency_from_json, adjacency_to_json,
                                assemble_hier_graph, batch_graphs, load_adjacency, save_adjacency,
                                validate_adjacency)
from graphpit.optim import ParamStore
from graphpit.tensor import Tensor
from oracles import layer_norm_rows, mlp_scalar, sigmoid


def random_graph(rng, n, d, dim, p=0.5):
    tokens = [TokenGrid(i, rng.normal(size=(d, dim))) for i in range(n)]
    a = np.triu((rng.random((n, n)) < p).astype(int), 1)
    return tokens, a + a.T


def zero_mlp(store, name):
    for k in ("fc1.W", "fc1.b", "fc2.W", "fc2.b"):
        store[f"{name}.{k}"].data[...] = 0.0


# ---------------------------------------------------------------------------
# hierarchical graph assembly


def test_assembly_shapes():
    rng = np.random.default_rng(0)
    tokens, _ = random_graph(rng, 2, 2, 5)
    g = assemble_hier_graph(tokens, np.array([[0, 1], [1, 0]]))
    assert g.x0.shape == (6, 5)
    assert g.e_sub == [(0, 0), (0, 1), (1, 2), (1, 3)]
    assert g.intra_edges == [(0, 1), (2, 3)]
    assert g.e_super == [(0, 1)]


def test_super_rows_are_token_means():
    rng = np.random.default_rng(1)
    tokens, a = random_graph(rng, 4, 3, 6)
    g = assemble_hier_graph(tokens, a)
    for i, tg in enumerate(tokens):
        ref = [sum(tg.tokens[k, j] for k in range(3)) / 3 for j in range(6)]
        np.testing.assert_allclose(g.x0[i], ref, atol=1e-12)
        np.testing.assert_array_equal(g.x0[4 + 3 * i:4 + 3 * i + 3], tg.tokens)


def test_identical_tokens_give_that_token():
    row = np.array([0.1, -2.0, 3.5])
    g = assemble_hier_graph([TokenGrid(0, np.tile(row, (4, 1)))], np.zeros((1, 1)))
    np.testing.assert_array_equal(g.x0[0], row)


def test_assembly_permutation_consistent():
    rng = np.random.default_rng(2)
    tokens, a = random_graph(rng, 4, 2, 3)
    perm = np.array([2, 0, 3, 1])
    g = assemble_hier_graph(tokens, a)
    gp = assemble_hier_graph([tokens[p] for p in perm], a[np.ix_(perm, perm)])
    np.testing.assert_array_equal(gp.super_x0, g.super_x0[perm])
    np.testing.assert_array_equal(gp.sub_x0.reshape(4, 2, 3), g.sub_x0.reshape(4, 2, 3)[perm])


@pytest.mark.parametrize("a", [
    np.array([[0, 1], [0, 0]]),
    np.array([[1, 0], [0, 0]]),
    np.array([[0, 2], [2, 0]]),
    np.zeros((3, 3)),
])
def test_bad_adjacency_rejected(a):
    rng = np.random.default_rng(3)
    tokens, _ = random_graph(rng, 2, 2, 3)
    with pytest.raises(GraphError):
        assemble_hier_graph(tokens, a)


def test_inconsistent_token_shapes():
    with pytest.raises(GraphError):
        assemble_hier_graph([TokenGrid(0, np.ones((2, 3))), TokenGrid(1, np.ones((3, 3)))],
                            np.array([[0, 1], [1, 0]]))
    with pytest.raises(GraphError):
        TokenGrid(0, np.array([[np.inf]]))


def test_batch_is_disjoint_union():
    rng = np.random.default_rng(4)
    g1 = assemble_hier_graph(*random_graph(rng, 2, 2, 3, p=1.0))
    g2 = assemble_hier_graph(*random_graph(rng, 3, 2, 3, p=1.0))
    b = batch_graphs([g1, g2])
    assert b.segments == [(0, 2), (2, 5)]
    assert b.a_super[:2, 2:].sum() == 0
    np.testing.assert_array_equal(b.a_super[2:, 2:], g2.a_super)
    assert (2, 3) in b.e_super and (4, 5) in b.intra_edges
    np.testing.assert_array_equal(b.sub_x0[4:], g2.sub_x0)


def test_graph_json_round_trip(tmp_path):
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert adjacency_to_json(a) == '{"n_parts": 3, "edges": [[0, 1], [1, 2]]}'
    np.testing.assert_array_equal(adjacency_from_json(adjacency_to_json(a)), a)
    save_adjacency(tmp_path / "g.json", a)
    np.testing.assert_array_equal(load_adjacency(tmp_path / "g.json"), a)


@pytest.mark.parametrize("text", [
    '{"n_parts": 2, "edges": [[0, 2]]}',
    '{"n_parts": 2, "edges": [[1, 1]]}',
    '{"n_parts": 2, "edges": [[0, 1, 1]]}',
    '{"edges": []}',
    '{"n_parts": 0, "edges": []}',
])
def test_graph_json_validation(text):
    with pytest.raises(GraphError):
        adjacency_from_json(text)


def test_validate_adjacency_returns_int():
    out = validate_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert out.dtype == np.int64


# ---------------------------------------------------------------------------
# GAT


def gat_oracle(h, a, W, a_src, a_dst):
    n = len(h)
    wh = h @ W
    out = np.zeros_like(wh)
    for i in range(n):
        nbrs = [j for j in range(n) if j == i or a[i, j]]
        scores = []
        for j in nbrs:
            e = float(a_src[:, 0] @ wh[i] + a_dst[:, 0] @ wh[j])
            scores.append(e if e > 0 else 0.2 * e)
        m = max(scores)
        ws = [math.exp(s - m) for s in scores]
        z = sum(ws)
        for w, j in zip(ws, nbrs):
            out[i] += w / z * wh[j]
    return out


def test_gat_path_graph_oracle():
    rng = np.random.default_rng(5)
    h, W = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    a_src, a_dst = rng.normal(size=(4, 1)), rng.normal(size=(4, 1))
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    out = gat_super_layer(Tensor(h), gat_mask(3, [(0, 1), (1, 2)]), Tensor(W), Tensor(a_src), Tensor(a_dst))
    np.testing.assert_allclose(out.data, gat_oracle(h, a, W, a_src, a_dst), atol=1e-10)


def test_gat_isolated_node():
    rng = np.random.default_rng(6)
    h, W = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
    out = gat_super_layer(Tensor(h), gat_mask(2, []), Tensor(W), Tensor(rng.normal(size=(3, 1))),
                          Tensor(rng.normal(size=(3, 1))))
    np.testing.assert_allclose(out.data, h @ W, atol=1e-14)


def test_gat_identical_neighbours():
    rng = np.random.default_rng(7)
    row, W = rng.normal(size=3), rng.normal(size=(3, 3))
    h = np.tile(row, (3, 1))
    out = gat_super_layer(Tensor(h), gat_mask(3, [(0, 1), (0, 2)]), Tensor(W),
                          Tensor(rng.normal(size=(3, 1))), Tensor(rng.normal(size=(3, 1))))
    np.testing.assert_allclose(out.data, np.tile(row @ W, (3, 1)), atol=1e-14)


def test_gat_mask_range():
    with pytest.raises(GraphError):
        gat_mask(2, [(0, 2)])


# ---------------------------------------------------------------------------
# GCN


def test_gcn_dense_oracle_full_part():
    rng = np.random.default_rng(8)
    h, W = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    op = gcn_operator(np.zeros(3, dtype=int), [(0, 1), (0, 2), (1, 2)])
    a_hat = np.ones((3, 3))
    deg = a_hat.sum(axis=1)
    ref = np.diag(deg ** -0.5) @ a_hat @ np.diag(deg ** -0.5) @ h @ W
    np.testing.assert_allclose(gcn_sub_layer(Tensor(h), op, Tensor(W)).data, ref, atol=1e-10)


def test_gcn_partial_edges_two_parts():
    # part 0 is a 3-token path, part 1 has two isolated tokens
    rng = np.random.default_rng(9)
    h, W = rng.normal(size=(6, 2)), rng.normal(size=(2, 2))
    part = np.array([0, 0, 0, 1, 1, 1])
    op = gcn_operator(part, [(0, 1), (1, 2), (3, 4)])
    a_hat = np.eye(6)
    for p, q in [(0, 1), (1, 2), (3, 4)]:
        a_hat[p, q] = a_hat[q, p] = 1
    deg = a_hat.sum(axis=1)
    ref = (a_hat / np.sqrt(np.outer(deg, deg))) @ h @ W
    np.testing.assert_allclose(gcn_sub_layer(Tensor(h), op, Tensor(W)).data, ref, atol=1e-12)


def test_gcn_single_token_parts():
    rng = np.random.default_rng(10)
    h, W = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
    op = gcn_operator(np.arange(3), [])
    np.testing.assert_allclose(gcn_sub_layer(Tensor(h), op, Tensor(W)).data, h @ W, atol=1e-14)


def test_gcn_equal_tokens_stay_equal():
    row, W = np.array([1.0, -1.0, 2.0]), np.eye(3)
    op = gcn_operator(np.zeros(4, dtype=int), [(i, j) for i in range(4) for j in range(i + 1, 4)])
    out = gcn_sub_layer(Tensor(np.tile(row, (4, 1))), op, Tensor(W)).data
    np.testing.assert_allclose(out, np.tile(row, (4, 1)), atol=1e-14)


def test_gcn_cross_part_edge_rejected():
    with pytest.raises(GraphError):
        gcn_operator(np.array([0, 0, 1, 1]), [(1, 2)])


# ---------------------------------------------------------------------------
# top-down / bottom-up


def _mlp_store(rng, name, dim):
    from graphpit import nn
    s = ParamStore()
    nn.add_mlp(s, name, 2 * dim, dim // 2, 1, rng)
    return s


def _mlp_arrays(s, name):
    return [s[f"{name}.{k}"].data for k in ("fc1.W", "fc1.b", "fc2.W", "fc2.b")]


def test_top_down_loop_oracle():
    rng = np.random.default_rng(11)
    sup, sub = rng.normal(size=(2, 4)), rng.normal(size=(4, 4))
    part = np.array([0, 0, 1, 1])
    s = _mlp_store(rng, "sc", 4)
    out, alpha = top_down_update(Tensor(sup), Tensor(sub), part, s, "sc")
    for k in range(4):
        i = part[k]
        logit = mlp_scalar(np.concatenate([sup[i], sub[k]])[None], *_mlp_arrays(s, "sc"))[0, 0]
        a = sigmoid(logit)
        assert alpha.data[k, 0] == pytest.approx(a, abs=1e-12)
        np.testing.assert_allclose(out.data[k], sub[k] + a * sup[i], atol=1e-12)


def test_top_down_zero_mlp_half_gate():
    rng = np.random.default_rng(12)
    sup, sub = rng.normal(size=(1, 4)), rng.normal(size=(2, 4))
    s = _mlp_store(rng, "sc", 4)
    zero_mlp(s, "sc")
    out, _ = top_down_update(Tensor(sup), Tensor(sub), np.zeros(2, dtype=int), s, "sc")
    np.testing.assert_allclose(out.data, sub + 0.5 * sup, atol=1e-15)


def test_top_down_closed_gate():
    rng = np.random.default_rng(13)
    sup, sub = rng.normal(size=(1, 4)), rng.normal(size=(2, 4))
    s = _mlp_store(rng, "sc", 4)
    zero_mlp(s, "sc")
    s["sc.fc2.b"].data[...] = -1e4
    out, alpha = top_down_update(Tensor(sup), Tensor(sub), np.zeros(2, dtype=int), s, "sc")
    np.testing.assert_array_equal(out.data, sub)
    assert np.all(alpha.data == 0.0)


def test_bottom_up_loop_oracle():
    rng = np.random.default_rng(14)
    sup, sub = rng.normal(size=(2, 4)), rng.normal(size=(6, 4))
    part = np.repeat([0, 1], 3)
    s = _mlp_store(rng, "cs", 4)
    out, beta = bottom_up_update(Tensor(sub), Tensor(sup), part, 3, s, "cs")
    for i in range(2):
        acc = np.zeros(4)
        for k in range(3 * i, 3 * i + 3):
            b = sigmoid(mlp_scalar(np.concatenate([sub[k], sup[i]])[None], *_mlp_arrays(s, "cs"))[0, 0])
            assert beta.data[k, 0] == pytest.approx(b, abs=1e-12)
            acc += b * sub[k]
        np.testing.assert_allclose(out.data[i], acc / 3, atol=1e-12)


def test_bottom_up_zero_mlp_quarter():
    rng = np.random.default_rng(15)
    sup, sub = rng.normal(size=(1, 4)), rng.normal(size=(2, 4))
    s = _mlp_store(rng, "cs", 4)
    zero_mlp(s, "cs")
    out, _ = bottom_up_update(Tensor(sub), Tensor(sup), np.zeros(2, dtype=int), 2, s, "cs")
    np.testing.assert_allclose(out.data[0], 0.25 * (sub[0] + sub[1]), atol=1e-15)
    out, _ = bottom_up_update(Tensor(np.zeros((2, 4))), Tensor(sup), np.zeros(2, dtype=int), 2, s, "cs")
    assert np.all(out.data == 0)


# ---------------------------------------------------------------------------
# finalize and full forward


def test_layer_finalize_cases():
    rng = np.random.default_rng(16)
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    z = Tensor(np.zeros((2, 4)))
    out = layer_finalize(z, z, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(out.data == 0)
    h = rng.normal(size=(2, 4))
    out = layer_finalize(Tensor(-h), Tensor(h), Tensor(gain), Tensor(bias))
    np.testing.assert_allclose(out.data, np.tile(bias, (2, 1)), atol=1e-15)
    h2 = rng.normal(size=(3, 4))
    h1 = rng.normal(size=(3, 4))
    out = layer_finalize(Tensor(h2), Tensor(h1), Tensor(gain), Tensor(bias))
    np.testing.assert_allclose(out.data, layer_norm_rows(h2 + h1, gain, bias), atol=1e-12)


def test_forward_shapes_and_gates():
    rng = np.random.default_rng(17)
    g = assemble_hier_graph(*random_graph(rng, 2, 4, 8, p=1.0))
    s = ParamStore()
    params = init_aggregator(s, 8, 2, rng)
    out = aggregate_forward(g, params)
    assert out.h_sub.shape == (8, 8) and out.h_super.shape == (2, 8)
    for gate in out.alphas + out.betas:
        assert np.all((gate.data > 0) & (gate.data < 1))


def test_zero_layers_is_identity():
    rng = np.random.default_rng(18)
    g = assemble_hier_graph(*random_graph(rng, 3, 2, 4))
    out = aggregate_forward(g, init_aggregator(ParamStore(), 4, 0, rng))
    np.testing.assert_array_equal(out.h_sub.data, g.sub_x0)
    np.testing.assert_array_equal(out.h_super.data, g.super_x0)


def test_forward_is_permutation_equivariant():
    rng = np.random.default_rng(19)
    params = init_aggregator(ParamStore(), 6, 2, rng)
    tokens, a = random_graph(rng, 5, 3, 6)
    perm = rng.permutation(5)
    out = aggregate_forward(assemble_hier_graph(tokens, a), params)
    outp = aggregate_forward(assemble_hier_graph([tokens[p] for p in perm], a[np.ix_(perm, perm)]), params)
    np.testing.assert_allclose(outp.h_super.data, out.h_super.data[perm], atol=1e-10)
    np.testing.assert_allclose(outp.h_sub.data.reshape(5, 3, 6), out.h_sub.data.reshape(5, 3, 6)[perm],
                               atol=1e-10)


def test_batched_forward_equals_separate():
    rng = np.random.default_rng(20)
    params = init_aggregator(ParamStore(), 4, 2, rng)
    g1 = assemble_hier_graph(*random_graph(rng, 2, 2, 4))
    g2 = assemble_hier_graph(*random_graph(rng, 3, 2, 4))
    both = aggregate_forward(batch_graphs([g1, g2]), params)
    o1, o2 = aggregate_forward(g1, params), aggregate_forward(g2, params)
    np.testing.assert_allclose(both.h_sub.data, np.concatenate([o1.h_sub.data, o2.h_sub.data]), atol=1e-12)


def test_aggregator_gradients_match_finite_differences():
    from graphpit.gradcheck import finite_diff_check
    rng = np.random.default_rng(21)
    g = assemble_hier_graph(*random_graph(rng, 3, 2, 8, p=0.7))
    s = ParamStore()
    params = init_aggregator(s, 8, 2, rng)
    w_sub, w_sup = rng.normal(size=(6, 8)), rng.normal(size=(3, 8))

    def f(store):
        out = aggregate_forward(g, params)
        return T.add(T.sum(T.mul(out.h_sub, Tensor(w_sub))), T.sum(T.mul(out.h_super, Tensor(w_sup))))

    assert finite_diff_check(f, s, 1e-6) < 1e-3
