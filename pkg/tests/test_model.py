import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from temporal_mp import autodiff as ad
from temporal_mp.autodiff import SegmentIndex, Tensor
from temporal_mp.errors import ConfigError, DimensionError, EmptyReductionError
from temporal_mp.graph import TransactionGraph
from temporal_mp.model import (ModelConfig, ModelParams, aggregate_messages, effective_timestamp, embed_inputs,
                               fit_pna_delta, fit_time_scale, forward, init_params, logits_for, make_batch,
                               merge_parallel_edges, message_alpha, neighbourhood_weights, param_shapes, predict,
                               temporal_weights, temporal_weights_sgmp, update_edges, update_nodes)
from temporal_mp.sampler import full_subgraph

from helpers import random_graph, reference_forward, relabel_nodes

COMBOS = [(m, b) for m in ("with_agg", "without_agg") for b in ("gin", "pna")]


def config_for(g, **kw):
    kw.setdefault("hidden", 4)
    kw.setdefault("task", g.task)
    return ModelConfig(node_in=g.node_features.shape[1], edge_in=g.edge_features.shape[1], **kw)


def run(g, params, cfg):
    batch = make_batch(g, full_subgraph(g), cfg.mode, cfg.timestamp_reducer)
    out = forward(batch, params, cfg)
    return batch, out, predict(out, batch, params, cfg)


# ---------------------------------------------------------------------------
# effective timestamps and temporal weights
# ---------------------------------------------------------------------------

def test_effective_timestamp_examples():
    assert effective_timestamp([3, 7, 5], "max") == 7
    assert effective_timestamp([3, 7, 5], "min") == 3
    for r in ("mean", "min", "max"):
        assert effective_timestamp([42.0], r) == 42.0
    assert effective_timestamp([3, 7, 5], "sum") == 15
    with pytest.raises(ConfigError):
        effective_timestamp([1.0], "median")
    with pytest.raises(EmptyReductionError):
        effective_timestamp([], "max")


def test_alpha_examples():
    assert temporal_weights([123456.0]).tolist() == [2.0]
    assert temporal_weights([5.0, 5.0]).tolist() == [1.5, 1.5]
    np.testing.assert_allclose(temporal_weights([0.0, math.log(3)]), [1.25, 1.75], atol=1e-15)
    assert temporal_weights_sgmp([9.0]).tolist() == [2.0]
    assert temporal_weights_sgmp([2.0, 2.0]).tolist() == [1.5, 1.5]
    np.testing.assert_allclose(temporal_weights_sgmp([0.0, 0.0, math.log(2)]), [1.25, 1.25, 1.5], atol=1e-15)
    with pytest.raises(EmptyReductionError):
        temporal_weights([])


def test_alpha_raw_epoch_seconds_do_not_overflow():
    a = temporal_weights([1.7e9, 1.7e9 + 10.0], scale=1.0)
    assert np.isfinite(a).all() and a.sum() == pytest.approx(3.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=12), st.floats(1e-4, 1e-2))
def test_neighbourhood_weights_match_per_neighbourhood(ts, scale):
    rng = np.random.default_rng(len(ts))
    seg_ids = rng.integers(0, 3, size=len(ts))
    seg = SegmentIndex(seg_ids, 3)
    got = neighbourhood_weights(np.array(ts), seg, scale)
    for s in range(3):
        idx = np.flatnonzero(seg_ids == s)
        if idx.size:
            np.testing.assert_allclose(got[idx], temporal_weights(np.array(ts)[idx], scale), atol=1e-14)


def alpha_oracle(g: TransactionGraph, mode: str, reducer: str, scale: float) -> dict:
    """(receiver, item) -> alpha, straight from the definitions with math.exp."""
    red = {"max": max, "min": min, "sum": math.fsum, "mean": lambda v: math.fsum(v) / len(v)}[reducer]
    entries: dict[int, list] = {}
    if mode == "with_agg":
        pi = g.pair_index
        for p in range(pi.num_pairs):
            mem = pi.edges_of(p)
            t = red([float(g.timestamps[e]) for e in mem])
            a, b = pi.ends[p]
            for r in {int(a), int(b)}:
                entries.setdefault(r, []).append((p, t))
    else:
        for e in range(g.num_edges):
            for r in {int(g.src[e]), int(g.dst[e])}:
                entries.setdefault(r, []).append((e, float(g.timestamps[e])))
    out = {}
    for r, lst in entries.items():
        top = max(t for _, t in lst)
        w = [math.exp(scale * (t - top)) for _, t in lst]
        total = math.fsum(w)
        for (item, _), wi in zip(lst, w):
            out[(r, item)] = 1.0 + wi / total
    return out


@pytest.mark.parametrize("mode", ["with_agg", "without_agg"])
@pytest.mark.parametrize("reducer", ["sum", "mean", "min", "max"])
def test_message_alpha_matches_oracle(mode, reducer):
    g = random_graph(5, n=7, e=16, self_loops=True)
    cfg = config_for(g, mode=mode, timestamp_reducer=reducer, tau=3.0, time_scale=4000.0)
    batch = make_batch(g, full_subgraph(g), mode, reducer)
    alpha = message_alpha(batch, cfg)
    oracle = alpha_oracle(g, mode, reducer, cfg.tau / cfg.time_scale)
    for r, it, a in zip(batch.receiver, batch.item, alpha):
        assert a == pytest.approx(oracle[(int(r), int(it))], abs=1e-12)
    assert message_alpha(batch, cfg.replace(temporal=False)).tolist() == [1.0] * alpha.size


# ---------------------------------------------------------------------------
# layer pieces
# ---------------------------------------------------------------------------

def test_embed_identity_and_zero():
    cfg = ModelConfig(node_in=3, edge_in=2, hidden=5)
    P = init_params(cfg)
    P["x_emb.W"] = Tensor(np.eye(3, 5))
    P["z_emb.W"] = Tensor(np.eye(2, 5))
    x = np.arange(6.0).reshape(2, 3)
    z = np.arange(4.0).reshape(2, 2)
    xe, ze = embed_inputs(x, z, P, cfg)
    np.testing.assert_array_equal(xe.data, np.pad(x, ((0, 0), (0, 2))))
    np.testing.assert_array_equal(ze.data, np.pad(z, ((0, 0), (0, 3))))
    xe, _ = embed_inputs(np.zeros((2, 3)), z, P, cfg)
    assert not xe.data.any()
    with pytest.raises(DimensionError):
        embed_inputs(np.zeros((2, 4)), z, P, cfg)


def test_merge_examples():
    out = merge_parallel_edges(Tensor([[1.0, 3.0], [3.0, 5.0]]), [0, 0], 1)
    np.testing.assert_array_equal(out.data, [[2.0, 4.0]])
    single = Tensor([[0.1, 0.2, 0.3]])
    np.testing.assert_array_equal(merge_parallel_edges(single, [0], 1).data, single.data)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_merge_bit_identical_over_all_member_orders(k):
    rng = np.random.default_rng(k)
    embs = rng.normal(size=(k, 6)) * 10 ** rng.uniform(-3, 3, size=(k, 1))
    ids = np.arange(k) * 7 + 3
    ref = merge_parallel_edges(Tensor(embs), np.zeros(k, int), 1, member_index=ids).data
    for perm in itertools.permutations(range(k)):
        p = list(perm)
        out = merge_parallel_edges(Tensor(embs[p]), np.zeros(k, int), 1, member_index=ids[p]).data
        assert np.array_equal(out, ref)


def test_isolated_node_gets_zero_message():
    g = TransactionGraph(np.ones((3, 1)), [0], [1], np.ones((1, 1)), [5.0], edge_labels=[1])
    for backend in ("gin", "pna"):
        cfg = config_for(g, backend=backend)
        P = init_params(cfg, 1)
        batch = make_batch(g, full_subgraph(g))
        x, z0 = embed_inputs(batch.x, batch.z, P, cfg)
        m = aggregate_messages(x, merge_parallel_edges(z0, batch.pair_seg), batch, message_alpha(batch, cfg), P, cfg, 0)
        assert not m.data[2].any()


def test_one_neighbour_gin_message_is_twice_phi():
    g = TransactionGraph(np.array([[0.3], [-0.2]]), [0], [1], np.array([[0.7]]), [5.0], edge_labels=[1])
    cfg = config_for(g)
    P = init_params(cfg, 2)
    batch = make_batch(g, full_subgraph(g))
    x, z0 = embed_inputs(batch.x, batch.z, P, cfg)
    on = aggregate_messages(x, z0, batch, message_alpha(batch, cfg), P, cfg, 0).data
    off = aggregate_messages(x, z0, batch, np.ones(2), P, cfg, 0).data
    np.testing.assert_allclose(on, 2 * off, rtol=0, atol=1e-15)
    # phi for node 1: message from node 0 travelling with the edge direction
    phi = np.maximum(x.data[0] + z0.data[0] + P["layer0.dir"].data[0], 0)
    np.testing.assert_allclose(on[1], 2 * phi, atol=1e-15)


def test_alpha_weights_edge_part_only_when_asked():
    g = random_graph(1)
    cfg = config_for(g, tau=2.0, time_scale=3000.0)
    P = init_params(cfg, 0)
    _, a, _ = run(g, P, cfg)
    _, b, _ = run(g, P, cfg.replace(alpha_target="edge"))
    assert not np.allclose(a.nodes.data, b.nodes.data)


def test_update_nodes_identity():
    cfg = ModelConfig(node_in=1, edge_in=1, hidden=4)
    P = init_params(cfg)
    for name in ("layer0.node.W1", "layer0.node.W2"):
        P[name] = Tensor(np.eye(4))
    x = Tensor(np.abs(np.random.default_rng(0).normal(size=(3, 4))))
    out = update_nodes(x, Tensor(np.zeros((3, 4))), P, cfg, 0)
    np.testing.assert_allclose(out.data, x.data, atol=1e-15)
    with pytest.raises(DimensionError):
        update_nodes(x, Tensor(np.zeros((2, 4))), P, cfg, 0)


@pytest.mark.parametrize("backend", ["gin", "pna"])
def test_update_nodes_finite(backend):
    cfg = ModelConfig(node_in=1, edge_in=1, hidden=5, backend=backend)
    P = init_params(cfg, 3)
    rng = np.random.default_rng(0)
    for _ in range(100):
        out = update_nodes(Tensor(rng.normal(size=(4, 5)) * 10), Tensor(rng.normal(size=(4, 5)) * 10), P, cfg, 0)
        assert np.isfinite(out.data).all()


def test_update_edges_zero_weights_and_direction():
    cfg = ModelConfig(node_in=1, edge_in=1, hidden=3)
    P = init_params(cfg, 4)
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3)))
    z = Tensor(rng.normal(size=(1, 3)))
    fwd = update_edges(x, z, np.array([[0, 1]]), P, 0).data
    rev = update_edges(x, z, np.array([[1, 0]]), P, 0).data
    assert not np.allclose(fwd, rev)
    Z = ModelParams({k: Tensor(np.zeros_like(v.data)) for k, v in P.items()})
    assert not update_edges(x, z, np.array([[0, 1]]), Z, 0).data.any()


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_zero_params_give_zero_embeddings():
    g = random_graph(0)
    cfg = config_for(g, layers=1)
    P = ModelParams({k: Tensor(np.zeros(s)) for k, s in param_shapes(cfg).items()})
    _, out, logits = run(g, P, cfg)
    assert not out.nodes.data.any() and not out.items.data.any()
    assert not logits.data.any()


@pytest.mark.parametrize("mode,backend", COMBOS)
@pytest.mark.parametrize("task", ["edge", "node"])
@pytest.mark.parametrize("seed", range(4))
def test_forward_matches_loop_reference(mode, backend, task, seed):
    g = random_graph(seed, n=7, e=14, task=task, self_loops=seed % 2 == 0)
    cfg = config_for(g, mode=mode, backend=backend, tau=4.0, time_scale=2500.0, pna_delta=0.9)
    P = init_params(cfg, seed)
    arrays = {k: v.data for k, v in P.items()}
    _, out, logits = run(g, P, cfg)
    alpha = alpha_oracle(g, mode, "max", cfg.tau / cfg.time_scale)
    x, items, _, ref_logits = reference_forward(g, arrays, cfg.layers, mode, backend, alpha=alpha, pna_delta=0.9)
    np.testing.assert_allclose(out.nodes.data, x, atol=1e-12, rtol=0)
    np.testing.assert_allclose(logits.data, ref_logits, atol=1e-12, rtol=0)


def test_with_and_without_agg_agree_when_every_pair_has_one_edge():
    rng = np.random.default_rng(0)
    n = 6
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    chosen = [pairs[i] for i in rng.choice(len(pairs), size=9, replace=False)]
    src = [a if rng.random() < 0.5 else b for a, b in chosen]
    dst = [b if s == a else a for (a, b), s in zip(chosen, src)]
    g = TransactionGraph(rng.normal(size=(n, 2)), src, dst, rng.normal(size=(9, 2)), rng.uniform(0, 1e4, 9),
                         edge_labels=rng.integers(0, 2, 9))
    cfg = config_for(g, tau=3.0, time_scale=5e3)
    P = init_params(cfg, 1)
    _, a, la = run(g, P, cfg)
    _, b, lb = run(g, P, cfg.replace(mode="without_agg"))
    np.testing.assert_allclose(a.nodes.data, b.nodes.data, atol=1e-12)
    np.testing.assert_allclose(la.data, lb.data, atol=1e-12)


@pytest.mark.parametrize("mode,backend", COMBOS)
def test_node_relabelling_equivariance(mode, backend):
    for seed in range(5):
        g = random_graph(seed, n=5, e=9)
        perm = np.random.default_rng(seed).permutation(5)
        h = relabel_nodes(g, perm)
        cfg = config_for(g, mode=mode, backend=backend, time_scale=3000.0)
        P = init_params(cfg, seed)
        _, a, la = run(g, P, cfg)
        _, b, lb = run(h, P, cfg)
        np.testing.assert_allclose(b.nodes.data[perm], a.nodes.data, atol=1e-12)
        np.testing.assert_allclose(lb.data, la.data, atol=1e-12)


def test_predict_zero_head_and_parallel_edges_differ():
    g = TransactionGraph(np.ones((2, 1)), [0, 0], [1, 1], np.array([[0.0], [1.0]]), [1.0, 2.0], edge_labels=[0, 1])
    cfg = config_for(g)
    P = init_params(cfg, 0)
    _, _, logits = run(g, P, cfg)
    assert not np.allclose(logits.data[0], logits.data[1])
    for k in ("head.W2", "head.b2"):
        P[k] = Tensor(np.zeros_like(P[k].data))
    _, _, logits = run(g, P, cfg)
    np.testing.assert_array_equal(logits.data, np.zeros((2, 2)))


def test_predict_task_mismatch():
    g = random_graph(0)
    cfg = config_for(g, task="node")
    with pytest.raises(ConfigError):
        logits_for(g, full_subgraph(g, task="edge"), init_params(cfg), cfg)
    with pytest.raises(ConfigError):
        ModelConfig(node_in=1, edge_in=1, backend="gat")


def test_fit_helpers():
    g = TransactionGraph(np.ones((3, 1)), [0, 0, 1], [1, 1, 2], np.zeros((3, 1)), [0.0, 10.0, 30.0],
                         edge_labels=[0, 0, 1])
    # with_agg: only node 1 sees two pairs (t=10 and t=30)
    assert fit_time_scale(g) == 20.0
    # without_agg: node 0 spans 0..10, node 1 spans 0..30
    assert fit_time_scale(g, mode="without_agg") == 20.0
    assert fit_time_scale(g, reducer="min") == 30.0
    assert fit_pna_delta(g) == pytest.approx(np.mean(np.log([2, 3, 2])))
    assert fit_pna_delta(g, [False, True, False]) == pytest.approx(math.log(3))


def test_model_grad_flows_to_every_parameter():
    g = random_graph(2)
    for mode, backend in COMBOS:
        cfg = config_for(g, mode=mode, backend=backend, time_scale=3000.0)
        P = init_params(cfg, 0)
        _, _, logits = run(g, P, cfg)
        ad.backward(ad.reduce(ad.mul(logits, logits)))
        assert all(p.grad is not None for p in P.values())
