import math

import numpy as np
import pytest

from temporal_mp import autodiff as ad
from temporal_mp.autodiff import Tensor
from temporal_mp.errors import ConfigError, ContractError
from temporal_mp.graph import TransactionGraph, temporal_split
from temporal_mp.model import ModelConfig, ModelParams, init_params, logits_for
from temporal_mp.sampler import Fanout, batch_seeds, sample_two_hop
from temporal_mp.training import (
    AdamState, EarlyStopping, TrainConfig, adam_step, evaluate_split, inverse_frequency_weights,
    l2_penalty, load_checkpoint, loss, prepare, save_checkpoint, train,
)


def separable_graph(seed: int = 0, n: int = 40, e: int = 240) -> TransactionGraph:
    """Edge labels are the sign of the first edge feature (illicit when positive, about 25%)."""
    rng = np.random.default_rng(seed)
    src = rng.integers(n, size=e)
    dst = (src + rng.integers(1, n, size=e)) % n
    labels = (rng.random(e) < 0.25).astype(int)
    z = np.column_stack([np.where(labels == 1, 1.0, -1.0) + 0.1 * rng.normal(size=e), rng.normal(size=e)])
    return TransactionGraph(rng.normal(size=(n, 2)), src, dst, z, np.sort(rng.uniform(0, 1e6, e)),
                            task="edge", edge_labels=labels)


def small_cfg(g: TransactionGraph, **kw) -> ModelConfig:
    base = dict(node_in=g.node_features.shape[1], edge_in=g.edge_features.shape[1], hidden=8, task=g.task,
                time_scale=1e5)
    base.update(kw)
    return ModelConfig(**base)


QUICK = TrainConfig(lr=1e-2, batch_size=64, max_epochs=6, patience=3, fanout1=5, fanout2=5, eval_batch_size=256)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_loss_perfect_and_uniform():
    assert loss(Tensor([[1000.0, -1000.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    assert loss(Tensor([[0.0, 0.0]]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_loss_adds_weighted_l2():
    P = ModelParams({"head.W": Tensor([[1.0, 2.0]], requires_grad=True),
                     "head.b": Tensor([5.0], requires_grad=True)})
    base = loss(Tensor([[0.0, 0.0]]), [0]).item()
    assert loss(Tensor([[0.0, 0.0]]), [0], P, 0.1).item() - base == pytest.approx(0.5, abs=1e-12)
    assert l2_penalty(P).item() == 5.0          # biases excluded


def test_l2_gradient_is_2_lambda_w():
    rng = np.random.default_rng(0)
    P = ModelParams({"a.W1": Tensor(rng.normal(size=(3, 2)), requires_grad=True),
                     "a.b1": Tensor(rng.normal(size=2), requires_grad=True)})
    ad.backward(ad.scale(l2_penalty(P), 0.3))
    np.testing.assert_allclose(P["a.W1"].grad, 0.6 * P["a.W1"].data, atol=1e-15)
    assert P["a.b1"].grad is None or not P["a.b1"].grad.any()


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(7, 2)) * 30
    y = rng.integers(0, 2, 7)
    direct = np.mean([math.log(sum(math.exp(v - max(row)) for v in row)) + max(row) - row[c]
                      for row, c in zip(X.tolist(), y)])
    assert loss(Tensor(X), y).item() == pytest.approx(direct, abs=1e-12)


def test_cross_entropy_gradient():
    X = Tensor(np.array([[0.3, -0.2], [1.0, 2.0]]), requires_grad=True)
    ad.backward(loss(X, [1, 0]))
    p = np.exp(X.data) / np.exp(X.data).sum(1, keepdims=True)
    onehot = np.array([[0, 1], [1, 0]])
    np.testing.assert_allclose(X.grad, (p - onehot) / 2, atol=1e-15)


def test_class_weights():
    w = inverse_frequency_weights([0, 0, 0, 1], 2)
    np.testing.assert_allclose(w, [4 / 6, 2.0])
    # weighted mean, weights renormalised to average one
    X = Tensor(np.zeros((4, 2)))
    assert loss(X, [0, 0, 0, 1], class_weights=w).item() == pytest.approx(math.log(2), abs=1e-15)


def test_loss_contract():
    with pytest.raises(ContractError):
        loss(Tensor(np.zeros((2, 2))), [0])
    with pytest.raises(ContractError):
        loss(Tensor(np.zeros((1, 2))), [2])


# ---------------------------------------------------------------------------
# Adam and early stopping
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    P = ModelParams({"x.W": Tensor(np.array([[1.0, -2.0]]), requires_grad=True)})
    adam_step(P, AdamState(), 0.1)
    np.testing.assert_array_equal(P["x.W"].data, [[1.0, -2.0]])


def test_adam_first_step_is_lr_times_sign():
    P = ModelParams({"x.W": Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)})
    P["x.W"].grad = np.array([[3.0, -0.01, 100.0]])
    adam_step(P, AdamState(), 1e-3)
    np.testing.assert_allclose(P["x.W"].data, [[1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3]], atol=1e-9)


def test_adam_deterministic():
    def run():
        P = init_params(ModelConfig(node_in=2, edge_in=2, hidden=4), 3)
        st = AdamState()
        for k in range(3):
            for name, p in P.items():
                p.grad = np.full(p.shape, 0.1 * (k + 1))
            adam_step(P, st, 0.01)
        return P.arrays()
    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_early_stopping_sequence():
    es = EarlyStopping(2)
    stops = []
    for epoch, score in enumerate([0.3, 0.5, 0.4, 0.4], start=1):
        es.update(epoch, score)
        stops.append(es.should_stop)
    assert stops == [False, False, False, True]
    assert es.best_epoch == 2 and es.best == 0.5
    with pytest.raises(ConfigError):
        EarlyStopping(0)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(weight_decay=-1)
    assert TrainConfig.from_dict(TrainConfig(lr=0.5).to_dict()) == TrainConfig(lr=0.5)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    g = separable_graph()
    splits = temporal_split(g)
    gn, stats = prepare(g, splits)
    cfg = small_cfg(gn)
    ckpt, trace = train(gn, splits, cfg, QUICK)
    return gn, splits, cfg, ckpt, trace


def test_loss_decreases(trained):
    *_, trace = trained
    assert len(trace) >= 5
    assert trace[4].train_loss < trace[0].train_loss


def test_checkpoint_is_best_epoch(trained):
    gn, splits, cfg, ckpt, trace = trained
    best = max(r.val_f1_min for r in trace)
    assert ckpt.val_f1_min == best
    assert trace[ckpt.epoch - 1].val_f1_min == best
    # re-evaluating the saved parameters reproduces the recorded score
    assert evaluate_split(gn, splits.val, ckpt.model_params(), cfg, QUICK).f1_min == best


def test_learns_separable_task(trained):
    gn, splits, cfg, ckpt, _ = trained
    assert evaluate_split(gn, splits.test, ckpt.model_params(), cfg, QUICK).f1_min > 0.8


def test_training_is_deterministic(trained):
    gn, splits, cfg, ckpt, trace = trained
    ckpt2, trace2 = train(gn, splits, cfg, QUICK)
    assert trace == trace2
    assert all(np.array_equal(ckpt.params[k], ckpt2.params[k]) for k in ckpt.params)


def test_checkpoint_round_trip(trained, tmp_path):
    gn, splits, cfg, ckpt, _ = trained
    save_checkpoint(ckpt, tmp_path / "a.npz")
    save_checkpoint(ckpt, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = load_checkpoint(tmp_path / "a.npz")
    assert back.model_config == cfg and back.train_config == QUICK and back.epoch == ckpt.epoch
    assert all(np.array_equal(back.params[k], ckpt.params[k]) for k in ckpt.params)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.npz")


def test_strong_weight_decay_shrinks_weights():
    g = separable_graph(1)
    splits = temporal_split(g)
    gn, _ = prepare(g, splits)
    cfg = small_cfg(gn)
    norms = []
    for lam in (0.0, 1.0):
        # final (not best) parameters after a fixed number of updates
        params, st, rng = init_params(cfg, 0), AdamState(), np.random.default_rng(0)
        for _ in range(3):
            for seeds in batch_seeds(gn, splits.train, 64, rng):
                sub = sample_two_hop(gn, seeds, Fanout(5, 5), rng, task="edge")
                params.zero_grad()
                ad.backward(loss(logits_for(gn, sub, params, cfg), gn.labels[seeds], params, lam))
                adam_step(params, st, 1e-2)
        norms.append(l2_penalty(params).item())
    assert norms[1] < norms[0]


def test_no_illicit_in_train_is_an_error():
    g = separable_graph()
    splits = temporal_split(g)
    labels = g.labels.copy()
    labels[splits.train] = 0
    g0 = TransactionGraph(g.node_features, g.src, g.dst, g.edge_features, g.timestamps,
                          task="edge", edge_labels=labels)
    with pytest.raises(ContractError):
        train(g0, splits, small_cfg(g0), QUICK)


def test_task_mismatch():
    g = separable_graph()
    with pytest.raises(ConfigError):
        train(g, temporal_split(g), small_cfg(g, task="node"), QUICK)
