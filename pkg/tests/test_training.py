import logging

import numpy as np
import pytest

from edenet import gpr_sim as sim
from edenet import network as net
from edenet import numerics as nx
from edenet import training as tr
from edenet.errors import ConfigError, UsageError
from edenet.numerics import Param, Tensor
from oracles import dist, rel_err, triplet_loops


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _tiny_data(seed=0, n=50):
    return sim.make_dataset(seed, n, sim.SimConfig(D=16, C=2, time_bin=2.0), 4.0, 5.0, 0.3)


# -- mining


def test_mine_positive_examples():
    q = np.array([1.0, 0.0])
    assert tr.mine_positive(q, np.array([[0.0, 1.0]])) == 0
    assert tr.mine_positive(q, np.array([[0.0, 1.0], [1.0, 0.0], [0.6, 0.8]])) == 1
    # ties resolve to the lowest index
    assert tr.mine_positive(q, np.array([[0.0, 1.0], [0.0, -1.0]])) == 0
    with pytest.raises(tr.MiningError):
        tr.mine_positive(q, np.zeros((0, 2)))


@pytest.mark.parametrize("seed", range(20))
def test_mine_positive_matches_scan(seed):
    rng = np.random.default_rng(seed)
    q, cands = _unit(rng, 6), _unit(rng, 10, 6)
    d = [dist(c.tolist(), q.tolist()) for c in cands]
    assert tr.mine_positive(q, cands) == d.index(min(d))


def test_sampling_respects_geography():
    rng = np.random.default_rng(0)
    poses = np.column_stack([np.arange(40.0), np.zeros(40)])
    emb = _unit(rng, 40, 5)
    cfg = tr.TrainConfig(negatives=10)
    for qi in range(40):
        p, ns = tr.sample_triplets(poses[qi], emb[qi], poses, emb, cfg, rng)
        assert abs(p - qi) <= 3
        assert len(ns) == 10 and len(set(ns.tolist())) == 10
        assert np.all(np.abs(ns - qi) > 3)
        # the positive is the embedding-nearest of the geographic candidates
        cands = [i for i in range(40) if abs(i - qi) <= 3]
        assert p == cands[tr.mine_positive(emb[qi], emb[cands])]


def test_sampling_without_candidates():
    rng = np.random.default_rng(1)
    poses = np.column_stack([np.arange(3.0), np.zeros(3)])
    with pytest.raises(tr.MiningError):
        tr.sample_triplets(np.array([1.0, 0]), np.ones(2), poses, np.ones((3, 2)), tr.TrainConfig(), rng)
    with pytest.raises(tr.MiningError):
        tr.sample_triplets(np.array([100.0, 0]), np.ones(2), poses, np.ones((3, 2)), tr.TrainConfig(), rng)


# -- loss


def test_loss_zero_when_margin_cleared():
    q = Tensor([1.0, 0.0])
    negs = Tensor([[0.0, 1.0], [-1.0, 0.0], [np.cos(0.4), np.sin(0.4)]])
    # d(q, n) >= 0.39 > margin 0.3 and d(q, p) = 0
    assert tr.triplet_loss(q, q, negs, 0.3).item() == 0.0


def test_loss_hand_case():
    q = Tensor([0.0, 0.0])
    p = Tensor([0.5, 0.0])
    n = Tensor([[0.0, 0.2]])
    assert tr.triplet_loss(q, p, n, 0.3).item() == pytest.approx(0.6, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_loss_matches_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    q, p, n = _unit(rng, 8), _unit(rng, 8), _unit(rng, 5, 8)
    ref = triplet_loops(q.tolist(), p.tolist(), n.tolist(), 0.3)
    out = tr.triplet_loss(Tensor(q), Tensor(p), Tensor(n), 0.3).item()
    assert rel_err(out, ref) < 1e-6


def test_loss_non_negative_and_zero_iff_cleared():
    rng = np.random.default_rng(2)
    for _ in range(200):
        q, p, n = _unit(rng, 4), _unit(rng, 4), _unit(rng, 6, 4)
        m = rng.uniform(0.01, 1.0)
        L = tr.triplet_loss(Tensor(q), Tensor(p), Tensor(n), m).item()
        cleared = np.all(m + np.linalg.norm(q - p) - np.linalg.norm(n - q, axis=1) <= 0)
        assert L >= 0 and (L == 0) == cleared


def test_loss_shape_errors():
    with pytest.raises(nx.DimensionError):
        tr.triplet_loss(Tensor(np.ones(3)), Tensor(np.ones(3)), Tensor(np.ones((2, 4))), 0.3)


def test_loss_gradient_through_network():
    cfg = net.preset("tiny")
    model = net.EDENet(cfg, seed=5)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 2, 16, 8))

    def f():
        F = model.forward(Tensor(X), train=True)
        return tr.triplet_loss(F[0], F[1], F[2:], 2.5)  # wide margin keeps every hinge active

    assert f().item() > 0
    assert nx.grad_check(f, model.params(), h=1e-5) < 1e-3


# -- optimizer


def test_adam_zero_gradient_leaves_params():
    p = Param(np.array([1.0, -2.0]))
    opt = tr.Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_sized():
    p = Param(np.array([1.0, -2.0, 0.5]))
    opt = tr.Adam([p], lr=1e-3)
    g = np.array([0.3, -7.0, 1e-2])
    p.grad = g.copy()
    opt.step()
    np.testing.assert_allclose(p.data - [1.0, -2.0, 0.5], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_descends_quadratic_bowl():
    rng = np.random.default_rng(4)
    A = np.diag(rng.uniform(0.5, 5.0, 6))
    p = Param(rng.normal(size=6) * 3)
    opt = tr.Adam([p], lr=0.05)
    losses = []
    for _ in range(100):
        loss = 0.5 * p.data @ A @ p.data
        losses.append(loss)
        p.grad = A @ p.data
        opt.step()
    tail = np.array(losses[10:])
    assert np.all(np.diff(tail) < 0)


def test_adam_skips_non_finite(caplog):
    p = Param(np.array([1.0, 2.0]))
    opt = tr.Adam([p], lr=0.1)
    p.grad = np.array([np.nan, 1.0])
    with caplog.at_level(logging.WARNING):
        assert opt.step() is False
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert p.grad is None and opt.t == 0
    assert "non-finite" in caplog.text


# -- splitting and training


def test_split_uses_only_windows_inside_segments():
    frames = np.random.default_rng(5).normal(size=(20, 4, 1))
    poses = np.column_stack([np.arange(20.0), np.zeros(20)])
    tr_set, val = tr.split_windows(sim.GprSequence(frames, poses), 4, 0.7)
    # 14 training frames -> 11 windows, 6 validation frames -> 3 windows
    assert len(tr_set.windows) == 11 and len(val.windows) == 3
    assert tr_set.poses[:, 0].max() == 12 and val.poses[:, 0].min() >= 14
    with pytest.raises(UsageError):
        tr.split_windows(sim.GprSequence(frames, poses), 8, 0.7)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(margin=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(train_fraction=1.0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(max_steps=-1)


def test_zero_epochs_keeps_initialisation():
    m, q = _tiny_data()
    cfg = tr.TrainConfig(epochs=0)
    res = tr.train([(m, q)], cfg, net.preset("tiny"))
    init = net.EDENet(net.preset("tiny"), seed=cfg.seed)
    assert res.step == 0 and res.log == []
    for name, p in init.named_params().items():
        np.testing.assert_array_equal(res.net.named_params()[name].data, p.data)


def test_train_rejects_mismatched_inputs():
    m, q = _tiny_data()
    with pytest.raises(ConfigError):
        tr.train([(m, q)], tr.TrainConfig(), net.preset("experiment"))
    shifted = sim.GprSequence(q.frames, q.poses + 1.0)
    with pytest.raises(UsageError):
        tr.train([(m, shifted)], tr.TrainConfig(), net.preset("tiny"))
    with pytest.raises(UsageError):
        tr.train([], tr.TrainConfig(), net.preset("tiny"))


def test_training_halves_loss_in_200_steps():
    m, q = _tiny_data()
    ncfg = net.preset("tiny")
    cfg = tr.TrainConfig(epochs=1000, max_steps=200, seed=0)
    model = net.EDENet(ncfg, seed=0)
    before = tr.dataset_loss(model, m, q, cfg, ncfg.window)
    res = tr.train([(m, q)], cfg, ncfg, net=model)
    assert res.step == 200
    assert tr.dataset_loss(res.net, m, q, cfg, ncfg.window) <= 0.5 * before
    assert all(set(r) == {"epoch", "step", "loss", "val_recall@1"} for r in res.log)
    assert all(0.0 <= r["val_recall@1"] <= 1.0 for r in res.log)


def test_training_is_deterministic():
    m, q = _tiny_data(1, 30)
    cfg = tr.TrainConfig(epochs=2, seed=3, learning_rate=1e-3)
    a = tr.train([(m, q)], cfg, net.preset("tiny"))
    b = tr.train([(m, q)], cfg, net.preset("tiny"))
    assert a.log == b.log
    for name, p in a.net.named_params().items():
        np.testing.assert_array_equal(p.data, b.net.named_params()[name].data)


def test_multi_scene_training_and_records():
    pairs = [_tiny_data(s, 30) for s in (2, 3)]
    seen = []
    res = tr.train(pairs, tr.TrainConfig(epochs=2, max_steps=5), net.preset("tiny"), on_record=seen.append)
    assert res.step == 5 and seen == res.log
    assert res.log[-1]["step"] == 5


def test_checkpoint_round_trip_in_memory():
    model = net.EDENet(net.preset("tiny"), seed=4)
    ck = tr.Checkpoint.of(model, step=7)
    X = np.random.default_rng(6).normal(size=(3, 2, 16, 8))
    np.testing.assert_array_equal(ck.build().encode_windows(X), model.encode_windows(X))
