import math

import numpy as np
import pytest
from scipy import ndimage

from edenet import gpr_sim as sim
from edenet import network as net
from edenet import numerics as nx
from edenet.errors import ConfigError, UsageError
from edenet.numerics import Param, Tensor
from oracles import conv2d_loops, matvec, maxpool_loops, rel_err


def _unit_weights(rng, k=6, s=3, q=3):
    return (Tensor(rng.normal(size=(s, k, q, q)) / 4), Tensor(rng.normal(size=s)),
            Tensor(rng.normal(size=(s, s, q, q)) / 4), Tensor(rng.normal(size=s)))


def _scene_windows(seed, cfg, n_locations=40):
    sim_cfg = sim.SimConfig(D=cfg.depth, C=cfg.channels)
    map_seq, _ = sim.make_dataset(seed, n_locations, sim_cfg, 4.0, 4.0, 0.0)
    return net.sequence_windows(map_seq, cfg.window)[0]


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_block_config_validation():
    with pytest.raises(ConfigError):
        net.EdeBlockConfig(4, 8)
    with pytest.raises(ConfigError):
        net.EdeBlockConfig(5, 1)
    with pytest.raises(ConfigError):
        net.NetConfig(scales=())
    with pytest.raises(UsageError):
        net.preset("huge")


def test_scale_defaults():
    cfg = net.preset("default")
    assert [s.K for s in cfg.scales] == [35, 11, 5]
    assert all(s.k == 64 for s in cfg.scales)
    assert cfg.descriptor_dim == 400 and cfg.window == 100
    assert [s.K for s in net.preset("four_scale").scales] == [35, 23, 11, 5]


def test_config_dict_round_trip():
    cfg = net.preset("experiment")
    assert net.NetConfig.from_dict(cfg.to_dict()) == cfg


def test_shift_unit_zero_weights():
    s, k = 3, 6
    z = lambda *shape: Tensor(np.zeros(shape))
    V = Tensor(np.random.default_rng(0).normal(size=(k, 10, 12)))
    out = net.shift_invariant_unit(V, z(s, k, 3, 3), z(s), z(s, s, 3, 3), z(s), net.EdeBlockConfig(5, k, s))
    assert out.shape == (s, 5, 6)
    assert not out.data.any()


def test_shift_unit_matches_loop_composition():
    rng = np.random.default_rng(1)
    cfg = net.EdeBlockConfig(5, 6, 3)
    W1, b1, W2, b2 = _unit_weights(rng)
    V = rng.normal(size=(6, 8, 10))
    out = net.shift_invariant_unit(Tensor(V), W1, b1, W2, b2, cfg).data
    h = conv2d_loops(V.tolist(), W1.data.tolist(), b1.data.tolist(), 1, 1)
    h = maxpool_loops(h, 2, 2)
    ref = conv2d_loops(h, W2.data.tolist(), b2.data.tolist(), 1, 1)
    assert rel_err(out, ref) < 1e-6


def test_shift_unit_depth_shift_beats_permutation():
    rng = np.random.default_rng(2)
    cfg = net.EdeBlockConfig(5, 6, 3)
    W1, b1, W2, b2 = _unit_weights(rng)
    wins = 0
    for _ in range(20):
        V = ndimage.gaussian_filter(rng.normal(size=(6, 24, 24)), (0, 2, 2))
        shifted = np.roll(V, 1, axis=1)
        permuted = rng.permutation(V.reshape(6, -1), axis=1).reshape(V.shape)
        f = lambda a: net.shift_invariant_unit(Tensor(a), W1, b1, W2, b2, cfg).data
        base = f(V)
        wins += np.linalg.norm(f(shifted) - base) < np.linalg.norm(f(permuted) - base)
    assert wins == 20


@pytest.mark.parametrize("K,pool", [(35, 4), (11, 2), (5, 2)])
def test_block_output_shape(K, pool):
    cfg = net.scale_block(K, 8, shift_channels=3)
    assert cfg.pool_window == pool
    block = net.EdeBlock(cfg, 2, 4, np.random.default_rng(0), "b")
    out = block(Tensor(np.random.default_rng(1).normal(size=(2, 40, 44))))
    assert out.shape == cfg.output_shape(40, 44) == (3, (40 - pool) // pool + 1, (44 - pool) // pool + 1)


def test_constant_input_gives_bias_only_response():
    cfg = net.EdeBlockConfig(5, 4, 3)
    block = net.EdeBlock(cfg, 2, 2, np.random.default_rng(3), "b")
    bias_only = block(Tensor(np.zeros((2, 40, 40)))).data
    V0 = Tensor(np.zeros((4, 40, 40)))
    np.testing.assert_array_equal(bias_only, block.shift_unit(V0).data)
    # zero padding makes the borders see an edge; the interior sees a pure constant
    out = block(Tensor(np.full((2, 40, 40), 3.0))).data
    np.testing.assert_allclose(out[:, 3:17, 3:17], bias_only[:, 3:17, 3:17], atol=1e-9)


def test_aggregate_matches_oracle_and_is_unit_norm():
    rng = np.random.default_rng(4)
    for _ in range(20):
        etas = [Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(3, 2, 2)))]
        W, b = rng.normal(size=(7, 36)), rng.normal(size=7) + 1.0
        out = net.aggregate(etas, Tensor(W), Tensor(b)).data
        z = np.concatenate([e.data.ravel() for e in etas]).tolist()
        h = [max(0.0, v) for v in matvec(W.tolist(), z, b.tolist())]
        norm = math.sqrt(sum(v * v for v in h))
        assert rel_err(out, [v / norm for v in h]) < 1e-6
        assert abs(np.linalg.norm(out) - 1) < 1e-12


def test_aggregate_identity_with_large_bias():
    eta = np.random.default_rng(5).normal(size=(1, 2, 3))
    out = net.aggregate([Tensor(eta)], Tensor(np.eye(6)), Tensor(np.full(6, 10.0))).data
    z = eta.ravel() + 10.0
    np.testing.assert_allclose(out, z / np.linalg.norm(z), atol=1e-12)


def test_aggregate_degenerate_and_shape_errors():
    eta = [Tensor(np.ones((1, 2, 2)))]
    with pytest.raises(nx.DegenerateInputError):
        net.aggregate(eta, Tensor(-np.ones((3, 4))), Tensor(np.zeros(3)))
    train = net.aggregate(eta, Tensor(-np.ones((3, 4))), Tensor(np.zeros(3)), eps=1e-8)
    assert not train.data.any()
    with pytest.raises(nx.DimensionError):
        net.aggregate(eta, Tensor(np.ones((3, 5))), Tensor(np.zeros(3)))


def test_forward_shape_checks_and_batching():
    cfg = net.preset("tiny")
    model = net.EDENet(cfg, seed=0)
    X = np.random.default_rng(6).normal(size=(3, 2, 16, 8))
    batched = model(Tensor(X)).data
    assert batched.shape == (3, 8)
    for i in range(3):
        np.testing.assert_allclose(batched[i], model(Tensor(X[i])).data, atol=1e-12)
    with pytest.raises(nx.DimensionError):
        model(Tensor(np.zeros((2, 16, 9))))


def test_parameters_are_float32_exact():
    model = net.EDENet(net.preset("tiny"), seed=1)
    for p in model.params():
        np.testing.assert_array_equal(p.data, p.data.astype(np.float32))
    names = list(model.named_params())
    assert len(names) == len(set(names)) == len(model.params())


def test_load_state_round_trip_and_mismatch():
    a, b = net.EDENet(net.preset("tiny"), 1), net.EDENet(net.preset("tiny"), 2)
    b.load_state({k: p.data for k, p in a.named_params().items()})
    X = Tensor(np.random.default_rng(7).normal(size=(2, 16, 8)))
    np.testing.assert_array_equal(a(X).data, b(X).data)
    state = {k: p.data for k, p in a.named_params().items()}
    state.pop("agg.b")
    with pytest.raises(ConfigError):
        b.load_state(state)


def test_end_to_end_gradients_all_groups():
    cfg = net.preset("tiny")
    model = net.EDENet(cfg, seed=3)
    rng = np.random.default_rng(8)
    X = Tensor(rng.normal(size=(2, 2, 16, 8)))
    R = Tensor(rng.normal(size=(2, 8)))
    f = lambda: (model.forward(X, train=True) * R).sum()
    report = nx.grad_check_report(f, model.params(), h=1e-5)
    assert max(report) < 1e-3


def test_encode_counts_and_determinism():
    # a single-frame window needs a pool that fits a width-1 plane
    cfg = net.NetConfig(scales=(net.EdeBlockConfig(5, 4, 2, 1, 1),), descriptor_dim=8,
                        window=1, depth=16, channels=2)
    model = net.EDENet(cfg, seed=0)
    frames = np.random.default_rng(9).normal(size=(5, 16, 2))
    seq = sim.GprSequence(frames, np.column_stack([np.arange(5.0), np.zeros(5)]))
    enc = net.encode_sequence(seq, 1, model)
    assert enc.descriptors.shape == (5, 8)
    np.testing.assert_array_equal(enc.frame_ids, np.arange(5))
    np.testing.assert_array_equal(enc.descriptors, net.encode_sequence(seq, 1, model).descriptors)
    np.testing.assert_allclose(np.linalg.norm(enc.descriptors, axis=1), 1.0, atol=1e-9)
    with pytest.raises(UsageError):
        net.encode_sequence(seq, 2, model)
    with pytest.raises(UsageError):
        net.sequence_windows(seq, 6)


def test_window_centres_and_layout():
    frames = np.arange(6 * 4 * 2, dtype=float).reshape(6, 4, 2)
    seq = sim.GprSequence(frames, np.zeros((6, 2)))
    windows, centres = net.sequence_windows(seq, 3)
    assert windows.shape == (4, 2, 4, 3)
    np.testing.assert_array_equal(centres, [1, 2, 3, 4])
    np.testing.assert_array_equal(windows[2, 1, :, 0], frames[2, :, 1])


def test_window_normalization_scale_free():
    model = net.EDENet(net.preset("tiny"), seed=0)
    X = np.random.default_rng(10).normal(size=(1, 2, 16, 8))
    np.testing.assert_allclose(model.encode_windows(X), model.encode_windows(1e3 * X), atol=1e-9)


def test_depth_shift_closer_than_other_scenes():
    cfg = net.preset("experiment")
    model = net.EDENet(cfg, seed=0)
    descs, shifted = [], []
    for seed in range(20):
        w = _scene_windows(seed, cfg)[10:11]
        descs.append(model.encode_windows(w)[0])
        shifted.append(model.encode_windows(np.roll(w, 1, axis=2))[0])
    same = np.mean([_cos(a, b) for a, b in zip(descs, shifted)])
    other = np.mean([_cos(descs[i], descs[(i + 1) % 20]) for i in range(20)])
    assert same > other


def test_overlapping_windows_closer_than_disjoint():
    cfg = net.preset("experiment")
    model = net.EDENet(cfg, seed=0)
    overlap, disjoint = [], []
    for seed in range(20):
        d = model.encode_windows(_scene_windows(seed, cfg))
        overlap.append(_cos(d[5], d[7]))
        disjoint.append(_cos(d[5], d[5 + cfg.window + 10]))
    assert np.mean(overlap) > np.mean(disjoint)


def test_energy_profile():
    # dense sampling: the window spans only the flat top of the hyperbola
    cfg = sim.SimConfig(D=64, C=1, dx=0.05)
    d0, eps = 1.0, 4.0
    traj = sim.straight_trajectory(9, cfg.dx)
    seq = sim.render_bscan([sim.Reflector(0.2, d0)], sim.MediumProfile(eps), cfg, traj)
    enc = net.encode_energy_profile(seq, 5)
    assert enc.descriptors.shape == (5, 64)
    apex_bin = round(sim.travel_time(0.0, d0, eps) / cfg.time_bin)
    assert abs(int(np.argmax(enc.descriptors[2])) - apex_bin) <= 1
    np.testing.assert_array_equal(enc.descriptors, net.encode_energy_profile(seq, 5).descriptors)
    blank = sim.GprSequence(np.zeros((5, 8, 1)), np.zeros((5, 2)))
    with pytest.raises(nx.DegenerateInputError):
        net.encode_energy_profile(blank, 3)
