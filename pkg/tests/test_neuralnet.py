import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasesep import INSTRUMENTS
from phasesep.dataset import DatasetStats
from phasesep.neuralnet import (BUNDLE_VERSION, BranchConcat, Bias, BundleError, BundleVersionError,
                                CorruptBundleError, Dense, ModelBundle, Network, ReLU, Scale,
                                TrainConfig, TrainingDivergedError, build_amp_net, build_concat_net,
                                build_joint_net, build_phase_net, input_weight_ratio, load_bundle,
                                save_bundle, train)
from phasesep.phase_features import PhaseFeatureConfig
from phasesep.stft import StftConfig

from gradcheck import grad_check


def make_stats(channels=1, bins=3, seed=0):
    r = np.random.default_rng(seed)
    return DatasetStats(
        mean=r.uniform(0.5, 1.5, (channels, bins)),
        std=r.uniform(0.5, 2.0, (channels, bins)),
        instrument_mean={i: r.uniform(0.1, 1.0, (channels, bins)) for i in INSTRUMENTS},
        n_frames=10,
    )


@pytest.mark.parametrize("layers", [
    lambda r: [Dense(4, 3, r)],
    lambda r: [Dense(4, 5, r), ReLU(), Dense(5, 2, r)],
    lambda r: [Bias(r.standard_normal(4)), Dense(4, 2, r)],
    lambda r: [Scale(r.uniform(0.5, 2, 4)), Dense(4, 2, r)],
    lambda r: [Bias(r.standard_normal(4)), Scale(r.uniform(0.5, 2, 4)), Dense(4, 3, r), ReLU()],
], ids=["dense", "relu", "bias", "scale", "stack"])
def test_gradients_chain(layers, rng):
    net = Network(layers(rng))
    x = rng.standard_normal((6, 4))
    assert grad_check(net, x, rng) < 1e-4


def test_gradients_branches(rng):
    net = Network([BranchConcat(), Dense(5, 2, rng), ReLU()],
                  branches=[[Dense(3, 2, rng), ReLU()], [Scale([2.0, -1.0]), Dense(2, 3, rng)]])
    x = (rng.standard_normal((5, 3)), rng.standard_normal((5, 2)))
    assert grad_check(net, x, rng) < 1e-4


@pytest.mark.parametrize("builder", ["phase", "amp", "joint", "concat"])
def test_gradients_full_networks(builder, rng):
    stats = make_stats(channels=2, bins=3)
    kw = dict(n_bins=3, channels=2, context=1, stats=stats, instrument="vocals", hidden=4, seed=1)
    d = 2 * 3 * 3
    if builder == "phase":
        net, x = build_phase_net(n_features=2, **kw), rng.standard_normal((4, 2 * d))
    elif builder == "amp":
        net, x = build_amp_net(**kw), rng.uniform(0, 3, (4, d))
    elif builder == "joint":
        net = build_joint_net(n_features=1, **kw)
        x = (rng.uniform(0, 3, (4, d)), rng.standard_normal((4, d)))
    else:
        net, x = build_concat_net(n_features=1, **kw), rng.standard_normal((4, 2 * d))
    assert grad_check(net, x, rng) < 1e-4


def test_param_counts():
    I, K, C, H = 2, 5, 2, 7
    stats = make_stats(I, K)
    d = I * (2 * C + 1) * K
    O = I * K
    body = H * H + H + H * O + O + O
    kw = dict(n_bins=K, channels=I, context=C, stats=stats, instrument="bass", hidden=H)
    assert build_phase_net(n_features=2, **kw).n_params == 2 * d * H + H + body
    assert build_amp_net(**kw).n_params == 2 * d + d * H + H + body
    joint = build_joint_net(n_features=2, **kw)
    expected = (2 * d + d * H + H + H * H + H) + (2 * d * H + H + H * H + H) + 2 * H * O + O + O
    assert joint.n_params == expected
    assert joint.input_dims == [d, 2 * d]
    assert build_concat_net(n_features=1, **kw).n_params == 4 * d + 2 * d * H + H + body


def test_zero_weights_give_average_amplitude():
    stats = make_stats(2, 4)
    net = build_phase_net(4, 2, 1, stats, "drums", n_features=2, hidden=5)
    for layer in net.layers:
        if isinstance(layer, Dense):
            layer.params["W"][:] = 0
            layer.params["b"][:] = 0
    out = net.predict(np.random.default_rng(0).standard_normal((3, net.input_dims[0])))
    np.testing.assert_array_equal(out, np.tile(stats.instrument_mean["drums"].ravel(), (3, 1)))


def test_mean_input_normalises_to_zero():
    stats = make_stats(2, 4)
    net = build_amp_net(4, 2, 2, stats, "other", hidden=3)
    x = np.repeat(stats.mean[:, None, :], 5, axis=1).ravel()[None]
    y = net.trunk[1].forward(net.trunk[0].forward(x))
    np.testing.assert_allclose(y, 0, atol=1e-12)
    x2 = x + np.repeat(stats.std[:, None, :], 5, axis=1).ravel()[None]
    np.testing.assert_allclose(net.trunk[1].forward(net.trunk[0].forward(x2)), 1, atol=1e-12)


def test_joint_toy_oracle():
    # one channel, one bin, no context, hidden 2: every weight set by hand
    stats = DatasetStats(np.array([[2.0]]), np.array([[0.5]]),
                         {i: np.array([[0.25]]) for i in INSTRUMENTS})
    net = build_joint_net(1, 1, 0, stats, "vocals", n_features=1, hidden=2)
    amp, ph = net.branches
    for d in (amp[2], amp[4], ph[0], ph[2]):
        d.params["b"][:] = 0
    amp[2].params["W"][:] = [[1.0, -1.0]]
    amp[4].params["W"][:] = np.eye(2)
    ph[0].params["W"][:] = [[2.0, 0.5]]
    ph[2].params["W"][:] = [[1.0, 0.0], [0.0, 1.0]]
    head = net.trunk[1]
    head.params["W"][:] = [[1.0], [1.0], [0.5], [-1.0]]
    head.params["b"][:] = 0.1
    a, p = 3.0, 0.4
    z = (a - 2.0) / 0.5
    h_amp = [max(z, 0), max(-z, 0)]
    h_ph = [max(2 * p, 0), max(0.5 * p, 0)]
    expected = max(h_amp[0] + h_amp[1] + 0.5 * h_ph[0] - h_ph[1] + 0.1 + 0.25, 0)
    out = net.forward((np.array([[a]]), np.array([[p]])))
    assert out[0, 0] == pytest.approx(expected, abs=1e-14)


def test_identity_dense(rng):
    d = Dense(3, 3)
    d.params["W"][:] = np.eye(3)
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(Network([d]).forward(x), x)


def test_backward_before_forward():
    net = Network([Dense(2, 2, np.random.default_rng(0))])
    with pytest.raises(RuntimeError):
        net.backward(np.ones((1, 2)))


def test_structure_errors(rng):
    with pytest.raises(ValueError):
        Network([Dense(3, 2, rng), Dense(3, 1, rng)])
    with pytest.raises(ValueError):
        Network([Dense(2, 2, rng)], branches=[[Dense(2, 2, rng)]])
    with pytest.raises(ValueError):
        Scale([1.0, 0.0])
    with pytest.raises(ValueError):
        build_amp_net(4, 1, 1, make_stats(1, 3), "bass")
    with pytest.raises(KeyError):
        build_amp_net(3, 1, 1, make_stats(1, 3), "piano")
    with pytest.raises(ValueError):
        build_phase_net(1 << 13, 2, 600, make_stats(2, 1 << 13), "bass")
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)


def test_linear_task_converges(rng):
    A = rng.standard_normal((3, 2))
    x = rng.standard_normal((400, 3))
    y = x @ A + [0.5, -0.2]
    net = Network([Dense(3, 2, np.random.default_rng(0))])
    res = train(net, x, y, TrainConfig(learning_rate=0.02, epochs=200, batch_size=32,
                                       patience=200, validation_fraction=0.1))
    assert res.curve[-1][1] < 1e-6
    assert res.curve[-1][2] < 1e-6


def _toy_fit(seed, lr=1e-2, optimizer="adam"):
    r = np.random.default_rng(7)
    x = r.standard_normal((100, 4))
    y = np.abs(x[:, :2])
    net = Network([Dense(4, 6, np.random.default_rng(seed)), ReLU(), Dense(6, 2, np.random.default_rng(seed + 1))])
    before = net.get_state()
    res = train(net, x, y, TrainConfig(learning_rate=lr, epochs=5, batch_size=16, seed=seed,
                                       optimizer=optimizer))
    return before, res


def test_same_seed_same_curve():
    _, a = _toy_fit(3)
    _, b = _toy_fit(3)
    assert a.curve == b.curve
    for p, q in zip(a.net.get_state(), b.net.get_state()):
        np.testing.assert_array_equal(p, q)
    _, c = _toy_fit(4)
    assert c.curve != a.curve


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_zero_learning_rate_is_a_no_op(optimizer):
    before, res = _toy_fit(0, lr=0.0, optimizer=optimizer)
    for p, q in zip(before, res.net.get_state()):
        np.testing.assert_array_equal(p, q)
    assert len({row[1] for row in res.curve}) == 1 or np.ptp([r[1] for r in res.curve]) < 1e-12


def test_early_stopping_restores_best():
    _, res = _toy_fit(2, lr=0.05)
    vals = [r[2] for r in res.curve]
    assert res.best_epoch == 1 + int(np.argmin(vals))


def test_nan_aborts_with_diagnostics():
    x = np.ones((20, 2))
    y = np.ones((20, 1))
    y[5] = np.nan
    net = Network([Dense(2, 1, np.random.default_rng(0))])
    with pytest.raises(TrainingDivergedError, match="epoch 1.*dense:W"):
        train(net, x, y, TrainConfig(batch_size=20, validation_fraction=0.0))
    with pytest.raises(ValueError):
        train(net, np.ones((0, 2)), np.ones((0, 1)), TrainConfig())


def test_input_weight_ratio():
    net = build_concat_net(2, 1, 0, make_stats(1, 2), "bass", n_features=1, hidden=3)
    first = net.trunk[2]
    first.params["W"][:2] = 1.0
    first.params["W"][2:] = 0.25
    assert input_weight_ratio(net, 2) == 0.25


@settings(max_examples=15)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 2))
def test_output_non_negative(channels, bins, context):
    stats = make_stats(channels, bins)
    net = build_phase_net(bins, channels, context, stats, "bass", n_features=2, hidden=4)
    x = np.random.default_rng(bins).standard_normal((5, net.input_dims[0])) * 10
    out = net.predict(x)
    assert out.shape == (5, channels * bins) and np.all(out >= 0)


# -- bundles --------------------------------------------------------------

def _bundle(arch="joint", order=("vocals", "bass")):
    stats = make_stats(1, 3)
    scfg = StftConfig(fft_size=4, hop=1, sample_rate=8000, window="rect")
    pcfg = PhaseFeatureConfig(fft_size=4, hop=1)
    builders = {"joint": lambda i, s: build_joint_net(3, 1, 1, stats, i, 2, hidden=4, seed=s),
                "amp_only": lambda i, s: build_amp_net(3, 1, 1, stats, i, hidden=4, seed=s),
                "phase_only": lambda i, s: build_phase_net(3, 1, 1, stats, i, 2, hidden=4, seed=s)}
    nets = {inst: builders[arch](inst, k) for k, inst in enumerate(order)}
    curves = {inst: [(1, 0.5, 0.25), (2, 0.125, np.nan)] for inst in order}
    return ModelBundle(nets, stats, scfg, None if arch == "amp_only" else pcfg, arch, 1, curves,
                       {"config_hash": "abc"})


@pytest.mark.parametrize("arch", ["joint", "amp_only", "phase_only"])
def test_bundle_round_trip(tmp_path, arch):
    b = _bundle(arch)
    p = tmp_path / "m.psnn"
    save_bundle(b, p)
    loaded = load_bundle(p)
    save_bundle(loaded, tmp_path / "again.psnn")
    assert p.read_bytes() == (tmp_path / "again.psnn").read_bytes()
    assert loaded.instruments == ["vocals", "bass"]
    assert loaded.architecture == arch and loaded.context == 1
    assert loaded.metadata == {"config_hash": "abc"}
    assert loaded.stft_config == b.stft_config and loaded.phase_config == b.phase_config
    for inst in b.instruments:
        for x, y in zip(b.networks[inst].get_state(), loaded.networks[inst].get_state()):
            np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(loaded.stats.std, b.stats.std)


def test_bundle_errors(tmp_path):
    p = tmp_path / "m.psnn"
    save_bundle(_bundle(), p)
    data = p.read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        (tmp_path / "t.psnn").write_bytes(data[:cut])
        with pytest.raises(CorruptBundleError):
            load_bundle(tmp_path / "t.psnn")
    (tmp_path / "g.psnn").write_bytes(data + b"\0")
    with pytest.raises(CorruptBundleError):
        load_bundle(tmp_path / "g.psnn")
    (tmp_path / "m2.psnn").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CorruptBundleError):
        load_bundle(tmp_path / "m2.psnn")
    (tmp_path / "v.psnn").write_bytes(data[:4] + struct.pack("<I", BUNDLE_VERSION + 1) + data[8:])
    with pytest.raises(BundleVersionError):
        load_bundle(tmp_path / "v.psnn")
    with pytest.raises(BundleError):
        load_bundle(tmp_path / "absent.psnn")


def test_bundle_consistency_checks():
    b = _bundle("joint")
    with pytest.raises(ValueError):
        ModelBundle(b.networks, b.stats, b.stft_config, b.phase_config, "amp_only")
    with pytest.raises(ValueError):
        ModelBundle(b.networks, b.stats, b.stft_config, None, "joint")
    with pytest.raises(ValueError):
        ModelBundle(b.networks, b.stats, b.stft_config, b.phase_config, "lstm")
