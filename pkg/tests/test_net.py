import math

import numpy as np
import pytest

from esmci import rng
from esmci.errors import ConfigError, DomainError, TrainingError
from esmci.expfam import FamilySpec, nll_loss
from esmci.net import (
    Network,
    NetworkConfig,
    forward,
    init_network,
    loss_and_grads,
    predict_many,
    train_many,
    train_network,
)

FAMILIES = [FamilySpec("gaussian"), FamilySpec("bernoulli"), FamilySpec("poisson"), FamilySpec("binomial", 5)]


def toy_response(spec, m, g):
    return {"gaussian": g.normal(size=m), "bernoulli": g.integers(0, 2, m).astype(float),
            "poisson": g.poisson(1.5, m).astype(float), "binomial": g.integers(0, 6, m).astype(float)}[spec.family_id]


def zero_net(widths, F=3.0):
    cfg = NetworkConfig(widths=widths, clamp_F=F)
    return Network(cfg, [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
                   [np.zeros(o) for o in widths[1:]])


# -- config and init ---------------------------------------------------------

@pytest.mark.parametrize("kwargs, key", [
    ({"widths": (3, 1)}, "net.widths"),
    ({"widths": (3, 4, 2)}, "net.widths"),
    ({"dropout_rate": 1.0}, "net.dropout_rate"),
    ({"clamp_F": 0.0}, "net.clamp_F"),
    ({"learning_rate": -1.0}, "net.learning_rate"),
    ({"init_scheme": "xavier"}, "net.init_scheme"),
])
def test_config_validation_names_key(kwargs, key):
    with pytest.raises(ConfigError) as exc:
        NetworkConfig(**kwargs)
    assert exc.value.key == key


def test_config_defaults_follow_simulation_settings():
    c = NetworkConfig()
    assert (c.widths, c.learning_rate, c.epochs, c.dropout_rate, c.weight_decay, c.clamp_F) == \
        ((10, 128, 64, 1), 0.1, 500, 0.1, 0.02, 3.0)
    assert NetworkConfig.from_dict(c.to_dict()) == c


def test_init_shapes_and_determinism():
    cfg = NetworkConfig(widths=(2, 3, 1))
    a = init_network(cfg, rng.stream(5))
    b = init_network(cfg, rng.stream(5))
    assert [w.shape for w in a.weights] == [(3, 2), (1, 3)]
    assert [v.shape for v in a.biases] == [(3,), (1,)]
    assert a == b
    assert all(np.all(v == 0) for v in a.biases)


def test_init_bound():
    net = init_network(NetworkConfig(widths=(6, 50, 1)), rng.stream(1))
    assert np.abs(net.weights[0]).max() <= 1.0
    assert np.abs(net.weights[1]).max() <= math.sqrt(6 / 50)


def test_network_rejects_wrong_shapes():
    cfg = NetworkConfig(widths=(2, 3, 1))
    with pytest.raises(ConfigError):
        Network(cfg, [np.zeros((3, 3)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)])


# -- forward -----------------------------------------------------------------

def test_zero_network_outputs_zero():
    net = zero_net((4, 5, 1))
    assert forward(net, np.array([1.0, -2.0, 3.0, 0.5])) == 0.0


def test_identity_like_network():
    net = zero_net((3, 1, 1))
    net.weights[0][0, 0] = 1.0
    net.weights[1][0, 0] = 1.0
    assert forward(net, np.array([2.0, 5.0, -1.0])) == 2.0
    assert forward(net, np.array([4.0, 0.0, 0.0])) == 3.0
    assert forward(net, np.array([-4.0, 0.0, 0.0])) == 0.0


def test_eval_clamps_raw_output():
    net = zero_net((2, 3, 1))
    net.biases[1][0] = 7.4
    assert forward(net, np.zeros(2)) == 3.0
    net.biases[1][0] = -7.4
    assert forward(net, np.zeros(2)) == -3.0


def test_clamp_holds_for_random_networks():
    g = np.random.default_rng(3)
    cfg = NetworkConfig(widths=(5, 16, 8, 1), clamp_F=1.5)
    for s in range(20):
        net = init_network(cfg, rng.stream(s))
        out = forward(net, 4 * g.normal(size=(50, 5)))
        assert np.all(np.abs(out) <= 1.5 + 1e-12)


def test_forward_dimension_mismatch():
    with pytest.raises(DomainError):
        forward(zero_net((3, 2, 1)), np.zeros(4))


def test_mask_scales_kept_units():
    net = zero_net((1, 2, 1), F=100.0)
    net.weights[0][:, 0] = 1.0
    net.weights[1][0, :] = 1.0
    cfg = NetworkConfig(widths=(1, 2, 1), clamp_F=100.0, dropout_rate=0.5)
    net = Network(cfg, net.weights, net.biases)
    x = np.array([3.0])
    assert forward(net, x) == 6.0
    assert forward(net, x, mask=[np.array([1.0, 0.0])]) == 6.0  # one unit kept, scaled by 2
    assert forward(net, x, mask=[np.array([0.0, 0.0])]) == 0.0


def test_matrix_input_matches_rows():
    net = init_network(NetworkConfig(widths=(3, 7, 1)), rng.stream(9))
    X = np.random.default_rng(0).normal(size=(6, 3))
    out = forward(net, X)
    # BLAS may block rows differently, so allow a few ULPs
    np.testing.assert_allclose(out, [forward(net, x) for x in X], rtol=1e-13, atol=1e-15)
    assert np.array_equal(predict_many([net, net], X)[1], out)


# -- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("spec", FAMILIES, ids=lambda s: s.family_id)
@pytest.mark.parametrize("use_mask", [False, True])
def test_backprop_matches_finite_differences(spec, use_mask):
    g = np.random.default_rng(2)
    cfg = NetworkConfig(widths=(3, 4, 1), dropout_rate=0.25 if use_mask else 0.0)
    net = init_network(cfg, rng.stream(4))
    X = g.normal(size=(9, 3))
    y = toy_response(spec, 9, g)
    mask = [g.integers(0, 2, size=(9, 4)).astype(float)] if use_mask else None
    _, gw, gb = loss_and_grads(net, X, y, spec, mask)
    h = 1e-5

    def loss_at():
        return loss_and_grads(net, X, y, spec, mask)[0]

    for params, grads in ((net.weights, gw), (net.biases, gb)):
        for P, G in zip(params, grads):
            for idx in np.ndindex(P.shape):
                old = P[idx]
                P[idx] = old + h
                up = loss_at()
                P[idx] = old - h
                down = loss_at()
                P[idx] = old
                fd = (up - down) / (2 * h)
                if abs(G[idx]) > 1e-8:
                    assert abs(G[idx] - fd) / abs(G[idx]) < 1e-4, (idx, G[idx], fd)
                else:
                    assert abs(fd) < 1e-6


def test_loss_matches_family_loss():
    spec = FamilySpec("poisson")
    net = init_network(NetworkConfig(widths=(2, 5, 1)), rng.stream(2))
    X = np.random.default_rng(1).normal(size=(7, 2))
    y = np.arange(7.0) % 3
    loss, _, _ = loss_and_grads(net, X, y, spec)
    assert loss == pytest.approx(np.mean(nll_loss(spec, y, forward(net, X))), abs=1e-12)


def test_clamped_output_only_passes_inward_gradient():
    spec = FamilySpec("gaussian")
    net = zero_net((1, 1, 1))
    net.biases[1][0] = 5.0  # raw output 5, clamped to 3
    X = np.zeros((1, 1))
    # y above the clamp: descent would push outward, so nothing flows
    _, _, gb = loss_and_grads(net, X, [10.0], spec)
    assert gb[1][0] == 0.0
    # y below: descent pulls the output back inside
    _, _, gb = loss_and_grads(net, X, [0.0], spec)
    assert gb[1][0] == pytest.approx(3.0)


# -- training ----------------------------------------------------------------

def test_one_sgd_step_matches_hand_update():
    spec = FamilySpec("bernoulli")
    cfg = NetworkConfig(widths=(3, 4, 1), learning_rate=0.3, epochs=1, batch_size=1,
                        dropout_rate=0.0, weight_decay=0.05)
    X = np.array([[0.4, -1.2, 0.7]])
    y = np.array([1.0])
    start = init_network(cfg, rng.stream(21))  # same first draws the trainer makes
    _, gw, gb = loss_and_grads(start, X, y, spec)
    trained = train_network(X, y, spec, cfg, rng.stream(21))
    for W0, G, W1 in zip(start.weights, gw, trained.weights):
        np.testing.assert_allclose(W1, W0 - 0.3 * (G + 0.05 * W0), rtol=0, atol=1e-12)
    for b0, G, b1 in zip(start.biases, gb, trained.biases):
        np.testing.assert_allclose(b1, b0 - 0.3 * G, rtol=0, atol=1e-12)


def test_gaussian_zero_response_learns_zero():
    g = np.random.default_rng(0)
    X = g.normal(size=(64, 3))
    cfg = NetworkConfig(widths=(3, 16, 1), epochs=200, dropout_rate=0.1)
    net = train_network(X, np.zeros(64), FamilySpec("gaussian"), cfg, rng.stream(1))
    assert net.final_train_loss < 1e-3
    assert np.abs(forward(net, X)).max() < 0.1


def test_separable_bernoulli_beats_constant_predictor():
    x = np.concatenate([np.linspace(-2, -0.5, 20), np.linspace(0.5, 2, 20)])[:, None]
    y = (x[:, 0] > 0).astype(float)
    cfg = NetworkConfig(widths=(1, 8, 1), epochs=150)
    net = train_network(x, y, FamilySpec("bernoulli"), cfg, rng.stream(2))
    assert net.final_train_loss < math.log(2)
    assert net.final_train_loss < 0.2


def test_training_is_deterministic():
    g = np.random.default_rng(5)
    X, y = g.normal(size=(30, 4)), g.poisson(1.0, 30)
    cfg = NetworkConfig(widths=(4, 8, 1), epochs=20)
    a = train_network(X, y, FamilySpec("poisson"), cfg, rng.stream(3))
    b = train_network(X, y, FamilySpec("poisson"), cfg, rng.stream(3))
    assert a == b
    assert a.final_train_loss == b.final_train_loss


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_stacked_training_equals_one_at_a_time(dtype):
    g = np.random.default_rng(6)
    Xs = g.normal(size=(3, 20, 4))
    ys = g.integers(0, 2, size=(3, 20)).astype(float)
    spec = FamilySpec("bernoulli")
    cfg = NetworkConfig(widths=(4, 8, 6, 1), epochs=15, batch_size=7, dtype=dtype)
    together = train_many(Xs, ys, spec, cfg, [rng.stream(9, k) for k in range(3)])
    for k in range(3):
        alone = train_many(Xs[k:k + 1], ys[k:k + 1], spec, cfg, [rng.stream(9, k)])[0]
        assert alone == together[k]


def test_batch_larger_than_sample_is_truncated():
    g = np.random.default_rng(7)
    cfg = NetworkConfig(widths=(2, 4, 1), epochs=3, batch_size=32)
    net = train_network(g.normal(size=(5, 2)), g.normal(size=5), FamilySpec("gaussian"), cfg, rng.stream(0))
    assert np.isfinite(net.final_train_loss)


def test_divergence_reports_epoch():
    g = np.random.default_rng(0)
    X, y = g.normal(size=(40, 3)), np.random.default_rng(1).poisson(2, size=40)
    cfg = NetworkConfig(widths=(3, 8, 1), learning_rate=1e3, weight_decay=0.5, epochs=60)
    with pytest.raises(TrainingError) as exc:
        train_network(X, y, FamilySpec("poisson"), cfg, rng.stream(0))
    assert 1 <= exc.value.epoch <= 60
    assert exc.value.index == 0


def test_dropout_draws_change_the_fit():
    g = np.random.default_rng(8)
    X, y = g.normal(size=(25, 3)), g.normal(size=25)
    spec = FamilySpec("gaussian")
    base = dict(widths=(3, 8, 1), epochs=5)
    a = train_network(X, y, spec, NetworkConfig(dropout_rate=0.0, **base), rng.stream(1))
    b = train_network(X, y, spec, NetworkConfig(dropout_rate=0.3, **base), rng.stream(1))
    assert not np.array_equal(a.weights[0], b.weights[0])
