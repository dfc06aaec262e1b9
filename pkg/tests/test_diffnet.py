"""Engine tests: layer semantics, exact gradients vs finite differences,
optimizer arithmetic, serialization round-trips, tape discipline."""

from __future__ import annotations

import numpy as np
import pytest

from gcrl import diffnet
from gcrl.diffnet import LayerSpec, Network, OptimizerState


def _param_entries(net: Network):
    for idx, p in enumerate(net.params):
        for key in sorted(p):
            yield idx, key, p[key]


def fd_gradient(net: Network, x: np.ndarray, proj: np.ndarray, eps: float = 1e-5):
    """Central-difference gradient of loss = sum(proj * net(x)) w.r.t. params."""
    grads = [{k: np.zeros_like(a) for k, a in p.items()} for p in net.params]
    for idx, key, arr in _param_entries(net):
        flat = arr.ravel()
        out = grads[idx][key].ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(np.sum(proj * diffnet.predict(net, x)))
            flat[j] = orig - eps
            lo = float(np.sum(proj * diffnet.predict(net, x)))
            flat[j] = orig
            out[j] = (hi - lo) / (2.0 * eps)
    return grads


def max_rel_err(analytic, numeric):
    worst = 0.0
    for pa, pn in zip(analytic, numeric):
        for key in pn:
            a, n = pa[key], pn[key]
            denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def test_affine_identity_passthrough() -> None:
    net = diffnet.build_network([LayerSpec("affine", 3, 3)], init_seed=0)
    net.params[0]["W"] = np.eye(3)
    net.params[0]["b"] = np.array([1.0, 2.0, 3.0])
    y = diffnet.predict(net, np.array([10.0, 20.0, 30.0]))
    assert np.allclose(y, [11.0, 22.0, 33.0])


def test_leaky_relu_definition() -> None:
    net = Network([LayerSpec("leaky_relu", 2, 2, slope=0.1)], [{}])
    y = diffnet.predict(net, np.array([-1.0, 2.0]))
    assert y == pytest.approx([-0.1, 2.0])


def test_tanh_layer() -> None:
    net = Network([LayerSpec("tanh", 2, 2)], [{}])
    x = np.array([0.0, 1.5])
    assert diffnet.predict(net, x) == pytest.approx(np.tanh(x))


def test_maxout_takes_elementwise_max() -> None:
    spec = LayerSpec("maxout", 1, 1, pieces=2)
    W = np.array([[[1.0]], [[-1.0]]])
    b = np.zeros((2, 1))
    net = Network([spec], [{"W": W, "b": b}])
    assert diffnet.predict(net, np.array([3.0]))[0] == pytest.approx(3.0)
    assert diffnet.predict(net, np.array([-3.0]))[0] == pytest.approx(3.0)


def test_maxout_tie_breaks_to_lowest_piece() -> None:
    # both pieces produce identical outputs; gradient must flow to piece 0 only
    spec = LayerSpec("maxout", 2, 2, pieces=2)
    W = np.stack([np.eye(2), np.eye(2)])
    b = np.zeros((2, 2))
    net = Network([spec], [{"W": W, "b": b}])
    x = np.array([1.0, -2.0])
    y, tape = diffnet.forward(net, x)
    assert y == pytest.approx(x)
    grads, _ = diffnet.backward(tape, np.ones(2))
    assert np.all(grads[0]["b"][0] == 1.0)
    assert np.all(grads[0]["b"][1] == 0.0)


def test_affine_closed_form_gradient() -> None:
    net = diffnet.build_network([LayerSpec("affine", 2, 2)], init_seed=1)
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    _, tape = diffnet.forward(net, x)
    grads, dx = diffnet.backward(tape, np.ones((2, 2)))
    assert grads[0]["W"] == pytest.approx(x.T @ np.ones((2, 2)))
    assert grads[0]["b"] == pytest.approx([2.0, 2.0])
    assert dx == pytest.approx(np.ones((2, 2)) @ net.params[0]["W"].T)


def test_vector_and_batch_agree() -> None:
    net = diffnet.build_network(
        [LayerSpec("affine", 3, 4), LayerSpec("tanh", 4, 4), LayerSpec("affine", 4, 2)],
        init_seed=7,
    )
    x = np.array([0.3, -0.7, 1.1])
    single = diffnet.predict(net, x)
    batch = diffnet.predict(net, np.stack([x, 2 * x]))
    assert single.shape == (2,)
    assert batch[0] == pytest.approx(single)


def test_init_distribution_and_determinism() -> None:
    net1 = diffnet.build_network([LayerSpec("affine", 16, 8)], init_seed=42)
    net2 = diffnet.build_network([LayerSpec("affine", 16, 8)], init_seed=42)
    assert np.array_equal(net1.params[0]["W"], net2.params[0]["W"])
    bound = np.sqrt(1.0 / 16.0)
    W = net1.params[0]["W"]
    assert np.all(np.abs(W) <= bound)
    assert np.all(net1.params[0]["b"] == 0.0)


def test_gradients_match_finite_differences() -> None:
    rng = np.random.default_rng(2024)
    arch_pool = [
        [LayerSpec("affine", 3, 5), LayerSpec("leaky_relu", 5, 5, slope=0.2), LayerSpec("affine", 5, 2)],
        [LayerSpec("maxout", 4, 6, pieces=2), LayerSpec("affine", 6, 3)],
        [LayerSpec("affine", 2, 4), LayerSpec("tanh", 4, 4), LayerSpec("maxout", 4, 3, pieces=3)],
        [LayerSpec("maxout", 3, 3, pieces=2), LayerSpec("tanh", 3, 3), LayerSpec("affine", 3, 1)],
    ]
    for trial in range(12):
        specs = arch_pool[trial % len(arch_pool)]
        net = diffnet.build_network(specs, init_seed=100 + trial)
        x = rng.normal(size=(4, specs[0].in_dim))
        proj = rng.normal(size=(4, specs[-1].out_dim))
        y, tape = diffnet.forward(net, x)
        analytic, _ = diffnet.backward(tape, proj)
        numeric = fd_gradient(net, x, proj)
        assert max_rel_err(analytic, numeric) < 1e-7


def test_input_gradient_matches_finite_differences() -> None:
    rng = np.random.default_rng(5)
    net = diffnet.build_network(
        [LayerSpec("affine", 4, 6), LayerSpec("tanh", 6, 6), LayerSpec("affine", 6, 3)],
        init_seed=9,
    )
    x = rng.normal(size=(2, 4))
    proj = rng.normal(size=(2, 3))
    _, tape = diffnet.forward(net, x)
    _, dx = diffnet.backward(tape, proj)
    eps = 1e-6
    num = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp = x.copy(); xp[i, j] += eps
            xm = x.copy(); xm[i, j] -= eps
            num[i, j] = (np.sum(proj * diffnet.predict(net, xp)) -
                         np.sum(proj * diffnet.predict(net, xm))) / (2 * eps)
    assert np.max(np.abs(dx - num)) < 1e-7


def test_momentum_update_arithmetic() -> None:
    net = diffnet.build_network([LayerSpec("affine", 1, 1)], init_seed=0)
    net.params[0]["W"][:] = 1.0
    net.params[0]["b"][:] = 0.0
    state = OptimizerState(lr=0.1, momentum=0.9)
    g = [{"W": np.array([[2.0]]), "b": np.array([1.0])}]
    diffnet.sgd_step(net, g, state)
    # v = -lr*g = -0.2; W = 1 - 0.2 = 0.8
    assert net.params[0]["W"][0, 0] == pytest.approx(0.8)
    diffnet.sgd_step(net, g, state)
    # v = 0.9*(-0.2) - 0.2 = -0.38; W = 0.8 - 0.38 = 0.42
    assert net.params[0]["W"][0, 0] == pytest.approx(0.42)
    assert net.params[0]["b"][0] == pytest.approx(-0.29)


def test_non_finite_gradient_aborts_whole_step() -> None:
    net = diffnet.build_network(
        [LayerSpec("affine", 2, 2), LayerSpec("affine", 2, 1)], init_seed=3
    )
    before = [dict((k, a.copy()) for k, a in p.items()) for p in net.params]
    g = [
        {"W": np.zeros((2, 2)), "b": np.zeros(2)},
        {"W": np.array([[np.nan], [0.0]]), "b": np.zeros(1)},
    ]
    state = OptimizerState(lr=0.1, momentum=0.9)
    with pytest.raises(diffnet.NumericFailure, match="layer 1"):
        diffnet.sgd_step(net, g, state)
    for p, orig in zip(net.params, before):
        for key in p:
            assert np.array_equal(p[key], orig[key])


def test_tape_is_single_use() -> None:
    net = diffnet.build_network([LayerSpec("affine", 2, 2)], init_seed=0)
    _, tape = diffnet.forward(net, np.zeros(2))
    diffnet.backward(tape, np.ones(2))
    with pytest.raises(diffnet.UsageError, match="tape"):
        diffnet.backward(tape, np.ones(2))


def test_shape_mismatch_rejected() -> None:
    net = diffnet.build_network([LayerSpec("affine", 3, 2)], init_seed=0)
    with pytest.raises(diffnet.UsageError):
        diffnet.predict(net, np.zeros(4))
    with pytest.raises(diffnet.UsageError):
        diffnet.build_network(
            [LayerSpec("affine", 3, 2), LayerSpec("affine", 3, 2)], init_seed=0
        )


def test_activation_layers_require_square_dims() -> None:
    with pytest.raises(diffnet.UsageError):
        LayerSpec("leaky_relu", 3, 4, slope=0.2)
    with pytest.raises(diffnet.UsageError):
        LayerSpec("tanh", 2, 3)


def test_serialization_round_trip_is_bit_exact() -> None:
    net = diffnet.build_network(
        [
            LayerSpec("affine", 3, 6),
            LayerSpec("leaky_relu", 6, 6, slope=0.2),
            LayerSpec("maxout", 6, 4, pieces=2),
            LayerSpec("tanh", 4, 4),
            LayerSpec("affine", 4, 2),
        ],
        init_seed=11,
    )
    doc = diffnet.to_json(net)
    clone = diffnet.from_json(doc)
    assert [s.kind for s in clone.layers] == [s.kind for s in net.layers]
    for p, q in zip(net.params, clone.params):
        for key in p:
            assert np.array_equal(p[key], q[key])
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(diffnet.predict(net, x), diffnet.predict(clone, x))
    assert diffnet.to_json(clone) == doc


def test_serialization_rejects_unknown_version() -> None:
    with pytest.raises(diffnet.UsageError, match="format"):
        diffnet.from_json('{"version": "diffnet/99", "layers": []}')


def test_zero_input_through_zero_bias_affine_is_zero() -> None:
    net = diffnet.build_network(
        [LayerSpec("affine", 4, 4), LayerSpec("leaky_relu", 4, 4, slope=0.2)],
        init_seed=21,
    )
    y = diffnet.predict(net, np.zeros(4))
    assert np.all(y == 0.0)
