"""Observation-model construction, invertibility, and serialization."""

import numpy as np
import pytest

from gcrl import diffnet
from gcrl.diffnet import UsageError
from gcrl.latent_sampler import LatentSamples
from gcrl.mixing import (
    GroupedDataset,
    gen_mixing,
    mix,
    mixing_from_json,
    mixing_to_json,
)


def jacobian(net, x):
    """Exact Jacobian at a point, one reverse pass per output coordinate."""
    J = np.zeros((net.out_dim, net.in_dim))
    for k in range(net.out_dim):
        _, tape = diffnet.forward(net, x)
        e = np.zeros(net.out_dim)
        e[k] = 1.0
        _, J[k] = diffnet.backward(tape, e)
    return J


def newton_invert(net, y, max_iter=100):
    """Damped Newton solve of net(x) = y, independent of any library solver."""
    x = np.zeros(net.in_dim)
    fx = diffnet.predict(net, x)
    for _ in range(max_iter):
        r = fx - y
        if np.abs(r).max() < 1e-12:
            break
        step = np.linalg.solve(jacobian(net, x), r)
        alpha = 1.0
        while True:
            x_try = x - alpha * step
            f_try = diffnet.predict(net, x_try)
            if np.abs(f_try - y).max() < np.abs(r).max() or alpha < 1e-8:
                break
            alpha *= 0.5
        x, fx = x_try, f_try
    return x


def obs_samples(values, dims):
    return LatentSamples(values, dims, np.zeros(sum(dims), dtype=bool))


class TestConstruction:
    def test_depth_zero_is_identity(self):
        model = gen_mixing([3, 2], depth=0, seed=1)
        assert model.nets == [None, None]
        vals = np.random.default_rng(0).normal(size=(50, 5))
        out = mix(model, obs_samples(vals, [3, 2]))
        np.testing.assert_array_equal(out.values, vals)

    def test_layer_pattern(self):
        model = gen_mixing([4], depth=3, seed=2)
        kinds = [s.kind for s in model.nets[0].layers]
        assert kinds == ["affine", "leaky_relu", "affine", "leaky_relu", "affine"]
        assert all(s.in_dim == 4 and s.out_dim == 4 for s in model.nets[0].layers)
        single = gen_mixing([4], depth=1, seed=2)
        assert [s.kind for s in single.nets[0].layers] == ["affine"]

    def test_weights_orthogonal_biases_zero(self):
        model = gen_mixing([5, 3], depth=3, seed=7)
        for net in model.nets:
            for spec, p in zip(net.layers, net.params):
                if spec.kind != "affine":
                    continue
                W = p["W"]
                np.testing.assert_allclose(W.T @ W, np.eye(W.shape[0]), atol=1e-10)
                assert np.linalg.cond(W) <= 1e3
                np.testing.assert_array_equal(p["b"], np.zeros(W.shape[1]))

    def test_deterministic_and_groupwise_independent(self):
        a = gen_mixing([3, 3], depth=2, seed=5)
        b = gen_mixing([3, 3], depth=2, seed=5)
        c = gen_mixing([3, 3], depth=2, seed=6)
        np.testing.assert_array_equal(a.nets[0].params[0]["W"], b.nets[0].params[0]["W"])
        assert not np.array_equal(a.nets[0].params[0]["W"], a.nets[1].params[0]["W"])
        assert not np.array_equal(a.nets[0].params[0]["W"], c.nets[0].params[0]["W"])

    def test_bad_args(self):
        with pytest.raises(UsageError):
            gen_mixing([3], depth=-1, seed=0)
        with pytest.raises(UsageError):
            gen_mixing([], depth=1, seed=0)
        with pytest.raises(UsageError):
            gen_mixing([3, 0], depth=1, seed=0)


class TestMixing:
    def test_single_affine_is_exact_linear_map(self):
        model = gen_mixing([4], depth=1, seed=3)
        W = model.nets[0].params[0]["W"]
        vals = np.random.default_rng(1).normal(size=(20, 4))
        out = mix(model, obs_samples(vals, [4]))
        np.testing.assert_allclose(out.values, vals @ W, atol=1e-12)

    def test_groups_mixed_locally(self):
        # changing one group's latents must not move the other group's block
        model = gen_mixing([3, 3], depth=2, seed=4)
        rng = np.random.default_rng(2)
        vals = rng.normal(size=(10, 6))
        base = mix(model, obs_samples(vals, [3, 3]))
        bumped = vals.copy()
        bumped[:, :3] += rng.normal(size=(10, 3))
        out = mix(model, obs_samples(bumped, [3, 3]))
        np.testing.assert_array_equal(out.values[:, 3:], base.values[:, 3:])
        assert not np.array_equal(out.values[:, :3], base.values[:, :3])

    def test_confounders_dropped_before_mixing(self):
        model = gen_mixing([2, 2], depth=2, seed=9)
        rng = np.random.default_rng(3)
        full = rng.normal(size=(15, 8))
        mask = np.array([True, False, True, False] * 2)
        mixed = mix(model, LatentSamples(full, [4, 4], mask))
        assert mixed.dims == [2, 2]
        direct = mix(model, obs_samples(full[:, ~mask], [2, 2]))
        np.testing.assert_array_equal(mixed.values, direct.values)

    def test_dim_mismatch_rejected(self):
        model = gen_mixing([3, 3], depth=1, seed=0)
        with pytest.raises(UsageError, match="do not match"):
            mix(model, obs_samples(np.zeros((4, 5)), [3, 2]))

    def test_invertible_by_newton(self):
        model = gen_mixing([4], depth=3, seed=11)
        net = model.nets[0]
        rng = np.random.default_rng(4)
        X = rng.normal(size=(100, 4))
        worst = 0.0
        for x in X:
            y = diffnet.predict(net, x)
            worst = max(worst, np.abs(newton_invert(net, y) - x).max())
        assert worst < 1e-6

    def test_metadata_passthrough(self):
        model = gen_mixing([2], depth=0, seed=8)
        out = mix(model, obs_samples(np.zeros((3, 2)), [2]), metadata={"tag": "x"})
        assert out.metadata["tag"] == "x"
        assert out.metadata["mixing_seed"] == 8
        assert out.metadata["mixing_depth"] == 0


class TestSerialization:
    def test_round_trip_bit_exact(self):
        model = gen_mixing([3, 2], depth=2, seed=12)
        clone = mixing_from_json(mixing_to_json(model))
        assert clone.dims == model.dims and clone.depth == 2 and clone.seed == 12
        vals = np.random.default_rng(5).normal(size=(25, 5))
        a = mix(model, obs_samples(vals, [3, 2]))
        b = mix(clone, obs_samples(vals, [3, 2]))
        np.testing.assert_array_equal(a.values, b.values)

    def test_identity_round_trip(self):
        clone = mixing_from_json(mixing_to_json(gen_mixing([2, 2], depth=0, seed=1)))
        assert clone.nets == [None, None]

    def test_version_checked(self):
        doc = mixing_to_json(gen_mixing([2], depth=1, seed=0)).replace(
            "gcarl-mixing/1", "gcarl-mixing/9"
        )
        with pytest.raises(UsageError, match="unsupported mixing format"):
            mixing_from_json(doc)


class TestGroupedDataset:
    def test_width_validated(self):
        with pytest.raises(UsageError):
            GroupedDataset(np.zeros((3, 4)), [3, 2])

    def test_group_block(self):
        ds = GroupedDataset(np.arange(12.0).reshape(3, 4), [1, 3])
        np.testing.assert_array_equal(ds.group_block(1), np.arange(12.0).reshape(3, 4)[:, 1:])
        assert ds.n == 3
