import math

import numpy as np
import pytest

from fedccl.contrast import (
    Ablation,
    ContrastContext,
    contrast_batch,
    global_contrast_loss,
    local_contrast_loss,
    total_loss,
)
from fedccl.numerics import forward, loss_and_grads
from fedccl.signals import GlobalSignalTable, LocalSignalSet, pool_signals

from conftest import small_net
from oracles import central_difference, contrast_scalar, max_relative_error

E1, E2, E3 = np.eye(3)


def local_ctx(vectors_by_class, tau=0.07):
    return ContrastContext(pool_signals([LocalSignalSet(0, {c: np.atleast_2d(v) for c, v in vectors_by_class.items()})]), None, tau)


def global_ctx(signals, tau=0.07):
    return ContrastContext(None, GlobalSignalTable({c: np.asarray(v, float) for c, v in signals.items()}), tau)


def random_ctx(rng, d=4, classes=3, tau=0.5):
    pool = pool_signals([LocalSignalSet(i, {c: rng.normal(size=(2, d)) for c in range(classes)}) for i in range(2)])
    table = GlobalSignalTable({c: rng.normal(size=d) for c in range(classes)})
    return ContrastContext(pool, table, tau)


class TestLocalContrast:
    def test_no_negatives(self):
        ctx = local_ctx({0: np.array([[1.0, 0.0], [0.5, 0.5]])}, tau=1.0)
        value, grad = local_contrast_loss([0.3, 0.9], 0, ctx)
        assert value == 0.0
        assert np.allclose(grad, 0.0, atol=1e-15)

    def test_equal_similarities(self):
        ctx = local_ctx({0: [1.0, 0.0], 1: [0.0, 1.0]}, tau=1.0)
        value, _ = local_contrast_loss([1.0, 1.0], 0, ctx)
        assert value == pytest.approx(math.log(2), abs=1e-12)

    def test_one_positive_one_negative(self):
        ctx = local_ctx({0: [1.0, 0.0], 1: [0.0, 1.0]}, tau=1.0)
        value, grad = local_contrast_loss([2.0, 0.0], 0, ctx)
        expected = contrast_scalar([2.0, 0.0], 0, [[1.0, 0.0], [0.0, 1.0]], [0, 1], 1.0)
        assert expected == pytest.approx(0.3132616875182228, abs=1e-15)
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.313262, abs=1e-6)
        num = central_difference(lambda e: local_contrast_loss(e, 0, ctx)[0], np.array([2.0, 0.0]))
        assert max_relative_error(grad, num) < 1e-4

    def test_missing_positive_is_skipped(self):
        ctx = local_ctx({1: [0.0, 1.0]})
        r = contrast_batch(np.array([[1.0, 0.0]]), np.array([0]), *ctx.local_pool.stacked(), 0.07)
        assert r.losses[0] == 0.0 and r.skipped[0] and not r.grads.any()


class TestGlobalContrast:
    def test_single_class(self):
        value, _ = global_contrast_loss([0.2, 0.1], 0, global_ctx({0: [1.0, 1.0]}))
        assert value == 0.0

    def test_equal_similarity(self):
        value, _ = global_contrast_loss([1.0, 1.0], 0, global_ctx({0: [1.0, 0.0], 1: [0.0, 1.0]}, tau=1.0))
        assert value == pytest.approx(math.log(2), abs=1e-12)

    def test_three_classes(self):
        # cos (1, 0, 0) at tau = 0.5 gives scaled similarities (2, 0, 0)
        ctx = global_ctx({0: E1, 1: E2, 2: E3}, tau=0.5)
        value, grad = global_contrast_loss(E1 * 3.0, 0, ctx)
        oracle = contrast_scalar(E1 * 3.0, 0, [E1, E2, E3], [0, 1, 2], 0.5)
        assert oracle == pytest.approx(0.2395447662218845, abs=1e-15)
        assert value == pytest.approx(oracle, abs=1e-12)
        assert value == pytest.approx(-math.log(math.e ** 2 / (math.e ** 2 + 2)), abs=1e-12)
        point = np.array([3.0, 0.2, -0.1])
        num = central_difference(lambda e: global_contrast_loss(e, 0, ctx)[0], point)
        assert max_relative_error(global_contrast_loss(point, 0, ctx)[1], num) < 1e-4

    def test_absent_label_skipped(self):
        value, grad = global_contrast_loss([1.0, 0.0], 2, global_ctx({0: [1.0, 0.0], 1: [0.0, 1.0]}))
        assert value == 0.0 and not grad.any()


class TestProperties:
    def test_matches_scalar_oracle(self, rng):
        for _ in range(30):
            keys = rng.normal(size=(7, 4))
            key_labels = rng.integers(0, 3, size=7)
            e = rng.normal(size=(5, 4))
            labels = rng.integers(0, 3, size=5)
            r = contrast_batch(e, labels, keys, key_labels, 0.3)
            for i in range(5):
                assert r.losses[i] == pytest.approx(contrast_scalar(e[i], labels[i], keys, key_labels, 0.3), abs=1e-10)

    def test_gradients_match_finite_differences(self, rng):
        worst = 0.0
        for _ in range(50):
            ctx = random_ctx(rng)
            e = rng.normal(size=4)
            label = int(rng.integers(0, 3))
            for fn in (local_contrast_loss, global_contrast_loss):
                _, g = fn(e, label, ctx)
                num = central_difference(lambda v: fn(v, label, ctx)[0], e)
                worst = max(worst, max_relative_error(g, num))
        assert worst < 1e-4

    def test_non_negative_and_zero_only_without_negatives(self, rng):
        for _ in range(20):
            ctx = random_ctx(rng)
            e = rng.normal(size=4)
            assert local_contrast_loss(e, 0, ctx)[0] > 0
            assert global_contrast_loss(e, 0, ctx)[0] > 0

    def test_monotone_in_positive_and_negative_similarity(self):
        e = np.array([1.0, 0.0])
        neg = np.array([0.0, 1.0])
        prev = np.inf
        for angle in np.linspace(1.2, 0.0, 8):
            pos = np.array([math.cos(angle), math.sin(angle)])
            v, _ = local_contrast_loss(e, 0, local_ctx({0: pos, 1: neg}, tau=0.5))
            assert v < prev
            prev = v
        pos = np.array([0.0, 1.0])
        prev = -np.inf
        for angle in np.linspace(1.2, 0.0, 8):
            negv = np.array([math.cos(angle), math.sin(angle)])
            v, _ = local_contrast_loss(e, 0, local_ctx({0: pos, 1: negv}, tau=0.5))
            assert v > prev
            prev = v

    def test_scale_robust(self, rng):
        ctx = random_ctx(rng, tau=0.07)
        for _ in range(20):
            e = rng.normal(size=4)
            for fn in (local_contrast_loss, global_contrast_loss):
                assert abs(fn(2 * e, 1, ctx)[0] - fn(e, 1, ctx)[0]) < 1e-9


class TestTotalLoss:
    def test_ablation_off_is_cross_entropy(self, net, rng):
        x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, size=6)
        ctx = random_ctx(rng)
        value, grads, _ = total_loss(x, y, net, ctx, Ablation(False, False))
        ce, ce_grads = loss_and_grads(net, x, y)
        assert value == ce and np.array_equal(grads.flat(), ce_grads.flat())

    def test_empty_context_is_cross_entropy(self, net, rng):
        x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, size=6)
        ce, _ = loss_and_grads(net, x, y)
        assert total_loss(x, y, net, None)[0] == ce
        assert total_loss(x, y, net, ContrastContext())[0] == ce

    def test_decomposition_and_gradient(self, rng):
        net = small_net(rng)
        x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, size=6)
        ctx = random_ctx(rng)
        value, grads, parts = total_loss(x, y, net, ctx)
        feats, _ = forward(net, x)
        pool_keys, pool_labels = ctx.local_pool.stacked()
        g_keys, g_labels = ctx.global_table.stacked()
        local = np.mean([contrast_scalar(f, l, pool_keys, pool_labels, ctx.temperature) for f, l in zip(feats, y)])
        glob = np.mean([contrast_scalar(f, l, g_keys, g_labels, ctx.temperature) for f, l in zip(feats, y)])
        ce, _ = loss_and_grads(net, x, y)
        assert value == pytest.approx(ce + local + glob, abs=1e-12)
        assert parts.local == pytest.approx(local, abs=1e-12)
        assert parts.global_ == pytest.approx(glob, abs=1e-12)
        num = central_difference(lambda v: total_loss(x, y, net.with_flat(v), ctx)[0], net.flat())
        assert max_relative_error(grads.flat(), num) < 1e-4

    def test_weights_zero_equal_cross_entropy(self, net, rng):
        x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, size=6)
        value, _, _ = total_loss(x, y, net, random_ctx(rng), Ablation(), 0.0, 0.0)
        assert value == loss_and_grads(net, x, y)[0]

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            ContrastContext(temperature=0.0)
