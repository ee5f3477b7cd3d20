"""Gradient and forward checks for the autodiff primitives."""

import numpy as np
import pytest

from moe_asr import autodiff as ad


def t64(arr):
    return ad.Tensor(np.asarray(arr), dtype=np.float64)


def rand64(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), dtype=np.float64)


class TestLinear:
    def test_identity_weights(self):
        x = ad.Tensor(np.random.default_rng(0).standard_normal((3, 4)))
        w = ad.Tensor(np.eye(4, dtype=np.float32))
        b = ad.Tensor(np.zeros(4, dtype=np.float32))
        y = ad.linear(x, w, b)
        np.testing.assert_allclose(y.data, x.data)

    def test_hand_example(self):
        x = t64([[1.0, 2.0]])
        w = t64([[1.0, 0.0], [0.0, 1.0]])
        b = t64([1.0, 1.0])
        y = ad.linear(x, w, b)
        np.testing.assert_allclose(y.data, [[2.0, 3.0]])

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            ad.linear(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))), None)

    @pytest.mark.parametrize("shape", [(1, 3, 4), (5, 4), (2, 2, 4)])
    def test_grad(self, shape):
        rng = np.random.default_rng(1)
        x, w, b = rand64(rng, *shape), rand64(rng, 4, 6), rand64(rng, 6)
        report = ad.grad_check(ad.linear, [x, w, b])
        assert report.passed, str(report)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = ad.Tensor(np.full((2, 8), 3.5))
        g = ad.Tensor(np.ones(8))
        b = ad.Tensor(np.zeros(8))
        y = ad.layer_norm(x, g, b)
        assert np.abs(y.data).max() < 1e-2

    def test_two_point_row(self):
        y = ad.layer_norm(t64([[1.0, 3.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]))
        np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-4)

    @pytest.mark.parametrize("shape", [(3, 5), (2, 4, 6), (1, 7)])
    def test_grad(self, shape):
        rng = np.random.default_rng(2)
        x = rand64(rng, *shape)
        g = rand64(rng, shape[-1])
        b = rand64(rng, shape[-1])
        report = ad.grad_check(ad.layer_norm, [x, g, b])
        assert report.passed, str(report)


class TestAttention:
    def test_single_key_returns_value_row(self):
        rng = np.random.default_rng(3)
        q = rand64(rng, 4, 8)
        k = rand64(rng, 1, 8)
        v = rand64(rng, 1, 5)
        out = ad.scaled_dot_attention(q, k, v, np.ones((4, 1), dtype=bool))
        np.testing.assert_allclose(out.data, np.repeat(v.data, 4, axis=0), atol=1e-12)

    def test_uniform_logits_average_allowed_rows(self):
        q = t64(np.zeros((2, 4)))
        k = t64(np.zeros((3, 4)))
        v = t64(np.arange(12, dtype=np.float64).reshape(3, 4))
        mask = np.array([[True, True, True], [True, False, True]])
        out = ad.scaled_dot_attention(q, k, v, mask)
        np.testing.assert_allclose(out.data[0], v.data.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(out.data[1], v.data[[0, 2]].mean(axis=0), atol=1e-12)

    def test_hand_softmax_weights(self):
        # logits [[0, ln 3], [0, 0]] -> row0 weights [0.25, 0.75]
        d = 4
        q = t64(np.vstack([np.ones(d), np.zeros(d)]))
        k = t64(np.vstack([np.zeros(d), np.full(d, np.log(3.0) * np.sqrt(d) / d)]))
        v = t64(np.array([[1.0, 0.0], [0.0, 1.0]]))
        out = ad.scaled_dot_attention(q, k, v, np.ones((2, 2), dtype=bool))
        np.testing.assert_allclose(out.data[0], [0.25, 0.75], atol=1e-12)

    def test_empty_row_rejected(self):
        rng = np.random.default_rng(4)
        q, k, v = rand64(rng, 2, 4), rand64(rng, 3, 4), rand64(rng, 3, 4)
        mask = np.ones((2, 3), dtype=bool)
        mask[1] = False
        with pytest.raises(ValueError, match="empty attention row"):
            ad.scaled_dot_attention(q, k, v, mask)

    def test_rows_sum_to_one_under_random_masks(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            tq, tkv = rng.integers(1, 6, size=2)
            mask = rng.random((tq, tkv)) < 0.6
            mask[:, 0] = True  # keep every row non-empty
            s = ad.Tensor(rng.standard_normal((tq, tkv)))
            p = ad.masked_softmax(s, mask)
            np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-5)
            assert (p.data[~mask] == 0).all()

    def test_grad(self):
        rng = np.random.default_rng(6)
        mask = np.ones((3, 4), dtype=bool)
        mask[0, 2] = False
        report = ad.grad_check(
            lambda q, k, v: ad.scaled_dot_attention(q, k, v, mask),
            [rand64(rng, 3, 5), rand64(rng, 4, 5), rand64(rng, 4, 6)])
        assert report.passed, str(report)


class TestConvPrimitives:
    @pytest.mark.parametrize("causal", [True, False])
    def test_depthwise_grad(self, causal):
        rng = np.random.default_rng(7)
        report = ad.grad_check(
            lambda x, w, b: ad.depthwise_conv1d(x, w, b, causal),
            [rand64(rng, 6, 3), rand64(rng, 5, 3), rand64(rng, 3)])
        assert report.passed, str(report)

    def test_depthwise_causality(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((7, 3)).astype(np.float32)
        w = ad.Tensor(rng.standard_normal((5, 3)))
        b = ad.Tensor(rng.standard_normal(3))
        base = ad.depthwise_conv1d(ad.Tensor(x), w, b, causal=True).data
        x2 = x.copy()
        x2[-1] += 10.0
        pert = ad.depthwise_conv1d(ad.Tensor(x2), w, b, causal=True).data
        np.testing.assert_array_equal(base[:-1], pert[:-1])
        assert not np.allclose(base[-1], pert[-1])

    def test_conv2d_matches_direct_loops(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 9, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = ad.conv2d(t64(x), t64(w), t64(b), (2, 2)).data
        oh, ow = (9 - 3) // 2 + 1, (7 - 3) // 2 + 1
        want = np.zeros((3, oh, ow))
        for co in range(3):
            for i in range(oh):
                for j in range(ow):
                    patch = x[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    want[co, i, j] = (patch * w[co]).sum() + b[co]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_conv2d_grad(self):
        rng = np.random.default_rng(10)
        report = ad.grad_check(
            lambda x, w, b: ad.conv2d(x, w, b, (2, 2)),
            [rand64(rng, 2, 7, 9), rand64(rng, 4, 2, 3, 3), rand64(rng, 4)])
        assert report.passed, str(report)


class TestMiscOps:
    @pytest.mark.parametrize("op,shapes", [
        (ad.softmax, [(3, 5)]),
        (ad.log_softmax, [(4, 6)]),
        (ad.relu, [(3, 4)]),
        (ad.swish, [(3, 4)]),
        (ad.sigmoid, [(2, 5)]),
        (ad.glu, [(3, 8)]),
        (ad.tsum, [(3, 4)]),
    ])
    def test_elementwise_grads(self, op, shapes):
        rng = np.random.default_rng(11)
        tensors = [rand64(rng, *s) for s in shapes]
        report = ad.grad_check(op, tensors)
        assert report.passed, str(report)

    def test_matmul_batched_grad(self):
        rng = np.random.default_rng(12)
        report = ad.grad_check(ad.matmul, [rand64(rng, 2, 3, 4), rand64(rng, 2, 4, 5)])
        assert report.passed, str(report)

    def test_gather_scatter_grads(self):
        rng = np.random.default_rng(13)
        idx = np.array([2, 0, 2, 1])
        report = ad.grad_check(lambda a: ad.take_rows(a, idx), [rand64(rng, 3, 4)])
        assert report.passed, str(report)
        report = ad.grad_check(lambda r: ad.scatter_rows(r, np.array([1, 3]), 5),
                               [rand64(rng, 2, 4)])
        assert report.passed, str(report)
        idx2 = np.array([[0, 2], [1, 1], [2, 0]])
        report = ad.grad_check(lambda a: ad.gather_last(a, idx2), [rand64(rng, 3, 4)])
        assert report.passed, str(report)
        report = ad.grad_check(
            lambda a: ad.take_elems(a, np.array([0, 1, 1]), np.array([2, 0, 3])),
            [rand64(rng, 2, 4)])
        assert report.passed, str(report)

    def test_fanout_accumulates(self):
        x = ad.Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        with ad.GradTape() as tape:
            y = ad.add(x, x)      # dy/dx = 2
            loss = ad.tsum(ad.mul(y, y))  # d/dx (2x)^2 = 8x = 16
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [16.0])

    def test_composite_softmax_cross_entropy_grad(self):
        rng = np.random.default_rng(14)

        def nll(logits):
            lp = ad.log_softmax(logits)
            return ad.scale(ad.take_elems(lp, np.arange(4), np.array([1, 0, 2, 1])), -1.0)

        report = ad.grad_check(nll, [rand64(rng, 4, 3)])
        assert report.passed, str(report)

    def test_corrupted_backward_rule_fails_check(self):
        # negative control: a deliberately wrong rule must be caught
        def bad_scale(x):
            out = ad.Tensor(x.data * 2.0)
            return ad.record_op(out, (x,), lambda g: (g * 3.0,))

        rng = np.random.default_rng(15)
        report = ad.grad_check(bad_scale, [rand64(rng, 3, 3)])
        assert not report.passed

    def test_grad_check_requires_float64(self):
        x = ad.Tensor(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="float64"):
            ad.grad_check(ad.relu, [x])


class TestPrecisionModes:
    def test_f32_and_f64_forward_agree(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((6, 8))
        w = rng.standard_normal((8, 8)) * 0.3
        b = rng.standard_normal(8) * 0.1
        g = np.abs(rng.standard_normal(8)) + 0.5
        bb = rng.standard_normal(8) * 0.1

        def path(dtype):
            xt = ad.Tensor(x, dtype=dtype)
            y = ad.linear(xt, ad.Tensor(w, dtype=dtype), ad.Tensor(b, dtype=dtype))
            y = ad.swish(y)
            y = ad.layer_norm(y, ad.Tensor(g, dtype=dtype), ad.Tensor(bb, dtype=dtype))
            return ad.softmax(y).data.astype(np.float64)

        a, c = path(np.float32), path(np.float64)
        rel = np.abs(a - c) / np.maximum(np.abs(c), 1e-6)
        assert rel.max() < 1e-3

    def test_ops_preserve_dtype(self):
        x32 = ad.Tensor(np.zeros((2, 3)), dtype=np.float32)
        assert ad.swish(x32).dtype == np.float32
        x64 = ad.Tensor(np.zeros((2, 3)), dtype=np.float64)
        assert ad.layer_norm(x64, ad.Tensor(np.ones(3), dtype=np.float64),
                             ad.Tensor(np.zeros(3), dtype=np.float64)).dtype == np.float64


class TestMacCounter:
    def test_linear_macs(self):
        x = ad.Tensor(np.zeros((7, 3)))
        w = ad.Tensor(np.zeros((3, 5)))
        b = ad.Tensor(np.zeros(5))
        with ad.count_macs() as c:
            ad.linear(x, w, b)
        assert c.macs == 7 * 3 * 5

    def test_no_tape_means_no_nodes(self):
        x = ad.Tensor(np.zeros((2, 2)), requires_grad=True)
        y = ad.relu(x)
        assert y._tracked is False or not ad._TAPE_STACK
