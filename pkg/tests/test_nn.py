import numpy as np
import pytest
from scipy.special import logsumexp

from caf.nn import (Dense, GradientTape, LowRankDense, Mlp, dense_forward, lowrank_forward, relu,
                    relu_backward, sgd_step, softmax_cross_entropy)
from caf.rng import Stream


class TestDense:
    def test_identity(self):
        layer = Dense(np.eye(3), np.zeros(3))
        x = np.array([0.5, -1.0, 2.0])
        assert np.array_equal(dense_forward(layer, x), x)

    def test_hand_arithmetic(self):
        layer = Dense([[1.0, 2.0], [3.0, 4.0]], [0.5, -0.5])
        assert np.array_equal(dense_forward(layer, [1.0, 1.0]), [3.5, 6.5])

    def test_output_shape(self):
        s = Stream(0)
        for i in range(10):
            a, b = 1 + int(s.child(f"a{i}").integers(9)), 1 + int(s.child(f"b{i}").integers(9))
            layer = Dense.init(a, b, s.child(str(i)))
            assert dense_forward(layer, np.ones(a)).shape == (b,)
            assert dense_forward(layer, np.ones((4, a))).shape == (4, b)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            Dense(np.eye(3), np.zeros(3)).forward(np.ones(2))

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            Dense(np.eye(3), np.zeros(2))
        with pytest.raises(ValueError):
            Dense([[np.nan]], [0.0])

    def test_init_scheme(self):
        layer = Dense.init(30, 20, Stream(1))
        limit = np.sqrt(6 / 50)
        assert np.all(np.abs(layer.weight) <= limit)
        assert np.all(layer.bias == 0)


class TestReluAndLowRank:
    def test_relu(self):
        assert np.array_equal(relu([-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])

    def test_relu_subgradient_at_zero(self):
        assert np.array_equal(relu_backward(np.array([-1.0, 0.0, 1.0]), np.ones(3)), [0.0, 0.0, 1.0])

    def test_identity_factors(self):
        layer = LowRankDense(np.eye(4), np.eye(4))
        x = np.arange(4.0)
        assert np.array_equal(lowrank_forward(layer, x), x)

    def test_zero_a(self):
        layer = LowRankDense(np.ones((5, 2)), np.zeros((2, 3)))
        assert np.array_equal(lowrank_forward(layer, np.array([1.0, -2.0, 3.0])), np.zeros(5))

    def test_explicit_product(self):
        s = Stream(4)
        for i in range(100):
            b = s.child(f"b{i}").normal((6, 3))
            a = s.child(f"a{i}").normal((3, 5))
            x = s.child(f"x{i}").normal(5)
            assert np.max(np.abs(lowrank_forward(LowRankDense(b, a), x) - (b @ a) @ x)) <= 1e-12

    def test_rank_limit(self):
        with pytest.raises(ValueError):
            LowRankDense(np.zeros((2, 3)), np.zeros((3, 4)))

    def test_init_b_zero(self):
        layer = LowRankDense.init(6, 4, 2, Stream(0))
        assert np.all(layer.factor_b == 0)
        assert layer.parameters()["factor_a"].shape == (2, 6)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros(5), 2)
        assert loss == pytest.approx(np.log(5), abs=1e-15)

    def test_confident(self):
        loss, grad = softmax_cross_entropy(np.array([10.0, -10.0]), 0)
        assert loss == pytest.approx(-(20.0 - logsumexp([20.0, 0.0])), rel=1e-9)
        assert loss == pytest.approx(2.06e-9, rel=1e-2)
        assert np.all(np.abs(grad) < 1e-8)

    def test_grad_sums_to_zero(self):
        s = Stream(2)
        for i in range(20):
            q = s.child(str(i)).normal(6) * 5
            _, grad = softmax_cross_entropy(q, i % 6)
            assert abs(grad.sum()) < 1e-12

    def test_stable_for_large_logits(self):
        loss, grad = softmax_cross_entropy(np.array([1000.0, 0.0, -1000.0]), 1)
        assert loss == pytest.approx(1000.0)
        assert np.all(np.isfinite(grad))

    def test_batch_mean(self):
        q = Stream(3).normal((4, 3))
        y = np.array([0, 1, 2, 1])
        loss, grad = softmax_cross_entropy(q, y)
        singles = [softmax_cross_entropy(q[i], y[i]) for i in range(4)]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]))
        assert np.allclose(grad, np.stack([s[1] for s in singles]) / 4)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros(3), 3)


def numeric_grads(net, x, y, h=1e-5):
    out = {}
    for name, arr in net.named_parameters():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = softmax_cross_entropy(net.forward(x), y)[0]
            flat[j] = old - h
            down = softmax_cross_entropy(net.forward(x), y)[0]
            flat[j] = old
            gflat[j] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_rel_error(analytic, numeric):
    worst = 0.0
    for name, num in numeric.items():
        a, n = analytic[name].ravel(), num.ravel()
        scale = np.maximum(np.abs(a), np.abs(n))
        keep = scale >= 1e-8
        if keep.any():
            worst = max(worst, float(np.max(np.abs(a - n)[keep] / scale[keep])))
    return worst


class TestBackward:
    def test_finite_differences_2_16_8_3(self):
        net = Mlp.init([2, 16, 8, 3], Stream(7))
        x = Stream(8).normal((6, 2))
        y = np.array([0, 1, 2, 2, 1, 0])
        _, tape = net.backward_loss(x, y)
        assert max_rel_error(tape.grads, numeric_grads(net, x, y)) <= 1e-4

    @pytest.mark.parametrize("widths,rank", [([3, 5, 4], None), ([4, 6, 6, 2], None), ([5, 4, 3], 2), ([3, 3], 3)])
    def test_finite_differences_shapes(self, widths, rank):
        net = Mlp.init(widths, Stream(1, (str(widths),)), rank=rank)
        for name, arr in net.named_parameters():
            arr[...] = Stream(2, (name,)).normal(arr.shape, 0.7)
        x = Stream(3).normal((4, widths[0]))
        y = np.arange(4) % widths[-1]
        _, tape = net.backward_loss(x, y)
        assert max_rel_error(tape.grads, numeric_grads(net, x, y)) <= 1e-4

    def test_zero_loss_zero_grad(self):
        net = Mlp([Dense(np.array([[40.0], [-40.0]]), np.zeros(2))])
        loss, tape = net.backward_loss(np.array([[1.0]]), np.array([0]))
        assert loss < 1e-30
        assert tape.max_abs() <= 1e-8

    def test_duplicate_sample_doubles_sum(self):
        net = Mlp.init([3, 4, 2], Stream(5))
        x = Stream(6).normal((1, 3))
        _, once = net.backward_loss(x, [1], reduction="sum")
        _, twice = net.backward_loss(np.vstack([x, x]), [1, 1], reduction="sum")
        for name, g in once.items():
            assert np.allclose(twice[name], 2 * g, rtol=1e-15, atol=0)


class TestSgd:
    def test_zero_lr_bit_identical(self):
        net = Mlp.init([3, 4, 2], Stream(5))
        before = {k: v.copy() for k, v in net.named_parameters()}
        _, tape = net.backward_loss(Stream(1).normal((3, 3)), [0, 1, 0])
        sgd_step(dict(net.named_parameters()), tape, 0.0)
        for k, v in net.named_parameters():
            assert v.tobytes() == before[k].tobytes()

    def test_scalar(self):
        w = np.array([1.0])
        tape = GradientTape()
        tape.add("w", [2.0])
        sgd_step({"w": w}, tape, 0.1)
        assert w[0] == pytest.approx(0.8, abs=1e-15)

    def test_shape_mismatch(self):
        tape = GradientTape()
        tape.add("w", np.ones(3))
        with pytest.raises(ValueError):
            sgd_step({"w": np.ones(2)}, tape, 0.1)

    def test_untracked_parameter(self):
        tape = GradientTape()
        tape.add("frozen", np.ones(2))
        with pytest.raises(KeyError):
            sgd_step({"w": np.ones(2)}, tape, 0.1)

    def test_tape_zero_and_accumulate(self):
        a, b = GradientTape(), GradientTape()
        a.add("w", [1.0, 2.0])
        b.add("w", [3.0, 4.0])
        a.accumulate(b)
        assert np.array_equal(a["w"], [4.0, 6.0])
        a.zero()
        assert a.max_abs() == 0.0
