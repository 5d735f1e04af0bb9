import math

import numpy as np
import pytest

import contraspeech.tensor as T
from contraspeech.errors import ConfigError, ContractError, DimensionError, ShortInputError
from contraspeech.layers import (
    Adam,
    Conv1dLayer,
    DenseLayer,
    GroupNormLayer,
    LstmLayer,
    SelfAttentionBlock,
    conv_stack_min_length,
    conv_stack_output_length,
)
from contraspeech.tensor import Tape, Tensor, grad_check

PAPER_KERNELS = (10, 8, 4, 4, 4, 1)
PAPER_STRIDES = (5, 4, 2, 2, 2, 1)


def rng64(seed=0):
    return np.random.default_rng(seed)


class TestConv1d:
    def test_unit_kernel_copies_input(self, rng):
        conv = Conv1dLayer(1, 2, kernel_size=1, rng=rng)
        conv.weight.data[:] = np.array([[[1.0]], [[2.0]]], dtype=np.float32)
        conv.bias.data[:] = 0.0
        x = Tensor(rng.normal(size=(1, 7)).astype(np.float32))
        out = conv(x)
        np.testing.assert_allclose(out.data[0], x.data[0], rtol=1e-6)
        np.testing.assert_allclose(out.data[1], 2.0 * x.data[0], rtol=1e-6)

    def test_length_formula(self, rng):
        conv = Conv1dLayer(1, 1, kernel_size=10, stride=5, rng=rng)
        assert conv(Tensor(np.zeros((1, 10), np.float32))).shape == (1, 1)

    def test_averaging_kernel(self, rng):
        conv = Conv1dLayer(1, 1, kernel_size=3, rng=rng)
        conv.weight.data[:] = 1.0 / 3.0
        conv.bias.data[:] = 0.0
        out = conv(Tensor(np.array([[3.0, 6.0, 9.0]], np.float32)))
        np.testing.assert_allclose(out.data, [[6.0]], rtol=1e-6)

    def test_too_short_input(self, rng):
        conv = Conv1dLayer(1, 1, kernel_size=5, rng=rng)
        with pytest.raises(ShortInputError):
            conv(Tensor(np.zeros((1, 4), np.float32)))

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_gradients(self, stride):
        rng = rng64(stride)
        conv = Conv1dLayer(2, 3, kernel_size=3, stride=stride, rng=rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 9)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=conv(x.detach()).shape), dtype=np.float64)
        params = {"x": x, **conv.parameters()}
        assert grad_check(lambda: T.sum(conv(x) * w), params).passed


class TestGroupNorm:
    def test_constant_input_zeroes(self):
        gn = GroupNormLayer(2, 4)
        out = gn(Tensor(np.full((4, 5), 3.0, np.float32)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-4)

    def test_known_statistics(self):
        gn = GroupNormLayer(1, 1, eps=1e-5)
        x = np.array([[3.0, 7.0, 3.0, 7.0]], np.float32)  # mean 5, var 4
        out = gn.normalized(Tensor(x))
        np.testing.assert_allclose(out.data, (x - 5.0) / math.sqrt(4.0 + 1e-5), rtol=1e-5)

    def test_affine_override(self):
        gn = GroupNormLayer(2, 4)
        gn.gamma.data[:] = 0.0
        gn.beta.data[:] = 7.0
        out = gn(Tensor(np.random.default_rng(1).normal(size=(4, 6)).astype(np.float32)))
        np.testing.assert_allclose(out.data, 7.0, rtol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            GroupNormLayer(2, 4)(Tensor(np.zeros((6, 3), np.float32)))

    def test_group_statistics_contract(self):
        rng = rng64(3)
        gn = GroupNormLayer(4, 8)
        x = Tensor((rng.normal(size=(8, 50)) * 3.0 + 1.0).astype(np.float32))
        out = gn.normalized(x).data.reshape(4, -1)
        assert np.all(np.abs(out.mean(axis=1)) < 1e-5)
        assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-3)

    def test_gradients(self):
        rng = rng64(4)
        gn = GroupNormLayer(2, 4, dtype=np.float64)
        x = Tensor(rng.normal(size=(4, 5)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(4, 5)))
        assert grad_check(lambda: T.sum(gn(x) * w), {"x": x, **gn.parameters()}).passed


class TestLstm:
    def test_zero_weights_zero_output(self, rng):
        lstm = LstmLayer(3, 4, rng=rng)
        for p in lstm.parameters().values():
            p.data[:] = 0.0
        out = lstm(Tensor(np.ones((5, 3), np.float32)))
        np.testing.assert_allclose(out.data, 0.0)

    def test_single_step_matches_cell_arithmetic(self):
        rng = rng64(5)
        lstm = LstmLayer(2, 3, rng=rng, dtype=np.float64)
        x = rng.normal(size=(1, 2))
        out = lstm(Tensor(x, dtype=np.float64)).data[0]
        a = x[0] @ lstm.wx.data + lstm.bias.data
        h = 3
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        i, f, g, o = sig(a[:h]), sig(a[h:2 * h]), np.tanh(a[2 * h:3 * h]), sig(a[3 * h:])
        c = i * g
        np.testing.assert_allclose(out, o * np.tanh(c), rtol=1e-12)

    def test_backward_direction_is_time_reversal(self):
        rng = rng64(6)
        fwd = LstmLayer(3, 4, rng=rng64(6), direction="forward")
        bwd = LstmLayer(3, 4, rng=rng64(6), direction="backward")
        x = rng.normal(size=(7, 3)).astype(np.float32)
        out_b = bwd(Tensor(x)).data
        out_f = fwd(Tensor(x[::-1].copy())).data
        assert np.array_equal(out_b, out_f[::-1])

    def test_gradients(self):
        rng = rng64(7)
        lstm = LstmLayer(3, 4, rng=rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(3, 3)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))
        params = {"x": x, **lstm.parameters()}
        report = grad_check(lambda: T.sum(lstm(x) * w), params, rtol=1e-3)
        assert report.passed, report

    def test_backward_direction_gradients(self):
        rng = rng64(8)
        lstm = LstmLayer(2, 3, direction="backward", rng=rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(4, 2)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)))
        assert grad_check(lambda: T.sum(lstm(x) * w), {"x": x, **lstm.parameters()}).passed


class TestSelfAttention:
    def test_single_position_attends_to_itself(self):
        block = SelfAttentionBlock(8, 2, rng=rng64(9))
        x = Tensor(np.random.default_rng(9).normal(size=(1, 8)).astype(np.float32))
        for mat in block.attention_weights(x):
            np.testing.assert_allclose(mat, [[1.0]], rtol=1e-6)

    def test_attention_rows_sum_to_one(self):
        block = SelfAttentionBlock(8, 4, rng=rng64(10))
        x = Tensor(np.random.default_rng(10).normal(size=(6, 8)).astype(np.float32))
        for mat in block.attention_weights(x):
            np.testing.assert_allclose(mat.sum(axis=1), 1.0, rtol=1e-5)

    def test_permutation_equivariance(self):
        block = SelfAttentionBlock(8, 2, rng=rng64(11))
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5, 8)).astype(np.float32)
        perm = rng.permutation(5)
        base = block(Tensor(x)).data
        permuted = block(Tensor(x[perm])).data
        np.testing.assert_allclose(permuted, base[perm], atol=1e-5)

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            SelfAttentionBlock(10, 4, rng=rng64(12))

    def test_gradients(self):
        block = SelfAttentionBlock(4, 2, rng=rng64(13), dtype=np.float64)
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(3, 4)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))
        params = {"x": x, **block.parameters()}
        report = grad_check(lambda: T.sum(block(x) * w), params, rtol=1e-3)
        assert report.passed, report


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0], np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr_high=0.1, total_steps=10)
        p.grad = np.zeros_like(p.data)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_unit_gradient(self):
        p = Tensor(np.array([0.0], np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr_high=0.1, total_steps=10)
        p.grad = np.array([1.0], np.float32)
        opt.step()
        assert p.data[0] == pytest.approx(-0.1, rel=1e-5)

    def test_two_phase_schedule(self):
        p = Tensor(np.zeros(1, np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr_high=3e-4, lr_low=5e-5, switch_fraction=0.5, total_steps=100)
        assert opt.learning_rate(49) == pytest.approx(3e-4)
        assert opt.learning_rate(50) == pytest.approx(5e-5)

    def test_missing_grad_rejected(self):
        p = Tensor(np.zeros(1, np.float32), requires_grad=True)
        opt = Adam({"p": p}, total_steps=1)
        with pytest.raises(ContractError):
            opt.step()

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([4.0], np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr_high=0.2, lr_low=0.05, total_steps=200)
        for _ in range(200):
            with Tape() as tape:
                loss = T.sum(p * p)
                loss.backward(tape)
            opt.step()
            opt.zero_grad()
        assert abs(p.data[0]) < 1e-2


class TestStackLengths:
    def test_paper_stack_length(self):
        assert conv_stack_output_length(16000, PAPER_KERNELS, PAPER_STRIDES) == 98

    def test_minimum_length(self):
        assert conv_stack_min_length(PAPER_KERNELS, PAPER_STRIDES) == 465
        assert conv_stack_output_length(465, PAPER_KERNELS, PAPER_STRIDES) == 1

    def test_asymptotic_rate(self):
        for t in (16000, 32000, 64000):
            u, u2 = (conv_stack_output_length(n, PAPER_KERNELS, PAPER_STRIDES)
                     for n in (t, 2 * t))
            assert abs(u2 - 2 * u) <= 2


def test_composite_conv_lstm_loss_gradients():
    rng = rng64(20)
    conv = Conv1dLayer(1, 3, kernel_size=4, stride=2, rng=rng, dtype=np.float64)
    lstm = LstmLayer(3, 4, rng=rng, dtype=np.float64)
    head = DenseLayer(4, 1, rng=rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 12)), dtype=np.float64, requires_grad=True)

    def loss():
        feats = T.tanh(conv(x)).T
        return T.sum(head(lstm(feats)))

    params = {"x": x}
    for prefix, layer in [("conv", conv), ("lstm", lstm), ("head", head)]:
        for name, p in layer.parameters().items():
            params[f"{prefix}.{name}"] = p
    report = grad_check(loss, params, step=1e-3, rtol=1e-3)
    assert report.passed, report
