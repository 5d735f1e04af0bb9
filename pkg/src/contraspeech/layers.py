"""Neural-network building blocks on the tape engine.

Conv1d and LSTM are fused tape ops (vectorized numpy forward, hand-written
backward); group norm, layer norm and attention are composed from tensor
primitives. Layers are immutable during forward/backward except for their
parameter tensors, which only the optimizer mutates.

Initialization defaults: weights uniform in +/- 1/sqrt(fan_in), biases zero,
LSTM forget-gate bias 1.0.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, ShortInputError
from .tensor import Tensor, apply_op

__all__ = [
    "Conv1dLayer",
    "GroupNormLayer",
    "DenseLayer",
    "LstmLayer",
    "SelfAttentionBlock",
    "Adam",
    "conv_output_length",
    "conv_stack_output_length",
    "conv_stack_min_length",
    "sinusoid_positions",
]


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_output_length(length: int, kernel: int, stride: int) -> int:
    if length < kernel:
        raise ShortInputError(f"input length {length} is shorter than kernel {kernel}")
    return (length - kernel) // stride + 1


def conv_stack_output_length(length: int, kernels, strides) -> int:
    for k, s in zip(kernels, strides):
        length = conv_output_length(length, k, s)
    return length


def conv_stack_min_length(kernels, strides) -> int:
    """Smallest input length for which the stack emits at least one frame."""
    need = 1
    for k, s in zip(reversed(kernels), reversed(strides)):
        need = (need - 1) * s + k
    return need


class Conv1dLayer:
    """Valid (unpadded) 1-D cross-correlation over a channels x length input."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, *,
                 rng, dtype=np.float32):
        if min(in_channels, out_channels, kernel_size, stride) < 1:
            raise ConfigError("conv dimensions and stride must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        fan_in = in_channels * kernel_size
        self.weight = Tensor(_uniform_init(rng, (out_channels, in_channels, kernel_size),
                                           fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[0] != self.in_channels:
            raise DimensionError(
                f"conv1d expects ({self.in_channels}, L) input, got {x.shape}")
        length = x.shape[1]
        k, s = self.kernel_size, self.stride
        l_out = conv_output_length(length, k, s)
        w, b = self.weight, self.bias

        windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)[:, ::s, :]
        patches = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(-1, l_out)
        w2 = w.data.reshape(self.out_channels, -1)
        out = T._matmul64(w2, patches, x.dtype) + b.data[:, None].astype(x.dtype)

        def back(g):
            dw = T._matmul64(g, patches.T, w.dtype).reshape(w.shape)
            db = np.sum(g, axis=1, dtype=np.float64).astype(b.dtype)
            dpatch = T._matmul64(w2.T, g, x.dtype).reshape(self.in_channels, k, l_out)
            dx = np.zeros(x.shape, dtype=x.dtype)
            for kk in range(k):
                dx[:, kk:kk + s * l_out:s] += dpatch[:, kk, :]
            return dx, dw, db

        return apply_op("conv1d", (x, w, b), out, back)


class GroupNormLayer:
    """Normalizes over (channels-within-group, time), then per-channel affine."""

    def __init__(self, num_groups, channels, *, eps=1e-5, dtype=np.float32):
        if channels % num_groups != 0:
            raise ConfigError(
                f"channels ({channels}) must be divisible by num_groups ({num_groups})")
        self.num_groups = num_groups
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones((channels, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((channels, 1), dtype=dtype), requires_grad=True)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def normalized(self, x: Tensor) -> Tensor:
        """Pre-affine normalized values (exposed for the statistics contract)."""
        if x.ndim != 2 or x.shape[0] != self.channels:
            raise DimensionError(f"group_norm expects ({self.channels}, L) input, got {x.shape}")
        g = self.num_groups
        grouped = x.reshape(g, -1)
        m = grouped.mean(axis=1, keepdims=True)
        centered = grouped - m
        var = (centered * centered).mean(axis=1, keepdims=True)
        return (centered / T.sqrt(var + self.eps)).reshape(x.shape)

    def __call__(self, x: Tensor) -> Tensor:
        return self.normalized(x) * self.gamma + self.beta


class DenseLayer:
    def __init__(self, in_features, out_features, *, rng, dtype=np.float32, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_uniform_init(rng, (in_features, out_features), in_features, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LstmLayer:
    """Single-direction LSTM over a (U, D_in) sequence, zero initial state.

    The whole recurrence is one fused tape op; the backward pass is standard
    BPTT. ``direction="backward"`` runs the same recurrence on the
    time-reversed input and reverses the output.
    """

    def __init__(self, input_size, hidden_size, *, direction="forward",
                 rng, dtype=np.float32, forget_bias=1.0):
        if direction not in ("forward", "backward"):
            raise ConfigError(f"unknown LSTM direction '{direction}'")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.direction = direction
        h = hidden_size
        self.wx = Tensor(_uniform_init(rng, (input_size, 4 * h), input_size, dtype),
                         requires_grad=True)
        self.wh = Tensor(_uniform_init(rng, (h, 4 * h), h, dtype), requires_grad=True)
        bias = np.zeros(4 * h, dtype=dtype)
        bias[h:2 * h] = forget_bias
        self.bias = Tensor(bias, requires_grad=True)

    def parameters(self):
        return {"wx": self.wx, "wh": self.wh, "bias": self.bias}

    @staticmethod
    def param_count(input_size: int, hidden_size: int) -> int:
        return 4 * hidden_size * (input_size + hidden_size) + 4 * hidden_size

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise DimensionError(f"lstm expects (U, {self.input_size}) input, got {x.shape}")
        if x.shape[0] < 1:
            raise ContractError("lstm requires at least one timestep")
        if self.direction == "backward":
            return T.flip(self._core(T.flip(x, axis=0)), axis=0)
        return self._core(x)

    def _core(self, x: Tensor) -> Tensor:
        n_steps, h = x.shape[0], self.hidden_size
        wx, wh, b = self.wx, self.wh, self.bias
        x64 = x.data.astype(np.float64)
        wx64 = wx.data.astype(np.float64)
        wh64 = wh.data.astype(np.float64)
        xg = x64 @ wx64 + b.data.astype(np.float64)

        gates = np.empty((n_steps, 4 * h))
        cells = np.empty((n_steps, h))
        tanh_c = np.empty((n_steps, h))
        hidden = np.empty((n_steps, h))
        h_prev = np.zeros(h)
        c_prev = np.zeros(h)
        for t in range(n_steps):
            a = xg[t] + h_prev @ wh64
            ai, af, ag, ao = a[:h], a[h:2 * h], a[2 * h:3 * h], a[3 * h:]
            gi, gf, go = T._sigmoid(ai), T._sigmoid(af), T._sigmoid(ao)
            gg = np.tanh(ag)
            c_prev = gf * c_prev + gi * gg
            tc = np.tanh(c_prev)
            h_prev = go * tc
            gates[t, :h], gates[t, h:2 * h], gates[t, 2 * h:3 * h], gates[t, 3 * h:] = gi, gf, gg, go
            cells[t] = c_prev
            tanh_c[t] = tc
            hidden[t] = h_prev
        out = hidden.astype(x.dtype)

        def back(g_out):
            gi, gf = gates[:, :h], gates[:, h:2 * h]
            gg, go = gates[:, 2 * h:3 * h], gates[:, 3 * h:]
            d_gates = np.empty((n_steps, 4 * h))
            dh_carry = np.zeros(h)
            dc_carry = np.zeros(h)
            wh_t = wh64.T
            g64 = g_out.astype(np.float64)
            for t in range(n_steps - 1, -1, -1):
                dh = g64[t] + dh_carry
                c_before = cells[t - 1] if t > 0 else np.zeros(h)
                do = dh * tanh_c[t]
                dc = dh * go[t] * (1.0 - tanh_c[t] ** 2) + dc_carry
                df = dc * c_before
                di = dc * gg[t]
                dg = dc * gi[t]
                dc_carry = dc * gf[t]
                d_gates[t, :h] = di * gi[t] * (1.0 - gi[t])
                d_gates[t, h:2 * h] = df * gf[t] * (1.0 - gf[t])
                d_gates[t, 2 * h:3 * h] = dg * (1.0 - gg[t] ** 2)
                d_gates[t, 3 * h:] = do * go[t] * (1.0 - go[t])
                dh_carry = d_gates[t] @ wh_t
            dx = (d_gates @ wx64.T).astype(x.dtype)
            dwx = (x64.T @ d_gates).astype(wx.dtype)
            h_prevs = np.vstack([np.zeros((1, h)), hidden[:-1]])
            dwh = (h_prevs.T @ d_gates).astype(wh.dtype)
            db = np.sum(d_gates, axis=0).astype(b.dtype)
            return dx, dwx, dwh, db

        return apply_op("lstm", (x, wx, wh, b), out, back)


def sinusoid_positions(n_steps: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal position table, one row per timestep."""
    pos = np.arange(n_steps)[:, None]
    idx = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


class _LayerNorm:
    def __init__(self, dim, *, eps=1e-5, dtype=np.float32):
        self.eps = eps
        self.gamma = Tensor(np.ones((1, dim), dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((1, dim), dtype=dtype), requires_grad=True)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        m = x.mean(axis=1, keepdims=True)
        centered = x - m
        var = (centered * centered).mean(axis=1, keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gamma + self.beta


class SelfAttentionBlock:
    """Unmasked multi-head self-attention + FFN, post-norm residual layout."""

    def __init__(self, dim, heads, *, ffn_multiplier=4, rng, dtype=np.float32):
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = DenseLayer(dim, dim, rng=rng, dtype=dtype)
        self.wk = DenseLayer(dim, dim, rng=rng, dtype=dtype)
        self.wv = DenseLayer(dim, dim, rng=rng, dtype=dtype)
        self.wo = DenseLayer(dim, dim, rng=rng, dtype=dtype)
        self.ffn1 = DenseLayer(dim, ffn_multiplier * dim, rng=rng, dtype=dtype)
        self.ffn2 = DenseLayer(ffn_multiplier * dim, dim, rng=rng, dtype=dtype)
        self.ln1 = _LayerNorm(dim, dtype=dtype)
        self.ln2 = _LayerNorm(dim, dtype=dtype)

    def parameters(self):
        params = {}
        for name, sub in [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo),
                          ("ffn1", self.ffn1), ("ffn2", self.ffn2),
                          ("ln1", self.ln1), ("ln2", self.ln2)]:
            for pname, p in sub.parameters().items():
                params[f"{name}.{pname}"] = p
        return params

    def attention_weights(self, x: Tensor) -> list[np.ndarray]:
        """Per-head softmax attention matrices (diagnostic, detached)."""
        with T.no_grad():
            q, k = self.wq(x), self.wk(x)
            scale = 1.0 / math.sqrt(self.head_dim)
            mats = []
            for h in range(self.heads):
                sl = slice(h * self.head_dim, (h + 1) * self.head_dim)
                scores = T.matmul(q[:, sl], k[:, sl].T) * scale
                mats.append(T.softmax(scores, axis=1).data)
        return mats

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"attention expects (U, {self.dim}) input, got {x.shape}")
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        scale = 1.0 / math.sqrt(self.head_dim)
        head_outs = []
        for h in range(self.heads):
            sl = slice(h * self.head_dim, (h + 1) * self.head_dim)
            scores = T.matmul(q[:, sl], k[:, sl].T) * scale
            attn = T.softmax(scores, axis=1)
            head_outs.append(T.matmul(attn, v[:, sl]))
        mixed = self.wo(T.concat(head_outs, axis=1))
        x = self.ln1(x + mixed)
        ff = self.ffn2(T.relu_clipped(self.ffn1(x)))
        return self.ln2(x + ff)


class Adam:
    """Adam with bias correction and the two-phase step-decay learning rate.

    The effective rate is ``lr_high`` while the 0-based update index is below
    ``switch_fraction * total_steps`` and ``lr_low`` afterwards.
    """

    def __init__(self, params: dict, *, lr_high=3e-4, lr_low=5e-5, switch_fraction=0.5,
                 total_steps=1, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = dict(params)
        self.lr_high = lr_high
        self.lr_low = lr_low
        self.switch_fraction = switch_fraction
        self.total_steps = total_steps
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def learning_rate(self, step_index: Optional[int] = None) -> float:
        step = self.step_count if step_index is None else step_index
        return self.lr_high if step < self.switch_fraction * self.total_steps else self.lr_low

    def step(self) -> None:
        lr = self.learning_rate()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter '{name}' has no gradient")
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            mhat = self.m[name] / (1.0 - b1 ** t)
            vhat = self.v[name] / (1.0 - b2 ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.epsilon)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
