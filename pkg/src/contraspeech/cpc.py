"""Contrastive predictive coding over raw waveforms.

A strided 1-D conv encoder maps a PCM signal to latents z (U x D); one or
more LSTM context networks map z to contextualized sequences c. Training
scores the true latent at each temporal offset k against sampled distractors
through per-offset bilinear transforms, summed over K offsets. A backward
context network targets z_{i-k} instead of z_{i+k}; context networks share
the encoder but no parameters with each other, and downstream features are
the concatenation of all context outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .audio import Manifest, batch_by_duration, read_wav
from .errors import ConfigError, DegenerateSequenceError, ShortInputError
from .layers import (
    Adam,
    Conv1dLayer,
    GroupNormLayer,
    LstmLayer,
    conv_stack_min_length,
    conv_stack_output_length,
)
from .tensor import Tensor
from .training import TrainLog, seed_stream

__all__ = [
    "CpcConfig",
    "ConvEncoder",
    "ContextNetwork",
    "CpcModel",
    "sim_k",
    "sample_distractors",
    "wav2vec_loss",
    "wav2vec_term_count",
    "activation_elements",
    "constant_width_activation_ratio",
    "pretrain",
]


@dataclass(frozen=True)
class CpcConfig:
    """Desk-scale defaults; ``paper()`` restores the full-size architecture."""

    filters: tuple = (16, 32, 48, 64, 128, 128)
    kernels: tuple = (10, 8, 4, 4, 4, 1)
    strides: tuple = (5, 4, 2, 2, 2, 1)
    norm_groups: int = 8
    relu_cap: float = 5.0
    context_layers: int = 2
    context_units: int = 128
    context_directions: tuple = ("forward",)
    offsets: int = 4
    num_distractors: int = 4
    negative_weight: float = 1.0
    sample_rate: int = 16000

    def __post_init__(self):
        if not (len(self.filters) == len(self.kernels) == len(self.strides)):
            raise ConfigError("filters, kernels and strides must have equal length")
        if self.offsets < 1 or self.num_distractors < 1:
            raise ConfigError("offsets and num_distractors must be >= 1")
        if not self.context_directions:
            raise ConfigError("at least one context direction required")
        for d in self.context_directions:
            if d not in ("forward", "backward"):
                raise ConfigError(f"unknown context direction '{d}'")
        if self.context_units != self.filters[-1]:
            raise ConfigError(
                f"context_units ({self.context_units}) must equal the final "
                f"encoder width ({self.filters[-1]}) for the bilinear scores")
        for width in self.filters:
            if width % self.norm_groups != 0:
                raise ConfigError(
                    f"encoder width {width} not divisible by norm_groups={self.norm_groups}")

    @property
    def latent_dim(self) -> int:
        return self.filters[-1]

    @property
    def feature_dim(self) -> int:
        return self.latent_dim * len(self.context_directions)

    @property
    def bidirectional(self) -> bool:
        return "backward" in self.context_directions

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / float(np.prod(self.strides))

    @classmethod
    def paper(cls, **overrides) -> "CpcConfig":
        base = cls(
            filters=(64, 128, 192, 256, 512, 512),
            norm_groups=32,
            context_layers=4,
            context_units=512,
            offsets=12,
            num_distractors=10,
        )
        return replace(base, **overrides) if overrides else base


class ConvEncoder:
    """Six-layer strided conv stack: conv -> group norm -> clipped ReLU."""

    def __init__(self, cfg: CpcConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.convs = []
        self.norms = []
        in_ch = 1
        for width, kernel, stride in zip(cfg.filters, cfg.kernels, cfg.strides):
            self.convs.append(Conv1dLayer(in_ch, width, kernel, stride, rng=rng, dtype=dtype))
            self.norms.append(GroupNormLayer(cfg.norm_groups, width, dtype=dtype))
            in_ch = width

    @property
    def min_length(self) -> int:
        return conv_stack_min_length(self.cfg.kernels, self.cfg.strides)

    def output_length(self, n_samples: int) -> int:
        return conv_stack_output_length(n_samples, self.cfg.kernels, self.cfg.strides)

    def parameters(self) -> dict:
        params = {}
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            for name, p in conv.parameters().items():
                params[f"conv{i}.{name}"] = p
            for name, p in norm.parameters().items():
                params[f"norm{i}.{name}"] = p
        return params

    def __call__(self, waveform: Tensor) -> Tensor:
        if waveform.ndim != 1:
            waveform = waveform.reshape(-1)
        n = waveform.shape[0]
        if n < self.min_length:
            raise ShortInputError(
                f"waveform has {n} samples; this encoder needs >= {self.min_length}")
        h = waveform.reshape(1, -1)
        for conv, norm in zip(self.convs, self.norms):
            h = T.relu_clipped(norm(conv(h)), cap=self.cfg.relu_cap)
        return h.T  # (U, D)


class ContextNetwork:
    """LSTM stack; 'backward' runs the whole stack on reversed time."""

    def __init__(self, input_size, units, layers, direction, rng, dtype=np.float32):
        self.direction = direction
        self.lstms = []
        size = input_size
        for _ in range(layers):
            self.lstms.append(LstmLayer(size, units, rng=rng, dtype=dtype))
            size = units

    def parameters(self) -> dict:
        params = {}
        for i, lstm in enumerate(self.lstms):
            for name, p in lstm.parameters().items():
                params[f"lstm{i}.{name}"] = p
        return params

    def __call__(self, z: Tensor) -> Tensor:
        h = T.flip(z, axis=0) if self.direction == "backward" else z
        for lstm in self.lstms:
            h = lstm(h)
        return T.flip(h, axis=0) if self.direction == "backward" else h


def sim_k(z_vec: Tensor, c_vec: Tensor, transform: Tensor) -> Tensor:
    """log sigma(z^T H_k c) for single D-vectors."""
    score = T.matmul(T.matmul(z_vec.reshape(1, -1), transform), c_vec.reshape(-1, 1))
    return T.log_sigmoid(score.reshape(()))


def sample_distractors(u_len: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform indices over 0..U-1, with replacement (may hit the positive)."""
    return rng.integers(0, u_len, size=count)


def wav2vec_term_count(u_len: int, offsets: int) -> int:
    """Number of (i, k) positive terms: sum over k of (U - k)."""
    return offsets * u_len - offsets * (offsets + 1) // 2


def _row_dot(a: Tensor, b: Tensor) -> Tensor:
    return T.sum(a * b, axis=1)


def wav2vec_loss(
    z: Tensor,
    c: Tensor,
    transforms: Sequence[Tensor],
    direction: str = "forward",
    *,
    num_distractors: int = 10,
    negative_weight: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    distractor_indices: Optional[np.ndarray] = None,
) -> Tensor:
    """Summed contrastive loss over all K offsets for one context direction.

    For each offset k and timestep i the positive pairs c_i with z_{i+k}
    (forward) or z_{i-k} (backward); ``num_distractors`` negatives are scored
    as log sigma(-z_d^T H_k c_i) and weighted by ``negative_weight``.
    Distractors are drawn once per timestep (uniform over 0..U-1, with
    replacement) and shared across offsets; pass ``distractor_indices`` of
    shape (U, n) to pin them.
    """
    if direction not in ("forward", "backward"):
        raise ConfigError(f"unknown direction '{direction}'")
    u_len = z.shape[0]
    n_offsets = len(transforms)
    if u_len <= n_offsets:
        raise DegenerateSequenceError(
            f"sequence length U={u_len} must exceed the offset count K={n_offsets}")
    if distractor_indices is None:
        if rng is None:
            raise ConfigError("either rng or distractor_indices is required")
        distractor_indices = np.stack(
            [sample_distractors(u_len, num_distractors, rng) for _ in range(u_len)])
    else:
        distractor_indices = np.asarray(distractor_indices)
        if distractor_indices.ndim != 2 or distractor_indices.shape[0] != u_len:
            raise ConfigError(
                f"distractor_indices must be (U, n), got {distractor_indices.shape}")
    n_neg = distractor_indices.shape[1]

    total = None
    for k, transform in enumerate(transforms, start=1):
        zh = T.matmul(z, transform)
        if direction == "forward":
            pos_scores = _row_dot(zh[k:], c[: u_len - k])
            steps = np.arange(0, u_len - k)
        else:
            pos_scores = _row_dot(zh[: u_len - k], c[k:])
            steps = np.arange(k, u_len)
        pos_term = T.sum(T.log_sigmoid(pos_scores))

        d_flat = distractor_indices[steps].reshape(-1)
        zd = T.gather_rows(zh, d_flat)
        c_rep = T.gather_rows(c, np.repeat(steps, n_neg))
        neg_scores = -_row_dot(zd, c_rep)
        neg_term = T.sum(T.log_sigmoid(neg_scores))

        loss_k = -(pos_term + negative_weight * neg_term)
        total = loss_k if total is None else total + loss_k
    return total


def activation_elements(n_samples: int, filters, kernels, strides) -> int:
    """Total activation element count across the conv stack for one input."""
    total = 0
    length = n_samples
    for width, kernel, stride in zip(filters, kernels, strides):
        length = (length - kernel) // stride + 1
        total += width * length
    return total


def constant_width_activation_ratio(n_samples: int, cfg: CpcConfig) -> float:
    """How much more activation memory a constant-width encoder would use."""
    width = cfg.filters[-1]
    constant = activation_elements(n_samples, [width] * len(cfg.filters),
                                   cfg.kernels, cfg.strides)
    incremental = activation_elements(n_samples, cfg.filters, cfg.kernels, cfg.strides)
    return constant / incremental


class CpcModel:
    def __init__(self, cfg: CpcConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.encoder = ConvEncoder(cfg, rng, dtype=dtype)
        self.contexts = []
        self.transforms = []
        d = cfg.latent_dim
        bound = 1.0 / np.sqrt(d)
        for direction in cfg.context_directions:
            self.contexts.append(ContextNetwork(
                d, cfg.context_units, cfg.context_layers, direction, rng, dtype=dtype))
            self.transforms.append([
                Tensor(rng.uniform(-bound, bound, size=(d, d)).astype(dtype),
                       requires_grad=True)
                for _ in range(cfg.offsets)
            ])

    def parameters(self) -> dict:
        params = {}
        for name, p in self.encoder.parameters().items():
            params[f"encoder.{name}"] = p
        for j, (net, mats) in enumerate(zip(self.contexts, self.transforms)):
            for name, p in net.parameters().items():
                params[f"ctx{j}.{name}"] = p
            for k, mat in enumerate(mats, start=1):
                params[f"ctx{j}.step{k}"] = mat
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def encode(self, waveform) -> Tensor:
        if not isinstance(waveform, Tensor):
            waveform = Tensor(np.asarray(waveform, dtype=self.dtype))
        return self.encoder(waveform)

    def context_outputs(self, z: Tensor) -> list[Tensor]:
        return [net(z) for net in self.contexts]

    def loss_components(self, waveform, rng: np.random.Generator):
        """Per-direction (loss, term_count) on one utterance; independent draws."""
        z = self.encode(waveform)
        u_len = z.shape[0]
        components = []
        for net, mats in zip(self.contexts, self.transforms):
            c = net(z)
            idx = np.stack([sample_distractors(u_len, self.cfg.num_distractors, rng)
                            for _ in range(u_len)])
            loss = wav2vec_loss(z, c, mats, net.direction,
                                negative_weight=self.cfg.negative_weight,
                                distractor_indices=idx)
            components.append((loss, wav2vec_term_count(u_len, self.cfg.offsets)))
        return components

    def extract(self, waveform) -> np.ndarray:
        """Downstream features: context outputs concatenated along features."""
        with T.no_grad():
            z = self.encode(waveform)
            outs = self.context_outputs(z)
            feats = T.concat(outs, axis=1) if len(outs) > 1 else outs[0]
        return feats.data.astype(np.float32)

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)[:3]} "
                              f"extra={sorted(extra)[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ConfigError(f"parameter '{name}' shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


@dataclass
class PretrainResult:
    model: CpcModel
    log: TrainLog
    steps: int
    seed: int


def pretrain(
    manifest: Manifest,
    cfg: CpcConfig,
    steps: int,
    seed: int,
    *,
    batch_seconds: float = 8.0,
    lr_high: float = 3e-4,
    lr_low: float = 5e-5,
    switch_fraction: float = 0.5,
    adam_betas: tuple = (0.9, 0.999),
    adam_epsilon: float = 1e-8,
    log_path=None,
    progress=None,
) -> PretrainResult:
    """Adam-optimize the summed contrastive objective over duration-packed batches.

    The optimized (and logged) quantity is the loss per positive term so the
    learning rate is insensitive to batch makeup; per-direction components are
    logged alongside.
    """
    if len(manifest) == 0:
        raise ConfigError("cannot pretrain on an empty corpus")
    model = CpcModel(cfg, seed_stream(seed, "init"))
    data_rng = seed_stream(seed, "data")
    dist_rng = seed_stream(seed, "distractor")
    opt = Adam(model.parameters(), lr_high=lr_high, lr_low=lr_low,
               switch_fraction=switch_fraction, total_steps=steps,
               beta1=adam_betas[0], beta2=adam_betas[1], epsilon=adam_epsilon)

    log = TrainLog(_log_columns(cfg.context_directions), path=log_path)

    cache: dict[str, np.ndarray] = {}
    cache_audio = manifest.total_duration() <= 1800.0
    step = 0
    while step < steps:
        for batch in batch_by_duration(manifest, batch_seconds, data_rng):
            if step >= steps:
                break
            with T.Tape() as tape:
                dir_losses = [None] * len(cfg.context_directions)
                dir_terms = [0] * len(cfg.context_directions)
                for utt in batch:
                    if utt.utt_id in cache:
                        wave = cache[utt.utt_id]
                    else:
                        wave = read_wav(utt.path).samples
                        if cache_audio:
                            cache[utt.utt_id] = wave
                    for j, (loss, terms) in enumerate(model.loss_components(wave, dist_rng)):
                        dir_losses[j] = loss if dir_losses[j] is None else dir_losses[j] + loss
                        dir_terms[j] += terms
                normalized = [loss * (1.0 / terms) for loss, terms in zip(dir_losses, dir_terms)]
                total = normalized[0]
                for extra in normalized[1:]:
                    total = total + extra
                total.backward(tape)
            opt.step()
            opt.zero_grad()
            step += 1
            values = [float(total.data)]
            if len(normalized) > 1:
                values += [float(v.data) for v in normalized]
            log.log(step, *values)
            if progress is not None:
                progress(step, values)
    return PretrainResult(model, log, steps, seed)


def _log_columns(directions) -> tuple[str, ...]:
    if list(directions) == ["forward"]:
        return ("loss",)
    names = []
    fwd_seen = 0
    for d in directions:
        if d == "forward":
            names.append("loss_fwd" if fwd_seen == 0 else f"loss_fwd{fwd_seen + 1}")
            fwd_seen += 1
        else:
            names.append("loss_bwd")
    return ("loss",) + tuple(names)
