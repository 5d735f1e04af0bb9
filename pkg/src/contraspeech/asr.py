"""CTC speech recognizer over precomputed feature sequences.

Three kernel-3 1-D convolutions adapt the input rate (strides (2,1,1) for
100 Hz features, (1,1,1) for 50 Hz), followed by a stack of bidirectional
LSTM layers with skip connections (identity where widths match, a learned
projection otherwise; the first conv carries no skip) and a per-frame
log-softmax over the character vocabulary with blank at index 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .audio import batch_by_duration
from .ctc import ctc_loss, greedy_decode, min_frames
from .errors import ConfigError, ContractError, DimensionError
from .layers import Adam, Conv1dLayer, DenseLayer, LstmLayer, conv_output_length
from .tensor import Tensor
from .training import TrainLog, seed_stream

__all__ = [
    "Vocabulary",
    "AsrConfig",
    "AsrModel",
    "AsrExample",
    "train_asr",
    "decode_corpus",
]

STRIDE_FULL_RATE = (2, 1, 1)
STRIDE_HALF_RATE = (1, 1, 1)


@dataclass(frozen=True)
class Vocabulary:
    """Characters mapped to ids 1..len(chars); 0 is the CTC blank."""

    chars: str

    @property
    def size(self) -> int:
        return len(self.chars) + 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self.chars.index(ch) + 1 for ch in text]
        except ValueError:
            bad = sorted(set(text) - set(self.chars))
            raise ContractError(f"characters {bad} not in vocabulary '{self.chars}'")

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.chars[i - 1] for i in ids)

    @classmethod
    def for_synthetic(cls, vocab_size: int) -> "Vocabulary":
        from .audio import TOKEN_ALPHABET

        return cls(TOKEN_ALPHABET[:vocab_size])

    @classmethod
    def characters(cls) -> "Vocabulary":
        return cls("abcdefghijklmnopqrstuvwxyz '")


@dataclass(frozen=True)
class AsrConfig:
    """Desk-scale defaults; ``paper()`` restores the full-size recognizer."""

    input_dim: int
    vocab_size: int
    conv_units: tuple = (64, 48, 32)
    conv_strides: tuple = STRIDE_FULL_RATE
    recurrent_layers: int = 2
    recurrent_units: int = 64
    relu_cap: float = 5.0

    def __post_init__(self):
        if self.conv_strides not in (STRIDE_FULL_RATE, STRIDE_HALF_RATE):
            raise ConfigError(
                f"conv_strides must be {STRIDE_FULL_RATE} or {STRIDE_HALF_RATE}, "
                f"got {self.conv_strides}")
        if len(self.conv_units) != 3:
            raise ConfigError("exactly three conv layers expected")
        if self.vocab_size < 2:
            raise ConfigError("vocabulary needs at least blank plus one symbol")
        if self.input_dim < 1 or self.recurrent_layers < 1 or self.recurrent_units < 1:
            raise ConfigError("dimensions must be positive")

    @classmethod
    def paper(cls, input_dim: int, vocab_size: int, half_rate: bool = False) -> "AsrConfig":
        return cls(input_dim, vocab_size, conv_units=(640, 480, 320),
                   conv_strides=STRIDE_HALF_RATE if half_rate else STRIDE_FULL_RATE,
                   recurrent_layers=10, recurrent_units=320)

    @classmethod
    def for_frame_rate(cls, input_dim: int, vocab_size: int, frame_rate: float,
                       **overrides) -> "AsrConfig":
        """Stride preset by feature rate: 100 Hz halves time, 50 Hz keeps it."""
        strides = STRIDE_FULL_RATE if frame_rate >= 75.0 else STRIDE_HALF_RATE
        return cls(input_dim, vocab_size, conv_strides=strides, **overrides)


class _BiLstmSkipLayer:
    def __init__(self, input_size, hidden_size, *, rng, dtype=np.float32):
        self.fwd = LstmLayer(input_size, hidden_size, direction="forward", rng=rng, dtype=dtype)
        self.bwd = LstmLayer(input_size, hidden_size, direction="backward", rng=rng, dtype=dtype)
        self.merge = DenseLayer(2 * hidden_size, hidden_size, rng=rng, dtype=dtype)
        self.skip = (None if input_size == hidden_size
                     else DenseLayer(input_size, hidden_size, rng=rng, dtype=dtype, bias=False))

    def parameters(self):
        params = {}
        for prefix, sub in [("fwd", self.fwd), ("bwd", self.bwd), ("merge", self.merge)]:
            for name, p in sub.parameters().items():
                params[f"{prefix}.{name}"] = p
        if self.skip is not None:
            for name, p in self.skip.parameters().items():
                params[f"skip.{name}"] = p
        return params

    def __call__(self, x: Tensor) -> Tensor:
        merged = self.merge(T.concat([self.fwd(x), self.bwd(x)], axis=1))
        residual = x if self.skip is None else self.skip(x)
        return merged + residual


class AsrModel:
    def __init__(self, cfg: AsrConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.convs = []
        self.conv_skips = []
        in_ch = cfg.input_dim
        for i, (units, stride) in enumerate(zip(cfg.conv_units, cfg.conv_strides)):
            self.convs.append(Conv1dLayer(in_ch, units, 3, stride, rng=rng, dtype=dtype))
            if i == 0:
                self.conv_skips.append(None)  # first conv has no skip
            else:
                self.conv_skips.append(
                    None if in_ch == units
                    else Conv1dLayer(in_ch, units, 1, 1, rng=rng, dtype=dtype))
            in_ch = units
        self.recurrent = []
        size = cfg.conv_units[-1]
        for _ in range(cfg.recurrent_layers):
            self.recurrent.append(_BiLstmSkipLayer(size, cfg.recurrent_units,
                                                   rng=rng, dtype=dtype))
            size = cfg.recurrent_units
        self.head = DenseLayer(size, cfg.vocab_size, rng=rng, dtype=dtype)

    def parameters(self) -> dict:
        params = {}
        for i, conv in enumerate(self.convs):
            for name, p in conv.parameters().items():
                params[f"conv{i}.{name}"] = p
            if self.conv_skips[i] is not None:
                for name, p in self.conv_skips[i].parameters().items():
                    params[f"conv{i}.skip.{name}"] = p
        for i, layer in enumerate(self.recurrent):
            for name, p in layer.parameters().items():
                params[f"bilstm{i}.{name}"] = p
        for name, p in self.head.parameters().items():
            params[f"head.{name}"] = p
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def output_length(self, n_frames: int) -> int:
        for stride in self.cfg.conv_strides:
            n_frames = conv_output_length(n_frames, 3, stride)
        return n_frames

    def forward(self, features) -> Tensor:
        """(frames, input_dim) -> (frames', vocab) per-frame log-probabilities."""
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=self.dtype))
        if features.ndim != 2 or features.shape[1] != self.cfg.input_dim:
            raise DimensionError(
                f"expected (frames, {self.cfg.input_dim}) features, got {features.shape}")
        h = features.T
        for i, conv in enumerate(self.convs):
            out = conv(h)
            if i > 0:
                stride = self.cfg.conv_strides[i]
                skip_in = h[:, 1:1 + stride * out.shape[1]:stride]  # align valid-conv centers
                out = out + (skip_in if self.conv_skips[i] is None
                             else self.conv_skips[i](skip_in))
            h = T.relu_clipped(out, cap=self.cfg.relu_cap)
        h = h.T
        for layer in self.recurrent:
            h = layer(h)
        return T.log_softmax(self.head(h), axis=1)

    __call__ = forward

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        if set(params) != set(state):
            raise ConfigError("checkpoint parameter names do not match the model")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ConfigError(f"parameter '{name}' shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


@dataclass
class AsrExample:
    utt_id: str
    features: np.ndarray  # (frames, input_dim)
    target: list[int]
    duration: float       # seconds, for duration-budgeted batching


@dataclass
class AsrTrainResult:
    model: AsrModel
    log: TrainLog
    skipped: list[str]
    steps: int
    seed: int


def train_asr(
    examples: Sequence[AsrExample],
    cfg: AsrConfig,
    steps: int,
    seed: int,
    *,
    batch_seconds: float = 16.0,
    lr_high: float = 3e-4,
    lr_low: float = 5e-5,
    switch_fraction: float = 0.5,
    log_path=None,
    progress=None,
) -> AsrTrainResult:
    """Adam/CTC training over duration-packed batches.

    Unalignable examples (too few post-stride frames for the target) are
    skipped with a warning; more than half the corpus unalignable is an
    error. The logged loss is the batch CTC sum over its utterance count.
    """
    if len(examples) == 0:
        raise ConfigError("cannot train on an empty corpus")
    model = AsrModel(cfg, seed_stream(seed, "init"))
    usable = []
    skipped = []
    for ex in examples:
        if min_frames(ex.target) > model.output_length(len(ex.features)):
            skipped.append(ex.utt_id)
        else:
            usable.append(ex)
    if skipped:
        warnings.warn(f"skipped {len(skipped)} unalignable utterances "
                      f"(e.g. {skipped[0]})", RuntimeWarning)
    if len(skipped) > len(examples) / 2:
        raise ContractError(
            f"{len(skipped)}/{len(examples)} utterances unalignable under this config")

    data_rng = seed_stream(seed, "data")
    opt = Adam(model.parameters(), lr_high=lr_high, lr_low=lr_low,
               switch_fraction=switch_fraction, total_steps=steps)
    log = TrainLog(("loss",), path=log_path)
    step = 0
    while step < steps:
        for batch in batch_by_duration(usable, batch_seconds, data_rng):
            if step >= steps:
                break
            with T.Tape() as tape:
                total = None
                for ex in batch:
                    loss = ctc_loss(model(ex.features), ex.target)
                    total = loss if total is None else total + loss
                total = total * (1.0 / len(batch))
                total.backward(tape)
            opt.step()
            opt.zero_grad()
            step += 1
            log.log(step, float(total.data))
            if progress is not None:
                progress(step, float(total.data))
    return AsrTrainResult(model, log, skipped, steps, seed)


def decode_corpus(model: AsrModel, examples: Sequence[AsrExample],
                  vocab: Vocabulary) -> list[dict]:
    """Greedy-decode every utterance; rows carry ref, hyp and edit distance."""
    from .ctc import edit_distance

    rows = []
    for ex in examples:
        with T.no_grad():
            log_probs = model(ex.features).data
        hyp = vocab.decode(greedy_decode(log_probs))
        ref = vocab.decode(ex.target)
        rows.append({
            "utt_id": ex.utt_id,
            "reference": ref,
            "hypothesis": hyp,
            "distance": edit_distance(hyp, ref)[0],
        })
    return rows
