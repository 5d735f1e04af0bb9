"""Masked-prediction pretraining with quantized targets.

Latent spans are replaced by a learned mask embedding before a self-attention
context network; a gumbel-softmax quantizer (hard forward, soft backward)
turns the unmasked latents into targets. Each masked step is scored against
distractors drawn from the other masked steps with a temperature-scaled
cosine softmax, plus an entropy-based diversity term in [0, 1] that is zero
exactly when codeword usage is uniform.

The encoder here downsamples by 320 (half the frame rate of the base model)
to match the coarser resolution this objective pairs with.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .audio import Manifest, batch_by_duration, read_wav
from .cpc import ConvEncoder
from .errors import ConfigError, ContractError, DimensionError
from .layers import Adam, DenseLayer, SelfAttentionBlock, sinusoid_positions
from .tensor import Tensor, apply_op
from .training import TrainLog, seed_stream

__all__ = [
    "MaskedCpcConfig",
    "apply_mask",
    "row_cosine",
    "GumbelQuantizer",
    "masked_contrastive_loss",
    "diversity_loss",
    "MaskedCpcModel",
    "pretrain_masked",
]


@dataclass(frozen=True)
class MaskedCpcConfig:
    filters: tuple = (16, 32, 48, 64, 128, 128)
    kernels: tuple = (10, 8, 4, 4, 4, 2)
    strides: tuple = (5, 4, 2, 2, 2, 2)  # product 320: half the base frame rate
    norm_groups: int = 8
    relu_cap: float = 5.0
    attention_blocks: int = 2
    attention_heads: int = 4
    ffn_multiplier: int = 4
    mask_start_prob: float = 0.065
    mask_span: int = 10
    kappa: float = 0.1
    num_distractors: int = 10
    diversity_weight: float = 0.1
    codebook_groups: int = 2
    codebook_entries: int = 32
    gumbel_tau_start: float = 2.0
    gumbel_tau_min: float = 0.5
    gumbel_tau_decay: float = 0.999
    sample_rate: int = 16000

    def __post_init__(self):
        if not (len(self.filters) == len(self.kernels) == len(self.strides)):
            raise ConfigError("filters, kernels and strides must have equal length")
        if self.kappa <= 0:
            raise ConfigError("temperature kappa must be positive")
        if self.num_distractors < 1:
            raise ConfigError("num_distractors must be >= 1")
        if self.mask_span < 1 or not 0.0 <= self.mask_start_prob <= 1.0:
            raise ConfigError("mask_span must be >= 1 and start probability in [0, 1]")
        d = self.filters[-1]
        if d % self.attention_heads != 0:
            raise ConfigError(f"latent dim {d} not divisible by {self.attention_heads} heads")
        if d % self.codebook_groups != 0:
            raise ConfigError(f"latent dim {d} not divisible by {self.codebook_groups} groups")
        if self.codebook_entries < 1:
            raise ConfigError("codebook_entries must be >= 1")

    @property
    def latent_dim(self) -> int:
        return self.filters[-1]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / float(np.prod(self.strides))


def apply_mask(
    z: Tensor,
    embedding: Tensor,
    start_prob: float,
    span: int,
    rng: np.random.Generator,
    max_redraws: int = 100,
) -> tuple[Tensor, np.ndarray]:
    """Replace sampled spans of z with the mask embedding.

    Every timestep is a span start with probability ``start_prob``; each start
    masks the next ``span`` steps (clipped at the end). At least one step is
    always masked: empty draws are retried, and after ``max_redraws`` attempts
    a single start is forced uniformly.
    """
    u_len = z.shape[0]
    starts = None
    for _ in range(max_redraws):
        cand = rng.random(u_len) < start_prob
        if cand.any():
            starts = cand
            break
    if starts is None:
        starts = np.zeros(u_len, dtype=bool)
        starts[int(rng.integers(u_len))] = True
    flags = np.zeros(u_len, dtype=bool)
    for s in np.flatnonzero(starts):
        flags[s:s + span] = True
    col = Tensor(flags.astype(z.dtype).reshape(-1, 1))
    masked = z * (1.0 - col) + embedding.reshape(1, -1) * col
    return masked, np.flatnonzero(flags)


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (N, D) tensors, in [-1, 1].

    Zero-norm rows map to similarity 0 by convention (gradient 0 there).
    """
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"row_cosine expects matching (N, D) inputs, "
                             f"got {a.shape} and {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    na = np.linalg.norm(a64, axis=1)
    nb = np.linalg.norm(b64, axis=1)
    denom = na * nb
    safe = denom > 0
    dot = np.einsum("ij,ij->i", a64, b64)
    with np.errstate(all="ignore"):
        cos = np.where(safe, dot / np.where(safe, denom, 1.0), 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    out = cos.astype(a.dtype)

    def back(g):
        g64 = g.astype(np.float64)
        scale = np.where(safe, 1.0 / np.where(safe, denom, 1.0), 0.0)
        ga = g64[:, None] * (b64 * scale[:, None]
                             - cos[:, None] * a64 / np.where(safe, na * na, 1.0)[:, None])
        gb = g64[:, None] * (a64 * scale[:, None]
                             - cos[:, None] * b64 / np.where(safe, nb * nb, 1.0)[:, None])
        ga[~safe] = 0.0
        gb[~safe] = 0.0
        return ga.astype(a.dtype), gb.astype(b.dtype)

    return apply_op("row_cosine", (a, b), out, back)


def _straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward the hard one-hot, pass gradients to the soft probabilities."""
    return apply_op("straight_through", (soft,), hard.astype(soft.dtype), lambda g: (g,))


class GumbelQuantizer:
    """Group codebook with gumbel-softmax assignments.

    z -> per-group logits -> (train) hard sample with soft backward, or
    (eval) argmax -> codewords concatenated across groups -> linear map to D.
    """

    def __init__(self, dim, groups, entries, *, rng, dtype=np.float32):
        if dim % groups != 0:
            raise ConfigError(f"dim {dim} not divisible by {groups} groups")
        self.dim = dim
        self.groups = groups
        self.entries = entries
        self.sub_dim = dim // groups
        self.proj = DenseLayer(dim, groups * entries, rng=rng, dtype=dtype)
        # assignment logits need to dominate the unit-scale gumbel noise from
        # the first steps, otherwise assignments stay noise-driven for a long
        # warmup; gain chosen so logit std lands around 3-4 on normalized input
        self.proj.weight.data *= 10.0
        # codewords start as a shared per-group center plus a small deviation:
        # initial candidates then score near-uniformly in the contrastive
        # softmax, and training spreads the entries apart
        bound = 1.0 / np.sqrt(self.sub_dim)
        deviation = 0.3
        self.codebooks = []
        for _ in range(groups):
            center = rng.uniform(-bound, bound, size=(1, self.sub_dim))
            spread = rng.uniform(-bound, bound, size=(entries, self.sub_dim))
            self.codebooks.append(Tensor((center + deviation * spread).astype(dtype),
                                         requires_grad=True))
        self.out = DenseLayer(dim, dim, rng=rng, dtype=dtype)

    def parameters(self) -> dict:
        params = {}
        for name, p in self.proj.parameters().items():
            params[f"proj.{name}"] = p
        for g, cb in enumerate(self.codebooks):
            params[f"codebook{g}"] = cb
        for name, p in self.out.parameters().items():
            params[f"out.{name}"] = p
        return params

    def quantize(self, z: Tensor, *, rng: Optional[np.random.Generator] = None,
                 tau: float = 1.0, train_mode: bool = True, hard: bool = True):
        """Returns (q, soft_probs, hard_indices).

        soft_probs has shape (U*groups, entries) with rows ordered
        (u0 g0, u0 g1, ..., u1 g0, ...); hard_indices is (U, groups).
        ``hard=False`` skips the straight-through hardening and uses the soft
        relaxation directly (the differentiable path gradient checks follow).
        """
        u_len = z.shape[0]
        logits = self.proj(z).reshape(u_len * self.groups, self.entries)
        if train_mode:
            if rng is None:
                raise ConfigError("train-mode quantization needs an rng for gumbel noise")
            uniform = rng.random(logits.shape)
            gumbel = -np.log(-np.log(np.clip(uniform, 1e-12, 1.0 - 1e-12)))
            noisy = (logits + Tensor(gumbel.astype(logits.dtype))) * (1.0 / tau)
            soft = T.softmax(noisy, axis=1)
        else:
            soft = T.softmax(logits, axis=1)
        choice = np.argmax(soft.data, axis=1)
        if hard:
            onehot = np.zeros(soft.shape, dtype=soft.dtype)
            onehot[np.arange(len(choice)), choice] = 1.0
            assign = _straight_through(soft, onehot)
        else:
            assign = soft
        group_vecs = [
            T.matmul(assign[g::self.groups], cb)
            for g, cb in enumerate(self.codebooks)
        ]
        q = self.out(T.concat(group_vecs, axis=1))
        return q, soft, choice.reshape(u_len, self.groups)


def masked_contrastive_loss(
    q: Tensor,
    c: Tensor,
    mask_indices: np.ndarray,
    *,
    kappa: float,
    num_distractors: int,
    rng: Optional[np.random.Generator] = None,
    distractor_indices: Optional[np.ndarray] = None,
) -> Tensor:
    """Sum over masked steps of -log softmax of cosine(q, c_u)/kappa.

    The candidate set for step u is u itself plus ``num_distractors`` indices
    drawn from the other masked steps (without replacement when enough exist,
    with replacement otherwise). A lone masked step scores against itself
    only, contributing 0.
    """
    mask_indices = np.asarray(mask_indices)
    n_masked = len(mask_indices)
    if n_masked == 0:
        raise ContractError("mask set is empty")
    if distractor_indices is None:
        if rng is None:
            raise ConfigError("either rng or distractor_indices is required")
        if n_masked == 1:
            # no other masked steps to draw from: candidate set is {u} alone
            warnings.warn("single masked step: candidate set is the target alone",
                          RuntimeWarning)
            distractor_indices = np.zeros((1, 0), dtype=np.intp)
        else:
            rows = []
            for u in mask_indices:
                others = mask_indices[mask_indices != u]
                if len(others) >= num_distractors:
                    rows.append(rng.choice(others, size=num_distractors, replace=False))
                else:
                    rows.append(rng.choice(others, size=num_distractors, replace=True))
            distractor_indices = np.stack(rows)
    else:
        distractor_indices = np.asarray(distractor_indices)
        if distractor_indices.shape[0] != n_masked:
            raise ConfigError("distractor_indices must have one row per masked step")

    n_cand = 1 + distractor_indices.shape[1]
    cand = np.concatenate([mask_indices[:, None], distractor_indices], axis=1)
    q_rows = T.gather_rows(q, cand.reshape(-1))
    c_rows = T.gather_rows(c, np.repeat(mask_indices, n_cand))
    logits = (row_cosine(q_rows, c_rows) * (1.0 / kappa)).reshape(n_masked, n_cand)
    per_step = logits[:, 0:1] - T.logsumexp(logits, axis=1, keepdims=True)
    return -T.sum(per_step)


def diversity_loss(avg_probs: Tensor) -> Tensor:
    """(1/G) sum_g (1 - H(p_g)/ln V) over batch-averaged assignment probabilities.

    0 iff every group's average assignment is uniform; 1 at full collapse.
    """
    if avg_probs.ndim != 2:
        raise DimensionError(f"expected (groups, entries), got {avg_probs.shape}")
    n_entries = avg_probs.shape[1]
    if n_entries == 1:
        return T.sum(avg_probs) * 0.0  # single codeword: entropy is identically 0
    entropy = -T.sum(avg_probs * T.log(avg_probs + 1e-12), axis=1)
    return T.mean(1.0 - entropy * (1.0 / np.log(n_entries)))


class MaskedCpcModel:
    def __init__(self, cfg: MaskedCpcConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.latent_dim
        self.encoder = ConvEncoder(cfg, rng, dtype=dtype)
        bound = 1.0 / np.sqrt(d)
        self.mask_embedding = Tensor(rng.uniform(-bound, bound, size=d).astype(dtype),
                                     requires_grad=True)
        self.quantizer = GumbelQuantizer(d, cfg.codebook_groups, cfg.codebook_entries,
                                         rng=rng, dtype=dtype)
        self.blocks = [
            SelfAttentionBlock(d, cfg.attention_heads, ffn_multiplier=cfg.ffn_multiplier,
                               rng=rng, dtype=dtype)
            for _ in range(cfg.attention_blocks)
        ]

    def parameters(self) -> dict:
        params = {}
        for name, p in self.encoder.parameters().items():
            params[f"encoder.{name}"] = p
        params["mask_embedding"] = self.mask_embedding
        for name, p in self.quantizer.parameters().items():
            params[f"quantizer.{name}"] = p
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters().items():
                params[f"block{i}.{name}"] = p
        return params

    def encode(self, waveform) -> Tensor:
        if not isinstance(waveform, Tensor):
            waveform = Tensor(np.asarray(waveform, dtype=self.dtype))
        return self.encoder(waveform)

    def context(self, z: Tensor, positions: bool = True) -> Tensor:
        h = z
        if positions:
            h = h + Tensor(sinusoid_positions(z.shape[0], z.shape[1], dtype=self.dtype))
        for block in self.blocks:
            h = block(h)
        return h

    def training_losses(self, waveform, mask_rng, dist_rng, tau):
        """(contrastive sum, soft assignment probs, masked count) for one utterance."""
        z = self.encode(waveform)
        masked_z, mask_idx = apply_mask(z, self.mask_embedding, self.cfg.mask_start_prob,
                                        self.cfg.mask_span, mask_rng)
        q, soft, _ = self.quantizer.quantize(z, rng=mask_rng, tau=tau, train_mode=True)
        c = self.context(masked_z)
        contrastive = masked_contrastive_loss(
            q, c, mask_idx, kappa=self.cfg.kappa,
            num_distractors=self.cfg.num_distractors, rng=dist_rng)
        return contrastive, soft, len(mask_idx)

    def extract(self, waveform) -> np.ndarray:
        """Context outputs without masking (evaluation features)."""
        with T.no_grad():
            c = self.context(self.encode(waveform))
        return c.data.astype(np.float32)

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
class MaskedPretrainResult:
    model: MaskedCpcModel
    log: TrainLog
    steps: int
    seed: int


def pretrain_masked(
    manifest: Manifest,
    cfg: MaskedCpcConfig,
    steps: int,
    seed: int,
    *,
    batch_seconds: float = 8.0,
    lr_high: float = 3e-4,
    lr_low: float = 5e-5,
    switch_fraction: float = 0.5,
    log_path=None,
    progress=None,
) -> MaskedPretrainResult:
    """Optimize contrastive-per-masked-step plus weighted diversity.

    The mask stream drives both span starts and gumbel noise; distractor
    draws come from the distractor stream. The gumbel temperature anneals
    multiplicatively per step down to its floor.
    """
    if len(manifest) == 0:
        raise ConfigError("cannot pretrain on an empty corpus")
    model = MaskedCpcModel(cfg, seed_stream(seed, "init"))
    data_rng = seed_stream(seed, "data")
    dist_rng = seed_stream(seed, "distractor")
    mask_rng = seed_stream(seed, "mask")
    opt = Adam(model.parameters(), lr_high=lr_high, lr_low=lr_low,
               switch_fraction=switch_fraction, total_steps=steps)
    log = TrainLog(("loss", "contrastive", "diversity"), path=log_path)

    groups = cfg.codebook_groups
    cache: dict[str, np.ndarray] = {}
    cache_audio = manifest.total_duration() <= 1800.0
    step = 0
    while step < steps:
        for batch in batch_by_duration(manifest, batch_seconds, data_rng):
            if step >= steps:
                break
            tau = max(cfg.gumbel_tau_min, cfg.gumbel_tau_start * cfg.gumbel_tau_decay ** step)
            with T.Tape() as tape:
                contrastive_total = None
                prob_sums = None
                n_masked_total = 0
                n_frames_total = 0
                for utt in batch:
                    if utt.utt_id in cache:
                        wave = cache[utt.utt_id]
                    else:
                        wave = read_wav(utt.path).samples
                        if cache_audio:
                            cache[utt.utt_id] = wave
                    contrastive, soft, n_masked = model.training_losses(
                        wave, mask_rng, dist_rng, tau)
                    contrastive_total = (contrastive if contrastive_total is None
                                         else contrastive_total + contrastive)
                    n_masked_total += n_masked
                    n_frames_total += soft.shape[0] // groups
                    sums = T.concat([T.sum(soft[g::groups], axis=0, keepdims=True)
                                     for g in range(groups)], axis=0)
                    prob_sums = sums if prob_sums is None else prob_sums + sums
                contrastive_mean = contrastive_total * (1.0 / n_masked_total)
                diversity = diversity_loss(prob_sums * (1.0 / n_frames_total))
                total = contrastive_mean + cfg.diversity_weight * diversity
                total.backward(tape)
            opt.step()
            opt.zero_grad()
            step += 1
            values = (float(total.data), float(contrastive_mean.data), float(diversity.data))
            log.log(step, *values)
            if progress is not None:
                progress(step, values)
    return MaskedPretrainResult(model, log, steps, seed)
