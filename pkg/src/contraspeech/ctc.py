"""Connectionist temporal classification: loss, oracle, decoding, scoring.

The loss runs the forward algorithm over the blank-interleaved label lattice
entirely in log space; its gradient comes from the forward-backward
posteriors. ``ctc_brute_force`` enumerates every frame labelling that
collapses to the target and exists purely as a test oracle. Blank is always
index 0 and never appears in transcripts.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ContractError, DimensionError, OracleScopeError
from .tensor import Tensor, apply_op

__all__ = [
    "BLANK",
    "CtcLattice",
    "ctc_lattice",
    "ctc_loss",
    "ctc_brute_force",
    "min_frames",
    "greedy_decode",
    "collapse",
    "edit_distance",
    "error_rate",
    "wer",
    "cer",
]

BLANK = 0
_NEG_INF = -np.inf


def _validate_target(target: Sequence[int], vocab: int) -> list[int]:
    target = [int(t) for t in target]
    for t in target:
        if not 1 <= t < vocab:
            raise ContractError(
                f"target symbol {t} outside vocabulary 1..{vocab - 1} (blank=0 excluded)")
    return target


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can realize the target (blanks between repeats)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.intp)
    ext[1::2] = target
    return ext


@dataclass
class CtcLattice:
    extended: np.ndarray       # blank-interleaved labels, length 2L+1
    alpha: np.ndarray          # (T, 2L+1) forward log probabilities
    beta: np.ndarray           # (T, 2L+1) backward log probabilities
    log_likelihood_forward: float
    log_likelihood_backward: float


def ctc_lattice(log_probs: np.ndarray, target: Sequence[int]) -> CtcLattice:
    """Forward and backward tables over the 2L+1 lattice, all in log space."""
    lp = np.asarray(log_probs, dtype=np.float64)
    n_frames, vocab = lp.shape
    target = _validate_target(target, vocab)
    ext = _extend(target)
    n_states = len(ext)

    # states s >= 2 may also arrive from s-2 when that hop skips a blank
    # between two distinct labels
    skip = np.zeros(n_states, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    frame_state = lp[:, ext]  # (T, S)

    alpha = np.full((n_frames, n_states), _NEG_INF)
    alpha[0, 0] = frame_state[0, 0]
    if n_states > 1:
        alpha[0, 1] = frame_state[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + frame_state[t]

    beta = np.full((n_frames, n_states), _NEG_INF)
    beta[-1, -1] = frame_state[-1, -1]
    if n_states > 1:
        beta[-1, -2] = frame_state[-1, -2]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + frame_state[t]

    ll_fwd = alpha[-1, -1] if n_states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    ll_bwd = beta[0, 0] if n_states == 1 else np.logaddexp(beta[0, 0], beta[0, 1])
    return CtcLattice(ext, alpha, beta, float(ll_fwd), float(ll_bwd))


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """-log p(target | log_probs), differentiable w.r.t. the log-probability matrix."""
    if log_probs.ndim != 2:
        raise DimensionError(f"expected (frames, vocab) log-probs, got {log_probs.shape}")
    n_frames = log_probs.shape[0]
    target = _validate_target(target, log_probs.shape[1])
    if min_frames(target) > n_frames:
        raise AlignmentError(
            f"target of length {len(target)} needs >= {min_frames(target)} frames, "
            f"got {n_frames}")

    lattice = ctc_lattice(log_probs.data, target)
    loss = -lattice.log_likelihood_forward
    ext = lattice.extended

    def back(gout):
        log_z = lattice.log_likelihood_forward
        frame_state = lattice.alpha + lattice.beta - log_probs.data.astype(np.float64)[:, ext]
        with np.errstate(all="ignore"):
            posterior = np.exp(frame_state - log_z)  # occupation per (t, state)
        grad = np.zeros(log_probs.shape, dtype=np.float64)
        for s, symbol in enumerate(ext):
            grad[:, symbol] += posterior[:, s]
        return (-grad * float(gout),)

    out = np.asarray(loss, dtype=log_probs.dtype)
    return apply_op("ctc_loss", (log_probs,), out, back)


def ctc_brute_force(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """Enumerate every length-T labelling whose collapse equals the target.

    Exponential in T; guarded to T <= 10 and vocab <= 5. Returns +inf when no
    labelling produces the target.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    n_frames, vocab = lp.shape
    if n_frames > 10 or vocab > 5:
        raise OracleScopeError(
            f"brute force limited to T <= 10 and vocab <= 5, got T={n_frames}, V={vocab}")
    target = tuple(_validate_target(target, vocab))
    total = _NEG_INF
    for path in itertools.product(range(vocab), repeat=n_frames):
        if collapse(path) != list(target):
            continue
        score = 0.0
        for t, symbol in enumerate(path):
            score += lp[t, symbol]
        total = np.logaddexp(total, score)
    return float(-total)


def collapse(path: Sequence[int]) -> list[int]:
    """CTC collapse: merge repeated symbols, then drop blanks."""
    out = []
    prev = None
    for symbol in path:
        if symbol != prev and symbol != BLANK:
            out.append(int(symbol))
        prev = symbol
    return out


def greedy_decode(log_probs: np.ndarray) -> list[int]:
    """Per-frame argmax path, collapsed."""
    lp = np.asarray(log_probs)
    if lp.ndim != 2:
        raise DimensionError(f"expected (frames, vocab) log-probs, got {lp.shape}")
    return collapse(np.argmax(lp, axis=1))


# ---------------------------------------------------------------------------
# scoring


def edit_distance(hyp: Sequence, ref: Sequence) -> tuple[int, int, int, int]:
    """Levenshtein distance with unit costs.

    Returns (distance, substitutions, insertions, deletions); insertions are
    hypothesis symbols with no reference counterpart.
    """
    n, m = len(hyp), len(ref)
    dist = np.zeros((n + 1, m + 1), dtype=np.int32)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = hyp[i - 1] == ref[j - 1]
            dist[i, j] = min(dist[i - 1, j - 1] + (0 if same else 1),
                             dist[i - 1, j] + 1,
                             dist[i, j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] and hyp[i - 1] == ref[j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + 1:
            subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return int(dist[n, m]), subs, ins, dels


def error_rate(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> float:
    """Corpus-level rate: total edit distance over total reference length."""
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    total_dist = 0
    total_len = 0
    for hyp, ref in zip(hyps, refs):
        total_dist += edit_distance(hyp, ref)[0]
        total_len += len(ref)
    if total_len == 0:
        raise ContractError("reference corpus is empty; error rate undefined")
    return total_dist / total_len


def wer(hyps: Sequence[str], refs: Sequence[str]) -> float:
    return error_rate([h.split() for h in hyps], [r.split() for r in refs])


def cer(hyps: Sequence[str], refs: Sequence[str]) -> float:
    return error_rate([list(h) for h in hyps], [list(r) for r in refs])
