"""Audio ingestion, log mel-spectrogram features, synthetic corpus generation.

WAV support is deliberately narrow: RIFF containers holding 16-bit signed
PCM, mono. The synthetic corpus maps each vocabulary token to a fixed
harmonic waveform (distinct fundamental, three partials, a little noise and
an attack/decay envelope) so downstream recognizers have something learnable
but non-trivial.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShortInputError

__all__ = [
    "AudioBuffer",
    "read_wav",
    "write_wav",
    "MelConfig",
    "mel_filterbank",
    "log_mel",
    "TOKEN_ALPHABET",
    "token_waveform",
    "synth_corpus",
    "Utterance",
    "Manifest",
    "batch_by_duration",
]


@dataclass
class AudioBuffer:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path) -> AudioBuffer:
    """Read a mono 16-bit PCM RIFF/WAVE file, scaling samples by 1/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF":
        raise FormatError(f"{path}: missing RIFF magic")
    if raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: RIFF form type is not WAVE")

    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(raw):
        chunk_id = raw[offset:offset + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, offset + 4)
        body = raw[offset + 8:offset + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise FormatError(
                    f"{path}: data chunk declares {chunk_size} bytes, "
                    f"only {len(body)} present")
            data = body
        offset += 8 + chunk_size + (chunk_size & 1)

    if fmt is None:
        raise FormatError(f"{path}: no fmt chunk")
    if data is None:
        raise FormatError(f"{path}: no data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise FormatError(f"{path}: audio_format={audio_format}, only PCM (1) supported")
    if channels != 1:
        raise FormatError(f"{path}: channels={channels}, only mono supported")
    if bits != 16:
        raise FormatError(f"{path}: bits_per_sample={bits}, only 16 supported")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    return AudioBuffer(samples, sample_rate)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono 16-bit PCM; float inputs in [-1, 1] are scaled by 32768."""
    ints = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0),
                   -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate,
                                sample_rate * 2, 2, 16)
    data = b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + fmt + data + payload)


# ---------------------------------------------------------------------------
# log mel-spectrogram


@dataclass
class MelConfig:
    num_filters: int = 80
    window_seconds: float = 0.025
    hop_seconds: float = 0.010
    fft_size: int = 512
    floor: float = 1e-10


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(num_filters: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the mel scale spanning 0 to Nyquist.

    Returns (num_filters, fft_size // 2 + 1).
    """
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(nyquist), num_filters + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.linspace(0.0, nyquist, fft_size // 2 + 1)
    fb = np.zeros((num_filters, fft_size // 2 + 1), dtype=np.float32)
    for j in range(num_filters):
        lo, center, hi = hz_points[j], hz_points[j + 1], hz_points[j + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[j] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def filter_center_frequencies(num_filters: int, sample_rate: int) -> np.ndarray:
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), num_filters + 2)
    return _mel_to_hz(mel_points)[1:-1]


def log_mel(audio: AudioBuffer, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Hann-windowed magnitude spectrogram -> mel filterbank -> ln(max(., floor)).

    Frames are unpadded: frame count = floor((T - window) / hop) + 1.
    """
    window = int(round(cfg.window_seconds * audio.sample_rate))
    hop = int(round(cfg.hop_seconds * audio.sample_rate))
    if len(audio.samples) < window:
        raise ShortInputError(
            f"audio has {len(audio.samples)} samples, window needs {window}")
    n_frames = (len(audio.samples) - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = audio.samples[idx] * np.hanning(window).astype(np.float32)
    mag = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1))
    fb = mel_filterbank(cfg.num_filters, cfg.fft_size, audio.sample_rate)
    feats = np.maximum(mag @ fb.T, cfg.floor)
    return np.log(feats).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic labeled corpus

TOKEN_ALPHABET = "abcdefgh"
_FUNDAMENTALS = (220.0, 294.0, 370.0, 466.0, 554.0, 659.0, 784.0, 932.0)
_HARMONIC_AMPS = (1.0, 0.5, 0.25)
_NOISE_LEVEL = 0.01


def token_base_duration(token_index: int, vocab_size: int) -> float:
    """Nominal token length, spread over 120-200 ms across the vocabulary."""
    if vocab_size == 1:
        return 0.16
    return 0.12 + 0.08 * token_index / (vocab_size - 1)


def token_waveform(token_index: int, duration: float, sample_rate: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Harmonic burst with an attack/decay envelope and slight noise."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = _FUNDAMENTALS[token_index]
    wave = np.zeros(n)
    for h, amp in enumerate(_HARMONIC_AMPS, start=1):
        wave += amp * np.sin(2.0 * math.pi * f0 * h * t)
    wave += _NOISE_LEVEL * rng.standard_normal(n)
    attack = min(int(0.010 * sample_rate), n // 2)
    decay = min(int(0.020 * sample_rate), n // 2)
    env = np.ones(n)
    env[:attack] = np.linspace(0.0, 1.0, attack, endpoint=False)
    env[n - decay:] = np.linspace(1.0, 0.0, decay)
    wave *= env
    peak = np.max(np.abs(wave))
    return (0.75 * wave / peak).astype(np.float32) if peak > 0 else wave.astype(np.float32)


@dataclass
class Utterance:
    utt_id: str
    path: str
    duration: float
    transcript: str


@dataclass
class Manifest:
    entries: list[Utterance] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def total_duration(self) -> float:
        return float(sum(e.duration for e in self.entries))

    def save(self, path) -> None:
        base = Path(path).parent.resolve()
        lines = []
        for e in self.entries:
            p = Path(e.path)
            if p.is_absolute() and p.resolve().is_relative_to(base):
                p = p.resolve().relative_to(base)
            lines.append(f"{e.utt_id}\t{p}\t{e.duration:.6f}\t{e.transcript}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        base = path.parent
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            utt_id, rel, dur, transcript = parts
            resolved = (base / rel) if not Path(rel).is_absolute() else Path(rel)
            if not resolved.exists():
                raise FileNotFoundError(f"{path}:{lineno}: audio file not found: {resolved}")
            duration = float(dur)
            if duration <= 0:
                raise FormatError(f"{path}:{lineno}: non-positive duration {dur}")
            entries.append(Utterance(utt_id, str(resolved), duration, transcript))
        return cls(entries)


def synth_corpus(num_utts: int, tokens_per_utt: int, vocab_size: int, seed: int,
                 out_dir, sample_rate: int = 16000) -> Manifest:
    """Generate a labeled corpus of token-concatenation utterances.

    Deterministic per seed: same seed gives identical audio bytes and
    manifest. Token instances get +/-10% duration jitter around their
    nominal length.
    """
    if not 1 <= vocab_size <= 8:
        raise ConfigError(f"vocab_size must be in 1..8, got {vocab_size}")
    if num_utts < 1 or tokens_per_utt < 1:
        raise ConfigError("num_utts and tokens_per_utt must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(num_utts):
        tokens = rng.integers(0, vocab_size, size=tokens_per_utt)
        pieces = []
        for tok in tokens:
            base = token_base_duration(int(tok), vocab_size)
            jitter = rng.uniform(0.9, 1.1)
            pieces.append(token_waveform(int(tok), base * jitter, sample_rate, rng))
        wave = np.concatenate(pieces)
        utt_id = f"utt_{i:05d}"
        wav_path = out_dir / f"{utt_id}.wav"
        write_wav(wav_path, wave, sample_rate)
        transcript = "".join(TOKEN_ALPHABET[t] for t in tokens)
        entries.append(Utterance(utt_id, str(wav_path.resolve()),
                                 len(wave) / sample_rate, transcript))
    manifest = Manifest(entries)
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def batch_by_duration(manifest, budget_seconds: float,
                      rng: np.random.Generator) -> list[list]:
    """Randomly ordered packing: each batch totals <= budget, one epoch covers
    every utterance exactly once.

    Accepts a Manifest or any sequence of items with .utt_id and .duration.
    """
    items = list(manifest.entries) if isinstance(manifest, Manifest) else list(manifest)
    for e in items:
        if e.duration > budget_seconds:
            raise ConfigError(
                f"utterance '{e.utt_id}' ({e.duration:.2f}s) exceeds the "
                f"batch budget ({budget_seconds:.2f}s)")
    order = rng.permutation(len(items))
    batches: list[list] = []
    current: list = []
    used = 0.0
    for i in order:
        e = items[i]
        if current and used + e.duration > budget_seconds:
            batches.append(current)
            current, used = [], 0.0
        current.append(e)
        used += e.duration
    if current:
        batches.append(current)
    return batches
