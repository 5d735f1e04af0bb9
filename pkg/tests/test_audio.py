import math
import struct
from collections import Counter

import numpy as np
import pytest

from contraspeech.audio import (
    AudioBuffer,
    Manifest,
    MelConfig,
    TOKEN_ALPHABET,
    batch_by_duration,
    filter_center_frequencies,
    log_mel,
    read_wav,
    synth_corpus,
    token_base_duration,
    token_waveform,
    write_wav,
)
from contraspeech.errors import ConfigError, FormatError, ShortInputError


class TestWav:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        samples = rng.uniform(-0.9, 0.9, size=2000).astype(np.float32)
        p = tmp_path / "a.wav"
        write_wav(p, samples, 16000)
        buf = read_wav(p)
        assert buf.sample_rate == 16000
        p2 = tmp_path / "b.wav"
        write_wav(p2, buf.samples, 16000)
        assert p.read_bytes() == p2.read_bytes()

    def test_one_second_sample_count(self, tmp_path):
        p = tmp_path / "sec.wav"
        write_wav(p, np.zeros(16000, np.float32), 16000)
        assert len(read_wav(p).samples) == 16000

    def test_truncated_data_chunk(self, tmp_path):
        p = tmp_path / "t.wav"
        write_wav(p, np.zeros(100, np.float32), 16000)
        raw = p.read_bytes()
        p.write_bytes(raw[:-20])
        with pytest.raises(FormatError, match="data chunk"):
            read_wav(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"JUNK" + b"\x00" * 60)
        with pytest.raises(FormatError, match="RIFF"):
            read_wav(p)

    def test_multichannel_rejected(self, tmp_path):
        payload = b"\x00\x00" * 8
        fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, 16000, 64000, 4, 16)
        data = b"data" + struct.pack("<I", len(payload)) + payload
        body = b"WAVE" + fmt + data
        p = tmp_path / "st.wav"
        p.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(FormatError, match="channels=2"):
            read_wav(p)

    def test_non_pcm_rejected(self, tmp_path):
        fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, 16000, 64000, 4, 16)
        data = b"data" + struct.pack("<I", 0)
        body = b"WAVE" + fmt + data
        p = tmp_path / "f.wav"
        p.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(FormatError, match="audio_format=3"):
            read_wav(p)


class TestLogMel:
    def test_silence_hits_floor(self):
        buf = AudioBuffer(np.zeros(16000, np.float32), 16000)
        feats = log_mel(buf)
        np.testing.assert_allclose(feats, math.log(1e-10), rtol=1e-6)

    def test_feature_width_default(self):
        buf = AudioBuffer(np.zeros(16000, np.float32), 16000)
        assert log_mel(buf).shape[1] == 80

    def test_frame_count_formula(self):
        for t in (400, 16000, 12345):
            buf = AudioBuffer(np.zeros(t, np.float32), 16000)
            assert log_mel(buf).shape[0] == (t - 400) // 160 + 1

    def test_pure_tone_constant_argmax(self):
        t = np.arange(16000) / 16000.0
        buf = AudioBuffer((0.5 * np.sin(2 * math.pi * 1000.0 * t)).astype(np.float32), 16000)
        feats = log_mel(buf)
        argmax = feats.argmax(axis=1)
        assert np.all(argmax == argmax[0])
        centers = filter_center_frequencies(80, 16000)
        assert abs(centers[argmax[0]] - 1000.0) < 150.0

    def test_too_short(self):
        with pytest.raises(ShortInputError):
            log_mel(AudioBuffer(np.zeros(100, np.float32), 16000))


class TestSynthCorpus:
    def test_deterministic_bytes(self, tmp_path):
        m1 = synth_corpus(5, 4, 3, seed=7, out_dir=tmp_path / "a")
        m2 = synth_corpus(5, 4, 3, seed=7, out_dir=tmp_path / "b")
        assert [e.transcript for e in m1] == [e.transcript for e in m2]
        for e1, e2 in zip(m1, m2):
            b1 = (tmp_path / "a" / e1.path).read_bytes()
            b2 = (tmp_path / "b" / e2.path).read_bytes()
            assert b1 == b2
        assert (tmp_path / "a" / "manifest.tsv").read_text() == (
            tmp_path / "b" / "manifest.tsv").read_text()

    def test_token_duration_bounds(self):
        rng = np.random.default_rng(0)
        for tok in range(5):
            base = token_base_duration(tok, 5)
            assert 0.12 <= base <= 0.20
            w = token_waveform(tok, base * 1.1, 16000, rng)
            assert 0.108 * 16000 <= len(w) <= 0.220 * 16000 + 1

    def test_vocab_guard(self, tmp_path):
        with pytest.raises(ConfigError):
            synth_corpus(1, 1, 9, seed=0, out_dir=tmp_path)

    def test_manifest_round_trip(self, tmp_path):
        m = synth_corpus(4, 3, 2, seed=1, out_dir=tmp_path)
        loaded = Manifest.load(tmp_path / "manifest.tsv")
        assert len(loaded) == 4
        assert [e.utt_id for e in loaded] == [e.utt_id for e in m]
        assert all((tmp_path / "whatever").parent.exists() for _ in loaded)

    def test_nearest_centroid_token_accuracy(self, tmp_path):
        """Log-mel centroids must separate the token inventory (> 90%)."""
        rng = np.random.default_rng(3)
        vocab = 5
        cfg = MelConfig()
        means = []
        for tok in range(vocab):
            w = token_waveform(tok, 0.16, 16000, np.random.default_rng(100 + tok))
            means.append(log_mel(AudioBuffer(w, 16000), cfg).mean(axis=0))
        centroids = np.stack(means)
        correct = total = 0
        for trial in range(40):
            tok = int(rng.integers(0, vocab))
            dur = token_base_duration(tok, vocab) * rng.uniform(0.9, 1.1)
            w = token_waveform(tok, dur, 16000, rng)
            feat = log_mel(AudioBuffer(w, 16000), cfg).mean(axis=0)
            pred = int(np.argmin(np.linalg.norm(centroids - feat, axis=1)))
            correct += pred == tok
            total += 1
        assert correct / total > 0.9


class TestBatching:
    def _manifest(self, durations):
        return Manifest([Utt(i, d) for i, d in enumerate(durations)])

    def test_single_batch_when_budget_covers_all(self, tmp_path):
        m = synth_corpus(6, 3, 2, seed=2, out_dir=tmp_path)
        batches = batch_by_duration(m, m.total_duration() + 1.0, np.random.default_rng(0))
        assert len(batches) == 1

    def test_budget_respected_and_epoch_complete(self, tmp_path):
        m = synth_corpus(20, 4, 3, seed=4, out_dir=tmp_path)
        budget = 2.5
        batches = batch_by_duration(m, budget, np.random.default_rng(1))
        for b in batches:
            assert sum(e.duration for e in b) <= budget + 1e-9
        seen = Counter(e.utt_id for b in batches for e in b)
        assert seen == Counter(e.utt_id for e in m)

    def test_oversize_utterance_rejected(self, tmp_path):
        m = synth_corpus(3, 10, 2, seed=5, out_dir=tmp_path)
        with pytest.raises(ConfigError, match="utt_"):
            batch_by_duration(m, 0.5, np.random.default_rng(0))


def Utt(i, dur):
    from contraspeech.audio import Utterance

    return Utterance(f"u{i}", f"u{i}.wav", dur, "a")
