import math

import numpy as np
import pytest

import contraspeech.tensor as T
from contraspeech.audio import synth_corpus
from contraspeech.cpc import (
    ConvEncoder,
    CpcConfig,
    CpcModel,
    activation_elements,
    constant_width_activation_ratio,
    pretrain,
    sample_distractors,
    sim_k,
    wav2vec_loss,
    wav2vec_term_count,
)
from contraspeech.errors import ConfigError, DegenerateSequenceError, ShortInputError
from contraspeech.layers import LstmLayer
from contraspeech.tensor import Tape, Tensor, grad_check

TINY = CpcConfig(filters=(8, 16, 16, 16, 32, 32), norm_groups=8,
                 context_layers=1, context_units=32, offsets=2, num_distractors=2)


def reversed_indices(idx):
    """Map distractor draws between a backward loss and its reversed-forward twin."""
    u = idx.shape[0]
    return (u - 1 - idx)[::-1].copy()


class TestConfig:
    def test_paper_feature_widths(self):
        assert CpcConfig.paper().feature_dim == 512
        bd = CpcConfig.paper(context_directions=("forward", "backward"))
        assert bd.feature_dim == 1024 and bd.bidirectional

    def test_validation(self):
        with pytest.raises(ConfigError):
            CpcConfig(filters=(8, 8), kernels=(3,), strides=(1,))
        with pytest.raises(ConfigError):
            CpcConfig(offsets=0)
        with pytest.raises(ConfigError):
            CpcConfig(context_directions=("sideways",))
        with pytest.raises(ConfigError):
            CpcConfig(context_units=64)  # must match final encoder width

    def test_frame_rate(self):
        assert CpcConfig().frame_rate == pytest.approx(100.0)


class TestEncoder:
    def test_paper_stack_shape(self):
        enc = ConvEncoder(CpcConfig.paper(), np.random.default_rng(0))
        z = enc(Tensor(np.random.default_rng(1).normal(size=16000).astype(np.float32) * 0.1))
        assert z.shape == (98, 512)

    def test_minimum_length_single_frame(self):
        enc = ConvEncoder(CpcConfig(), np.random.default_rng(0))
        assert enc.min_length == 465
        z = enc(Tensor(np.zeros(465, np.float32)))
        assert z.shape[0] == 1

    def test_too_short_raises(self):
        enc = ConvEncoder(CpcConfig(), np.random.default_rng(0))
        with pytest.raises(ShortInputError):
            enc(Tensor(np.zeros(464, np.float32)))

    def test_doubling_length_roughly_doubles_frames(self):
        enc = ConvEncoder(TINY, np.random.default_rng(0))
        for t in (8000, 16000, 20000):
            assert abs(enc.output_length(2 * t) - 2 * enc.output_length(t)) <= 2


class TestSimK:
    def test_zero_vectors(self):
        d = 4
        h = Tensor(np.random.default_rng(0).normal(size=(d, d)).astype(np.float32))
        out = sim_k(Tensor(np.zeros(d, np.float32)), Tensor(np.ones(d, np.float32)), h)
        assert float(out.data) == pytest.approx(-math.log(2), abs=1e-6)

    def test_identity_transform_unit_vectors(self):
        d = 3
        e1 = np.eye(d, dtype=np.float32)[0]
        out = sim_k(Tensor(e1), Tensor(e1), Tensor(np.eye(d, dtype=np.float32)))
        assert float(out.data) == pytest.approx(math.log(1 / (1 + math.exp(-1))), abs=1e-5)

    def test_sign_passthrough(self, rng):
        d = 5
        z = rng.normal(size=d).astype(np.float32)
        c = rng.normal(size=d).astype(np.float32)
        h = rng.normal(size=(d, d)).astype(np.float32)
        score = float(z @ h @ c)
        out = sim_k(Tensor(-z), Tensor(c), Tensor(h))
        assert float(out.data) == pytest.approx(math.log(1 / (1 + math.exp(score))), rel=1e-4)


class TestDistractors:
    def test_single_frame_sequence(self):
        idx = sample_distractors(1, 10, np.random.default_rng(0))
        assert np.all(idx == 0)

    def test_uniform_frequencies(self):
        u, n = 8, 100_000
        idx = sample_distractors(u, n, np.random.default_rng(1))
        counts = np.bincount(idx, minlength=u)
        expected = n / u
        sigma = math.sqrt(n * (1 / u) * (1 - 1 / u))
        assert np.all(np.abs(counts - expected) < 3 * sigma)

    def test_seed_determinism(self):
        a = sample_distractors(50, 20, np.random.default_rng(7))
        b = sample_distractors(50, 20, np.random.default_rng(7))
        assert np.array_equal(a, b)


class TestWav2vecLoss:
    def test_zero_inputs_closed_form(self):
        u, k, n_neg, lam, d = 14, 12, 10, 1.0, 4
        z = Tensor(np.zeros((u, d), np.float32))
        c = Tensor(np.zeros((u, d), np.float32))
        mats = [Tensor(np.random.default_rng(i).normal(size=(d, d)).astype(np.float32))
                for i in range(k)]
        idx = np.random.default_rng(0).integers(0, u, size=(u, n_neg))
        loss = wav2vec_loss(z, c, mats, "forward", negative_weight=lam,
                            distractor_indices=idx)
        expected = (1 + lam * n_neg) * math.log(2) * wav2vec_term_count(u, k)
        assert wav2vec_term_count(u, k) == 90
        assert float(loss.data) == pytest.approx(expected, rel=1e-4)

    def test_hand_computed_k1_u2(self):
        # D=1, K=1, U=2: one positive pair (z_1, c_0), one distractor draw per step
        z = np.array([[0.5], [-1.0]], np.float32)
        c = np.array([[2.0], [0.3]], np.float32)
        h = np.array([[1.5]], np.float32)
        idx = np.array([[1], [0]])
        loss = wav2vec_loss(Tensor(z), Tensor(c), [Tensor(h)], "forward",
                            negative_weight=1.0, distractor_indices=idx)
        sig = lambda x: 1 / (1 + math.exp(-x))
        pos = math.log(sig(z[1, 0] * 1.5 * c[0, 0]))
        neg = math.log(sig(-z[1, 0] * 1.5 * c[0, 0]))  # distractor for step 0 is index 1
        assert float(loss.data) == pytest.approx(-(pos + neg), rel=1e-5)

    def test_direction_duality(self, rng):
        u, d, k = 9, 4, 3
        z = rng.normal(size=(u, d)).astype(np.float32)
        c = rng.normal(size=(u, d)).astype(np.float32)
        mats = [Tensor(rng.normal(size=(d, d)).astype(np.float32)) for _ in range(k)]
        idx = rng.integers(0, u, size=(u, 5))
        bwd = wav2vec_loss(Tensor(z), Tensor(c), mats, "backward",
                           distractor_indices=idx)
        fwd = wav2vec_loss(Tensor(z[::-1].copy()), Tensor(c[::-1].copy()), mats, "forward",
                           distractor_indices=reversed_indices(idx))
        assert float(bwd.data) == pytest.approx(float(fwd.data), rel=1e-5)

    def test_degenerate_sequence(self, rng):
        z = Tensor(rng.normal(size=(3, 2)).astype(np.float32))
        mats = [Tensor(np.eye(2, dtype=np.float32)) for _ in range(3)]
        with pytest.raises(DegenerateSequenceError):
            wav2vec_loss(z, z, mats, "forward", rng=np.random.default_rng(0))

    def test_gradients_toy_shapes(self):
        rng = np.random.default_rng(11)
        u, d, k = 6, 4, 2
        z = Tensor(rng.normal(size=(u, d)), dtype=np.float64, requires_grad=True)
        c = Tensor(rng.normal(size=(u, d)), dtype=np.float64, requires_grad=True)
        mats = [Tensor(rng.normal(size=(d, d)), dtype=np.float64, requires_grad=True)
                for _ in range(k)]
        idx = rng.integers(0, u, size=(u, 3))
        for direction in ("forward", "backward"):
            params = {"z": z, "c": c, "h1": mats[0], "h2": mats[1]}
            report = grad_check(
                lambda: wav2vec_loss(z, c, mats, direction, distractor_indices=idx),
                params, rtol=1e-3)
            assert report.passed, f"{direction}: {report}"


class TestBidirectional:
    def _setup(self, rng, u=8, d=3, k=2, n_neg=2):
        z = rng.normal(size=(u, d)).astype(np.float32)
        c_f = rng.normal(size=(u, d)).astype(np.float32)
        c_b = rng.normal(size=(u, d)).astype(np.float32)
        mats_f = [Tensor(rng.normal(size=(d, d)).astype(np.float32)) for _ in range(k)]
        mats_b = [Tensor(rng.normal(size=(d, d)).astype(np.float32)) for _ in range(k)]
        idx = rng.integers(0, u, size=(u, n_neg))
        return z, c_f, c_b, mats_f, mats_b, idx

    def test_zero_backward_context_adds_constant(self, rng):
        z, c_f, _, mats_f, mats_b, idx = self._setup(rng)
        u, k, n_neg = 8, 2, 2
        fwd = wav2vec_loss(Tensor(z), Tensor(c_f), mats_f, "forward", distractor_indices=idx)
        bwd = wav2vec_loss(Tensor(z), Tensor(np.zeros_like(c_f)), mats_b, "backward",
                           distractor_indices=idx)
        const = (1 + n_neg) * math.log(2) * wav2vec_term_count(u, k)
        total = float(fwd.data) + float(bwd.data)
        assert total == pytest.approx(float(fwd.data) + const, rel=1e-5)

    def test_encoder_gradient_additivity(self, rng):
        z_data, c_f, c_b, mats_f, mats_b, idx = self._setup(rng)

        def grad_of(direction_losses):
            z = Tensor(z_data, requires_grad=True)
            with Tape() as tape:
                total = None
                for c, mats, direction in direction_losses:
                    loss = wav2vec_loss(z, Tensor(c), mats, direction, distractor_indices=idx)
                    total = loss if total is None else total + loss
                total.backward(tape)
            return z.grad.copy()

        g_f = grad_of([(c_f, mats_f, "forward")])
        g_b = grad_of([(c_b, mats_b, "backward")])
        g_both = grad_of([(c_f, mats_f, "forward"), (c_b, mats_b, "backward")])
        np.testing.assert_allclose(g_both, g_f + g_b, rtol=1e-5, atol=1e-7)

    def test_symmetric_construction_equal_terms(self, rng):
        u, d, k = 7, 3, 2
        half = rng.normal(size=((u + 1) // 2, d)).astype(np.float32)
        z = np.vstack([half, half[:u // 2][::-1]])  # palindromic latents
        c_f = rng.normal(size=(u, d)).astype(np.float32)
        c_b = c_f[::-1].copy()
        mats = [Tensor(rng.normal(size=(d, d)).astype(np.float32)) for _ in range(k)]
        idx_b = rng.integers(0, u, size=(u, 2))
        idx_f = reversed_indices(idx_b)
        fwd = wav2vec_loss(Tensor(z), Tensor(c_f), mats, "forward", distractor_indices=idx_f)
        bwd = wav2vec_loss(Tensor(z), Tensor(c_b), mats, "backward", distractor_indices=idx_b)
        assert float(fwd.data) == pytest.approx(float(bwd.data), rel=1e-5)


class TestModel:
    def test_context_networks_share_no_parameters(self, rng):
        cfg = CpcConfig(filters=(8, 16, 16, 16, 32, 32), norm_groups=8, context_layers=1,
                        context_units=32, offsets=2, num_distractors=2,
                        context_directions=("forward", "backward"))
        model = CpcModel(cfg, np.random.default_rng(0))
        wave = rng.normal(size=3200).astype(np.float32) * 0.1
        idx_rng = np.random.default_rng(1)
        z = model.encode(wave)
        u = z.shape[0]
        idx = idx_rng.integers(0, u, size=(u, 2))
        c_f = model.contexts[0](z)
        before = wav2vec_loss(z, c_f, model.transforms[0], "forward",
                              distractor_indices=idx).data.copy()
        for p in model.contexts[1].parameters().values():
            p.data += 0.37  # perturb the backward network
        z2 = model.encode(wave)
        after = wav2vec_loss(z2, model.contexts[0](z2), model.transforms[0], "forward",
                             distractor_indices=idx).data
        assert np.array_equal(before, after)

    def test_extraction_widths_and_length(self, rng):
        wave = rng.normal(size=4800).astype(np.float32) * 0.1
        uni = CpcModel(TINY, np.random.default_rng(0))
        feats = uni.extract(wave)
        assert feats.shape == (uni.encoder.output_length(4800), 32)
        bd_cfg = CpcConfig(filters=TINY.filters, norm_groups=8, context_layers=1,
                           context_units=32, offsets=2, num_distractors=2,
                           context_directions=("forward", "backward"))
        bd = CpcModel(bd_cfg, np.random.default_rng(0))
        assert bd.extract(wave).shape[1] == 64

    def test_two_separate_stacks_cheaper_than_double_width(self):
        d = 512
        stack = lambda width: sum(
            LstmLayer.param_count(d if i == 0 else width, width) for i in range(4))
        assert 2 * stack(512) < stack(1024)

    def test_activation_ratio_of_incremental_encoder(self):
        ratio = constant_width_activation_ratio(16000, CpcConfig.paper())
        assert ratio >= 4.0
        assert ratio == pytest.approx(4.59, abs=0.1)

    def test_activation_elements_arithmetic(self):
        # single layer: 4 filters, L_out = (10-2)//2+1 = 5 -> 20 elements
        assert activation_elements(10, [4], [2], [2]) == 20

    def test_end_to_end_gradients_tiny_model(self):
        cfg = CpcConfig(filters=(4, 4, 4, 4, 4, 4), kernels=(4, 4, 3, 3, 2, 1),
                        strides=(2, 2, 2, 1, 1, 1), norm_groups=2, context_layers=1,
                        context_units=4, offsets=2, num_distractors=2)
        model = CpcModel(cfg, np.random.default_rng(3), dtype=np.float64)
        rng = np.random.default_rng(4)
        wave = Tensor(rng.normal(size=80), dtype=np.float64, requires_grad=True)
        u = model.encoder.output_length(80)
        idx = rng.integers(0, u, size=(u, 2))

        def loss():
            z = model.encoder(wave)
            total = None
            for net, mats in zip(model.contexts, model.transforms):
                part = wav2vec_loss(z, net(z), mats, net.direction, distractor_indices=idx)
                total = part if total is None else total + part
            return total * (1.0 / wav2vec_term_count(u, cfg.offsets))

        params = {"wave": wave, **model.parameters()}
        report = grad_check(loss, params, rtol=1e-3)
        assert report.passed, report


class TestPretrain:
    def _corpus(self, tmp_path, minutes=0.5, seed=5):
        n = max(6, int(minutes * 60))
        return synth_corpus(n, 6, 3, seed=seed, out_dir=tmp_path / f"c{seed}")

    def test_loss_decreases_over_200_steps(self, tmp_path):
        manifest = self._corpus(tmp_path)
        result = pretrain(manifest, TINY, steps=200, seed=0, batch_seconds=2.0)
        losses = result.log.column("loss")
        assert losses[-20:].mean() < losses[:20].mean()

    def test_seed_reproducibility_bitwise(self, tmp_path):
        manifest = self._corpus(tmp_path)
        r1 = pretrain(manifest, TINY, steps=12, seed=3, batch_seconds=2.0)
        r2 = pretrain(manifest, TINY, steps=12, seed=3, batch_seconds=2.0)
        s1, s2 = r1.model.state_dict(), r2.model.state_dict()
        assert set(s1) == set(s2)
        for name in s1:
            assert np.array_equal(s1[name], s2[name]), name

    def test_bidirectional_training_logs_components(self, tmp_path):
        manifest = self._corpus(tmp_path)
        cfg = CpcConfig(filters=TINY.filters, norm_groups=8, context_layers=1,
                        context_units=32, offsets=2, num_distractors=2,
                        context_directions=("forward", "backward"))
        result = pretrain(manifest, cfg, steps=6, seed=1, batch_seconds=2.0)
        assert result.log.columns == ("step", "loss", "loss_fwd", "loss_bwd")
        assert len(result.log.rows) == 6

    def test_empty_corpus_rejected(self):
        from contraspeech.audio import Manifest

        with pytest.raises(ConfigError):
            pretrain(Manifest([]), TINY, steps=1, seed=0)
