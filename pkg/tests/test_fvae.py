"""Factored VAE: shapes, losses, gradients, and adversarial decoupling."""

import math

import numpy as np
import pytest
import torch

from audnorm.features import LogMelSpectrogram
from audnorm.fvae import (
    FVAE,
    FVAEConfig,
    NonFiniteLossError,
    build_fvae,
    compute_losses,
    cpc_embeddings,
    cpc_loss,
    decode,
    encode_content,
    encode_style,
    gaussian_kl,
    infonce_loss,
    load_checkpoint,
    make_train_state,
    reparameterize,
    save_checkpoint,
    training_step,
)

TINY = FVAEConfig(
    bands=20,
    content_dim=8,
    style_dim=12,
    cpc_dim=6,
    content_channels=16,
    style_channels=(16,),
    style_kernels=(3,),
    style_strides=(2,),
    decoder_channels=16,
    cpc_channels=10,
    cpc_kernels=(3, 2),
    tau_seconds=0.2,
)


def feat(values, utt="u"):
    values = np.asarray(values, dtype=np.float64)
    return LogMelSpectrogram(values, utt, band_count=values.shape[1])


def random_feat(rng, frames, bands=20, utt="u"):
    return feat(rng.normal(size=(frames, bands)), utt)


class TestEncodeContent:
    def test_pooling_shape(self):
        model = build_fvae(seed=0)
        content = encode_content(feat(np.zeros((98, 80)), "u"), model)
        assert content.means.shape == (49, 64)
        assert content.frames_per_embedding == 2
        assert content.source_frames == 98

    def test_odd_length_rounds_up(self):
        model = build_fvae(TINY, seed=0)
        content = encode_content(random_feat(np.random.default_rng(0), 33), model)
        assert content.means.shape[0] == 17

    def test_zero_weight_encoder_outputs_bias(self):
        model = build_fvae(TINY, seed=0)
        with torch.no_grad():
            for name, p in model.content_encoder.named_parameters():
                if "weight" in name:
                    p.zero_()
        content = encode_content(random_feat(np.random.default_rng(1), 30), model)
        assert np.allclose(content.means, content.means[0], atol=1e-12)

    def test_reparameterization_identity(self):
        rng = np.random.default_rng(2)
        means = rng.normal(size=(5, 8))
        logvars = rng.normal(size=(5, 8))
        assert np.allclose(reparameterize(means, logvars, eps=np.zeros((5, 8))), means)
        eps = rng.normal(size=(5, 8))
        sample = reparameterize(means, logvars, eps=eps)
        assert np.allclose(sample, means + np.exp(0.5 * logvars) * eps)

    def test_too_short_input_rejected(self):
        model = build_fvae(TINY, seed=0)
        with pytest.raises(ValueError):
            encode_content(feat(np.zeros((1, 20))), model)


class TestEncodeStyle:
    def test_determinism(self):
        model = build_fvae(TINY, seed=0)
        f = random_feat(np.random.default_rng(3), 40)
        a = encode_style(f, model)
        b = encode_style(f, model)
        assert np.array_equal(a.vector, b.vector)
        assert a.vector.shape == (12,)

    def test_time_reversal_invariance_of_frame_local_stack(self):
        config = FVAEConfig(
            bands=20, content_dim=8, style_dim=12, cpc_dim=6,
            content_channels=16, style_channels=(16,), style_kernels=(1,),
            style_strides=(1,), decoder_channels=16, cpc_channels=10,
            cpc_kernels=(3, 2),
        )
        model = build_fvae(config, seed=1)
        values = np.random.default_rng(4).normal(size=(31, 20))
        fwd = encode_style(feat(values), model)
        rev = encode_style(feat(values[::-1]), model)
        assert np.allclose(fwd.vector, rev.vector, atol=1e-10)

    def test_distinct_utterances_differ(self):
        model = build_fvae(TINY, seed=0)
        rng = np.random.default_rng(5)
        a = encode_style(random_feat(rng, 40, utt="a"), model)
        b = encode_style(random_feat(rng, 40, utt="b"), model)
        assert not np.allclose(a.vector, b.vector)


class TestDecode:
    def test_frame_count_restored(self):
        model = build_fvae(TINY, seed=0)
        f = random_feat(np.random.default_rng(6), 37)
        content = encode_content(f, model)
        style = encode_style(f, model)
        out = decode(content, style, model)
        assert out.shape == (37, 20)

    def test_determinism(self):
        model = build_fvae(TINY, seed=0)
        f = random_feat(np.random.default_rng(7), 24)
        content = encode_content(f, model)
        style = encode_style(f, model)
        assert np.array_equal(decode(content, style, model), decode(content, style, model))

    def test_style_perturbation_touches_every_frame(self):
        model = build_fvae(TINY, seed=0)
        f = random_feat(np.random.default_rng(8), 28)
        content = encode_content(f, model)
        style = encode_style(f, model)
        base = decode(content, style, model)
        bumped = decode(
            content,
            type(style)(vector=style.vector + 0.5, utterance_id=style.utterance_id),
            model,
        )
        frame_changed = np.abs(bumped - base).max(axis=1) > 0
        assert frame_changed.all()

    def test_decoder_gradient_matches_finite_differences(self):
        model = build_fvae(TINY, seed=2).double()
        rng = np.random.default_rng(9)
        y = torch.tensor(rng.normal(size=(12, 20)))
        with torch.no_grad():
            mean, _ = model.content_mean_logvar(y)
            s = model.style_vector(y)
        c = mean.detach()

        def loss_fn():
            out = model.decode_frames(c, s, 12)
            return ((out - y) ** 2).sum() / 12

        loss = loss_fn()
        model.zero_grad()
        loss.backward()
        weight = model.decoder.net[0].weight
        analytic = weight.grad.detach().clone()

        h = 1e-3
        idx = [(0, 0, 0), (3, 5, 1), (7, 11, 2), (15, 19, 0)]
        for i in idx:
            with torch.no_grad():
                orig = weight[i].item()
                weight[i] = orig + h
                up = loss_fn().item()
                weight[i] = orig - h
                down = loss_fn().item()
                weight[i] = orig
            numeric = (up - down) / (2 * h)
            rel = abs(analytic[i].item() - numeric) / max(abs(numeric), 1e-12)
            assert rel < 1e-4


class TestInfoNCE:
    def test_uniform_scores_give_log_batch(self):
        h = torch.ones(4, 6, 3)
        loss, n_terms = infonce_loss(h, tau_frames=2)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)
        assert n_terms == 16

    def test_dominant_positive_drives_loss_to_zero(self):
        h = torch.zeros(3, 4, 2)
        # orthogonal utterance codes scaled up: positives huge, negatives zero
        for u in range(3):
            h[u, :, :] = 0.0
        h[0, :, 0] = 30.0
        h[1, :, 1] = 30.0
        h[2, :, 0] = -30.0
        loss, _ = infonce_loss(h, tau_frames=1)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(10)
        h = torch.tensor(rng.normal(scale=0.3, size=(2, 3, 4)))
        tau = 1
        loss, n_terms = infonce_loss(h, tau_frames=tau)

        # oracle: explicit loop over every (t, anchor, candidate)
        total = 0.0
        count = 0
        hn = h.numpy()
        for t in range(tau, 3):
            for u in range(2):
                pos = hn[u, t] @ hn[u, t - tau]
                denom = sum(
                    math.exp(hn[v, t] @ hn[u, t - tau]) for v in range(2)
                )
                total += -(pos - math.log(denom))
                count += 1
        assert n_terms == count
        assert loss.item() == pytest.approx(total / count, abs=1e-6)

    def test_short_sequences_yield_no_loss(self):
        h = torch.ones(4, 2, 3)
        loss, n_terms = infonce_loss(h, tau_frames=2)
        assert loss is None and n_terms == 0

    def test_non_negative_on_random_inputs(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            b = int(rng.integers(2, 6))
            t = int(rng.integers(2, 9))
            h = torch.tensor(rng.normal(size=(b, t, 5)))
            loss, _ = infonce_loss(h, tau_frames=1)
            assert loss.item() >= 0.0

    def test_cpc_loss_over_content_sequences(self):
        model = build_fvae(TINY, seed=3)
        rng = np.random.default_rng(12)
        contents = [
            encode_content(random_feat(rng, 40, utt=f"u{i}"), model) for i in range(3)
        ]
        value = cpc_loss(contents, model)
        assert value is not None and value >= 0.0
        emb = cpc_embeddings(contents[0], model)
        assert emb.vectors.shape == (20 - 3, 6)  # M - (rf - 1)

    def test_cpc_loss_skips_short_batch(self):
        model = build_fvae(TINY, seed=3)
        rng = np.random.default_rng(13)
        contents = [encode_content(random_feat(rng, 6, utt=f"u{i}"), model) for i in range(2)]
        assert cpc_loss(contents, model) is None


class TestGaussianKL:
    def test_standard_normal_has_zero_divergence(self):
        kl = gaussian_kl(np.zeros((4, 8)), np.zeros((4, 8)))
        assert np.allclose(kl, 0.0)

    def test_unit_variance_reduces_to_half_squared_mean(self):
        rng = np.random.default_rng(14)
        mu = rng.normal(size=(6, 5))
        kl = gaussian_kl(mu, np.zeros_like(mu))
        assert np.allclose(kl, 0.5 * (mu**2).sum(axis=1))

    def test_non_negative(self):
        rng = np.random.default_rng(15)
        kl = gaussian_kl(rng.normal(size=(50, 4)), rng.uniform(-2, 2, size=(50, 4)))
        assert np.all(kl >= 0.0)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(16)
        mu = rng.normal(size=4)
        logvar = rng.uniform(-1, 1, size=4)
        closed = float(gaussian_kl(mu, logvar))
        std = np.exp(0.5 * logvar)
        x = mu + std * rng.standard_normal((100_000, 4))
        log_q = (-0.5 * (((x - mu) / std) ** 2 + np.log(2 * np.pi) + logvar)).sum(axis=1)
        log_p = (-0.5 * (x**2 + np.log(2 * np.pi))).sum(axis=1)
        mc = float((log_q - log_p).mean())
        assert closed == pytest.approx(mc, rel=1e-2)


class TestComputeLosses:
    def test_total_identity(self):
        model = build_fvae(TINY, seed=4)
        rng = np.random.default_rng(17)
        batch = [random_feat(rng, 40, utt=f"u{i}") for i in range(3)]
        generator = torch.Generator().manual_seed(0)
        lb = compute_losses(batch, model, generator)
        cfg = model.config
        assert lb.total == pytest.approx(
            lb.rec + cfg.beta * lb.kld - cfg.cpc_weight * lb.cpc, abs=1e-9
        )

    def test_perfect_reconstruction_gives_zero_rec(self):
        model = build_fvae(TINY, seed=4)
        rng = np.random.default_rng(18)
        batch = [random_feat(rng, 30, utt="only")]
        target = torch.as_tensor(batch[0].values, dtype=model.dtype)
        model.decode_frames = lambda content, style, num_frames: target
        lb = compute_losses(batch, model, torch.Generator().manual_seed(0))
        assert lb.rec == pytest.approx(0.0, abs=1e-12)

    def test_non_finite_loss_names_utterance(self):
        model = build_fvae(TINY, seed=4)
        with torch.no_grad():
            model.decoder.net[0].weight[0, 0, 0] = float("nan")
        rng = np.random.default_rng(19)
        batch = [random_feat(rng, 30, utt="ok"), random_feat(rng, 30, utt="broken")]
        with pytest.raises(NonFiniteLossError) as err:
            compute_losses(batch, model, torch.Generator().manual_seed(0))
        assert err.value.utterance_id == "ok"  # first utterance hits the NaN decoder


class TestTrainingStep:
    def make_batch(self, rng, n=4, frames=40):
        return [random_feat(rng, frames, utt=f"u{i}") for i in range(n)]

    def test_lambda_zero_decouples_cpc_from_content(self):
        model = build_fvae(TINY, seed=5).double()
        rng = np.random.default_rng(20)
        batch = self.make_batch(rng)
        generator = torch.Generator().manual_seed(1)
        from audnorm.fvae import _batch_losses

        rec, kld, cpc_term, _ = _batch_losses(model, batch, generator)
        # with cpc_weight 0 the total never sees the cpc term
        total = rec + model.config.beta * kld - 0.0 * cpc_term
        grads_total = torch.autograd.grad(
            total, list(model.content_encoder.parameters()), retain_graph=True,
            allow_unused=True,
        )
        grads_reckld = torch.autograd.grad(
            rec + model.config.beta * kld, list(model.content_encoder.parameters()),
            allow_unused=True,
        )
        for a, b in zip(grads_total, grads_reckld):
            assert torch.allclose(a, b, atol=0, rtol=0)

    def test_gradient_decomposition_has_adversarial_sign(self):
        """d(total)/d(content w) == d(rec + beta kld)/dw - lambda * d(cpc)/dw."""
        model = build_fvae(TINY, seed=6).double()
        rng = np.random.default_rng(21)
        batch = self.make_batch(rng)
        from audnorm.fvae import _batch_losses

        params = list(model.content_encoder.parameters())

        def grads_of(expr, graph=True):
            return torch.autograd.grad(expr, params, retain_graph=graph, allow_unused=True)

        generator = torch.Generator().manual_seed(2)
        rec, kld, cpc_term, _ = _batch_losses(model, batch, generator)
        cfg = model.config
        total = rec + cfg.beta * kld - cfg.cpc_weight * cpc_term
        g_total = grads_of(total)
        g_reckld = grads_of(rec + cfg.beta * kld)
        g_cpc = grads_of(cpc_term, graph=False)
        for gt, gr, gc in zip(g_total, g_reckld, g_cpc):
            gc = torch.zeros_like(gt) if gc is None else gc
            assert torch.allclose(gt, gr - cfg.cpc_weight * gc, atol=1e-10)

    def test_step_runs_and_updates(self):
        model = build_fvae(TINY, seed=7)
        state = make_train_state(model, seed=0)
        rng = np.random.default_rng(22)
        batch = self.make_batch(rng)
        before = [p.detach().clone() for p in model.parameters()]
        lb = training_step(batch, model, state)
        after = list(model.parameters())
        assert state.step == 1
        assert lb.cpc_terms > 0
        assert any(not torch.equal(a, b) for a, b in zip(before, after))

    def test_seeded_trajectories_are_identical(self):
        rng = np.random.default_rng(23)
        batches = [self.make_batch(rng) for _ in range(3)]

        def run():
            model = build_fvae(TINY, seed=8)
            state = make_train_state(model, seed=3)
            return [training_step(b, model, state) for b in batches]

        first = run()
        second = run()
        for a, b in zip(first, second):
            assert (a.rec, a.kld, a.cpc, a.total) == (b.rec, b.kld, b.cpc, b.total)

    def test_single_utterance_batch_trains_without_cpc(self):
        model = build_fvae(TINY, seed=9)
        state = make_train_state(model, seed=0)
        rng = np.random.default_rng(24)
        lb = training_step(self.make_batch(rng, n=1), model, state)
        assert lb.cpc == 0.0 and lb.cpc_terms == 0
        assert lb.total == pytest.approx(lb.rec + model.config.beta * lb.kld)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_fvae(TINY, seed=10)
        state = make_train_state(model, seed=0)
        rng = np.random.default_rng(25)
        training_step([random_feat(rng, 30, utt=f"u{i}") for i in range(2)], model, state)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, state)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        f = random_feat(rng, 25)
        a = encode_style(f, model)
        b = encode_style(f, loaded)
        assert np.allclose(a.vector, b.vector)
