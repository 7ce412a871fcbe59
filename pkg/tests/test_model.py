"""Structural and shape tests for the model networks."""

import numpy as np
import pytest
import torch

from causal_hmm.errors import ContractError
from causal_hmm.model import (CausalHmm, DiagGaussian, LatentState, ModelConfig,
                              ObservationStep, batch_from_samples, reparameterize)
from causal_hmm.simulator import default_params, sample_dataset


@pytest.fixture(scope="module")
def cfg():
    return ModelConfig(d_s=2, d_v=3, d_z=4, d_A=4, d_B=4, d_x=16,
                       rnn_hidden=16, enc_hidden=32, attr_hidden=8, dec_hidden=32)


@pytest.fixture(scope="module")
def model(cfg):
    torch.manual_seed(0)
    return CausalHmm(cfg)


def _rand_state(cfg, n=5, scale=1.0, seed=1):
    g = torch.Generator().manual_seed(seed)
    mk = lambda d: scale * torch.randn(n, d, generator=g)
    return LatentState(mk(cfg.d_s), mk(cfg.d_v), mk(cfg.d_z))


def _rand_obs(cfg, n=5, scale=1.0, seed=2):
    g = torch.Generator().manual_seed(seed)
    return ObservationStep(scale * torch.randn(n, cfg.d_x, generator=g),
                           scale * torch.randn(n, cfg.d_A, generator=g),
                           scale * torch.randn(n, cfg.d_B, generator=g))


class TestPriorStep:
    def test_shapes(self, model, cfg):
        prev = _rand_state(cfg)
        gs, gv, gz, carry = model.prior_step(prev, torch.randn(5, cfg.d_B),
                                             model.initial_carry(5))
        for g, d in zip((gs, gv, gz), (cfg.d_s, cfg.d_v, cfg.d_z)):
            assert g.mean.shape == (5, d)
            assert g.log_var.shape == (5, d)

    def test_block_parameter_separation(self, model, cfg):
        b = torch.randn(5, cfg.d_B)
        prev = _rand_state(cfg)
        carry = model.initial_carry(5)
        gs0, gv0, gz0, _ = model.prior_step(prev, b, carry)
        bumped = LatentState(prev.s + 1.0, prev.v, prev.z)
        gs1, gv1, gz1, _ = model.prior_step(bumped, b, carry)
        assert not torch.equal(gs0.mean, gs1.mean)
        torch.testing.assert_close(gv0.mean, gv1.mean, rtol=0, atol=0)
        torch.testing.assert_close(gz0.mean, gz1.mean, rtol=0, atol=0)

    def test_prior_factorization_jacobian_zero(self, model, cfg):
        prev = _rand_state(cfg, n=1)
        prev.v.requires_grad_(True)
        prev.z.requires_grad_(True)
        gs, _, _, _ = model.prior_step(prev, torch.randn(1, cfg.d_B),
                                       model.initial_carry(1))
        gv_grad, gz_grad = torch.autograd.grad(
            gs.mean.sum(), [prev.v, prev.z], allow_unused=True)
        assert gv_grad is None and gz_grad is None

    def test_finite_and_clamped_under_fuzzing(self, model, cfg):
        for seed in range(20):
            prev = _rand_state(cfg, n=50, scale=10.0, seed=seed)
            b = 10.0 * torch.randn(50, cfg.d_B,
                                   generator=torch.Generator().manual_seed(seed + 99))
            out = model.prior_step(prev, b, model.initial_carry(50))
            for g in out[:3]:
                assert torch.isfinite(g.mean).all()
                assert g.log_var.abs().max() <= 10.0


class TestPosteriorStep:
    def test_shapes_and_determinism(self, model, cfg):
        prev, obs = _rand_state(cfg), _rand_obs(cfg)
        out1 = model.posterior_step(prev, obs)
        out2 = model.posterior_step(prev, obs)
        for g1, g2, d in zip(out1, out2, (cfg.d_s, cfg.d_v, cfg.d_z)):
            assert g1.mean.shape == (5, d)
            torch.testing.assert_close(g1.mean, g2.mean, rtol=0, atol=0)

    def test_dim_mismatch_rejected(self, model, cfg):
        prev = _rand_state(cfg)
        obs = ObservationStep(torch.randn(5, cfg.d_x + 1), torch.randn(5, cfg.d_A),
                              torch.randn(5, cfg.d_B))
        with pytest.raises(ContractError):
            model.posterior_step(prev, obs)

    def test_finite_for_large_inputs(self, model, cfg):
        prev = _rand_state(cfg, n=20, scale=300.0)
        obs = _rand_obs(cfg, n=20, scale=1000.0)
        for g in model.posterior_step(prev, obs):
            assert torch.isfinite(g.mean).all()
            assert torch.isfinite(g.log_var).all()


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        g = DiagGaussian(torch.randn(4, 3), torch.randn(4, 3))
        torch.testing.assert_close(reparameterize(g, torch.zeros(4, 3)), g.mean)

    def test_unit_logvar_basis_noise(self):
        g = DiagGaussian(torch.randn(1, 3), torch.zeros(1, 3))
        e1 = torch.tensor([[1.0, 0.0, 0.0]])
        torch.testing.assert_close(reparameterize(g, e1), g.mean + e1)

    def test_empirical_variance_matches(self):
        log_var = torch.tensor([0.7, -1.2])
        g = DiagGaussian(torch.zeros(2), log_var)
        gen = torch.Generator().manual_seed(5)
        n = 100_000
        noise = torch.randn(n, 2, generator=gen)
        draws = reparameterize(g, noise)
        var = draws.var(dim=0)
        expected = torch.exp(log_var)
        se = expected * np.sqrt(2.0 / n)
        assert ((var - expected).abs() <= 3 * se).all()

    def test_length_mismatch(self):
        g = DiagGaussian(torch.zeros(3), torch.zeros(3))
        with pytest.raises(ContractError):
            reparameterize(g, torch.zeros(4))


class TestDecoders:
    def test_image_decoder_shape_and_gradients(self, model, cfg):
        h = _rand_state(cfg, n=2)
        for blk in (h.s, h.v, h.z):
            blk.requires_grad_(True)
        g = model.decode_image(h)
        assert g.mean.shape == (2, cfg.d_x)
        grads = torch.autograd.grad(g.mean.sum(), [h.s, h.v, h.z])
        for gr in grads:
            assert gr.abs().max() > 0

    def test_clinical_decoder_signature_excludes_sz(self, model, cfg):
        v = torch.randn(3, cfg.d_v)
        g = model.decode_clinical(v)
        assert g.mean.shape == (3, cfg.d_A)
        import inspect
        assert list(inspect.signature(model.decode_clinical).parameters) == ["v"]

    def test_clinical_decoder_finite_under_fuzz(self, model, cfg):
        for seed in range(10):
            v = 100.0 * torch.randn(30, cfg.d_v,
                                    generator=torch.Generator().manual_seed(seed))
            assert torch.isfinite(model.decode_clinical(v).mean).all()


class TestClassifier:
    def test_zero_weights_give_half(self, cfg):
        torch.manual_seed(0)
        m = CausalHmm(cfg)
        with torch.no_grad():
            m.classifier.weight.zero_()
            m.classifier.bias.zero_()
        p = m.classify(torch.randn(7, cfg.d_s), torch.randn(7, cfg.d_v))
        torch.testing.assert_close(p, torch.full((7,), 0.5))

    def test_probability_range(self, model, cfg):
        for seed in range(10):
            gen = torch.Generator().manual_seed(seed)
            p = model.classify(5 * torch.randn(40, cfg.d_s, generator=gen),
                               5 * torch.randn(40, cfg.d_v, generator=gen))
            assert ((p > 0) & (p < 1)).all()

    def test_separable_toy_reaches_perfect_accuracy(self, cfg):
        torch.manual_seed(1)
        m = CausalHmm(cfg)
        gen = torch.Generator().manual_seed(2)
        s = torch.randn(32, cfg.d_s, generator=gen)
        v = torch.randn(32, cfg.d_v, generator=gen)
        y = (s[:, 0] + v[:, 0] > 0).float()
        opt = torch.optim.Adam(m.classifier.parameters(), lr=0.1)
        for _ in range(400):
            opt.zero_grad()
            p = m.classify(s, v)
            loss = torch.nn.functional.binary_cross_entropy(p, y)
            loss.backward()
            opt.step()
        acc = ((m.classify(s, v) > 0.5).float() == y).float().mean()
        assert acc == 1.0

    def test_tying_is_identity(self, model):
        assert model.predictive_classifier is model.classifier


class TestInformationBlocking:
    def test_classifier_ignores_z_posterior(self, model, cfg):
        prev, obs = _rand_state(cfg, n=1), _rand_obs(cfg, n=1)
        gs, gv, gz = model.posterior_step(prev, obs)
        p = model.classify(gs.mean, gv.mean)
        grad = torch.autograd.grad(p.sum(), gz.mean, allow_unused=True,
                                   retain_graph=True)[0]
        assert grad is None

    def test_clinical_loss_ignores_s_and_z(self, model, cfg):
        prev, obs = _rand_state(cfg, n=1), _rand_obs(cfg, n=1)
        gs, gv, gz = model.posterior_step(prev, obs)
        a = model.decode_clinical(gv.mean)
        loss = ((a.mean - obs.A) ** 2).sum()
        g_s, g_z = torch.autograd.grad(loss, [gs.mean, gz.mean], allow_unused=True)
        assert g_s is None and g_z is None


@pytest.fixture(scope="module")
def batch(cfg):
    p = default_params(0, d_s=cfg.d_s, d_v=cfg.d_v, d_z=cfg.d_z,
                       d_x=cfg.d_x, d_A=cfg.d_A, d_B=cfg.d_B)
    b = sample_dataset(p, 6, 2, 2, p.populations[1])
    return batch_from_samples(b.train, cfg)


class TestRollout:
    def test_lengths(self, model, batch):
        states, gaussians = model.rollout_posterior(
            batch, generator=torch.Generator().manual_seed(0))
        assert len(states) == batch["A"].shape[1]
        assert len(gaussians) == batch["A"].shape[1]

    def test_zero_noise_deterministic(self, model, cfg, batch):
        n, t = batch["A"].shape[0], batch["A"].shape[1]
        noise = torch.zeros(n, t, cfg.d_h)
        s1, _ = model.rollout_posterior(batch, noise=noise)
        s2, _ = model.rollout_posterior(batch, noise=noise)
        torch.testing.assert_close(s1[-1].cat(), s2[-1].cat(), rtol=0, atol=0)

    def test_same_seed_identical(self, model, batch):
        s1, _ = model.rollout_posterior(batch, generator=torch.Generator().manual_seed(3))
        s2, _ = model.rollout_posterior(batch, generator=torch.Generator().manual_seed(3))
        torch.testing.assert_close(s1[-1].cat(), s2[-1].cat(), rtol=0, atol=0)


class TestImageKind:
    def test_conv_round_trip_shapes(self):
        cfg = ModelConfig(d_s=2, d_v=2, d_z=2, d_A=3, d_B=3, obs_kind="image",
                          image_shape=(16, 16), conv_channels=4,
                          enc_hidden=32, rnn_hidden=8, attr_hidden=8)
        torch.manual_seed(0)
        m = CausalHmm(cfg)
        x = torch.randn(3, 1, 16, 16)
        obs = ObservationStep(x, torch.randn(3, 3), torch.randn(3, 3))
        gs, gv, gz = m.posterior_step(m.initial_latent(3), obs)
        assert gs.mean.shape == (3, 2)
        h = LatentState(gs.mean, gv.mean, gz.mean)
        gx = m.decode_image(h)
        assert gx.mean.shape == (3, 1, 16, 16)
