"""Tests for the ablation baselines and their parameter budgets."""

import pytest
import torch

from causal_hmm.baselines import (PARAM_TOLERANCE, BaselineKind,
                                  build_baseline, count_parameters)
from causal_hmm.errors import ContractError
from causal_hmm.model import CausalHmm, ModelConfig, batch_from_samples
from causal_hmm.simulator import default_params, sample_dataset
from causal_hmm.trainer import TrainConfig, train


@pytest.fixture(scope="module")
def cfg():
    p = default_params(0)
    return ModelConfig(d_s=2, d_v=2, d_z=2, d_A=p.d_A, d_B=p.d_B, d_x=p.d_x,
                       rnn_hidden=16, enc_hidden=32, enc_depth=2,
                       attr_hidden=8, dec_hidden=32, n_mc=4)


@pytest.fixture(scope="module")
def batch(cfg):
    p = default_params(0)
    bundle = sample_dataset(p, 8, 4, 4, p.populations[0])
    return batch_from_samples(bundle.train, cfg)


ALL_KINDS = ["feedforward", "recurrent", "seq_vae", "seq_vae_att"]


class TestParamBudget:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_within_tolerance_of_full_model(self, cfg, kind):
        torch.manual_seed(0)
        target = count_parameters(CausalHmm(cfg))
        model = build_baseline(kind, cfg)
        rel = abs(count_parameters(model) - target) / target
        assert rel <= PARAM_TOLERANCE

    def test_unknown_kind_rejected(self, cfg):
        with pytest.raises(ContractError):
            build_baseline("transformer", cfg)

    def test_width_search_is_deterministic(self, cfg):
        a = build_baseline("recurrent", cfg)
        b = build_baseline("recurrent", cfg)
        assert a.hidden == b.hidden


class TestInterface:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_predict_proba_contract(self, cfg, batch, kind):
        torch.manual_seed(1)
        model = build_baseline(kind, cfg)
        with torch.no_grad():
            p = model.predict_proba(batch)
        assert p.shape == (batch["A"].shape[0],)
        assert ((p >= 0) & (p <= 1)).all()

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_objective_contract(self, cfg, batch, kind):
        torch.manual_seed(1)
        model = build_baseline(kind, cfg)
        total, metrics = model.objective(batch, 2,
                                         torch.Generator().manual_seed(0))
        assert total.shape == (batch["A"].shape[0],)
        assert torch.isfinite(total).all()
        assert "total" in metrics and "predictive_logprob" in metrics

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_trains_through_shared_loop(self, cfg, kind):
        p = default_params(0)
        bundle = sample_dataset(p, 8, 6, 0, p.populations[0])
        torch.manual_seed(2)
        model = build_baseline(kind, cfg)
        res = train(model, bundle, TrainConfig(epochs=2, batch_size=8,
                                               seed=0, patience=2,
                                               n_mc_train=2, n_mc_eval=2))
        assert len(res.history) == 2


class TestStructuralReductions:
    def test_classifiers_have_no_reconstruction_terms(self, cfg, batch):
        for kind in ("feedforward", "recurrent"):
            torch.manual_seed(0)
            model = build_baseline(kind, cfg)
            _, metrics = model.objective(batch, 2)
            assert "recon_x" not in metrics and "kl" not in metrics

    def test_plain_vae_ignores_attributes(self, cfg, batch):
        torch.manual_seed(0)
        model = build_baseline("seq_vae", cfg)
        _, m1 = model.objective(batch, 1, torch.Generator().manual_seed(9))
        assert m1["recon_A"] == 0.0
        poisoned = dict(batch)
        poisoned["A"] = batch["A"] + 100.0
        poisoned["B_prev"] = batch["B_prev"] - 100.0
        _, m2 = model.objective(poisoned, 1, torch.Generator().manual_seed(9))
        assert m1 == m2
        assert not any(hasattr(model, n) for n in ("a_enc", "b_enc", "a_dec"))

    def test_attribute_vae_uses_attributes(self, cfg, batch):
        torch.manual_seed(0)
        model = build_baseline("seq_vae_att", cfg)
        _, m1 = model.objective(batch, 1, torch.Generator().manual_seed(9))
        assert m1["recon_A"] != 0.0
        poisoned = dict(batch)
        poisoned["A"] = batch["A"] + 100.0
        _, m2 = model.objective(poisoned, 1, torch.Generator().manual_seed(9))
        assert m1["recon_A"] != m2["recon_A"]

    def test_single_latent_has_no_blocks(self, cfg):
        torch.manual_seed(0)
        model = build_baseline("seq_vae", cfg)
        assert model.d_lat == cfg.d_h
        assert not hasattr(model, "priors")

    def test_kind_labels(self, cfg):
        for kind in ALL_KINDS:
            torch.manual_seed(0)
            model = build_baseline(kind, cfg)
            assert model.kind == kind
            assert BaselineKind(kind).value == kind
