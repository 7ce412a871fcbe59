"""Ablation-ladder baselines sharing the trainer and evaluation contracts.

Four rungs: a per-step feedforward classifier that ignores dynamics, a
recurrent classifier, a sequential VAE with one undivided latent block and
no attribute inputs, and the same VAE with attribute inputs and a clinical
decoder.  Hidden widths are tuned so each baseline's parameter count stays
within +/-20% of the full model's, keeping the comparison fair.
"""

from __future__ import annotations

from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError
from .model import (CausalHmm, ConvDecoder, ConvEncoder, DiagGaussian,
                    LOG_VAR_MAX, LOG_VAR_MIN, ModelConfig, _mlp, reparameterize)
from .objective import gaussian_log_density, kl_diag_gaussian

PARAM_TOLERANCE = 0.20


class BaselineKind(str, Enum):
    feedforward = "feedforward"
    recurrent = "recurrent"
    seq_vae = "seq_vae"
    seq_vae_att = "seq_vae_att"


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


class _Classifier(nn.Module):
    """Shared skeleton: per-step x encoder + aggregator + prediction head."""

    kind = "feedforward"

    def __init__(self, cfg: ModelConfig, hidden: int):
        super().__init__()
        self.cfg = cfg
        self.hidden = hidden
        if cfg.obs_kind == "image":
            self.x_enc = ConvEncoder(cfg.image_shape, cfg.conv_channels, hidden)
        else:
            self.x_enc = _mlp(cfg.d_x, hidden, hidden, cfg.enc_depth)
        self.head = nn.Sequential(nn.Linear(self._agg_dim(), hidden), nn.SiLU(),
                                  nn.Linear(hidden, 2))

    def _agg_dim(self) -> int:
        return self.hidden

    def _aggregate(self, feats: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _features(self, batch: dict) -> torch.Tensor:
        x = batch["x"]
        n, n_steps = x.shape[0], x.shape[1]
        flat = x.reshape(n * n_steps, *x.shape[2:])
        return self.x_enc(flat).view(n, n_steps, -1)

    def logits(self, batch: dict) -> torch.Tensor:
        return self.head(self._aggregate(self._features(batch)))

    def predict_proba(self, batch: dict) -> torch.Tensor:
        return F.softmax(self.logits(batch), dim=-1)[..., 1]

    def objective(self, batch: dict, n_mc: int, generator=None,
                  warm_scale: float = 1.0):
        logp = F.log_softmax(self.logits(batch), dim=-1)
        total = logp.gather(-1, batch["y01"].unsqueeze(-1)).squeeze(-1)
        return total, {"predictive_logprob": float(total.mean().detach()),
                       "total": float(total.mean().detach())}


class FeedforwardBaseline(_Classifier):
    """Per-step encoder, mean-pooled over steps; no temporal modeling."""

    kind = "feedforward"

    def _aggregate(self, feats):
        return feats.mean(dim=1)


class RecurrentBaseline(_Classifier):
    """Per-step encoder followed by a gated recurrent aggregator."""

    kind = "recurrent"

    def __init__(self, cfg: ModelConfig, hidden: int):
        super().__init__(cfg, hidden)
        self.rnn = nn.GRU(hidden, hidden, batch_first=True)

    def _aggregate(self, feats):
        out, _ = self.rnn(feats)
        return out[:, -1]


class SeqVae(nn.Module):
    """Sequential VAE with a single undivided latent block.

    ``use_attrs`` adds the A/B encoders, feeds B to the prior, and decodes
    A from the whole latent (no separation into blocks).
    """

    def __init__(self, cfg: ModelConfig, hidden: int, use_attrs: bool):
        super().__init__()
        self.cfg = cfg
        self.use_attrs = use_attrs
        self.kind = "seq_vae_att" if use_attrs else "seq_vae"
        d_lat = cfg.d_h
        self.d_lat = d_lat
        if cfg.obs_kind == "image":
            self.x_enc = ConvEncoder(cfg.image_shape, cfg.conv_channels, hidden)
            self.x_dec = ConvDecoder(cfg.image_shape, cfg.conv_channels, d_lat)
        else:
            self.x_enc = _mlp(cfg.d_x, hidden, hidden, cfg.enc_depth)
            self.x_dec = _mlp(d_lat, hidden, cfg.d_x, 3)
        attr = 0
        if use_attrs:
            self.a_enc = nn.Sequential(nn.Linear(cfg.d_A, cfg.attr_hidden), nn.SiLU())
            self.b_enc = nn.Sequential(nn.Linear(cfg.d_B, cfg.attr_hidden), nn.SiLU())
            self.a_dec = _mlp(d_lat, cfg.attr_hidden, cfg.d_A, 2)
            attr = 2 * cfg.attr_hidden
        self.trunk = nn.Sequential(nn.Linear(hidden + attr + d_lat, hidden), nn.SiLU())
        self.post_mean = nn.Linear(hidden, d_lat)
        self.post_log_var = nn.Linear(hidden, d_lat)
        prior_in = d_lat + (cfg.attr_hidden if use_attrs else 0)
        if use_attrs:
            self.prior_b_enc = nn.Sequential(nn.Linear(cfg.d_B, cfg.attr_hidden), nn.SiLU())
        self.prior_cell = nn.GRUCell(prior_in, cfg.rnn_hidden)
        self.prior_mean = nn.Linear(cfg.rnn_hidden, d_lat)
        self.prior_log_var = nn.Linear(cfg.rnn_hidden, d_lat)
        self.prior_carry0 = nn.Parameter(torch.zeros(cfg.rnn_hidden))
        self.classifier = nn.Linear(d_lat, 2)

    def posterior_step(self, prev: torch.Tensor, x, a, b) -> DiagGaussian:
        feats = [self.x_enc(x)]
        if self.use_attrs:
            feats += [self.a_enc(a), self.b_enc(b)]
        feats.append(prev)
        t = self.trunk(torch.cat(feats, dim=-1))
        return DiagGaussian(self.post_mean(t),
                            self.post_log_var(t).clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    def prior_step(self, prev: torch.Tensor, b, carry) -> tuple[DiagGaussian, torch.Tensor]:
        if self.use_attrs:
            inp = torch.cat([prev, self.prior_b_enc(b)], dim=-1)
        else:
            inp = prev
        carry = self.prior_cell(inp, carry)
        return DiagGaussian(self.prior_mean(carry),
                            self.prior_log_var(carry).clamp(LOG_VAR_MIN, LOG_VAR_MAX)), carry

    def rollout(self, batch: dict, noise: torch.Tensor | None = None,
                generator=None):
        x, a, b = batch["x"], batch["A"], batch["B_prev"]
        n, n_steps = a.shape[0], a.shape[1]
        if noise is None:
            noise = torch.randn(n, n_steps, self.d_lat, generator=generator,
                                dtype=a.dtype)
        prev = torch.zeros(n, self.d_lat, dtype=a.dtype)
        states, posts = [], []
        for t in range(n_steps):
            g = self.posterior_step(prev, x[:, t], a[:, t], b[:, t])
            prev = reparameterize(g, noise[:, t])
            states.append(prev)
            posts.append(g)
        return states, posts

    def predict_proba(self, batch: dict) -> torch.Tensor:
        n, n_steps = batch["A"].shape[0], batch["A"].shape[1]
        noise = torch.zeros(n, n_steps, self.d_lat, dtype=batch["A"].dtype)
        states, _ = self.rollout(batch, noise=noise)
        return F.softmax(self.classifier(states[-1]), dim=-1)[..., 1]

    def _predictive(self, batch: dict, n_mc: int, generator=None) -> torch.Tensor:
        n = batch["A"].shape[0]
        big = {k: batch[k].repeat_interleave(n_mc, dim=0)
               for k in ("x", "A", "B_prev")}
        states, _ = self.rollout(big, generator=generator)
        p_plus = F.softmax(self.classifier(states[-1]), dim=-1)[..., 1]
        y01 = batch["y01"].to(p_plus.dtype).repeat_interleave(n_mc, dim=0)
        p_obs = torch.where(y01 > 0.5, p_plus, 1.0 - p_plus)
        return torch.log(p_obs.view(n, n_mc).mean(dim=-1).clamp_min(1e-30))

    def objective(self, batch: dict, n_mc: int, generator=None,
                  warm_scale: float = 1.0):
        x, a, b = batch["x"], batch["A"], batch["B_prev"]
        n, n_steps = a.shape[0], a.shape[1]
        states, posts = self.rollout(batch, generator=generator)
        carry = self.prior_carry0.unsqueeze(0).expand(n, -1)
        prev = torch.zeros(n, self.d_lat, dtype=a.dtype)
        recon_x = torch.zeros(n, dtype=a.dtype)
        recon_a = torch.zeros(n, dtype=a.dtype)
        kl = torch.zeros(n, dtype=a.dtype)
        for t in range(n_steps):
            prior, carry = self.prior_step(prev, b[:, t], carry)
            h = states[t]
            gx = self.x_dec(h)
            recon_x = recon_x + gaussian_log_density(
                x[:, t], DiagGaussian(gx, torch.zeros_like(gx)))
            if self.use_attrs:
                ga = self.a_dec(h)
                recon_a = recon_a + gaussian_log_density(
                    a[:, t], DiagGaussian(ga, torch.zeros_like(ga)))
            kl = kl + kl_diag_gaussian(posts[t], prior)
            prev = h
        pred = self._predictive(batch, n_mc, generator=generator)
        total = pred + recon_x + recon_a - warm_scale * kl
        metrics = {
            "recon_x": float(recon_x.mean().detach()),
            "recon_A": float(recon_a.mean().detach()),
            "kl": float(kl.mean().detach()),
            "predictive_logprob": float(pred.mean().detach()),
            "total": float(total.mean().detach()),
        }
        return total, metrics


_BUILDERS = {
    BaselineKind.feedforward: FeedforwardBaseline,
    BaselineKind.recurrent: RecurrentBaseline,
}


def _build_with_width(kind: BaselineKind, cfg: ModelConfig, width: int) -> nn.Module:
    if kind in _BUILDERS:
        return _BUILDERS[kind](cfg, width)
    if kind == BaselineKind.seq_vae:
        return SeqVae(cfg, width, use_attrs=False)
    if kind == BaselineKind.seq_vae_att:
        return SeqVae(cfg, width, use_attrs=True)
    raise ContractError(f"unknown baseline kind {kind!r}")


def build_baseline(kind: str | BaselineKind, cfg: ModelConfig) -> nn.Module:
    """Instantiate a baseline whose parameter count is within +/-20% of the
    full model's for the same config (width chosen by a deterministic search)."""
    try:
        kind = BaselineKind(kind)
    except ValueError as e:
        raise ContractError(f"unknown baseline kind {kind!r}") from e
    target = count_parameters(CausalHmm(cfg))
    best, best_err, best_width = None, None, None
    for width in range(4, 388, 4):
        model = _build_with_width(kind, cfg, width)
        err = abs(count_parameters(model) - target) / target
        if best_err is None or err < best_err:
            best, best_err, best_width = model, err, width
        if err > best_err and width > 32:
            break  # counts grow monotonically in width; past the optimum
    if best_err > PARAM_TOLERANCE:
        raise ContractError(
            f"could not match parameter budget for {kind.value}: off by {best_err:.2%}")
    return best
