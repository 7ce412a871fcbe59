"""Networks of the causal sequential VAE.

Three parameter-separated gated-recurrent priors (one per latent block),
a shared per-step posterior encoder, decoders for the image/vector and
clinical observations, and the tied final-step classifier.  All forward
maps accept a leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError
from .simulator import SequenceSample

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


@dataclass
class ModelConfig:
    d_s: int = 8
    d_v: int = 8
    d_z: int = 8
    d_A: int = 15
    d_B: int = 16
    obs_kind: str = "vector"        # "vector" | "image"
    d_x: int = 64                   # vector kind only
    image_shape: tuple[int, int] = (16, 16)
    rnn_hidden: int = 32
    enc_hidden: int = 128
    enc_depth: int = 3
    attr_hidden: int = 32
    dec_hidden: int = 128
    conv_channels: int = 16
    n_mc: int = 8
    init_state: str = "zeros"

    def __post_init__(self):
        dims = (self.d_s, self.d_v, self.d_z, self.d_A, self.d_B,
                self.rnn_hidden, self.enc_hidden, self.attr_hidden, self.n_mc)
        if any(int(d) < 1 for d in dims):
            raise ContractError("all ModelConfig dims and n_mc must be >= 1")
        if self.obs_kind not in ("vector", "image"):
            raise ContractError(f"unknown obs_kind {self.obs_kind!r}")
        if self.obs_kind == "image":
            self.image_shape = tuple(self.image_shape)
            self.d_x = int(np.prod(self.image_shape))

    @property
    def d_h(self) -> int:
        return self.d_s + self.d_v + self.d_z

    @property
    def block_dims(self) -> dict:
        return {"s": self.d_s, "v": self.d_v, "z": self.d_z}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["image_shape"] = tuple(d["image_shape"])
        return cls(**d)


@dataclass
class DiagGaussian:
    """Factorized Gaussian with mean and log-variance, shape (..., d)."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ContractError("mean and log_var must have identical shapes")

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_var.detach())


@dataclass
class LatentState:
    s: torch.Tensor
    v: torch.Tensor
    z: torch.Tensor

    def cat(self) -> torch.Tensor:
        return torch.cat([self.s, self.v, self.z], dim=-1)

    def block(self, name: str) -> torch.Tensor:
        return getattr(self, name)


@dataclass
class ObservationStep:
    x: torch.Tensor        # (B, d_x) or (B, 1, H, W)
    A: torch.Tensor        # (B, d_A)
    B_prev: torch.Tensor   # (B, d_B)


def reparameterize(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    """mean + exp(log_var / 2) * noise, differentiable in g's parameters."""
    if noise.shape[-1] != g.mean.shape[-1]:
        raise ContractError(
            f"noise width {noise.shape[-1]} != gaussian width {g.mean.shape[-1]}")
    return g.mean + g.std * noise


def _mlp(d_in: int, hidden: int, d_out: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    w = d_in
    for _ in range(max(depth - 1, 1)):
        layers += [nn.Linear(w, hidden), nn.SiLU()]
        w = hidden
    layers.append(nn.Linear(w, d_out))
    return nn.Sequential(*layers)


class ConvEncoder(nn.Module):
    """Five-layer convolutional stack for the image observation kind."""

    def __init__(self, image_shape: tuple[int, int], channels: int, d_out: int):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c, 3, 2, 1), nn.SiLU(),      # H -> H/2
            nn.Conv2d(c, 2 * c, 3, 2, 1), nn.SiLU(),  # -> H/4
            nn.Conv2d(2 * c, 2 * c, 3, 2, 1), nn.SiLU(),  # -> H/8
            nn.Conv2d(2 * c, 4 * c, 3, 2, 1), nn.SiLU(),  # -> H/16
            nn.Conv2d(4 * c, 4 * c, 3, 1, 1), nn.SiLU(),
        )
        h, w = image_shape
        with torch.no_grad():
            feat = self.net(torch.zeros(1, 1, h, w))
        self.feat_shape = feat.shape[1:]
        self.head = nn.Linear(int(np.prod(self.feat_shape)), d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat = self.net(x)
        self.last_feature_map = feat  # retained for activation-map saliency
        return self.head(feat.flatten(1))


class ConvDecoder(nn.Module):
    """Five-layer deconvolutional stack mirroring :class:`ConvEncoder`."""

    def __init__(self, image_shape: tuple[int, int], channels: int, d_in: int):
        super().__init__()
        c = channels
        h, w = image_shape
        self.h0, self.w0 = h // 16, w // 16
        self.c0 = 4 * c
        self.head = nn.Linear(d_in, self.c0 * self.h0 * self.w0)
        self.net = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 4 * c, 3, 1, 1), nn.SiLU(),
            nn.ConvTranspose2d(4 * c, 2 * c, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(2 * c, 2 * c, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(2 * c, c, 4, 2, 1), nn.SiLU(),
            nn.ConvTranspose2d(c, 1, 4, 2, 1),
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        t = self.head(h).view(-1, self.c0, self.h0, self.w0)
        return self.net(t)


class BlockPrior(nn.Module):
    """Gated recurrent prior over one latent block, conditioned on B."""

    def __init__(self, d_o: int, d_B: int, attr_hidden: int, rnn_hidden: int):
        super().__init__()
        self.d_o = d_o
        self.b_enc = nn.Sequential(nn.Linear(d_B, attr_hidden), nn.SiLU())
        self.cell = nn.GRUCell(d_o + attr_hidden, rnn_hidden)
        self.mean_head = nn.Linear(rnn_hidden, d_o)
        self.log_var_head = nn.Linear(rnn_hidden, d_o)
        self.carry0 = nn.Parameter(torch.zeros(rnn_hidden))

    def initial_carry(self, batch: int) -> torch.Tensor:
        return self.carry0.unsqueeze(0).expand(batch, -1)

    def forward(self, o_prev: torch.Tensor, b_prev: torch.Tensor,
                carry: torch.Tensor) -> tuple[DiagGaussian, torch.Tensor]:
        if o_prev.shape[-1] != self.d_o:
            raise ContractError(f"prev block width {o_prev.shape[-1]} != {self.d_o}")
        inp = torch.cat([o_prev, self.b_enc(b_prev)], dim=-1)
        carry = self.cell(inp, carry)
        mean = self.mean_head(carry)
        log_var = self.log_var_head(carry).clamp(LOG_VAR_MIN, LOG_VAR_MAX)
        return DiagGaussian(mean, log_var), carry


class CausalHmm(nn.Module):
    """Full model: factorized priors, posterior encoder, decoders, classifier."""

    FORMAT_VERSION = 1

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg
        self.priors = nn.ModuleDict({
            o: BlockPrior(cfg.block_dims[o], d.d_B, d.attr_hidden, d.rnn_hidden)
            for o in ("s", "v", "z")
        })
        feat = d.enc_hidden
        if cfg.obs_kind == "image":
            self.x_enc = ConvEncoder(cfg.image_shape, cfg.conv_channels, feat)
        else:
            self.x_enc = _mlp(cfg.d_x, d.enc_hidden, feat, d.enc_depth)
        self.a_enc = nn.Sequential(nn.Linear(d.d_A, d.attr_hidden), nn.SiLU())
        self.b_enc = nn.Sequential(nn.Linear(d.d_B, d.attr_hidden), nn.SiLU())
        trunk_in = feat + 2 * d.attr_hidden + cfg.d_h
        self.trunk = nn.Sequential(nn.Linear(trunk_in, d.enc_hidden), nn.SiLU())
        self.post_heads = nn.ModuleDict({
            f"{o}_{k}": nn.Linear(d.enc_hidden, cfg.block_dims[o])
            for o in ("s", "v", "z") for k in ("mean", "log_var")
        })
        if cfg.obs_kind == "image":
            self.x_dec = ConvDecoder(cfg.image_shape, cfg.conv_channels, cfg.d_h)
        else:
            self.x_dec = _mlp(cfg.d_h, d.dec_hidden, cfg.d_x, 3)
        self.a_dec = _mlp(cfg.d_v, d.attr_hidden, cfg.d_A, 2)
        self.classifier = nn.Linear(cfg.d_s + cfg.d_v, 2)
        # the same module serves the generative and variational roles, which
        # is what forces the classifier log-ratio term to vanish
        assert self.predictive_classifier is self.classifier

    @property
    def predictive_classifier(self) -> nn.Module:
        return self.classifier

    # -- state ----------------------------------------------------------------

    def initial_latent(self, batch: int, device=None) -> LatentState:
        dtype = self.classifier.weight.dtype
        mk = lambda d_o: torch.zeros(batch, d_o, device=device, dtype=dtype)
        return LatentState(mk(self.cfg.d_s), mk(self.cfg.d_v), mk(self.cfg.d_z))

    def initial_carry(self, batch: int) -> dict:
        return {o: self.priors[o].initial_carry(batch) for o in ("s", "v", "z")}

    # -- core ops -------------------------------------------------------------

    def prior_step(self, prev: LatentState, b_prev: torch.Tensor,
                   carry: dict) -> tuple[DiagGaussian, DiagGaussian, DiagGaussian, dict]:
        if b_prev.shape[-1] != self.cfg.d_B:
            raise ContractError(f"B width {b_prev.shape[-1]} != {self.cfg.d_B}")
        out, new_carry = {}, {}
        for o in ("s", "v", "z"):
            out[o], new_carry[o] = self.priors[o](prev.block(o), b_prev, carry[o])
        return out["s"], out["v"], out["z"], new_carry

    def posterior_step(self, prev: LatentState,
                       obs: ObservationStep) -> tuple[DiagGaussian, DiagGaussian, DiagGaussian]:
        if obs.A.shape[-1] != self.cfg.d_A or obs.B_prev.shape[-1] != self.cfg.d_B:
            raise ContractError("observation attribute widths do not match config")
        if self.cfg.obs_kind == "vector" and obs.x.shape[-1] != self.cfg.d_x:
            raise ContractError(f"x width {obs.x.shape[-1]} != {self.cfg.d_x}")
        feat = torch.cat([
            self.x_enc(obs.x),
            self.a_enc(obs.A),
            self.b_enc(obs.B_prev),
            prev.cat(),
        ], dim=-1)
        t = self.trunk(feat)
        out = []
        for o in ("s", "v", "z"):
            mean = self.post_heads[f"{o}_mean"](t)
            log_var = self.post_heads[f"{o}_log_var"](t).clamp(LOG_VAR_MIN, LOG_VAR_MAX)
            out.append(DiagGaussian(mean, log_var))
        return tuple(out)

    def decode_image(self, h: LatentState) -> DiagGaussian:
        """Observation decoder; fixed unit variance (see config docs)."""
        mean = self.x_dec(h.cat())
        return DiagGaussian(mean, torch.zeros_like(mean))

    def decode_clinical(self, v: torch.Tensor) -> DiagGaussian:
        if v.shape[-1] != self.cfg.d_v:
            raise ContractError(f"v width {v.shape[-1]} != {self.cfg.d_v}")
        mean = self.a_dec(v)
        return DiagGaussian(mean, torch.zeros_like(mean))

    def classify(self, s: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Probability of y = +1 from the final disease-causative blocks."""
        if s.shape[-1] != self.cfg.d_s or v.shape[-1] != self.cfg.d_v:
            raise ContractError("classifier input widths do not match config")
        logits = self.classifier(torch.cat([s, v], dim=-1))
        return F.softmax(logits, dim=-1)[..., 1]

    def class_log_probs(self, s: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        logits = self.classifier(torch.cat([s, v], dim=-1))
        return F.log_softmax(logits, dim=-1)

    def rollout_posterior(self, batch: dict, noise: torch.Tensor | None = None,
                          generator: torch.Generator | None = None
                          ) -> tuple[list[LatentState], list[tuple]]:
        """Iterate the posterior over all steps of a batch of sequences.

        ``batch`` is the tensor dict from :func:`batch_from_samples`.  ``noise``
        has shape (B, T-1, d_h); omitted, it is drawn standard normal from
        ``generator`` (zeros would make the rollout deterministic).
        """
        x, a, b = batch["x"], batch["A"], batch["B_prev"]
        n, n_steps = a.shape[0], a.shape[1]
        if n_steps < 1:
            raise ContractError("sequence must have at least one step")
        if noise is None:
            noise = torch.randn(n, n_steps, self.cfg.d_h, generator=generator,
                                dtype=a.dtype)
        prev = self.initial_latent(n, device=a.device)
        states, gaussians = [], []
        splits = [self.cfg.d_s, self.cfg.d_v, self.cfg.d_z]
        for t in range(n_steps):
            gs, gv, gz = self.posterior_step(
                prev, ObservationStep(x[:, t], a[:, t], b[:, t]))
            eps_s, eps_v, eps_z = torch.split(noise[:, t], splits, dim=-1)
            prev = LatentState(
                reparameterize(gs, eps_s),
                reparameterize(gv, eps_v),
                reparameterize(gz, eps_z),
            )
            states.append(prev)
            gaussians.append((gs, gv, gz))
        return states, gaussians


    def predict_proba(self, batch: dict) -> torch.Tensor:
        """Deterministic probability of y = +1: zero-noise posterior rollout
        over the whole window, classifier at the final step."""
        noise = torch.zeros(batch["A"].shape[0], batch["A"].shape[1], self.cfg.d_h,
                            dtype=batch["A"].dtype)
        states, _ = self.rollout_posterior(batch, noise=noise)
        last = states[-1]
        return self.classify(last.s, last.v)


def batch_from_samples(samples: list[SequenceSample], cfg: ModelConfig | None = None,
                       dtype=torch.float32) -> dict:
    """Stack sequences into tensors: x (B, T-1, ...), A, B_prev, y01 in {0,1}."""
    if not samples:
        raise ContractError("empty sample list")
    n_steps = samples[0].length
    if any(s.length != n_steps for s in samples):
        raise ContractError("all sequences in a batch must share the horizon")
    x = np.stack([[st["x"] for st in s.steps] for s in samples])
    a = np.stack([[st["A"] for st in s.steps] for s in samples])
    b = np.stack([[st["B_prev"] for st in s.steps] for s in samples])
    y01 = np.array([(s.y + 1) // 2 for s in samples], dtype=np.int64)
    x_t = torch.as_tensor(x, dtype=dtype)
    if cfg is not None and cfg.obs_kind == "image":
        h, w = cfg.image_shape
        x_t = x_t.view(x_t.shape[0], n_steps, 1, h, w)
    return {
        "x": x_t,
        "A": torch.as_tensor(a, dtype=dtype),
        "B_prev": torch.as_tensor(b, dtype=dtype),
        "y01": torch.as_tensor(y01),
    }
