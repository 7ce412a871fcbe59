"""Prediction metrics, identifiability diagnostics, probe protocol,
per-block saliency, and the two-proportion hypothesis test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DegenerateTestError, UndefinedMetricError
from .model import CausalHmm, LatentState, ObservationStep, batch_from_samples
from .simulator import BLOCKS, DatasetBundle, SequenceSample

# ---------------------------------------------------------------------------
# Prediction metrics
# ---------------------------------------------------------------------------

def _labels01(labels) -> np.ndarray:
    return np.where(np.asarray(labels) > 0, 1, 0)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ContractError("accuracy of empty input")
    y = _labels01(labels)
    return float(np.mean((scores >= threshold).astype(int) == y))


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic; ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    y = _labels01(labels)
    if scores.size == 0:
        raise ContractError("auc of empty input")
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty_like(scores)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def two_proportion_z_test(k1: int, n1: int, k2: int, n2: int) -> tuple[float, float]:
    """Pooled two-sample z-test for equality of proportions, two-sided."""
    for k, n in ((k1, n1), (k2, n2)):
        if n < 1 or not 0 <= k <= n:
            raise ContractError(f"invalid counts k={k}, n={n}")
    p1, p2 = k1 / n1, k2 / n2
    pooled = (k1 + k2) / (n1 + n2)
    if pooled in (0.0, 1.0):
        raise DegenerateTestError("pooled proportion is 0 or 1; test undefined")
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    z = (p1 - p2) / se
    p_value = math.erfc(abs(z) / math.sqrt(2.0))
    return z, p_value


# ---------------------------------------------------------------------------
# Windowed prediction
# ---------------------------------------------------------------------------

def predict(model: CausalHmm, sequences, window: tuple[int, int]) -> np.ndarray:
    """Probability of y = +1 from the observations in steps t1..t2 only.

    The rollout starts from the initial-state rule at t1; observations
    outside the window are never read.  Deterministic (zero noise).
    """
    if isinstance(sequences, SequenceSample):
        sequences = [sequences]
    t1, t2 = window
    n_steps = sequences[0].length
    if not 1 <= t1 <= t2 <= n_steps:
        raise ContractError(f"window {window} out of range for T-1={n_steps}")
    clipped = [
        SequenceSample(steps=s.steps[t1 - 1:t2], y=s.y, truth=None)
        for s in sequences
    ]
    batch = batch_from_samples(clipped, model.cfg)
    with torch.no_grad():
        probs = model.predict_proba(batch)
    return probs.numpy()


# ---------------------------------------------------------------------------
# Latent extraction
# ---------------------------------------------------------------------------

def posterior_means(model: CausalHmm, samples: list[SequenceSample]) -> dict:
    """Zero-noise posterior rollout; per block an (n, T-1, d_o) array."""
    batch = batch_from_samples(samples, model.cfg)
    n, n_steps = batch["A"].shape[0], batch["A"].shape[1]
    noise = torch.zeros(n, n_steps, model.cfg.d_h, dtype=batch["A"].dtype)
    with torch.no_grad():
        states, _ = model.rollout_posterior(batch, noise=noise)
    out = {}
    for i, o in enumerate(BLOCKS):
        out[o] = torch.stack([st.block(o) for st in states], dim=1).numpy()
    return out


def truth_blocks(samples: list[SequenceSample]) -> dict:
    if any(s.truth is None for s in samples):
        raise ContractError("samples carry no ground-truth latents")
    out = {}
    for o in BLOCKS:
        out[o] = np.stack([[t.block(o) for t in s.truth] for s in samples])
    return out


# ---------------------------------------------------------------------------
# Affine block alignment (identifiability diagnostic)
# ---------------------------------------------------------------------------

@dataclass
class AlignmentReport:
    r2: dict                      # (learned_block, true_block) -> held-out R^2
    same_block_mean_sv: float     # mean of (s,s) and (v,v)
    max_cross_sv: float           # worst cross-block R^2 involving s or v

    def to_dict(self) -> dict:
        return {
            "r2": {f"{a}->{b}": v for (a, b), v in self.r2.items()},
            "same_block_mean_sv": self.same_block_mean_sv,
            "max_cross_sv": self.max_cross_sv,
        }


def _whiten(fit: np.ndarray, other: np.ndarray, eps: float = 1e-8):
    """PCA-whitening from fit-split statistics; makes the subsequent ridge
    fit invariant under invertible affine maps of the inputs."""
    mu = fit.mean(axis=0)
    cov = np.cov(fit - mu, rowvar=False, bias=True)
    cov = np.atleast_2d(cov)
    w, u = np.linalg.eigh(cov)
    w = np.maximum(w, eps)
    trans = u @ np.diag(w ** -0.5) @ u.T
    return (fit - mu) @ trans, (other - mu) @ trans


def _expand_quadratic(arr: np.ndarray) -> np.ndarray:
    """Append all degree-2 monomials of the last axis.

    The alignment targets include squared coordinates, which no affine map
    of the raw features can reach even at perfect recovery; the quadratic
    expansion closes that gap while keeping the score invariant under
    invertible affine maps of the features."""
    outs = [arr]
    d = arr.shape[-1]
    for i in range(d):
        for j in range(i, d):
            outs.append((arr[..., i] * arr[..., j])[..., None])
    return np.concatenate(outs, axis=-1)


def _ridge_r2(x_fit, y_fit, x_out, y_out, penalty: float) -> float:
    """Held-out R^2 of the ridge affine map x -> y, averaged over targets."""
    xf = np.hstack([x_fit, np.ones((x_fit.shape[0], 1))])
    xo = np.hstack([x_out, np.ones((x_out.shape[0], 1))])
    reg = penalty * np.eye(xf.shape[1])
    reg[-1, -1] = 0.0  # no penalty on the intercept
    coef = np.linalg.solve(xf.T @ xf + reg, xf.T @ y_fit)
    resid = y_out - xo @ coef
    ss_res = (resid ** 2).sum(axis=0)
    centered = y_out - y_out.mean(axis=0)
    ss_tot = np.maximum((centered ** 2).sum(axis=0), 1e-12)
    return float(np.mean(1.0 - ss_res / ss_tot))


def block_alignment(model: CausalHmm, bundle: DatasetBundle, *,
                    split: str = "train", penalty: float = 1e-4,
                    learned: dict | None = None) -> AlignmentReport:
    """Held-out R^2 of the best affine map from each learned block's
    posterior means to each true block's sufficient statistics (o, o^2).

    Learned features are quadratically expanded before the fit so the
    squared targets are reachable.  ``learned`` may override the extracted
    posterior means (same layout), which the sanity tests use to feed the
    truth back in.
    """
    samples = bundle.splits[split]
    truth = truth_blocks(samples)
    if learned is None:
        learned = posterior_means(model, samples)
    r2 = {}
    n = None
    for lb in BLOCKS:
        feats = _expand_quadratic(learned[lb].reshape(-1, learned[lb].shape[-1]))
        if n is None:
            n = feats.shape[0]
            half = n // 2
        for tb in BLOCKS:
            t = truth[tb].reshape(-1, truth[tb].shape[-1])
            targets = np.hstack([t, t ** 2])
            xf, xo = _whiten(feats[:half], feats[half:])
            r2[(lb, tb)] = _ridge_r2(xf, targets[:half], xo, targets[half:], penalty)
    same = 0.5 * (r2[("s", "s")] + r2[("v", "v")])
    cross = max(v for (a, b), v in r2.items() if a != b and (a in ("s", "v") or b in ("s", "v")))
    return AlignmentReport(r2=r2, same_block_mean_sv=same, max_cross_sv=cross)


# ---------------------------------------------------------------------------
# Two-step probe protocol
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    epochs: int = 400
    lr: float = 0.05
    seed: int = 0


@dataclass
class ProbeReport:
    metrics: dict   # representation -> split -> {"acc", "auc"}
    drops: dict     # representation -> {"acc", "auc"} (val - test)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "drops": self.drops}


def _final_latents(model: CausalHmm, samples: list[SequenceSample]) -> dict:
    means = posterior_means(model, samples)
    sv = np.concatenate([means["s"][:, -1], means["v"][:, -1]], axis=-1)
    return {"s+v": sv, "z": means["z"][:, -1]}


def _train_probe(features: np.ndarray, y01: np.ndarray, cfg: ProbeConfig,
                 norm: tuple | None = None):
    if norm is None:
        mu = features.mean(axis=0)
        sd = features.std(axis=0) + 1e-8
        norm = (mu, sd)
    x = torch.as_tensor((features - norm[0]) / norm[1], dtype=torch.float32)
    y = torch.as_tensor(y01, dtype=torch.float32)
    torch.manual_seed(cfg.seed)
    probe = torch.nn.Linear(x.shape[1], 1)
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr)
    for _ in range(cfg.epochs):
        opt.zero_grad()
        loss = F.binary_cross_entropy_with_logits(probe(x).squeeze(-1), y)
        loss.backward()
        opt.step()
    probe.eval()
    return probe, norm


def probe_robustness(model: CausalHmm, bundle: DatasetBundle,
                     cfg: ProbeConfig | None = None) -> ProbeReport:
    """Freeze the model, fit fresh linear probes on the final-step latents
    (one on s+v, one on z), and report ACC/AUC on every split with the
    validation-to-test drops."""
    cfg = cfg or ProbeConfig()
    for name, split in bundle.splits.items():
        if not split:
            raise ContractError(f"split {name!r} is empty")
    feats = {name: _final_latents(model, split) for name, split in bundle.splits.items()}
    labels = {name: np.array([(s.y + 1) // 2 for s in split])
              for name, split in bundle.splits.items()}
    metrics: dict = {}
    drops: dict = {}
    for rep in ("s+v", "z"):
        probe, norm = _train_probe(feats["train"][rep], labels["train"], cfg)
        metrics[rep] = {}
        for split in ("train", "val", "test"):
            x = torch.as_tensor((feats[split][rep] - norm[0]) / norm[1],
                                dtype=torch.float32)
            with torch.no_grad():
                scores = torch.sigmoid(probe(x).squeeze(-1)).numpy()
            metrics[rep][split] = {
                "acc": accuracy(scores, labels[split]),
                "auc": auc(scores, labels[split]),
            }
        drops[rep] = {
            k: metrics[rep]["val"][k] - metrics[rep]["test"][k] for k in ("acc", "auc")
        }
    return ProbeReport(metrics=metrics, drops=drops)


# ---------------------------------------------------------------------------
# Per-block saliency
# ---------------------------------------------------------------------------

def _rollout_to_step(model: CausalHmm, batch: dict, step: int) -> dict:
    """Zero-noise rollout through ``step`` (1-based), x requiring grad."""
    x = batch["x"].clone().requires_grad_(True)
    a, b = batch["A"], batch["B_prev"]
    prev = model.initial_latent(a.shape[0])
    posts = None
    for t in range(step):
        posts = model.posterior_step(prev, ObservationStep(x[:, t], a[:, t], b[:, t]))
        prev = LatentState(*(g.mean for g in posts))
    return {"x": x, "posts": posts}


def _normalize_map(m: np.ndarray) -> np.ndarray:
    m = np.maximum(m, 0.0)
    peak = m.max()
    return m / peak if peak > 0 else m


def saliency(model: CausalHmm, sequence: SequenceSample, block: str,
             step: int) -> np.ndarray:
    """Nonnegative heatmap over x_t for the chosen latent block.

    Image kind: gradient-weighted activation map on the last convolutional
    layer w.r.t. the squared norm of the block's posterior mean, upsampled
    to the input size.  Vector kind: per-coordinate input-gradient
    magnitude.  Normalized to [0, 1] with max 1 unless identically zero.
    """
    if block not in ("s", "v", "z"):
        raise ContractError(f"unknown block {block!r}")
    if not 1 <= step <= sequence.length:
        raise ContractError(f"step {step} out of range")
    batch = batch_from_samples([sequence], model.cfg)
    ctx = _rollout_to_step(model, batch, step)
    posts = dict(zip(BLOCKS, ctx["posts"]))
    target = (posts[block].mean ** 2).sum()
    if model.cfg.obs_kind == "image":
        feat = model.x_enc.last_feature_map
        grads = torch.autograd.grad(target, feat, retain_graph=False)[0]
        weights = grads.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * feat).sum(dim=1, keepdim=True))
        cam = F.interpolate(cam, size=model.cfg.image_shape, mode="bilinear",
                            align_corners=False)
        return _normalize_map(cam[0, 0].detach().numpy())
    grads = torch.autograd.grad(target, ctx["x"])[0]
    g = grads[0, step - 1].abs().detach().numpy()
    return _normalize_map(g)
