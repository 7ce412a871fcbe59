"""Optimization loop with validation-based selection and checkpointing."""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass, asdict
from pathlib import Path

import torch

from .errors import CheckpointError, ContractError, NumericalError
from .evaluation import accuracy, auc
from .model import CausalHmm, ModelConfig, batch_from_samples
from .objective import total_objective
from .simulator import DatasetBundle

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    patience: int = 100
    selection: str = "val_auc"
    n_mc_train: int = 8
    n_mc_eval: int = 64
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.clip_norm <= 0:
            raise ContractError("lr must be >= 0 and clip_norm > 0")
        if not 1 <= self.patience <= self.epochs:
            raise ContractError("patience must be in [1, epochs]")
        if self.n_mc_train < 1 or self.n_mc_eval < 1:
            raise ContractError("MC sample counts must be >= 1")
        if self.warmup_epochs < 0:
            raise ContractError("warmup_epochs must be >= 0")


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val_auc: float
    history: list[dict]


def _objective(model, batch, n_mc, generator, warm_scale: float = 1.0):
    if hasattr(model, "objective"):
        return model.objective(batch, n_mc, generator, warm_scale=warm_scale)
    bd = total_objective(model, batch, n_mc, generator)
    total = bd.total
    if warm_scale != 1.0:
        total = total + (1.0 - warm_scale) * (bd.kl_s + bd.kl_v + bd.kl_z).sum(dim=-1)
    return total, bd.to_metrics()


def _split_metrics(model, batch) -> dict:
    with torch.no_grad():
        probs = model.predict_proba(batch)
    labels = batch["y01"].numpy()
    scores = probs.numpy()
    return {"acc": accuracy(scores, labels), "auc": auc(scores, labels)}


def train(model, bundle: DatasetBundle, cfg: TrainConfig) -> TrainResult:
    """Stochastic-gradient ascent on the mean objective.

    Deterministic given ``cfg.seed`` and single-worker data order; selects
    the epoch with the best validation AUC and loads it back into ``model``.
    """
    if not bundle.train or not bundle.val:
        raise ContractError("train and val splits must be nonempty")
    mcfg = model.cfg if isinstance(getattr(model, "cfg", None), ModelConfig) else None
    train_batch = batch_from_samples(bundle.train, mcfg)
    val_batch = batch_from_samples(bundle.val, mcfg)
    n = train_batch["A"].shape[0]

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    order_gen = torch.Generator().manual_seed(cfg.seed + 1)

    best_auc, best_epoch, best_state = -math.inf, -1, None
    history: list[dict] = []
    since_best = 0
    for epoch in range(cfg.epochs):
        model.train()
        if cfg.warmup_epochs > 0:
            warm_scale = min(1.0, (epoch + 1) / cfg.warmup_epochs)
        else:
            warm_scale = 1.0
        perm = torch.randperm(n, generator=order_gen)
        epoch_terms: dict = {}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = {k: v[idx] for k, v in train_batch.items()}
            total, metrics = _objective(model, batch, cfg.n_mc_train, noise_gen,
                                        warm_scale=warm_scale)
            loss = -total.mean()
            if not torch.isfinite(loss):
                bad = [k for k, v in metrics.items() if not math.isfinite(v)]
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}; offending terms: {bad or ['total']}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            for k, v in metrics.items():
                epoch_terms[k] = epoch_terms.get(k, 0.0) + v
            n_batches += 1
        model.eval()
        rec = {"epoch": epoch}
        rec.update({k: v / n_batches for k, v in epoch_terms.items()})
        tm = _split_metrics(model, train_batch)
        vm = _split_metrics(model, val_batch)
        rec["train_acc"], rec["train_auc"] = tm["acc"], tm["auc"]
        rec["val_acc"], rec["val_auc"] = vm["acc"], vm["auc"]
        history.append(rec)
        if rec["val_auc"] > best_auc:
            best_auc, best_epoch = rec["val_auc"], epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return TrainResult(best_state=best_state, best_epoch=best_epoch,
                       best_val_auc=best_auc, history=history)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _encode_state(state_dict: dict) -> dict:
    """Tensors as (dtype, shape, raw bytes) so the pickle stream depends only
    on the values, never on storage identity; keeps checkpoint bytes
    reproducible across runs."""
    out = {}
    for k, v in state_dict.items():
        arr = v.detach().cpu().numpy()
        out[k] = {"dtype": arr.dtype.str, "shape": list(arr.shape),
                  "data": arr.tobytes()}
    return out


def _decode_state(encoded: dict) -> dict:
    import numpy as np
    out = {}
    for k, rec in encoded.items():
        arr = np.frombuffer(rec["data"], dtype=np.dtype(rec["dtype"]))
        out[k] = torch.from_numpy(arr.reshape(rec["shape"]).copy())
    return out


def save_checkpoint(model, path: str | Path, kind: str = "causal_hmm") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "config": model.cfg.to_dict(),
        "state": _encode_state(model.state_dict()),
    }
    with open(path, "wb") as f:
        pickle.dump(payload, f, protocol=4)
    return path


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None):
    path = Path(path)
    try:
        with open(path, "rb") as f:
            payload = pickle.load(f)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {payload['format_version']} != {CHECKPOINT_FORMAT_VERSION}")
    cfg = ModelConfig.from_dict(payload["config"])
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError("checkpoint config does not match the expected config")
    kind = payload.get("kind", "causal_hmm")
    if kind == "causal_hmm":
        model = CausalHmm(cfg)
    else:
        from .baselines import build_baseline
        model = build_baseline(kind, cfg)
    model.load_state_dict(_decode_state(payload["state"]))
    model.eval()
    return model
