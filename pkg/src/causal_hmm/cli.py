"""Command-line entry points wiring the modules into reproducible experiments.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 artifact
mismatch.  `CAUSAL_HMM_OUT` overrides the output root.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image

from . import evaluation
from .baselines import build_baseline
from .config import config_hash, load_config
from .dataio import read_dataset, write_dataset
from .errors import (CheckpointError, ConfigurationError, ContractError,
                     CorruptDatasetError, NumericalError, SchemaVersionError)
from .evaluation import (ProbeConfig, block_alignment, predict,
                         probe_robustness, two_proportion_z_test)
from .model import CausalHmm, ModelConfig, batch_from_samples
from .simulator import benchmark_params, default_params, sample_dataset
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train


def _run(fn):
    try:
        fn()
    except (ConfigurationError, ContractError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except NumericalError as e:
        click.echo(f"numerical failure: {e}", err=True)
        sys.exit(3)
    except (CheckpointError, CorruptDatasetError, SchemaVersionError) as e:
        click.echo(f"artifact mismatch: {e}", err=True)
        sys.exit(4)


def _out_root(cfg: dict) -> Path:
    return Path(os.environ.get("CAUSAL_HMM_OUT", cfg["paths"]["out_dir"]))


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _build_params(cfg: dict):
    s = cfg["scm"]
    factory = benchmark_params if s.get("tuned", True) else default_params
    return factory(
        seed=s["seed"], d_s=s["d_s"], d_v=s["d_v"], d_z=s["d_z"],
        d_x=s["d_x"], d_A=s["d_A"], d_B=s["d_B"], T=s["T"],
        sigma_x=s["sigma_x"], sigma_A=s["sigma_A"], y_scale=s["y_scale"],
        obs_kind=s["obs_kind"],
    )


def _model_config(cfg: dict, manifest: dict) -> ModelConfig:
    m = cfg["model"]
    dims = manifest["dims"]
    kwargs = dict(
        d_s=m["d_s"], d_v=m["d_v"], d_z=m["d_z"],
        d_A=dims["d_A"], d_B=dims["d_B"],
        obs_kind=manifest["obs_kind"], d_x=dims["d_x"],
        rnn_hidden=m["rnn_hidden"], enc_hidden=m["enc_hidden"],
        enc_depth=m["enc_depth"], attr_hidden=m["attr_hidden"],
        dec_hidden=m["dec_hidden"], conv_channels=m["conv_channels"],
        n_mc=m["n_mc"],
    )
    if manifest.get("image_shape"):
        kwargs["image_shape"] = tuple(manifest["image_shape"])
    return ModelConfig(**kwargs)


def _build_model(kind: str, mcfg: ModelConfig):
    if kind == "causal_hmm":
        return CausalHmm(mcfg)
    return build_baseline(kind, mcfg)


def _binary_coord_counts(samples, coord: int = 0):
    vals = np.array([s.steps[0]["B_prev"][coord] for s in samples])
    return int((vals > 0.5).sum()), len(samples)


def _disease_counts(samples):
    return sum(1 for s in samples if s.y == 1), len(samples)


_cfg_opts = [
    click.option("--config", "config_path", required=True,
                 type=click.Path(), help="experiment config YAML"),
    click.option("--set", "overrides", multiple=True,
                 help="dotted-key override, e.g. train.epochs=10"),
]


def _with_cfg_opts(fn):
    for opt in reversed(_cfg_opts):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Causal hidden Markov model experiment toolkit."""


@main.command("generate")
@_with_cfg_opts
def cmd_generate(config_path, overrides):
    def body():
        cfg = load_config(config_path, overrides)
        params = _build_params(cfg)
        counts = cfg["scm"]["counts"]
        shift = params.populations[1]
        bundle = sample_dataset(params, counts["train"], counts["val"],
                                counts["test"], shift)
        out = Path(cfg["paths"]["dataset_dir"])
        write_dataset(bundle, out)
        man = bundle.manifest
        click.echo(f"dataset written to {out}")
        click.echo(f"dims={man['dims']} T={man['T']} counts={man['counts']} "
                   f"seed={man['seed']}")
        click.echo(f"params_hash={man['params_hash']}")
        if bundle.test:
            k1, n1 = _binary_coord_counts(bundle.train)
            k2, n2 = _binary_coord_counts(bundle.test)
            z, p = two_proportion_z_test(k1, n1, k2, n2)
            click.echo(f"shifted-attribute two-proportion test: z={z:.4f} p={p:.6g}")
            k1, n1 = _disease_counts(bundle.train)
            k2, n2 = _disease_counts(bundle.test)
            z, p = two_proportion_z_test(k1, n1, k2, n2)
            click.echo(f"disease-rate two-proportion test: z={z:.4f} p={p:.6g}")
    _run(body)


@main.command("train")
@_with_cfg_opts
def cmd_train(config_path, overrides):
    def body():
        cfg = load_config(config_path, overrides)
        bundle = read_dataset(cfg["paths"]["dataset_dir"])
        mcfg = _model_config(cfg, bundle.manifest)
        out = _out_root(cfg)
        out.mkdir(parents=True, exist_ok=True)
        h = config_hash(cfg)
        hash_file = out / "config_hash.txt"
        if hash_file.exists() and hash_file.read_text().strip() != h:
            raise CheckpointError(
                f"output dir {out} was produced by a different config; refusing to resume")
        hash_file.write_text(h + "\n")
        kind = cfg["model"]["kind"]
        tc = cfg["train"]
        per_seed = []
        n_steps = bundle.manifest["T"] - 1
        for seed in cfg["seeds"]:
            torch.manual_seed(seed)
            model = _build_model(kind, mcfg)
            tcfg = TrainConfig(epochs=tc["epochs"], batch_size=tc["batch_size"],
                               lr=tc["lr"], clip_norm=tc["clip_norm"], seed=seed,
                               patience=tc["patience"], n_mc_train=tc["n_mc_train"],
                               n_mc_eval=tc["n_mc_eval"],
                               warmup_epochs=tc.get("warmup_epochs", 0))
            result = train(model, bundle, tcfg)
            seed_dir = out / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, seed_dir / "checkpoint.pt", kind=kind)
            with open(seed_dir / "history.jsonl", "w") as f:
                for rec in result.history:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
            test_probs = predict(model, bundle.test, (1, n_steps)) if bundle.test else None
            rec = {
                "seed": seed,
                "best_epoch": result.best_epoch,
                "val_auc": result.best_val_auc,
                "val_acc": result.history[result.best_epoch]["val_acc"],
            }
            if test_probs is not None:
                labels = [s.y for s in bundle.test]
                rec["test_acc"] = evaluation.accuracy(test_probs, labels)
                rec["test_auc"] = evaluation.auc(test_probs, labels)
            per_seed.append(rec)
            click.echo(f"seed {seed}: best epoch {rec['best_epoch']} "
                       f"val_auc={rec['val_auc']:.4f} "
                       + (f"test_auc={rec['test_auc']:.4f}" if "test_auc" in rec else ""))
        summary = {"model_kind": kind, "seeds": cfg["seeds"], "per_seed": per_seed}
        for key in ("val_acc", "val_auc", "test_acc", "test_auc"):
            vals = [r[key] for r in per_seed if key in r]
            if vals:
                summary[f"{key}_mean"] = float(np.mean(vals))
                summary[f"{key}_std"] = float(np.std(vals))
        _write_json(out / "summary.json", summary)
        click.echo(f"summary written to {out / 'summary.json'}")
    _run(body)


def _window_grid(cfg: dict, n_steps: int):
    win = cfg["eval"]["windows"]
    if win == "all":
        return [(t1, t2) for t1 in range(1, n_steps + 1)
                for t2 in range(t1, n_steps + 1)]
    grid = [(int(a), int(b)) for a, b in win]
    for t1, t2 in grid:
        if not 1 <= t1 <= t2 <= n_steps:
            raise ConfigurationError(f"window ({t1},{t2}) out of range")
    return grid


@main.command("eval")
@_with_cfg_opts
@click.option("--checkpoint", required=True, type=click.Path())
def cmd_eval(config_path, overrides, checkpoint):
    def body():
        cfg = load_config(config_path, overrides)
        bundle = read_dataset(cfg["paths"]["dataset_dir"])
        mcfg = _model_config(cfg, bundle.manifest)
        model = load_checkpoint(checkpoint, expected_config=mcfg)
        n_steps = bundle.manifest["T"] - 1
        rows = []
        for t1, t2 in _window_grid(cfg, n_steps):
            row = {"t1": t1, "t2": t2}
            for split, samples in bundle.splits.items():
                if not samples:
                    continue
                probs = predict(model, samples, (t1, t2))
                labels = [s.y for s in samples]
                row[f"{split}_acc"] = evaluation.accuracy(probs, labels)
                row[f"{split}_auc"] = evaluation.auc(probs, labels)
            rows.append(row)
            click.echo(" ".join(f"{k}={v}" if isinstance(v, int) else f"{k}={v:.4f}"
                                for k, v in row.items()))
        out = _out_root(cfg)
        _write_json(out / "eval_report.json", {"windows": rows})
        click.echo(f"report written to {out / 'eval_report.json'}")
    _run(body)


@main.command("probe")
@_with_cfg_opts
@click.option("--checkpoint", required=True, type=click.Path())
def cmd_probe(config_path, overrides, checkpoint):
    def body():
        cfg = load_config(config_path, overrides)
        bundle = read_dataset(cfg["paths"]["dataset_dir"])
        mcfg = _model_config(cfg, bundle.manifest)
        model = load_checkpoint(checkpoint, expected_config=mcfg)
        p = cfg["eval"]["probe"]
        report = probe_robustness(model, bundle,
                                  ProbeConfig(epochs=p.get("epochs", 400),
                                              lr=p.get("lr", 0.05),
                                              seed=p.get("seed", 0)))
        out = _out_root(cfg)
        _write_json(out / "probe_report.json", report.to_dict())
        for rep, d in report.drops.items():
            click.echo(f"{rep}: val-test drop acc={d['acc']:.4f} auc={d['auc']:.4f}")
        click.echo(f"report written to {out / 'probe_report.json'}")
    _run(body)


@main.command("align")
@_with_cfg_opts
@click.option("--checkpoint", required=True, type=click.Path())
def cmd_align(config_path, overrides, checkpoint):
    def body():
        cfg = load_config(config_path, overrides)
        bundle = read_dataset(cfg["paths"]["dataset_dir"])
        mcfg = _model_config(cfg, bundle.manifest)
        model = load_checkpoint(checkpoint, expected_config=mcfg)
        a = cfg["eval"]["align"]
        report = block_alignment(model, bundle, split=a.get("split", "train"),
                                 penalty=a.get("penalty", 1e-4))
        out = _out_root(cfg)
        _write_json(out / "align_report.json", report.to_dict())
        for (lb, tb), r2 in sorted(report.r2.items()):
            click.echo(f"R2[{lb}->{tb}] = {r2:.4f}")
        click.echo(f"report written to {out / 'align_report.json'}")
    _run(body)


@main.command("saliency")
@_with_cfg_opts
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--ids", required=True, help="comma-separated sequence indices")
@click.option("--split", default="test", show_default=True)
def cmd_saliency(config_path, overrides, checkpoint, ids, split):
    def body():
        cfg = load_config(config_path, overrides)
        bundle = read_dataset(cfg["paths"]["dataset_dir"])
        mcfg = _model_config(cfg, bundle.manifest)
        model = load_checkpoint(checkpoint, expected_config=mcfg)
        sal_cfg = cfg["eval"]["saliency"]
        samples = bundle.splits[split]
        n_steps = bundle.manifest["T"] - 1
        step = sal_cfg.get("step", "last")
        step = n_steps if step == "last" else int(step)
        out = _out_root(cfg) / "saliency"
        out.mkdir(parents=True, exist_ok=True)
        for sid in (int(i) for i in ids.split(",")):
            if not 0 <= sid < len(samples):
                raise ContractError(f"sequence id {sid} out of range for {split}")
            for block in sal_cfg.get("blocks", ["s", "z"]):
                smap = evaluation.saliency(model, samples[sid], block, step)
                img = smap if smap.ndim == 2 else smap[None, :]
                Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(
                    out / f"{split}_{sid}_t{step}_{block}.png")
                _write_json(out / f"{split}_{sid}_t{step}_{block}.json",
                            {"block": block, "step": step,
                             "values": [float(v) for v in smap.ravel()],
                             "shape": list(smap.shape)})
                click.echo(f"wrote saliency for sequence {sid} block {block}")
    _run(body)


if __name__ == "__main__":
    main()
