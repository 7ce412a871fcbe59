"""Dataset directory serialization.

Layout: ``manifest.json`` plus one newline-delimited JSON record file per
split.  Floats are written with 17 significant digits (lossless for float64);
the manifest stores a sha256 per split file and is checked on read.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CorruptDatasetError, SchemaVersionError
from .simulator import DatasetBundle, SequenceSample, TruthState

SCHEMA_VERSION = 1

_SPLITS = ("train", "val", "test")


def _enc_floats(a: np.ndarray) -> list:
    return [format(float(v), ".17g") for v in np.asarray(a).ravel()]


def _dec_floats(vals: list) -> np.ndarray:
    return np.array([float(v) for v in vals], dtype=np.float64)


def _encode_sample(s: SequenceSample) -> str:
    rec = {
        "steps": [
            {"x": _enc_floats(st["x"]), "A": _enc_floats(st["A"]),
             "B_prev": _enc_floats(st["B_prev"])}
            for st in s.steps
        ],
        "y": s.y,
    }
    if s.truth is not None:
        rec["truth"] = [
            {"s": _enc_floats(t.s), "v": _enc_floats(t.v), "z": _enc_floats(t.z)}
            for t in s.truth
        ]
    return json.dumps(rec, separators=(",", ":"))


def _decode_sample(line: str) -> SequenceSample:
    rec = json.loads(line)
    steps = [
        {"x": _dec_floats(st["x"]), "A": _dec_floats(st["A"]),
         "B_prev": _dec_floats(st["B_prev"])}
        for st in rec["steps"]
    ]
    truth = None
    if "truth" in rec:
        truth = [
            TruthState(s=_dec_floats(t["s"]), v=_dec_floats(t["v"]),
                       z=_dec_floats(t["z"]))
            for t in rec["truth"]
        ]
    return SequenceSample(steps=steps, y=int(rec["y"]), truth=truth)


def write_dataset(bundle: DatasetBundle, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for split in _SPLITS:
        body = "".join(_encode_sample(s) + "\n" for s in bundle.splits[split])
        data = body.encode()
        (path / f"{split}.jsonl").write_bytes(data)
        hashes[split] = hashlib.sha256(data).hexdigest()
    manifest = dict(bundle.manifest)
    manifest["schema_version"] = SCHEMA_VERSION
    manifest["split_hashes"] = hashes
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path: str | Path) -> DatasetBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise CorruptDatasetError(f"missing manifest in {path}") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"dataset schema {manifest.get('schema_version')} != {SCHEMA_VERSION}")
    splits = {}
    for split in _SPLITS:
        data = (path / f"{split}.jsonl").read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        if digest != manifest["split_hashes"].get(split):
            raise CorruptDatasetError(f"hash mismatch for split {split!r}")
        lines = data.decode().splitlines()
        samples = [_decode_sample(ln) for ln in lines if ln]
        if len(samples) != manifest["counts"][split]:
            raise CorruptDatasetError(
                f"split {split!r} has {len(samples)} records, manifest says "
                f"{manifest['counts'][split]}")
        splits[split] = samples
    return DatasetBundle(train=splits["train"], val=splits["val"],
                         test=splits["test"], manifest=manifest)


def bundles_equal(a: DatasetBundle, b: DatasetBundle) -> bool:
    """Field-for-field equality of the three splits (manifest not compared)."""
    for split in _SPLITS:
        sa, sb = a.splits[split], b.splits[split]
        if len(sa) != len(sb):
            return False
        for x, y in zip(sa, sb):
            if x.y != y.y or len(x.steps) != len(y.steps):
                return False
            for st_a, st_b in zip(x.steps, y.steps):
                for k in ("x", "A", "B_prev"):
                    if not np.array_equal(st_a[k], st_b[k]):
                        return False
            if (x.truth is None) != (y.truth is None):
                return False
            if x.truth is not None:
                for ta, tb in zip(x.truth, y.truth):
                    for k in ("s", "v", "z"):
                        if not np.array_equal(getattr(ta, k), getattr(tb, k)):
                            return False
    return True
