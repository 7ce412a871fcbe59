"""Ground-truth structural-causal simulator.

Samples trajectories from a hidden Markov process whose latent state is split
into three blocks (s, v, z), all confounded by per-population attribute
vectors B.  Only s and v feed the final label; v alone feeds the clinical
observation A; all three feed the image/vector observation x.  The simulator
keeps its ground-truth latents so downstream diagnostics can measure how well
a trained model recovers each block.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractError, GenerationError

BLOCKS = ("s", "v", "z")

#: number of sufficient statistics of a diagonal Gaussian (o, o^2)
GAUSSIAN_K = 2

#: smallest singular value counted as nonzero in the rank check
RANK_TOL = 1e-8


def _fmt(x: float) -> float:
    """Round-trip float64 through its 17-significant-digit decimal form."""
    return float(format(float(x), ".17g"))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass
class PopulationSpec:
    """Mixture of discrete B prototypes plus isotropic jitter.

    ``prototypes`` has shape (m, d_B); ``weights`` sums to 1.  By default the
    drawn B vector is held fixed along a sequence; with ``per_step_drift`` the
    jitter is resampled at every step around the same prototype.
    """

    prototypes: np.ndarray
    weights: np.ndarray
    jitter: float = 0.0
    per_step_drift: bool = False

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.prototypes.ndim != 2:
            raise ConfigurationError("prototypes must be a (m, d_B) array")
        if self.weights.shape != (self.prototypes.shape[0],):
            raise ConfigurationError("weights length must match prototype count")
        if np.any(self.weights < 0) or not math.isclose(self.weights.sum(), 1.0, abs_tol=1e-9):
            raise ConfigurationError("weights must be nonnegative and sum to 1")
        if self.jitter < 0:
            raise ConfigurationError("jitter must be >= 0")

    @property
    def n_prototypes(self) -> int:
        return self.prototypes.shape[0]

    def to_dict(self) -> dict:
        return {
            "prototypes": [[_fmt(v) for v in row] for row in self.prototypes],
            "weights": [_fmt(w) for w in self.weights],
            "jitter": _fmt(self.jitter),
            "per_step_drift": self.per_step_drift,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationSpec":
        return cls(
            prototypes=np.array(d["prototypes"], dtype=np.float64),
            weights=np.array(d["weights"], dtype=np.float64),
            jitter=float(d["jitter"]),
            per_step_drift=bool(d["per_step_drift"]),
        )


@dataclass
class BlockMap:
    """Transition map of one latent block.

    Mean: soft-capped affine map of (o_prev, B); the cap keeps the map
    near-affine around the origin while bounding drift.  Log-variance:
    affine in B, so the block's natural parameters genuinely vary with
    the population attributes.
    """

    W: np.ndarray  # (d_o, d_o) recurrence
    U: np.ndarray  # (d_o, d_B) attribute drive of the mean
    b: np.ndarray  # (d_o,)
    V: np.ndarray  # (d_o, d_B) attribute drive of the log-variance
    c: np.ndarray  # (d_o,)
    squash: float | None = None  # None = purely affine mean

    def __post_init__(self):
        for name in ("W", "U", "b", "V", "c"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def mean(self, o_prev: np.ndarray, B: np.ndarray) -> np.ndarray:
        pre = o_prev @ self.W.T + B @ self.U.T + self.b
        if self.squash is None:
            return pre
        return self.squash * np.tanh(pre / self.squash)

    def log_var(self, B: np.ndarray) -> np.ndarray:
        return B @ self.V.T + self.c

    def natural_params(self, o_prev: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Stacked (mu/sigma^2, -1/(2 sigma^2)) per coordinate."""
        mu = self.mean(o_prev, B)
        var = np.exp(self.log_var(B))
        return np.concatenate([mu / var, -0.5 / var], axis=-1)

    def to_dict(self) -> dict:
        return {
            "W": self.W.tolist(), "U": self.U.tolist(), "b": self.b.tolist(),
            "V": self.V.tolist(), "c": self.c.tolist(),
            "squash": self.squash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockMap":
        return cls(W=np.array(d["W"]), U=np.array(d["U"]), b=np.array(d["b"]),
                   V=np.array(d["V"]), c=np.array(d["c"]), squash=d["squash"])


@dataclass
class ScmParams:
    """Full parameterization of the ground-truth generator."""

    d_s: int
    d_v: int
    d_z: int
    d_x: int
    d_A: int
    d_B: int
    T: int
    f_s: BlockMap
    f_v: BlockMap
    f_z: BlockMap
    # Emission x = L1 @ h + emit_gain * L2 @ tanh(h) + noise.  L1 has full
    # column rank and dominates L2, which makes the map injective.
    L1: np.ndarray  # (d_x, D)
    L2: np.ndarray  # (d_x, D)
    emit_gain: float
    Fa: np.ndarray  # (d_A, d_v)
    ba: np.ndarray  # (d_A,)
    w_s: np.ndarray  # (d_s,) label weights
    w_v: np.ndarray  # (d_v,)
    y_bias: float
    y_scale: float
    sigma_x: float
    sigma_A: float
    populations: list[PopulationSpec] = field(default_factory=list)
    seed: int = 0
    obs_kind: str = "vector"  # "vector" | "image"
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("L1", "L2", "Fa", "ba", "w_s", "w_v"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.validate()

    @property
    def d_h(self) -> int:
        return self.d_s + self.d_v + self.d_z

    @property
    def block_dims(self) -> dict:
        return {"s": self.d_s, "v": self.d_v, "z": self.d_z}

    @property
    def block_maps(self) -> dict:
        return {"s": self.f_s, "v": self.f_v, "z": self.f_z}

    @property
    def m_required(self) -> int:
        d = max(self.d_s, self.d_v, self.d_z)
        return d * GAUSSIAN_K + 1

    def validate(self):
        dims = (self.d_s, self.d_v, self.d_z, self.d_x, self.d_A, self.d_B)
        if any(int(d) < 1 for d in dims):
            raise ConfigurationError(f"all dims must be >= 1, got {dims}")
        if self.T < 2:
            raise ConfigurationError(f"T must be >= 2, got {self.T}")
        if self.sigma_x < 0 or self.sigma_A < 0:
            raise ConfigurationError("noise scales must be >= 0")
        if self.obs_kind not in ("vector", "image"):
            raise ConfigurationError(f"unknown obs_kind {self.obs_kind!r}")
        if self.obs_kind == "image":
            if self.image_shape is None or int(np.prod(self.image_shape)) != self.d_x:
                raise ConfigurationError("image_shape must multiply out to d_x")
        if self.L1.shape != (self.d_x, self.d_h):
            raise ConfigurationError("L1 must have shape (d_x, d_s+d_v+d_z)")
        if self.d_h > self.d_x:
            raise ConfigurationError("injective emission needs d_s+d_v+d_z <= d_x")
        if np.linalg.matrix_rank(self.L1) < self.d_h:
            raise ConfigurationError("emission linear part must have full column rank")
        for p in self.populations:
            if p.prototypes.shape[1] != self.d_B:
                raise ConfigurationError("population prototype width must equal d_B")
            if p.n_prototypes < self.m_required:
                raise ConfigurationError(
                    f"population needs >= {self.m_required} prototypes, has {p.n_prototypes}")

    # -- emissions -----------------------------------------------------------

    def emit_x_mean(self, h: np.ndarray) -> np.ndarray:
        return h @ self.L1.T + self.emit_gain * (np.tanh(h) @ self.L2.T)

    def emit_a_mean(self, v: np.ndarray) -> np.ndarray:
        return v @ self.Fa.T + self.ba

    def label_logit(self, s: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.y_scale * (s @ self.w_s + v @ self.w_v) + self.y_bias

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "d_s": self.d_s, "d_v": self.d_v, "d_z": self.d_z,
            "d_x": self.d_x, "d_A": self.d_A, "d_B": self.d_B, "T": self.T,
            "f_s": self.f_s.to_dict(), "f_v": self.f_v.to_dict(), "f_z": self.f_z.to_dict(),
            "L1": self.L1.tolist(), "L2": self.L2.tolist(), "emit_gain": self.emit_gain,
            "Fa": self.Fa.tolist(), "ba": self.ba.tolist(),
            "w_s": self.w_s.tolist(), "w_v": self.w_v.tolist(),
            "y_bias": self.y_bias, "y_scale": self.y_scale,
            "sigma_x": self.sigma_x, "sigma_A": self.sigma_A,
            "populations": [p.to_dict() for p in self.populations],
            "seed": self.seed,
            "obs_kind": self.obs_kind,
            "image_shape": list(self.image_shape) if self.image_shape else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScmParams":
        d = dict(d)
        for k in ("f_s", "f_v", "f_z"):
            d[k] = BlockMap.from_dict(d[k])
        d["populations"] = [PopulationSpec.from_dict(p) for p in d["populations"]]
        if d.get("image_shape") is not None:
            d["image_shape"] = tuple(d["image_shape"])
        for k in ("L1", "L2", "Fa", "ba", "w_s", "w_v"):
            d[k] = np.array(d[k], dtype=np.float64)
        return cls(**d)

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class TruthState:
    """Ground-truth latent blocks at one step."""

    s: np.ndarray
    v: np.ndarray
    z: np.ndarray

    def block(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class SequenceSample:
    """Observed trajectory {x_t, A_t, B_{t-1}} for t = 1..T-1 plus label y_T."""

    steps: list[dict]          # each {"x", "A", "B_prev"} as float64 arrays
    y: int                     # label in {-1, +1}
    truth: list[TruthState] | None = None

    def __post_init__(self):
        if self.y not in (-1, 1):
            raise ContractError(f"label must be in {{-1, +1}}, got {self.y}")

    @property
    def length(self) -> int:
        return len(self.steps)

    def without_truth(self) -> "SequenceSample":
        return SequenceSample(steps=self.steps, y=self.y, truth=None)


@dataclass
class DatasetBundle:
    train: list[SequenceSample]
    val: list[SequenceSample]
    test: list[SequenceSample]
    manifest: dict

    @property
    def splits(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _draw_population_b(pop: PopulationSpec, rng: np.random.Generator, n_steps: int) -> np.ndarray:
    """B_{t-1} for t = 1..n_steps, shape (n_steps, d_B)."""
    idx = rng.choice(pop.n_prototypes, p=pop.weights)
    proto = pop.prototypes[idx]
    if pop.per_step_drift:
        return proto + pop.jitter * rng.standard_normal((n_steps, proto.shape[0]))
    b = proto + pop.jitter * rng.standard_normal(proto.shape[0])
    return np.tile(b, (n_steps, 1))


def sample_sequence(params: ScmParams, population: PopulationSpec,
                    rng: np.random.Generator) -> SequenceSample:
    """Ancestral sampling of one trajectory in DAG order.

    Initial latent state is the zero vector; at each step the three blocks
    are drawn independently given (previous state, B_{t-1}), then x_t and
    A_t are emitted; the label is drawn from the sigmoid logit of the final
    (s, v).
    """
    n_steps = params.T - 1
    b_seq = _draw_population_b(population, rng, n_steps)
    prev = {o: np.zeros(d) for o, d in params.block_dims.items()}
    steps, truth = [], []
    for t in range(1, params.T):
        b_prev = b_seq[t - 1]
        cur = {}
        for o in BLOCKS:
            m = params.block_maps[o]
            mu = m.mean(prev[o], b_prev)
            sd = np.exp(0.5 * m.log_var(b_prev))
            cur[o] = mu + sd * rng.standard_normal(mu.shape)
        h = np.concatenate([cur["s"], cur["v"], cur["z"]])
        x = params.emit_x_mean(h) + params.sigma_x * rng.standard_normal(params.d_x)
        a = params.emit_a_mean(cur["v"]) + params.sigma_A * rng.standard_normal(params.d_A)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a)) and np.all(np.isfinite(h))):
            raise GenerationError(f"non-finite sample at step t={t}")
        steps.append({"x": x, "A": a, "B_prev": b_prev})
        truth.append(TruthState(s=cur["s"], v=cur["v"], z=cur["z"]))
        prev = cur
    logit = params.label_logit(truth[-1].s, truth[-1].v)
    y = 1 if rng.random() < sigmoid(logit) else -1
    return SequenceSample(steps=steps, y=y, truth=truth)


def sample_latents_batch(params: ScmParams, population: PopulationSpec,
                         n: int, rng: np.random.Generator) -> tuple[dict, np.ndarray]:
    """Vectorized latent trajectories for moment/property checks.

    Returns ({block: (n, T-1, d_o)}, B of shape (n, T-1, d_B)).  Faster than
    n calls to :func:`sample_sequence` but drawing order differs, so it is
    not bit-compatible with it.
    """
    n_steps = params.T - 1
    idx = rng.choice(population.n_prototypes, p=population.weights, size=n)
    proto = population.prototypes[idx]
    if population.per_step_drift:
        b = proto[:, None, :] + population.jitter * rng.standard_normal(
            (n, n_steps, params.d_B))
    else:
        b = proto + population.jitter * rng.standard_normal((n, params.d_B))
        b = np.repeat(b[:, None, :], n_steps, axis=1)
    prev = {o: np.zeros((n, d)) for o, d in params.block_dims.items()}
    out = {o: np.empty((n, n_steps, d)) for o, d in params.block_dims.items()}
    for t in range(n_steps):
        for o in BLOCKS:
            m = params.block_maps[o]
            mu = m.mean(prev[o], b[:, t])
            sd = np.exp(0.5 * m.log_var(b[:, t]))
            cur = mu + sd * rng.standard_normal(mu.shape)
            out[o][:, t] = cur
            prev[o] = cur
    return out, b


def sequence_rng(seed: int, split_index: int, sample_index: int) -> np.random.Generator:
    """Per-sequence generator from the documented seed-splitting rule."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), split_index, sample_index]))


_SPLIT_INDEX = {"train": 0, "val": 1, "test": 2}


def sample_dataset(params: ScmParams, n_train: int, n_val: int, n_test: int,
                   shift: PopulationSpec) -> DatasetBundle:
    """Train/val from ``params.populations[0]``, test from ``shift``."""
    if n_train < 1 or n_val < 1 or n_test < 0:
        raise ContractError("split counts must be >= 1 (test may be 0)")
    if not params.populations:
        raise ConfigurationError("params carries no base population spec")
    base = params.populations[0]
    splits = {}
    for name, n, pop in (("train", n_train, base), ("val", n_val, base),
                         ("test", n_test, shift)):
        si = _SPLIT_INDEX[name]
        splits[name] = [
            sample_sequence(params, pop, sequence_rng(params.seed, si, i))
            for i in range(n)
        ]
    manifest = {
        "schema_version": 1,
        "dims": {"d_s": params.d_s, "d_v": params.d_v, "d_z": params.d_z,
                 "d_x": params.d_x, "d_A": params.d_A, "d_B": params.d_B},
        "T": params.T,
        "obs_kind": params.obs_kind,
        "image_shape": list(params.image_shape) if params.image_shape else None,
        "seed": params.seed,
        "counts": {"train": n_train, "val": n_val, "test": n_test},
        "populations": {"train": base.to_dict(), "val": base.to_dict(),
                        "test": shift.to_dict()},
        "params_hash": params.content_hash(),
    }
    return DatasetBundle(train=splits["train"], val=splits["val"],
                         test=splits["test"], manifest=manifest)


# ---------------------------------------------------------------------------
# Rank condition
# ---------------------------------------------------------------------------

@dataclass
class RankReport:
    full_rank: bool
    per_block: dict  # block -> {"full_rank": bool, "singular_values": np.ndarray}


def check_rank_condition(params: ScmParams, t: int = 1,
                         population: PopulationSpec | None = None) -> RankReport:
    """Diversity check on the attribute-conditioned natural parameters.

    For each block builds the matrix of natural-parameter differences across
    the population's B prototypes (previous state fixed at the zero initial
    state; the maps are time-homogeneous, so ``t`` only labels the report)
    and tests whether its smallest singular value exceeds ``RANK_TOL``.
    """
    pop = population if population is not None else params.populations[0]
    m = params.m_required
    if pop.n_prototypes < m:
        raise ContractError(
            f"rank check needs >= {m} prototypes, population has {pop.n_prototypes}")
    per_block = {}
    ok = True
    for o in BLOCKS:
        bm = params.block_maps[o]
        o_prev = np.zeros((pop.n_prototypes, params.block_dims[o]))
        gamma = bm.natural_params(o_prev, pop.prototypes)  # (m, 2 d_o)
        diffs = (gamma[1:] - gamma[0]).T  # (2 d_o, m-1)
        svals = np.linalg.svd(diffs, compute_uv=False)
        full = bool(svals.size > 0 and svals.min() > RANK_TOL)
        per_block[o] = {"full_rank": full, "singular_values": svals}
        ok = ok and full
    return RankReport(full_rank=ok, per_block=per_block)


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------

def _random_block_map(rng: np.random.Generator, d_o: int, d_B: int, *,
                      recur: float, drive: float, logvar_base: float,
                      logvar_drive: float, squash: float | None) -> BlockMap:
    W = recur * np.eye(d_o) + 0.1 * rng.standard_normal((d_o, d_o))
    U = drive * rng.standard_normal((d_o, d_B))
    b = 0.1 * rng.standard_normal(d_o)
    V = logvar_drive * rng.standard_normal((d_o, d_B))
    c = np.full(d_o, logvar_base)
    return BlockMap(W=W, U=U, b=b, V=V, c=c, squash=squash)


def _block_emission(rng: np.random.Generator, d_x: int, dims: dict,
                    extra_to: str = "z") -> tuple[np.ndarray, np.ndarray]:
    """Block-localized emission: each latent block owns a contiguous slice of
    x coordinates, so saliency for a block has a known true support.

    ``extra_to`` names the block that absorbs any leftover x coordinates
    after the even split; widening a block makes it easier to pin down from
    observations alone.
    """
    d_h = sum(dims.values())
    widths = {}
    base = d_x // d_h
    for o in BLOCKS:
        widths[o] = base * dims[o]
    widths[extra_to] += d_x - sum(widths.values())
    L1 = np.zeros((d_x, d_h))
    L2 = np.zeros((d_x, d_h))
    row = 0
    col = 0
    for o in BLOCKS:
        d_o, w = dims[o], widths[o]
        blk = rng.standard_normal((w, d_o))
        # lift the smallest singular value so the full map stays injective
        uu, ss, vv = np.linalg.svd(blk, full_matrices=False)
        blk = uu @ np.diag(np.maximum(ss, 1.0)) @ vv
        L1[row:row + w, col:col + d_o] = blk
        L2[row:row + w, col:col + d_o] = 0.3 * rng.standard_normal((w, d_o))
        row += w
        col += d_o
    return L1, L2


def emission_support(params: ScmParams, extra_to: str = "z") -> dict:
    """x-coordinate slice owned by each block under the block emission.

    Pass the same ``extra_to`` that built the emission (``"z"`` for
    :func:`default_params`, ``"s"`` for :func:`benchmark_params`).
    """
    d_h = params.d_h
    base = params.d_x // d_h
    widths = {o: base * params.block_dims[o] for o in BLOCKS}
    widths[extra_to] += params.d_x - sum(widths.values())
    out, row = {}, 0
    for o in BLOCKS:
        out[o] = slice(row, row + widths[o])
        row += widths[o]
    return out


def make_populations(rng: np.random.Generator, d_B: int, m: int,
                     jitter: float = 0.05) -> tuple[PopulationSpec, PopulationSpec]:
    """Base and shifted populations differing in the weight of a binary
    group coordinate (coordinate 0): base ~ 2:3 in-group, shift ~ 3:1."""
    protos = 0.8 * rng.standard_normal((m, d_B))
    half = max(1, m // 2)
    protos[:half, 0] = 1.0
    protos[half:, 0] = 0.0
    in_group = np.arange(m) < half

    def weights(frac_in: float) -> np.ndarray:
        w = np.empty(m)
        w[in_group] = frac_in / in_group.sum()
        w[~in_group] = (1 - frac_in) / (~in_group).sum()
        return w

    base = PopulationSpec(prototypes=protos, weights=weights(0.4), jitter=jitter)
    shift = PopulationSpec(prototypes=protos, weights=weights(0.75), jitter=jitter)
    return base, shift


def default_params(seed: int = 0, *, d_s: int = 2, d_v: int = 2, d_z: int = 2,
                   d_x: int = 16, d_A: int = 4, d_B: int = 4, T: int = 6,
                   sigma_x: float = 0.1, sigma_A: float = 0.1,
                   y_scale: float = 2.0, obs_kind: str = "vector",
                   image_shape: tuple[int, int] | None = None) -> ScmParams:
    """Benchmark generator with a shifted test population baked in.

    The label bias is calibrated so the marginal disease rate of the base
    population lands in [0.4, 0.6].
    """
    root = np.random.SeedSequence(seed)
    ss_struct, ss_calib = root.spawn(2)
    rng = np.random.default_rng(ss_struct)
    dims = {"s": d_s, "v": d_v, "z": d_z}
    maps = {
        o: _random_block_map(rng, dims[o], d_B, recur=0.5, drive=0.8,
                             logvar_base=-2.0, logvar_drive=0.25, squash=3.0)
        for o in BLOCKS
    }
    if obs_kind == "image":
        if image_shape is None:
            image_shape = (16, 16)
        d_x = int(np.prod(image_shape))
    L1, L2 = _block_emission(rng, d_x, dims)
    Fa = 1.2 * rng.standard_normal((d_A, d_v))
    ba = 0.1 * rng.standard_normal(d_A)
    w_s = rng.standard_normal(d_s)
    w_s /= np.linalg.norm(w_s)
    w_v = rng.standard_normal(d_v)
    w_v /= np.linalg.norm(w_v)
    m = max(d_s, d_v, d_z) * GAUSSIAN_K + 1
    base, shift = make_populations(rng, d_B, m)
    params = ScmParams(
        d_s=d_s, d_v=d_v, d_z=d_z, d_x=d_x, d_A=d_A, d_B=d_B, T=T,
        f_s=maps["s"], f_v=maps["v"], f_z=maps["z"],
        L1=L1, L2=L2, emit_gain=1.0,
        Fa=Fa, ba=ba, w_s=w_s, w_v=w_v, y_bias=0.0, y_scale=y_scale,
        sigma_x=sigma_x, sigma_A=sigma_A,
        populations=[base, shift], seed=seed,
        obs_kind=obs_kind, image_shape=image_shape,
    )
    # calibrate the label bias to a balanced marginal rate
    calib_rng = np.random.default_rng(ss_calib)
    lat, _ = sample_latents_batch(params, base, 2000, calib_rng)
    logits = params.label_logit(lat["s"][:, -1], lat["v"][:, -1])
    params = replace(params, y_bias=float(-np.median(logits)))
    rate = float(sigmoid(params.label_logit(lat["s"][:, -1], lat["v"][:, -1])).mean())
    if not 0.4 <= rate <= 0.6:
        raise ConfigurationError(f"label-bias calibration failed, rate={rate:.3f}")
    return params


def benchmark_params(seed: int = 13, **kwargs) -> ScmParams:
    """Tuned benchmark for disentanglement and robustness studies.

    Accepts the same keyword arguments as :func:`default_params`.
    Starts from :func:`default_params` and rescales it so that the failure
    modes of interest are all measurable:

    - the emission is redrawn with the leftover x coordinates given to the
      s block (instead of z) and its linear part is 3x the unit draw with
      low noise, so s is pinned down by reconstruction and the observation
      fit carries real information about the latents;
    - the v columns of the emission are halved and the clinical map is 5x,
      so v is mainly visible through the clinical attributes rather than
      through x, and attribute-blind models under-encode it;
    - the label weights are 3x on both causal blocks, so prediction leans
      on (s, v) jointly;
    - the population drive on the causal blocks is weak and negated, which
      keeps cross-block predictability low while making the spurious
      z-to-outcome association degrade under the population shift.
    """
    kwargs.setdefault("sigma_x", 0.05)
    kwargs.setdefault("sigma_A", 0.02)
    kwargs.setdefault("y_scale", 2.0)
    base = default_params(seed, **kwargs)
    dims = {"s": base.d_s, "v": base.d_v, "z": base.d_z}
    L1, L2 = _block_emission(np.random.default_rng(1234), base.d_x, dims,
                             extra_to="s")
    L1 = 3.0 * L1
    L1[:, base.d_s:base.d_s + base.d_v] *= 0.5
    return replace(base,
                   f_s=replace(base.f_s, U=-0.1 * base.f_s.U),
                   f_v=replace(base.f_v, U=-0.1 * base.f_v.U),
                   L1=L1, L2=L2, Fa=5.0 * base.Fa,
                   w_s=3.0 * base.w_s, w_v=3.0 * base.w_v)


def linear_gaussian_params(seed: int = 0, *, d: int = 1, d_x: int = 3,
                           d_A: int = 1, d_B: int = 2, T: int = 3,
                           sigma_x: float = 0.5, sigma_A: float = 0.5) -> ScmParams:
    """Fully linear-Gaussian instance (identity mean maps, no emission
    nonlinearity) so closed-form moments and quadrature are available."""
    rng = np.random.default_rng(seed)
    dims = {o: d for o in BLOCKS}
    maps = {
        o: _random_block_map(rng, d, d_B, recur=0.6, drive=0.5,
                             logvar_base=-1.0, logvar_drive=0.2, squash=None)
        for o in BLOCKS
    }
    d_h = 3 * d
    q, _ = np.linalg.qr(rng.standard_normal((d_x, d_h)))
    L1 = q * (1.0 + rng.random(d_h))
    m = d * GAUSSIAN_K + 1
    protos = rng.standard_normal((m, d_B))
    pop = PopulationSpec(prototypes=protos, weights=np.full(m, 1.0 / m), jitter=0.0)
    return ScmParams(
        d_s=d, d_v=d, d_z=d, d_x=d_x, d_A=d_A, d_B=d_B, T=T,
        f_s=maps["s"], f_v=maps["v"], f_z=maps["z"],
        L1=L1, L2=np.zeros_like(L1), emit_gain=0.0,
        Fa=rng.standard_normal((d_A, d)), ba=np.zeros(d_A),
        w_s=rng.standard_normal(d), w_v=rng.standard_normal(d),
        y_bias=0.0, y_scale=1.0,
        sigma_x=sigma_x, sigma_A=sigma_A,
        populations=[pop], seed=seed,
    )
