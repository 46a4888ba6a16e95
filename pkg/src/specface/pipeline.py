"""Pipeline configuration and the stage functions the CLI and the acceptance run share.

Stages: data preparation (normalize, optional crop), feature extraction
(descriptors, Laplacian basis, truncated GFT), embedding (frozen GCN or the
pooled ablation), protection (keyed diffusion) and evaluation. Each stage has
its own config hash covering exactly the settings it depends on, chained to
its upstream stage, so an artifact produced under a different configuration
is detected and refused.
"""

from __future__ import annotations

import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attack import AttackConfig
from .errors import ConfigMismatchError
from .evaluation import (EvalReport, ScoreSet, entropy_mi_report, key_correlation_matrix, pair_similarities)
from .gcn import GcnConfig, GcnModel, pair_indices, train_gcn
from .geometry import N_DESCRIPTORS, assemble_descriptors
from .mesh import CorpusSpec, DatasetSplit, make_pairs, prepare_mesh, split_subjects
from .protect import (KeyMaterial, LossWeights, NoiseSchedule, PhiNetwork, ProtectConfig, diffuse_batch,
                      train_protect)
from .spectral import BasisCache, gft, mesh_basis, topology_hash

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 10
    t: int = 50
    d: int = 64
    n: int = N_DESCRIPTORS
    beta_start: float = 1e-4
    beta_end: float = 0.02
    margin: float = 0.5
    k_choices: tuple = (10, 20, 25)
    split_seed: int = 0
    pair_seed: int = 0
    eval_seed: int = 1
    eval_keys: int = 4
    entropy_keys: int = 30
    crop: bool = False
    no_gcn: bool = False
    workers: int = 1
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    gcn: GcnConfig = field(default_factory=GcnConfig)
    protect: ProtectConfig = field(default_factory=ProtectConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        if self.k not in self.k_choices:
            raise ValueError(f"K={self.k} is not one of the configured choices {self.k_choices}")
        if self.t < 1:
            raise ValueError("T must be positive")
        if self.n != N_DESCRIPTORS:
            raise ValueError(f"n must be {N_DESCRIPTORS}")
        weights = asdict(self.loss)
        if any(v < 0 for v in weights.values()):
            raise ValueError("loss weights must be nonnegative")
        if not 0 < self.margin < 1:
            raise ValueError("margin must lie in (0, 1)")
        if self.eval_keys < 1 or self.entropy_keys < 1:
            raise ValueError("key counts must be positive")

    # -- derived records ----------------------------------------------------

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.t, self.beta_start, self.beta_end)

    @property
    def gcn_config(self) -> GcnConfig:
        return replace(self.gcn, k=self.k, n=self.n, d=self.d, margin=self.margin)

    @property
    def loss_weights(self) -> LossWeights:
        return replace(self.loss, margin=self.margin)

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        nested = {"corpus": CorpusSpec, "gcn": GcnConfig, "protect": ProtectConfig, "loss": LossWeights,
                  "attack": AttackConfig}
        known = {f.name for f in fields(cls)}
        aliases = {"K": "k", "T": "t"}
        kwargs = {}
        for key, value in data.items():
            key = aliases.get(key, key)
            if key not in known:
                raise ValueError(f"unknown config field {key!r}")
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ValueError(f"unknown {key} field(s): {sorted(bad)}")
                value = sub(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        text = path.read_bytes()
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text.decode("utf-8"))
        else:
            data = json.loads(text)
        return cls.from_dict(data)

    # -- provenance ---------------------------------------------------------

    def stage_hash(self, stage: str) -> str:
        parts = _STAGE_FIELDS[stage]
        upstream = _STAGE_PARENT[stage]
        record = {"stage": stage, "upstream": self.stage_hash(upstream) if upstream else None}
        d = self.to_dict()
        for name in parts:
            record[name] = d[name]
        blob = json.dumps(record, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check(self, stage: str, found: str) -> None:
        want = self.stage_hash(stage)
        if found != want:
            raise ConfigMismatchError(f"{stage} artifact was produced by config {found}, current config expects {want}")


_STAGE_FIELDS = {
    "corpus": ("corpus",),
    "features": ("k", "n", "crop"),
    "embed": ("d", "margin", "split_seed", "pair_seed", "no_gcn", "gcn"),
    "protect": ("t", "beta_start", "beta_end", "loss", "protect"),
    "eval": ("eval_seed", "eval_keys", "entropy_keys"),
}
_STAGE_PARENT = {"corpus": None, "features": "corpus", "embed": "features", "protect": "embed", "eval": "protect"}


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

_BASES: dict = {}


def _basis_for(mesh, k: int, cache_dir=None):
    key = (topology_hash(mesh), k)
    if key not in _BASES:
        _BASES[key] = BasisCache(cache_dir).get(mesh, k) if cache_dir else mesh_basis(mesh, k)
    return _BASES[key]


def mesh_features(mesh, k: int, crop: bool = False, cache_dir=None) -> np.ndarray:
    """Prepared mesh -> (K, n) truncated spectral coefficients of the descriptor matrix."""
    mesh = prepare_mesh(mesh, crop=crop)
    basis = _basis_for(mesh, k, cache_dir)
    return gft(basis, assemble_descriptors(mesh))


def _features_job(args):
    mesh, k, crop, cache_dir = args
    return mesh_features(mesh, k, crop, cache_dir)


def extract_features(meshes, k: int, crop: bool = False, cache_dir=None, workers: int = 1) -> np.ndarray:
    """(N, K, n) stack for a mesh sequence, optionally over a process pool."""
    jobs = [(m, k, crop, cache_dir) for m in meshes]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_features_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        out = [_features_job(j) for j in jobs]
    return np.stack(out)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def pooled_embedding(features: np.ndarray, d: int) -> np.ndarray:
    """Ablation embedding: flattened F_low average-pooled into ``d`` windows, unit norm.

    Window i covers ``[floor(i L / d), ceil((i + 1) L / d))`` of the length-L
    flattened vector, so every window is non-empty even when L < d.
    """
    x = np.asarray(features, dtype=np.float64)
    flat = x.reshape(len(x), -1) if x.ndim == 3 else x.reshape(1, -1)
    length = flat.shape[1]
    out = np.empty((len(flat), d))
    for i in range(d):
        lo = (i * length) // d
        hi = -((-(i + 1) * length) // d)
        out[:, i] = flat[:, lo:hi].mean(axis=1)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    out = out / np.where(norm > 0, norm, 1.0)
    out[norm[:, 0] == 0, 0] = 1.0
    return out if x.ndim == 3 else out[0]


@dataclass
class Corpus:
    """Features plus the bookkeeping to address scans and subjects."""

    features: np.ndarray
    keys: list          # (subject_id, scan_id) per row
    split: DatasetSplit

    @property
    def subjects(self) -> np.ndarray:
        return np.array([k[0] for k in self.keys])

    @property
    def index(self) -> dict:
        return {k: i for i, k in enumerate(self.keys)}

    def mask(self, part: str) -> np.ndarray:
        return np.isin(self.subjects, sorted(getattr(self.split, part), key=str))

    def pairs(self, part: str, seed: int = 0):
        refs = [_Ref(s, c) for s, c in self.keys]
        return pair_indices(make_pairs(refs, getattr(self.split, part), seed=seed), self.index)


@dataclass(frozen=True)
class _Ref:
    subject_id: object
    scan_id: object


def build_corpus(features: np.ndarray, keys, cfg: PipelineConfig) -> Corpus:
    split = split_subjects([k[0] for k in keys], seed=cfg.split_seed)
    return Corpus(np.asarray(features), [tuple(k) for k in keys], split)


def train_embedding(corpus: Corpus, cfg: PipelineConfig):
    """GCN trained on the training split (or None for the ablation) and its loss history."""
    if cfg.no_gcn:
        return None, []
    gc = cfg.gcn_config
    model = GcnModel.from_config(gc)
    history = train_gcn(model, corpus.features, corpus.pairs("train", cfg.pair_seed), epochs=gc.epochs, lr=gc.lr,
                        batch_size=gc.batch_size, margin=gc.margin, seed=gc.seed)
    return model, history


def embed(model, features: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    if model is None:
        return pooled_embedding(features, cfg.d)
    return model.embed(features)


def train_protection(z: np.ndarray, corpus: Corpus, cfg: PipelineConfig, log=None):
    phi = PhiNetwork(cfg.d, seed=cfg.protect.seed)
    m = corpus.mask("train")
    history = train_protect(phi, z[m], corpus.subjects[m], cfg.schedule, cfg.protect, cfg.loss_weights, log=log)
    return phi, history


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

def eval_keys(cfg: PipelineConfig, count: int | None = None, stream: int = 0) -> list[KeyMaterial]:
    rng = np.random.default_rng([cfg.eval_seed, stream])
    return [KeyMaterial.random(rng) for _ in range(count or cfg.eval_keys)]


def protect_all(z: np.ndarray, keys, phi: PhiNetwork, cfg: PipelineConfig) -> list[np.ndarray]:
    """Templates of every row of ``z`` under each key in turn."""
    return [diffuse_batch(z, [k] * len(z), cfg.schedule, phi) for k in keys]


def protected_scores(templates: list, pairs) -> ScoreSet:
    """Pairs compared within each key (impostors hold the same key), pooled over keys."""
    ia, ib, y = pairs
    sims = np.concatenate([pair_similarities(t, ia, ib) for t in templates])
    return ScoreSet.from_pairs(sims, np.tile(y, len(templates)))


def evaluate(z: np.ndarray, phi: PhiNetwork, corpus: Corpus, cfg: PipelineConfig, part: str = "test") -> dict:
    """Unprotected and protected verification reports plus unlinkability and entropy figures."""
    pairs = corpus.pairs(part, seed=cfg.pair_seed + 1)
    m = corpus.mask(part)
    plain = ScoreSet.from_pairs(pair_similarities(z, pairs[0], pairs[1]), pairs[2])
    keys = eval_keys(cfg)
    templates = protect_all(z, keys, phi, cfg)
    prot = protected_scores(templates, pairs)

    # every held-out scan under every evaluation key
    rows = np.flatnonzero(m)
    stack = np.concatenate([t[rows] for t in templates])
    subj = np.tile(corpus.subjects[rows], len(keys))
    kid = np.repeat([k.key_id for k in keys], len(rows))
    corr = key_correlation_matrix(stack, subj, kid)
    unit = stack / np.linalg.norm(stack, axis=1, keepdims=True)
    cos = unit @ unit.T
    same_s = subj[:, None] == subj[None, :]
    same_k = kid[:, None] == kid[None, :]
    upper = np.triu(np.ones_like(cos, dtype=bool), 1)
    linkage = {"diff_key_mean_abs_cos": float(np.abs(cos[same_s & ~same_k & upper]).mean()),
               "same_key_genuine_mean_cos": float(cos[same_s & same_k & upper].mean()),
               "diff_key_mean_abs_corr": corr["same_subject_diff_key"]["mean_abs"]}

    ent_keys = eval_keys(cfg, cfg.entropy_keys, stream=1)
    zt = np.concatenate(protect_all(z, ent_keys, phi, cfg))
    entropy = entropy_mi_report(np.tile(z, (len(ent_keys), 1)), zt)

    meta = {"K": cfg.k, "T": cfg.t, "d": cfg.d, "no_gcn": cfg.no_gcn, "part": part,
            "config_hash": cfg.stage_hash("eval")}
    report_plain = EvalReport.from_scores(plain, meta=dict(meta, protected=False))
    report_prot = EvalReport.from_scores(prot, correlation=corr, entropy=entropy, meta=dict(meta, protected=True))
    return {"unprotected": report_plain, "protected": report_prot, "linkage": linkage}
