"""Key-conditioned forward diffusion of embeddings into protected templates.

Each step is ``Z_t = sqrt(1 - b_t) Z_{t-1} + sqrt(b_t) eps_t + (1 - b_t) phi(Z_{t-1}, k)``
where ``eps_t`` is drawn from a stream seeded by the key and the step index, so
a given (embedding, key) pair always yields the same template and a new key
yields an unrelated one. ``phi`` is a small tanh MLP that sees the current
state and a 32-dimensional expansion of the key.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .autograd import Adam, Tensor, as_tensor, concat, parameter
from .errors import CheckpointError, DivergenceError, ShapeMismatchError
from .gcn import CHECKPOINT_VERSION, _fill_blocks, xavier_uniform

KEY_BYTES = 16
KEY_EMBED_DIM = 32
_U53 = 2.0 ** -53


# ---------------------------------------------------------------------------
# keys
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyMaterial:
    """A 128-bit secret. Only ``key_id`` (first 8 bytes of SHA-256, hex) is public."""

    key: bytes = field(repr=False)

    def __post_init__(self):
        if not isinstance(self.key, (bytes, bytearray)) or len(self.key) != KEY_BYTES:
            raise ValueError(f"key must be {KEY_BYTES} bytes")
        object.__setattr__(self, "key", bytes(self.key))

    @property
    def key_id(self) -> str:
        return hashlib.sha256(self.key).digest()[:8].hex()

    @classmethod
    def random(cls, rng: np.random.Generator) -> "KeyMaterial":
        return cls(rng.bytes(KEY_BYTES))

    @classmethod
    def from_hex(cls, text: str) -> "KeyMaterial":
        return cls(bytes.fromhex(text.strip()))

    def hex(self) -> str:
        return self.key.hex()

    def __repr__(self):
        return f"KeyMaterial(key_id={self.key_id})"


def _seed(*parts: bytes) -> int:
    return int.from_bytes(hashlib.sha256(b"".join(parts)).digest()[:8], "little")


def _uniform(seed: int, n: int) -> np.ndarray:
    """``n`` doubles in [0, 1) from the top 53 bits of a SplitMix64 stream."""
    return (kernels.splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * _U53


def key_embed(key: KeyMaterial, dim: int = KEY_EMBED_DIM) -> np.ndarray:
    """Deterministic expansion of the key into ``dim`` values in [-1, 1)."""
    return 2.0 * _uniform(_seed(key.key, b"embed"), dim) - 1.0


def keyed_noise(key: KeyMaterial, t: int, d: int) -> np.ndarray:
    """Standard normal d-vector for step ``t`` (Box-Muller on a key-and-step seeded stream)."""
    if t < 1:
        raise ValueError("diffusion steps are numbered from 1")
    m = (d + 1) // 2
    u = _uniform(_seed(key.key, struct.pack("<I", t), b"eps"), 2 * m)
    u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
    r = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u[m:]
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(ang)
    out[1::2] = r * np.sin(ang)
    return out[:d]


def noise_table(key: KeyMaterial, steps: int, d: int) -> np.ndarray:
    """(T, d) array of the noise vectors for steps 1..T."""
    return np.stack([keyed_noise(key, t, d) for t in range(1, steps + 1)])


# ---------------------------------------------------------------------------
# schedule and phi
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("T must be positive")
        if not 0 < self.beta_start < 1 or not 0 < self.beta_end < 1:
            raise ValueError("beta endpoints must lie in (0, 1)")
        if self.steps > 1 and not self.beta_end > self.beta_start:
            raise ValueError("the linear ramp must be strictly increasing")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.steps)


class PhiNetwork:
    """``(d + 32) -> hidden -> hidden -> d`` MLP, tanh on the hidden layers."""

    def __init__(self, d: int = 64, key_dim: int = KEY_EMBED_DIM, hidden: int = 128, seed: int = 0):
        self.d, self.key_dim, self.hidden = d, key_dim, hidden
        rng = np.random.default_rng(seed)
        widths = [d + key_dim, hidden, hidden, d]
        self.weights = []
        self.biases = []
        for i in range(3):
            self.weights.append(parameter(xavier_uniform(rng, widths[i], widths[i + 1])))
            self.biases.append(parameter(np.zeros(widths[i + 1])))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, z, key_emb) -> Tensor:
        h = concat([as_tensor(z), as_tensor(key_emb)], axis=-1)
        h = (h @ self.weights[0] + self.biases[0]).tanh()
        h = (h @ self.weights[1] + self.biases[1]).tanh()
        return h @ self.weights[2] + self.biases[2]

    def save(self, path) -> None:
        header = _PHI_HEADER.pack(PHI_MAGIC, CHECKPOINT_VERSION, self.d, self.key_dim, self.hidden)
        body = b"".join(np.asarray(p.data, dtype="<f8").tobytes() for p in self.parameters())
        Path(path).write_bytes(header + body)

    @classmethod
    def load(cls, path) -> "PhiNetwork":
        raw = Path(path).read_bytes()
        if len(raw) < _PHI_HEADER.size:
            raise CheckpointError("truncated phi checkpoint")
        magic, version, d, key_dim, hidden = _PHI_HEADER.unpack_from(raw)
        if magic != PHI_MAGIC or version != CHECKPOINT_VERSION:
            raise CheckpointError("not a phi checkpoint (bad magic/version)")
        phi = cls(d, key_dim, hidden)
        _fill_blocks(raw[_PHI_HEADER.size:], [p.data for p in phi.parameters()])
        return phi


PHI_MAGIC = b"SFPHI\x00\x00\x00"
_PHI_HEADER = struct.Struct("<8sIIII")


# ---------------------------------------------------------------------------
# diffusion
# ---------------------------------------------------------------------------

def diffuse_tensor(z, key_emb: np.ndarray, noise: np.ndarray, betas: np.ndarray, phi: PhiNetwork) -> Tensor:
    """Batched forward process as a single graph node.

    ``z`` is (B, d), ``key_emb`` (B, 32), ``noise`` (B, T, d) and ``betas`` (T,).
    Gradients reach ``z`` and the phi parameters when they require them; the
    backward pass walks the chain in reverse with hand-written MLP adjoints,
    which is several times cheaper than recording every step on the tape.
    ``diffuse_reference`` builds the same map from elementary ops.
    """
    z = as_tensor(z)
    key_emb = np.asarray(key_emb, dtype=np.float64)
    w0, w1, w2 = (w.data for w in phi.weights)
    b0, b1, b2 = (b.data for b in phi.biases)
    d = phi.d
    w0z, w0k = w0[:d], w0[d:]
    kb = key_emb @ w0k + b0              # constant over t
    betas = np.asarray(betas, dtype=np.float64)
    a, c, g = np.sqrt(1.0 - betas), np.sqrt(betas), 1.0 - betas
    steps = len(betas)
    track = z.requires_grad or any(p.requires_grad for p in phi.parameters())
    zs, h1s, h2s = [], [], []
    cur = z.data
    for t in range(steps):
        h1 = np.tanh(cur @ w0z + kb)
        h2 = np.tanh(h1 @ w1 + b1)
        if track:
            zs.append(cur)
            h1s.append(h1)
            h2s.append(h2)
        cur = a[t] * cur + c[t] * noise[:, t, :] + g[t] * (h2 @ w2 + b2)
    if not np.all(np.isfinite(cur)):
        raise DivergenceError("non-finite value in the diffusion chain")
    if not track:
        return Tensor(cur)

    def backward(gz):
        gw0z, gw1, gw2 = np.zeros_like(w0z), np.zeros_like(w1), np.zeros_like(w2)
        gb1, gb2 = np.zeros_like(b1), np.zeros_like(b2)
        gkb = np.zeros_like(kb)
        for t in range(steps - 1, -1, -1):
            go = g[t] * gz
            gw2 += h2s[t].T @ go
            gb2 += go.sum(axis=0)
            gh2 = (go @ w2.T) * (1.0 - h2s[t] ** 2)
            gw1 += h1s[t].T @ gh2
            gb1 += gh2.sum(axis=0)
            gh1 = (gh2 @ w1.T) * (1.0 - h1s[t] ** 2)
            gw0z += zs[t].T @ gh1
            gkb += gh1
            gz = a[t] * gz + gh1 @ w0z.T
        gw0 = np.concatenate([gw0z, key_emb.T @ gkb], axis=0)
        return (gz, gw0, gkb.sum(axis=0), gw1, gb1, gw2, gb2)

    parents = (z, phi.weights[0], phi.biases[0], phi.weights[1], phi.biases[1], phi.weights[2], phi.biases[2])
    return Tensor._make(cur, parents, backward)


def diffuse_reference(z, key_emb: np.ndarray, noise: np.ndarray, betas: np.ndarray, phi: PhiNetwork) -> Tensor:
    """Step-by-step composition of autograd ops; slow, kept as a cross-check."""
    z = as_tensor(z)
    key_emb = np.asarray(key_emb, dtype=np.float64)
    for t, beta in enumerate(betas):
        z = np.sqrt(1.0 - beta) * z + np.sqrt(beta) * noise[:, t, :] + (1.0 - beta) * phi(z, key_emb)
    if not np.all(np.isfinite(z.data)):
        raise DivergenceError("non-finite value in the diffusion chain")
    return z


@dataclass
class ProtectedTemplate:
    z_t: np.ndarray
    k: int
    steps: int
    d: int
    key_id: str

    VERSION = 1

    def to_json(self) -> dict:
        return {"version": self.VERSION, "K": self.k, "T": self.steps, "d": self.d, "key_id": self.key_id,
                "z_T": [float(x) for x in self.z_t]}

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, obj: dict) -> "ProtectedTemplate":
        if obj.get("version") != cls.VERSION:
            raise ValueError(f"unsupported template version {obj.get('version')!r}")
        z = np.asarray(obj["z_T"], dtype=np.float64)
        if z.ndim != 1 or len(z) != int(obj["d"]) or not np.all(np.isfinite(z)):
            raise ValueError("template vector does not match its declared dimension")
        return cls(z, int(obj["K"]), int(obj["T"]), int(obj["d"]), str(obj["key_id"]))

    @classmethod
    def loads(cls, text: str) -> "ProtectedTemplate":
        return cls.from_json(json.loads(text))

    @property
    def params(self) -> tuple:
        return (self.k, self.steps, self.d)


def diffuse(z, key: KeyMaterial, schedule: NoiseSchedule, phi: PhiNetwork, k: int = 0) -> ProtectedTemplate:
    """Protect one unit-norm embedding under ``key``; ``k`` records the spectral K."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or len(z) != phi.d:
        raise ShapeMismatchError(f"embedding must be a {phi.d}-vector")
    if abs(np.linalg.norm(z) - 1.0) > 1e-6:
        raise ValueError("embedding must have unit norm")
    out = diffuse_batch(z[None], [key], schedule, phi)[0]
    return ProtectedTemplate(out, k, schedule.steps, phi.d, key.key_id)


def diffuse_batch(z: np.ndarray, keys, schedule: NoiseSchedule, phi: PhiNetwork) -> np.ndarray:
    """Templates for a (B, d) stack, one key per row."""
    z = np.asarray(z, dtype=np.float64)
    emb, noise = key_inputs(keys, schedule.steps, phi.d)
    return diffuse_tensor(z, emb, noise, schedule.betas, phi).data


def key_inputs(keys, steps: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked key embeddings (B, 32) and noise tables (B, T, d), computed once per distinct key."""
    cache = {}
    emb, noise = [], []
    for key in keys:
        if key.key not in cache:
            cache[key.key] = (key_embed(key), noise_table(key, steps, d))
        e, n = cache[key.key]
        emb.append(e)
        noise.append(n)
    return np.stack(emb), np.stack(noise)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    lambda_imp: float = 1.0
    lambda_diff: float = 0.5
    beta_imp: float = 1.0
    beta_other: float = 0.5
    lambda_u: float = 0.5
    lambda_d: float = 0.25
    margin: float = 0.5


def pair_masks(subjects, key_ids) -> dict:
    """Boolean (N, N) masks over ordered pairs i != j.

    gen: same subject and key; imp: different subject, same key;
    diff: same subject, different key; mis: different subject and key.
    """
    s = np.asarray(subjects)
    k = np.asarray(key_ids)
    same_s = s[:, None] == s[None, :]
    same_k = k[:, None] == k[None, :]
    off = ~np.eye(len(s), dtype=bool)
    return {
        "gen": same_s & same_k & off,
        "imp": ~same_s & same_k & off,
        "diff": same_s & ~same_k & off,
        "mis": ~same_s & ~same_k & off,
    }


def cosine_matrix(x) -> Tensor:
    x = as_tensor(x)
    xn = x / (x * x).sum(axis=-1, keepdims=True).sqrt()
    return xn @ xn.T


def masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``values`` over ``mask``; an empty mask contributes an exact zero."""
    count = int(mask.sum())
    if count == 0:
        return Tensor(0.0)
    return (values * mask.astype(np.float64)).sum() * (1.0 / count)


def loss_discriminability(s_orig, s_prot: Tensor, masks: dict, w: LossWeights = LossWeights()) -> Tensor:
    s_orig = np.asarray(s_orig.data if isinstance(s_orig, Tensor) else s_orig)
    s_prot = as_tensor(s_prot)
    sq = s_prot * s_prot
    return (masked_mean((s_prot - s_orig) * (s_prot - s_orig), masks["gen"])
            + w.lambda_imp * masked_mean(sq, masks["imp"])
            + w.lambda_diff * masked_mean(sq, masks["diff"]))


def loss_contrastive_protected(s_prot: Tensor, masks: dict, w: LossWeights = LossWeights()) -> Tensor:
    s_prot = as_tensor(s_prot)
    hinge = (s_prot - w.margin).relu()
    return (masked_mean(1.0 - s_prot, masks["gen"])
            + w.beta_imp * masked_mean(hinge, masks["imp"])
            + w.beta_other * masked_mean(hinge, masks["diff"] | masks["mis"]))


def _cos(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return (a * b).sum() / ((a * a).sum() * (b * b).sum()).sqrt()


def loss_unlinkability(zt_k1, zt_k2) -> Tensor:
    """``|cos|`` between two templates of one subject under different keys."""
    return _cos(zt_k1, zt_k2).abs()


def loss_key_diversity(zt_k1, zt_k2, k1, k2) -> Tensor:
    if k1 == k2:
        return Tensor(0.0)
    return _cos(zt_k1, zt_k2).abs()


def loss_total(s_orig, s_prot: Tensor, masks: dict, w: LossWeights = LossWeights()) -> tuple[Tensor, dict]:
    """Batch objective and its components.

    Over a batch the two pairwise regularizers become means: unlinkability over
    same-subject different-key pairs, key diversity over all same-subject
    pairs with the same-key ones contributing zero.
    """
    s_prot = as_tensor(s_prot)
    a = s_prot.abs()
    disc = loss_discriminability(s_orig, s_prot, masks, w)
    contr = loss_contrastive_protected(s_prot, masks, w)
    unlink = masked_mean(a, masks["diff"])
    diverse = masked_mean(a * masks["diff"].astype(np.float64), masks["gen"] | masks["diff"])
    total = disc + contr + w.lambda_u * unlink + w.lambda_d * diverse
    parts = {"disc": float(disc.data), "contr": float(contr.data), "unlink": float(unlink.data),
             "diverse": float(diverse.data), "total": float(total.data),
             "empty_masks": [name for name, m in masks.items() if not m.any()]}
    return total, parts


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtectConfig:
    epochs: int = 2400
    lr: float = 3e-4
    subjects_per_batch: int = 14
    scans_per_subject: int = 4
    cosine_decay: bool = True
    seed: int = 0


def train_protect(phi: PhiNetwork, embeddings: np.ndarray, subjects, schedule: NoiseSchedule,
                  cfg: ProtectConfig = ProtectConfig(), weights: LossWeights = LossWeights(),
                  log=None) -> list[dict]:
    """Optimize phi on frozen embeddings; returns per-epoch mean loss components.

    Every batch draws two fresh keys shared by all of its subjects and diffuses
    each sampled scan under both, so all four pair classes are populated.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    subjects = np.asarray(subjects)
    groups = {s: np.flatnonzero(subjects == s) for s in np.unique(subjects)}
    if len(groups) < 2:
        raise ValueError("protection training needs at least two subjects")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(phi.parameters(), lr=cfg.lr)
    betas = schedule.betas
    names = list(groups)
    history = []
    for epoch in range(cfg.epochs):
        if cfg.cosine_decay:
            opt.lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        order = rng.permutation(len(names))
        sums: dict = {}
        batches = 0
        for start in range(0, len(order), cfg.subjects_per_batch):
            chosen = [names[i] for i in order[start:start + cfg.subjects_per_batch]]
            if len(chosen) < 2:
                chosen.append(names[order[(start - 1) % len(order)]])
            rows = np.concatenate([rng.choice(groups[s], size=min(cfg.scans_per_subject, len(groups[s])),
                                              replace=False) for s in chosen])
            keys = [KeyMaterial.random(rng), KeyMaterial.random(rng)]
            row_keys = [keys[0]] * len(rows) + [keys[1]] * len(rows)
            zz = np.concatenate([z[rows], z[rows]])
            emb, noise = key_inputs(row_keys, schedule.steps, phi.d)
            zt = diffuse_tensor(zz, emb, noise, betas, phi)
            s_orig = zz @ zz.T
            masks = pair_masks(np.concatenate([subjects[rows]] * 2), [k.key_id for k in row_keys])
            loss, parts = loss_total(s_orig, cosine_matrix(zt), masks, weights)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite protection loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            for name in ("disc", "contr", "unlink", "diverse", "total"):
                sums[name] = sums.get(name, 0.0) + parts[name]
            batches += 1
        record = {name: v / batches for name, v in sums.items()}
        history.append(record)
        if log is not None:
            log(epoch, record)
    return history
