"""Graph convolution over truncated spectral coefficients and siamese training.

The K retained frequencies are treated as nodes of a path graph (frequency i is
adjacent to i-1 and i+1); each node carries the n descriptor coefficients of
that frequency. Two propagation layers, mean pooling over nodes and a linear
projection give a unit-norm d-dimensional embedding.

The first layer has one weight matrix per frequency. GFT coefficients at
different frequencies are not exchangeable the way mesh vertices are, and with
a single shared matrix the mean pool makes the embedding nearly blind to which
frequency carried the energy.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Adam, Tensor, as_tensor, l2_normalize_rows, parameter
from .errors import CheckpointError, DivergenceError, ShapeMismatchError


@dataclass(frozen=True)
class GcnConfig:
    k: int = 10
    n: int = 10
    layers: int = 2
    hidden: int = 32
    d: int = 64
    margin: float = 0.5
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 60
    seed: int = 0


def path_propagation(k: int) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` for the path graph on ``k`` nodes."""
    a = np.eye(k)
    idx = np.arange(k - 1)
    a[idx, idx + 1] = 1.0
    a[idx + 1, idx] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class GcnModel:
    """Stacked ``ReLU(A H W)`` layers, mean pooling over frequencies, linear output.

    ``weights[0]`` has shape (K, n, hidden): row i of H is multiplied by its own
    matrix. Deeper layers share one (hidden, hidden) matrix across rows.

    ``shift`` and ``scale`` standardize each (frequency, descriptor) input
    coefficient; they are fitted on training features by ``fit_input_scaling``
    and default to the identity transform.
    """

    def __init__(self, k: int = 10, n: int = 10, layers: int = 2, hidden: int = 32, d: int = 64,
                 seed: int = 0):
        if min(k, n, layers, hidden, d) < 1:
            raise ValueError("GCN dimensions must be positive")
        self.k, self.n, self.layers, self.hidden, self.d = k, n, layers, hidden, d
        self.a_hat = path_propagation(k)
        rng = np.random.default_rng(seed)
        first = np.stack([xavier_uniform(rng, n, hidden) for _ in range(k)])
        self.weights = [parameter(first)]
        self.weights += [parameter(xavier_uniform(rng, hidden, hidden)) for _ in range(layers - 1)]
        self.w_out = parameter(xavier_uniform(rng, hidden, d))
        self.shift = np.zeros((k, n))
        self.scale = np.ones((k, n))

    @classmethod
    def from_config(cls, cfg: GcnConfig) -> "GcnModel":
        return cls(cfg.k, cfg.n, cfg.layers, cfg.hidden, cfg.d, cfg.seed)

    def parameters(self) -> list[Tensor]:
        return self.weights + [self.w_out]

    def blocks(self) -> list[np.ndarray]:
        """All stored arrays in checkpoint order."""
        return [self.shift, self.scale] + [p.data for p in self.parameters()]

    def fit_input_scaling(self, features: np.ndarray) -> None:
        """Per-coefficient z-scoring fitted on a (N, K, n) training stack."""
        features = np.asarray(features, dtype=np.float64)
        self.shift = features.mean(axis=0)
        sd = features.std(axis=0)
        self.scale = np.where(sd > 1e-12, sd, 1.0)

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != (self.k, self.n):
            raise ShapeMismatchError(f"expected F_low of shape ({self.k}, {self.n}), got {x.shape[-2:]}")
        return x

    def forward(self, x) -> Tensor:
        """Embeddings for a (B, K, n) batch as a (B, d) tensor of unit rows."""
        x = self._check(x)
        if x.ndim == 2:
            x = x[None]
        b = x.shape[0]
        h = Tensor((x - self.shift) / self.scale)
        h = (h.reshape(b, self.k, 1, self.n) @ self.weights[0]).reshape(b, self.k, self.hidden)
        h = (self.a_hat @ h).relu()
        for w in self.weights[1:]:
            h = (self.a_hat @ (h @ w)).relu()
        pooled = h.mean(axis=1)
        out, fallback = l2_normalize_rows(pooled @ self.w_out, return_fallback=True)
        if np.any(fallback):
            warnings.warn(f"{int(fallback.sum())} embedding(s) were all-zero; mapped to e_1", RuntimeWarning,
                          stacklevel=2)
        return out

    def embed(self, x) -> np.ndarray:
        """Numpy embeddings; shape (d,) for one F_low or (B, d) for a stack."""
        x = self._check(x)
        z = self.forward(x).data
        return z[0] if x.ndim == 2 else z

    # -- checkpoint ------------------------------------------------------------

    def save(self, path) -> None:
        header = _GCN_HEADER.pack(GCN_MAGIC, CHECKPOINT_VERSION, self.k, self.n, self.layers, self.hidden, self.d)
        body = b"".join(np.asarray(b, dtype="<f8").tobytes(order="C") for b in self.blocks())
        Path(path).write_bytes(header + body)

    @classmethod
    def load(cls, path) -> "GcnModel":
        raw = Path(path).read_bytes()
        if len(raw) < _GCN_HEADER.size:
            raise CheckpointError("truncated GCN checkpoint")
        magic, version, k, n, layers, hidden, d = _GCN_HEADER.unpack_from(raw)
        if magic != GCN_MAGIC or version != CHECKPOINT_VERSION:
            raise CheckpointError("not a GCN checkpoint (bad magic/version)")
        model = cls(k, n, layers, hidden, d)
        _fill_blocks(raw[_GCN_HEADER.size:], model.blocks())
        return model


GCN_MAGIC = b"SFGCN\x00\x00\x00"
CHECKPOINT_VERSION = 1
_GCN_HEADER = struct.Struct("<8sIIIIII")


def _fill_blocks(body: bytes, blocks: list[np.ndarray]) -> None:
    total = sum(b.size for b in blocks)
    values = np.frombuffer(body, dtype="<f8")
    if values.size != total:
        raise CheckpointError(f"checkpoint holds {values.size} values, header implies {total}")
    pos = 0
    for b in blocks:
        b[...] = values[pos:pos + b.size].reshape(b.shape)
        pos += b.size


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------

def contrastive_loss(z_a: Tensor, z_b: Tensor, y, margin: float = 0.5) -> Tensor:
    """Mean of ``y (1 - S) + (1 - y) max(0, m - (1 - S))`` with S the cosine similarity."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("contrastive loss needs at least one pair")
    z_a, z_b = as_tensor(z_a), as_tensor(z_b)
    num = (z_a * z_b).sum(axis=-1)
    s = num / ((z_a * z_a).sum(axis=-1) * (z_b * z_b).sum(axis=-1)).sqrt()
    dist = 1.0 - s
    pull = dist * y
    push = (margin - dist).relu() * (1.0 - y)
    return (pull + push).mean()


def pair_indices(pairs, index: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map pairs of scan keys to row indices into a feature stack."""
    ia = np.array([index[p[0]] for p in pairs], dtype=np.int64)
    ib = np.array([index[p[1]] for p in pairs], dtype=np.int64)
    y = np.array([p[2] for p in pairs], dtype=np.float64)
    return ia, ib, y


def batch_loss(model: GcnModel, features: np.ndarray, ia, ib, y, margin: float) -> Tensor:
    rows, inv = np.unique(np.concatenate([ia, ib]), return_inverse=True)
    z = model.forward(features[rows])
    return contrastive_loss(z[inv[:len(ia)]], z[inv[len(ia):]], y, margin)


def train_gcn(model: GcnModel, features: np.ndarray, pairs: tuple, epochs: int = 60, lr: float = 1e-3,
              batch_size: int = 32, margin: float = 0.5, seed: int = 0, fit_scaling: bool = True) -> list[float]:
    """Siamese training with Adam; returns the mean loss of every epoch.

    ``pairs`` is ``(ia, ib, y)`` indexing rows of the (N, K, n) ``features``
    stack. Raises ``DivergenceError`` on a non-finite loss.
    """
    ia, ib, y = (np.asarray(p) for p in pairs)
    if len(ia) == 0:
        raise ValueError("training needs a non-empty pair set")
    if fit_scaling:
        model.fit_input_scaling(features[np.unique(np.concatenate([ia, ib]))])
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(ia))
        total = 0.0
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            loss = batch_loss(model, features, ia[sel], ib[sel], y[sel], margin)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite GCN loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(sel)
        history.append(total / len(order))
    return history
