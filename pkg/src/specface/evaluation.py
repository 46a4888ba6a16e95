"""Verification metrics, template statistics and the closed-form trade-off model.

Scores are cosine similarities; a comparison is a match when ``S > theta``.
Genuine comparisons are the positive class throughout.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

HIST_BINS = 50
ENTROPY_BINS = 32


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"template shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm template")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def match(query, enrolled, theta: float) -> tuple[bool, float]:
    """Decision ``S > theta`` (strict) together with S."""
    s = cosine(query, enrolled)
    return s > theta, s


def pair_similarities(vectors: np.ndarray, ia, ib) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    return np.clip(np.einsum("ij,ij->i", v[ia], v[ib]), -1.0, 1.0)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        for name in ("genuine", "impostor"):
            v = getattr(self, name)
            if v.size == 0:
                raise ValueError(f"{name} score list is empty")
            if np.any(np.abs(v) > 1.0 + 1e-9) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} scores must lie in [-1, 1]")

    @classmethod
    def from_pairs(cls, sims, labels) -> "ScoreSet":
        sims = np.asarray(sims)
        labels = np.asarray(labels)
        return cls(sims[labels == 1], sims[labels == 0])


def _sweep(scores: ScoreSet):
    """Candidate thresholds (a sentinel below every score, then the sorted union) with FAR and FRR."""
    g = np.sort(scores.genuine)
    i = np.sort(scores.impostor)
    union = np.unique(np.concatenate([g, i]))
    th = np.concatenate([[union[0] - 1.0], union])
    far = 1.0 - np.searchsorted(i, th, side="right") / len(i)
    frr = np.searchsorted(g, th, side="right") / len(g)
    return th, far, frr


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold, interpolating FAR and FRR linearly across the crossing."""
    th, far, frr = _sweep(scores)
    diff = far - frr  # non-increasing in the threshold, starts at +1, ends at -1
    j = int(np.flatnonzero(diff <= 0)[0])
    if diff[j] == 0 or j == 0:
        return float(far[j]), float(th[j])
    w = diff[j - 1] / (diff[j - 1] - diff[j])
    eer = far[j - 1] + w * (far[j] - far[j - 1])
    return float(eer), float(th[j - 1] + w * (th[j] - th[j - 1]))


def confusion(scores: ScoreSet, theta: float) -> tuple[int, int, int, int]:
    tp = int(np.sum(scores.genuine > theta))
    fn = len(scores.genuine) - tp
    fp = int(np.sum(scores.impostor > theta))
    tn = len(scores.impostor) - fp
    return tp, fp, tn, fn


def best_f1(scores: ScoreSet) -> tuple[float, float]:
    """Threshold maximizing F1 over the score union (largest threshold on ties) and that F1."""
    th, far, frr = _sweep(scores)
    tp = (1.0 - frr) * len(scores.genuine)
    fp = far * len(scores.impostor)
    fn = frr * len(scores.genuine)
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    best = f1.max()
    j = int(np.flatnonzero(f1 >= best - 1e-15)[-1])
    return float(th[j]), float(f1[j])


def f1_at(scores: ScoreSet, theta: float) -> float:
    tp, fp, _, fn = confusion(scores, theta)
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def roc_curve(scores: ScoreSet) -> dict:
    """FPR/TPR for decreasing thresholds (so both rates are non-decreasing)."""
    th, far, frr = _sweep(scores)
    return {"threshold": th[::-1], "fpr": far[::-1], "tpr": 1.0 - frr[::-1]}


def pr_curve(scores: ScoreSet) -> dict:
    th, far, frr = _sweep(scores)
    tp = (1.0 - frr) * len(scores.genuine)
    fp = far * len(scores.impostor)
    pred = tp + fp
    precision = np.divide(tp, pred, out=np.ones_like(tp), where=pred > 0)
    return {"threshold": th[::-1], "recall": (1.0 - frr)[::-1], "precision": precision[::-1]}


# ---------------------------------------------------------------------------
# distributions and correlation
# ---------------------------------------------------------------------------

def distance_histograms(intra_sims, inter_sims, bins: int = HIST_BINS) -> dict:
    """Cosine-distance (1 - S) histograms on [0, 2] with means and separation gap."""
    edges = np.linspace(0.0, 2.0, bins + 1)
    intra = 1.0 - np.asarray(intra_sims, dtype=np.float64)
    inter = 1.0 - np.asarray(inter_sims, dtype=np.float64)
    return {
        "edges": edges,
        "intra": np.histogram(np.clip(intra, 0, 2), edges)[0],
        "inter": np.histogram(np.clip(inter, 0, 2), edges)[0],
        "intra_mean": float(intra.mean()),
        "inter_mean": float(inter.mean()),
        "gap": float(inter.mean() - intra.mean()),
    }


def distance_distributions(vectors: np.ndarray, pairs) -> dict:
    ia, ib, y = pairs
    s = pair_similarities(vectors, ia, ib)
    y = np.asarray(y)
    return distance_histograms(s[y == 1], s[y == 0])


def pearson_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlation across coordinates for each row pair."""
    a = np.atleast_2d(a) - np.atleast_2d(a).mean(axis=1, keepdims=True)
    b = np.atleast_2d(b) - np.atleast_2d(b).mean(axis=1, keepdims=True)
    return np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


KEY_CONDITIONS = ("same_subject_same_key", "same_subject_diff_key", "diff_subject_same_key",
                  "diff_subject_diff_key")


def key_correlation_matrix(templates: np.ndarray, subjects, key_ids, exclude=None) -> dict:
    """Mean and mean-absolute Pearson correlation per (subject equal?, key equal?) condition.

    Pairs are unordered ``i < j``. ``exclude`` is an optional boolean (N, N)
    mask of pairs to leave out (e.g. the same scan under two keys).
    """
    t = np.asarray(templates, dtype=np.float64)
    c = t - t.mean(axis=1, keepdims=True)
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    corr = c @ c.T
    s = np.asarray(subjects)
    k = np.asarray(key_ids)
    same_s = s[:, None] == s[None, :]
    same_k = k[:, None] == k[None, :]
    upper = np.triu(np.ones_like(corr, dtype=bool), 1)
    if exclude is not None:
        upper &= ~np.asarray(exclude, dtype=bool)
    out = {}
    for name, m in zip(KEY_CONDITIONS, (same_s & same_k, same_s & ~same_k, ~same_s & same_k, ~same_s & ~same_k)):
        vals = corr[m & upper]
        out[name] = {"mean": float(vals.mean()) if vals.size else float("nan"),
                     "mean_abs": float(np.abs(vals).mean()) if vals.size else float("nan"),
                     "pairs": int(vals.size)}
    return out


# ---------------------------------------------------------------------------
# entropy and mutual information
# ---------------------------------------------------------------------------

def _entropy_bits(counts: np.ndarray, axis) -> np.ndarray:
    n = counts.sum(axis=axis, keepdims=True)
    p = counts / n
    logs = np.log2(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=axis)


def _bins_for(n: int, bins: int) -> int:
    if n < bins:
        warnings.warn(f"only {n} samples for {bins} bins; widening bins to {max(n, 1)}", RuntimeWarning,
                      stacklevel=3)
        return max(n, 1)
    return bins


def histogram_entropy(x: np.ndarray, bins: int = ENTROPY_BINS) -> np.ndarray:
    """Per-column Shannon entropy (bits) from a fixed-bin histogram over the observed range."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b = _bins_for(len(x), bins)
    return _entropy_bits(kernels.column_hist(x, b), axis=1)


def histogram_mi(x: np.ndarray, y: np.ndarray, bins: int = ENTROPY_BINS) -> np.ndarray:
    """Per-column mutual information (bits) between matching columns of ``x`` and ``y``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError("x and y must have the same shape")
    b = _bins_for(len(x), bins)
    joint = kernels.joint_hist(x, y, b)
    hx = _entropy_bits(joint.sum(axis=2), axis=1)
    hy = _entropy_bits(joint.sum(axis=1), axis=1)
    hxy = _entropy_bits(joint.reshape(len(joint), -1), axis=1)
    return hx + hy - hxy


def entropy_mi_report(z: np.ndarray, z_t: np.ndarray, bins: int = ENTROPY_BINS) -> dict:
    """Dimension-averaged H(Z), H(Z_T), MI(Z; Z_T) and the derived loss/preservation figures."""
    hz = float(histogram_entropy(z, bins).mean())
    hzt = float(histogram_entropy(z_t, bins).mean())
    mi = float(histogram_mi(z, z_t, bins).mean())
    return {"H_Z": hz, "H_ZT": hzt, "MI": mi, "info_loss": hz - mi,
            "info_preservation": mi / hz if hz > 0 else float("nan"),
            "estimator": f"fixed-bin histogram, {bins} bins per dimension over the observed range",
            "units": "bits", "samples": int(len(np.atleast_2d(z)))}


# ---------------------------------------------------------------------------
# trade-off model
# ---------------------------------------------------------------------------

def tradeoff_model(k, t, c: float = 0.05, big_c: float = 1.0, a: float = 0.2, alpha: float = 0.1,
                   n: int = 642) -> tuple:
    """``dH = K/2 log(1 + cT) + C log(N/K)`` and ``dEER = A exp(-alpha K / (1 + cT))``.

    ``n`` is the vertex count; logs are natural. The constants are free model
    parameters with illustrative defaults.
    """
    k = np.asarray(k, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    dh = 0.5 * k * np.log1p(c * t) + big_c * np.log(n / k)
    deer = a * np.exp(-alpha * k / (1.0 + c * t))
    if dh.ndim == 0:
        return float(dh), float(deer)
    return dh, deer


def tradeoff_grid(ks=(10, 20, 25), ts=(25, 50, 75), **params) -> list[dict]:
    rows = []
    for k in ks:
        for t in ts:
            dh, deer = tradeoff_model(k, t, **params)
            rows.append({"K": k, "T": t, "dH": dh, "dEER": deer})
    return rows


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    best_threshold: float
    f1: float
    roc: dict = field(repr=False)
    pr: dict = field(repr=False)
    distances: dict = field(repr=False)
    correlation: dict = field(default_factory=dict)
    entropy: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores: ScoreSet, **extra) -> "EvalReport":
        eer, eer_th = compute_eer(scores)
        theta, f1 = best_f1(scores)
        return cls(eer, eer_th, theta, f1, roc_curve(scores), pr_curve(scores),
                   distance_histograms(scores.genuine, scores.impostor), **extra)

    def to_json(self) -> dict:
        def plain(x):
            if isinstance(x, dict):
                return {k: plain(v) for k, v in x.items()}
            if isinstance(x, (np.ndarray, list, tuple)):
                return [plain(v) for v in x]
            if isinstance(x, (np.floating, np.integer)):
                return x.item()
            return x

        return plain(asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def export_csv(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = []
        for name, table in (("roc", self.roc), ("pr", self.pr)):
            path = directory / f"{name}.csv"
            cols = list(table)
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for row in zip(*(table[c] for c in cols)):
                    w.writerow([repr(float(v)) for v in row])
            out.append(path)
        path = directory / "distances.csv"
        e = self.distances["edges"]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "intra", "inter"])
            for i in range(len(e) - 1):
                w.writerow([repr(float(e[i])), repr(float(e[i + 1])), int(self.distances["intra"][i]),
                            int(self.distances["inter"][i])])
        out.append(path)
        return out
