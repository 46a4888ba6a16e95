"""Constrained similarity attack on protected templates.

The attacker holds a target template, the protection network, the schedule and
(in the strongest setting) the key, so the map ``Z' -> diffuse(Z', key)`` can
be evaluated and differentiated. Starting from seeded random guesses it
climbs ``cos(Z_T, diffuse(Z'))`` with Adam steps, projecting ``Z'`` back into
the l2 ball of radius rho after each step, and keeps the best iterate seen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Adam, Tensor, parameter
from .protect import KeyMaterial, NoiseSchedule, PhiNetwork, diffuse_tensor, key_inputs


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 500
    step: float = 0.01
    radius: float = 1.0
    restarts: int = 4
    thresholds: tuple = (0.50, 0.75)
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.restarts < 1:
            raise ValueError("need at least one restart")
        if any(not -1.0 <= t <= 1.0 for t in self.thresholds):
            raise ValueError("thresholds must lie in [-1, 1]")


@dataclass
class AttackResult:
    best_similarity: np.ndarray          # (targets,)
    preimages: np.ndarray                # (targets, d)
    restart_similarity: np.ndarray = field(repr=False, default=None)  # (targets, restarts)


@dataclass
class AttackReport:
    best_similarity: list
    sar: dict

    def to_json(self) -> dict:
        return {"best_similarity": [float(s) for s in self.best_similarity],
                "sar": {f"{t:.4f}": float(v) for t, v in self.sar.items()}}


def _project(z: np.ndarray, radius: float) -> np.ndarray:
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    return z * np.minimum(1.0, radius / np.maximum(norm, 1e-300))


def _cos_rows(a: Tensor, b: np.ndarray) -> Tensor:
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return (a * bn).sum(axis=-1) / (a * a).sum(axis=-1).sqrt()


def csa_attack(targets: np.ndarray, oracle, d: int, cfg: AttackConfig = AttackConfig()) -> AttackResult:
    """Attack every row of ``targets`` (T x d templates) with ``cfg.restarts`` starts each.

    ``oracle(z, rows)`` maps a (B, d) candidate tensor to protected outputs,
    where ``rows[i]`` names the target that candidate ``i`` attacks (so a
    per-target key can be applied). Restarts whose objective turns non-finite
    are dropped from that point on.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n_t, r = len(targets), cfg.restarts
    rows = np.repeat(np.arange(n_t), r)
    rng = np.random.default_rng(cfg.seed)
    init = rng.standard_normal((n_t * r, d))
    init *= cfg.init_scale * cfg.radius / np.linalg.norm(init, axis=1, keepdims=True)
    z = parameter(init)
    opt = Adam([z], lr=cfg.step)
    tgt = targets[rows]
    alive = np.ones(n_t * r, dtype=bool)
    best = np.full(n_t * r, -np.inf)
    best_z = init.copy()
    for it in range(cfg.iterations + 1):
        sim = _cos_rows(oracle(z, rows), tgt)
        vals = sim.data.copy()
        alive &= np.isfinite(vals)
        better = alive & (vals > best)
        best[better] = vals[better]
        best_z[better] = z.data[better]
        if it == cfg.iterations or not alive.any():
            break
        opt.zero_grad()
        (sim * alive.astype(np.float64)).sum().backward()
        z.grad = -np.nan_to_num(z.grad)  # ascend
        opt.step()
        z.data[:] = _project(z.data, cfg.radius)
    per = best.reshape(n_t, r)
    pick = np.argmax(per, axis=1)
    return AttackResult(per[np.arange(n_t), pick], best_z.reshape(n_t, r, d)[np.arange(n_t), pick], per)


def diffusion_oracle(keys, schedule: NoiseSchedule, phi: PhiNetwork):
    """Oracle evaluating the protection map under the attacker's key for each target."""
    emb, noise = key_inputs(keys, schedule.steps, phi.d)
    betas = schedule.betas

    def oracle(z, rows):
        return diffuse_tensor(z, emb[rows], noise[rows], betas, phi)

    return oracle


def identity_oracle(z, rows):
    return z


def attack_templates(templates: np.ndarray, keys, schedule: NoiseSchedule, phi: PhiNetwork,
                     cfg: AttackConfig = AttackConfig(), with_key: bool = True) -> AttackResult:
    """White-box attack on protected templates.

    With ``with_key=False`` the attacker substitutes a random key of their own
    for every target.
    """
    if not with_key:
        rng = np.random.default_rng([cfg.seed, 1])
        keys = [KeyMaterial.random(rng) for _ in keys]
    return csa_attack(templates, diffusion_oracle(keys, schedule, phi), phi.d, cfg)


def sar_report(best_similarity, thresholds) -> AttackReport:
    """Successful attack rate: fraction of targets whose best similarity exceeds each threshold."""
    s = np.asarray(best_similarity, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no attack results")
    return AttackReport(list(s), {float(t): float(np.mean(s > t)) for t in thresholds})
