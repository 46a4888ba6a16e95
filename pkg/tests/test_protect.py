import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specface.autograd import Tensor
from specface.errors import CheckpointError, DivergenceError
from specface.protect import (KeyMaterial, LossWeights, NoiseSchedule, PhiNetwork, ProtectConfig, ProtectedTemplate,
                              diffuse, diffuse_batch, diffuse_reference, diffuse_tensor, key_embed, keyed_noise,
                              loss_contrastive_protected, loss_discriminability, loss_key_diversity, loss_total,
                              loss_unlinkability, noise_table, pair_masks, train_protect)


def _key(i: int) -> KeyMaterial:
    return KeyMaterial(i.to_bytes(16, "little"))


def _unit(rng, n=64):
    z = rng.standard_normal(n)
    return z / np.linalg.norm(z)


def _zero_phi(d=64, c=None):
    phi = PhiNetwork(d=d, seed=0)
    for p in phi.parameters():
        p.data[...] = 0.0
    if c is not None:
        phi.biases[2].data[...] = c
    return phi


# -- keys ------------------------------------------------------------------

def test_key_id_digest_and_repr():
    import hashlib
    k = _key(5)
    assert k.key_id == hashlib.sha256(k.key).hexdigest()[:16]
    assert k.key.hex() not in repr(k)
    assert KeyMaterial.from_hex(k.hex()) == k
    with pytest.raises(ValueError):
        KeyMaterial(b"short")


def test_key_embed_determinism_and_range():
    e = key_embed(KeyMaterial(bytes(16)))
    assert np.array_equal(e, key_embed(KeyMaterial(bytes(16))))
    assert e.shape == (32,) and np.all((e >= -1) & (e <= 1))


def test_key_embed_avalanche():
    rng = np.random.default_rng(0)
    cos = []
    for _ in range(100):
        raw = bytearray(rng.bytes(16))
        a = key_embed(KeyMaterial(bytes(raw)))
        bit = int(rng.integers(128))
        raw[bit // 8] ^= 1 << (bit % 8)
        b = key_embed(KeyMaterial(bytes(raw)))
        cos.append(abs(a @ b) / np.linalg.norm(a) / np.linalg.norm(b))
    assert max(cos) < 0.9
    assert np.mean(cos) < 0.2


def test_keyed_noise_determinism_and_moments():
    k = _key(1)
    assert np.array_equal(keyed_noise(k, 3, 64), keyed_noise(k, 3, 64))
    samples = noise_table(k, 1563, 64).ravel()[:100_000]
    assert len(samples) == 100_000
    assert abs(samples.mean()) < 0.02
    assert abs(samples.var() - 1) < 0.03


def test_keyed_noise_step_independence():
    k = _key(2)
    rho = []
    for t in range(1, 101):
        a, b = keyed_noise(k, t, 64), keyed_noise(k, t + 101, 64)
        rho.append(np.corrcoef(a, b)[0, 1])
    # averaged correlation; a single 64-sample correlation has standard error ~0.125
    assert abs(np.mean(rho)) < 0.05


def test_keyed_noise_rejects_step_zero():
    with pytest.raises(ValueError):
        keyed_noise(_key(1), 0, 4)


# -- schedule and diffusion -------------------------------------------------

def test_schedule():
    s = NoiseSchedule()
    assert s.betas[0] == 1e-4 and s.betas[-1] == 0.02 and len(s.betas) == 50
    assert np.all(np.diff(s.betas) > 0)
    for bad in (dict(steps=0), dict(beta_start=0.0), dict(beta_end=1.0), dict(beta_start=0.02, beta_end=0.01)):
        with pytest.raises(ValueError):
            NoiseSchedule(**bad)


def test_identity_limit_exact():
    rng = np.random.default_rng(0)
    z = _unit(rng)[None]
    noise = noise_table(_key(1), 10, 64)[None]
    out = diffuse_tensor(z, key_embed(_key(1))[None], noise, np.zeros(10), _zero_phi())
    assert np.array_equal(out.data, z)


def test_single_step_hand_check():
    rng = np.random.default_rng(1)
    z = _unit(rng)
    c = rng.standard_normal(64)
    key = _key(3)
    eps = keyed_noise(key, 1, 64)
    out = diffuse_tensor(z[None], key_embed(key)[None], noise_table(key, 1, 64)[None], np.array([0.5]),
                         _zero_phi(c=c)).data[0]
    want = np.sqrt(0.5) * z + np.sqrt(0.5) * eps + 0.5 * c
    assert np.abs(out - want).max() <= 1e-12


def test_fused_matches_reference():
    rng = np.random.default_rng(2)
    phi = PhiNetwork(seed=4)
    keys = [_key(i) for i in range(6)]
    z = np.stack([_unit(rng) for _ in keys])
    from specface.protect import key_inputs
    emb, noise = key_inputs(keys, 50, 64)
    betas = NoiseSchedule().betas
    a = diffuse_tensor(z, emb, noise, betas, phi).data
    b = diffuse_reference(z, emb, noise, betas, phi).data
    assert np.abs(a - b).max() < 1e-10


def test_diffuse_determinism_and_key_sensitivity():
    rng = np.random.default_rng(3)
    phi, sched = PhiNetwork(seed=1), NoiseSchedule()
    z = _unit(rng)
    t1 = diffuse(z, _key(1), sched, phi, k=10)
    t2 = diffuse(z, _key(1), sched, phi, k=10)
    t3 = diffuse(z, _key(2), sched, phi, k=10)
    assert t1.z_t.tobytes() == t2.z_t.tobytes()
    assert np.abs(t1.z_t - t3.z_t).max() > 1e-6
    assert t1.params == (10, 50, 64) and t1.key_id == _key(1).key_id


def test_diffuse_preconditions():
    phi, sched = PhiNetwork(seed=1), NoiseSchedule()
    with pytest.raises(ValueError):
        diffuse(np.ones(64), _key(1), sched, phi)
    with pytest.raises(ValueError):
        diffuse(np.ones(32) / np.sqrt(32), _key(1), sched, phi)


def test_diffuse_non_finite():
    phi = _zero_phi(c=np.full(64, np.inf))
    with pytest.raises(DivergenceError):
        diffuse(np.eye(64)[0], _key(1), NoiseSchedule(3), phi)


def test_batch_matches_single():
    rng = np.random.default_rng(4)
    phi, sched = PhiNetwork(seed=2), NoiseSchedule(20)
    z = np.stack([_unit(rng) for _ in range(3)])
    keys = [_key(1), _key(2), _key(1)]
    batch = diffuse_batch(z, keys, sched, phi)
    for i in range(3):
        assert np.allclose(batch[i], diffuse(z[i], keys[i], sched, phi).z_t, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 80))
def test_renewability_property(seed, steps):
    rng = np.random.default_rng(seed)
    phi = PhiNetwork(seed=seed % 7)
    z = _unit(rng)
    k1, k2 = KeyMaterial.random(rng), KeyMaterial.random(rng)
    a = diffuse(z, k1, NoiseSchedule(steps), phi).z_t
    b = diffuse(z, k2, NoiseSchedule(steps), phi).z_t
    assert np.all(np.isfinite(a)) and np.abs(a - b).max() > 1e-6


# -- serialization -----------------------------------------------------------

def test_template_json_round_trip():
    rng = np.random.default_rng(5)
    t = diffuse(_unit(rng), _key(9), NoiseSchedule(), PhiNetwork(seed=3), k=10)
    obj = json.loads(t.dumps())
    assert set(obj) == {"version", "K", "T", "d", "key_id", "z_T"}
    back = ProtectedTemplate.loads(t.dumps())
    assert back.z_t.tobytes() == t.z_t.tobytes()
    assert (back.k, back.steps, back.d, back.key_id) == (10, 50, 64, _key(9).key_id)
    bad = dict(obj, z_T=obj["z_T"][:-1])
    with pytest.raises(ValueError):
        ProtectedTemplate.from_json(bad)


def test_phi_checkpoint_round_trip(tmp_path):
    phi = PhiNetwork(seed=11)
    phi.biases[0].data[...] = 0.25
    phi.save(tmp_path / "phi.ckpt")
    raw = (tmp_path / "phi.ckpt").read_bytes()
    assert raw[:8] == b"SFPHI\x00\x00\x00"
    back = PhiNetwork.load(tmp_path / "phi.ckpt")
    back.save(tmp_path / "phi2.ckpt")
    assert (tmp_path / "phi2.ckpt").read_bytes() == raw
    (tmp_path / "bad.ckpt").write_bytes(raw[:20])
    with pytest.raises(CheckpointError):
        PhiNetwork.load(tmp_path / "bad.ckpt")


# -- losses --------------------------------------------------------------------

def _two(s: float):
    """Similarity matrix for two items with off-diagonal ``s``."""
    return np.array([[1.0, s], [s, 1.0]])


def test_mask_partition_example():
    m = pair_masks([0, 0, 1], ["a", "b", "a"])
    assert m["gen"].sum() == 0 and m["diff"][0, 1] and m["imp"][0, 2] and m["mis"][1, 2]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2)), min_size=1, max_size=12))
def test_masks_partition(items):
    subjects, keys = zip(*items)
    m = pair_masks(list(subjects), [str(k) for k in keys])
    total = sum(v.astype(int) for v in m.values())
    off = ~np.eye(len(items), dtype=bool)
    assert np.all(total[off] == 1) and np.all(total[~off] == 0)


def test_discriminability_examples():
    gen = pair_masks([0, 0], ["a", "a"])
    s = np.array([[1.0, 0.3], [0.3, 1.0]])
    assert float(loss_discriminability(s, Tensor(s), gen).data) == 0.0
    imp = pair_masks([0, 1], ["a", "a"])
    assert float(loss_discriminability(_two(0.2), Tensor(_two(0.0)), imp).data) == 0.0
    assert np.isclose(float(loss_discriminability(_two(0.2), Tensor(_two(0.5)), imp,
                                                  LossWeights(lambda_imp=1.0)).data), 0.25)


def test_contrastive_protected_examples():
    w = LossWeights(beta_imp=1.0, margin=0.5)
    assert float(loss_contrastive_protected(Tensor(_two(1.0)), pair_masks([0, 0], ["a", "a"]), w).data) == 0.0
    imp = pair_masks([0, 1], ["a", "a"])
    assert float(loss_contrastive_protected(Tensor(_two(0.5)), imp, w).data) == 0.0
    assert np.isclose(float(loss_contrastive_protected(Tensor(_two(0.8)), imp, w).data), 0.3)


def test_pairwise_examples():
    a = np.array([1.0, 0.0])
    assert np.isclose(float(loss_unlinkability(a, a).data), 1.0)
    assert float(loss_unlinkability(a, np.array([0.0, 1.0])).data) == 0.0
    b = np.array([-0.4, np.sqrt(1 - 0.16)])
    assert np.isclose(float(loss_unlinkability(a, b).data), 0.4)
    assert float(loss_key_diversity(a, a, "k", "k").data) == 0.0
    assert float(loss_key_diversity(a, np.array([0.0, 1.0]), "k1", "k2").data) == 0.0
    c = np.array([0.7, np.sqrt(1 - 0.49)])
    assert np.isclose(float(loss_key_diversity(a, c, "k1", "k2").data), 0.7)


def test_loss_total_weight_zeroing_and_empty_masks():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 5))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    s = Tensor(x @ x.T)
    masks = pair_masks([0, 0, 1, 1, 2, 2], ["a", "b", "a", "b", "a", "b"])
    w = LossWeights(lambda_u=0.0, lambda_d=0.0)
    total, parts = loss_total(x @ x.T, s, masks, w)
    assert np.isclose(float(total.data), parts["disc"] + parts["contr"])
    # all items one subject and key: only the genuine mask is populated
    lone = pair_masks([0, 0, 0], ["a", "a", "a"])
    total, parts = loss_total(np.eye(3), Tensor(np.eye(3)), lone)
    assert np.isfinite(float(total.data))
    assert set(parts["empty_masks"]) == {"imp", "diff", "mis"}


def test_loss_total_zero():
    masks = pair_masks([0, 0], ["a", "a"])
    total, _ = loss_total(np.ones((2, 2)), Tensor(np.ones((2, 2))), masks)
    assert float(total.data) == 0.0


# -- training ----------------------------------------------------------------

def _toy_embeddings(seed=0, subjects=4, scans=4):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((subjects, 64))
    z = np.repeat(centers, scans, axis=0) + 0.2 * rng.standard_normal((subjects * scans, 64))
    return z / np.linalg.norm(z, axis=1, keepdims=True), np.repeat(np.arange(subjects), scans)


def _diff_key_abs_cos(phi, z, sched):
    a = diffuse_batch(z, [_key(101)] * len(z), sched, phi)
    b = diffuse_batch(z, [_key(202)] * len(z), sched, phi)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return float(np.abs(np.einsum("ij,ij->i", a, b)).mean())


def test_training_reduces_cross_key_similarity():
    z, subj = _toy_embeddings()
    zv, _ = _toy_embeddings(seed=1)
    sched = NoiseSchedule(50)
    phi = PhiNetwork(seed=0)
    before = _diff_key_abs_cos(phi, zv, sched)
    train_protect(phi, z, subj, sched, ProtectConfig(epochs=200, lr=1e-3, subjects_per_batch=4))
    assert _diff_key_abs_cos(phi, zv, sched) < before


def test_zero_epochs_and_determinism():
    z, subj = _toy_embeddings()
    sched = NoiseSchedule(10)
    phi = PhiNetwork(seed=0)
    init = [p.data.copy() for p in phi.parameters()]
    assert train_protect(phi, z, subj, sched, ProtectConfig(epochs=0)) == []
    assert all(np.array_equal(a, p.data) for a, p in zip(init, phi.parameters()))
    assert np.all(np.isfinite(diffuse(z[0], _key(1), sched, phi).z_t))
    runs = []
    for _ in range(2):
        phi = PhiNetwork(seed=0)
        train_protect(phi, z, subj, sched, ProtectConfig(epochs=5, seed=3))
        runs.append([p.data.copy() for p in phi.parameters()])
    assert all(np.array_equal(a, b) for a, b in zip(*runs))


def test_training_needs_two_subjects():
    z, _ = _toy_embeddings(subjects=1)
    with pytest.raises(ValueError):
        train_protect(PhiNetwork(), z, np.zeros(len(z)), NoiseSchedule(5), ProtectConfig(epochs=1))
