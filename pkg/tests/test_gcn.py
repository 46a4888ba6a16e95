import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specface.autograd import Tensor
from specface.errors import CheckpointError, ShapeMismatchError
from specface.gcn import GcnModel, contrastive_loss, pair_indices, path_propagation, train_gcn
from specface.mesh import make_pairs


def test_path_propagation_matches_definition():
    k = 5
    a = np.eye(k) + np.eye(k, k=1) + np.eye(k, k=-1)
    d = a.sum(axis=1)
    assert np.allclose(path_propagation(k), a / np.sqrt(np.outer(d, d)), atol=1e-15)
    assert np.allclose(path_propagation(k), path_propagation(k).T)


def test_zero_input_fallback():
    model = GcnModel(k=4, n=3, seed=0)
    with pytest.warns(RuntimeWarning):
        z = model.embed(np.zeros((4, 3)))
    assert np.array_equal(z, np.eye(model.d)[0])


def test_purity_and_unit_norm():
    rng = np.random.default_rng(0)
    model = GcnModel(k=10, n=10, seed=1)
    x = rng.standard_normal((7, 10, 10))
    a, b = model.embed(x), model.embed(x.copy())
    assert np.array_equal(a, b)
    assert np.abs(np.linalg.norm(a, axis=1) - 1).max() < 1e-9
    assert np.allclose(model.embed(x[3]), a[3], atol=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        GcnModel(k=10, n=10).embed(np.zeros((20, 10)))


@pytest.mark.parametrize("s,y,m,want", [(1.0, 1, 0.5, 0.0), (0.5, 0, 0.5, 0.0), (1.0, 0, 0.5, 0.5)])
def test_contrastive_examples(s, y, m, want):
    theta = np.arccos(s)
    za = np.array([[1.0, 0.0]])
    zb = np.array([[np.cos(theta), np.sin(theta)]])
    assert np.isclose(float(contrastive_loss(za, zb, [y], m).data), want, atol=1e-12)


def test_contrastive_empty():
    with pytest.raises(ValueError):
        contrastive_loss(np.zeros((0, 2)), np.zeros((0, 2)), [], 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_contrastive_bounds(seed, m):
    rng = np.random.default_rng(seed)
    za, zb = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    y = rng.integers(0, 2, 6)
    v = float(contrastive_loss(za, zb, y, m).data)
    assert 0.0 <= v <= 2.0


class _Scan:
    def __init__(self, s, k):
        self.subject_id, self.scan_id = s, k


def _toy(seed=0, subjects=2, scans=4):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((subjects, 4, 3))
    feats, refs = [], []
    for s in range(subjects):
        for k in range(scans):
            feats.append(centers[s] + 0.3 * rng.standard_normal((4, 3)))
            refs.append(_Scan(s, k))
    index = {(r.subject_id, r.scan_id): i for i, r in enumerate(refs)}
    return np.array(feats), pair_indices(make_pairs(refs, set(range(subjects))), index)


def test_two_subject_training_separates():
    feats, pairs = _toy()
    model = GcnModel(k=4, n=3, hidden=16, d=8, seed=0)
    history = train_gcn(model, feats, pairs, epochs=50, lr=1e-2, batch_size=8)
    z = model.embed(feats)
    ia, ib, y = pairs
    s = np.einsum("ij,ij->i", z[ia], z[ib])
    assert s[y == 1].mean() > s[y == 0].mean()
    assert np.mean(history[-10:]) <= np.mean(history[:10])


def test_zero_lr_keeps_weights():
    feats, pairs = _toy()
    model = GcnModel(k=4, n=3, hidden=8, d=8, seed=0)
    before = [p.data.copy() for p in model.parameters()]
    train_gcn(model, feats, pairs, epochs=3, lr=0.0)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


def test_training_deterministic():
    feats, pairs = _toy()
    runs = []
    for _ in range(2):
        model = GcnModel(k=4, n=3, hidden=8, d=8, seed=3)
        train_gcn(model, feats, pairs, epochs=5, lr=1e-2, seed=7)
        runs.append(model.blocks())
    assert all(np.array_equal(a, b) for a, b in zip(*runs))


def test_checkpoint_round_trip(tmp_path):
    feats, pairs = _toy()
    model = GcnModel(k=4, n=3, hidden=8, d=8, seed=0)
    train_gcn(model, feats, pairs, epochs=2, lr=1e-2)
    model.save(tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"SFGCN\x00\x00\x00"
    back = GcnModel.load(tmp_path / "m.ckpt")
    back.save(tmp_path / "m2.ckpt")
    assert (tmp_path / "m2.ckpt").read_bytes() == raw
    assert np.array_equal(back.embed(feats), model.embed(feats))
    (tmp_path / "bad.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        GcnModel.load(tmp_path / "bad.ckpt")
    (tmp_path / "bad2.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError):
        GcnModel.load(tmp_path / "bad2.ckpt")


def test_forward_tensor_graph_only_when_needed():
    model = GcnModel(k=3, n=2, hidden=4, d=4)
    for p in model.parameters():
        p.requires_grad = False
    out = model.forward(np.ones((1, 3, 2)))
    assert isinstance(out, Tensor) and not out.requires_grad
