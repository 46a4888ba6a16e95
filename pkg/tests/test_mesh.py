import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specface.errors import MeshParseError, TopologyError, ZeroExtentError
from specface.mesh import (CorpusSpec, Mesh, crop_face, generate_corpus, load_mesh, make_pairs, normalize_mesh,
                           read_corpus, save_obj, save_ply, split_subjects, write_corpus)

from conftest import cube_mesh


def _write(tmp_path: Path, name: str, text: str) -> Path:
    p = tmp_path / name
    p.write_text(text)
    return p


def test_single_triangle_obj(tmp_path):
    m = load_mesh(_write(tmp_path, "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
    assert m.n_vertices == 3 and len(m.faces) == 1


@pytest.mark.parametrize("face", ["f 0 1 2", "f 1 2 4"])
def test_obj_index_out_of_range(tmp_path, face):
    with pytest.raises(TopologyError):
        load_mesh(_write(tmp_path, "t.obj", f"v 0 0 0\nv 1 0 0\nv 0 1 0\n{face}\n"))


def test_obj_malformed(tmp_path):
    with pytest.raises(MeshParseError):
        load_mesh(_write(tmp_path, "t.obj", "v 0 0\nf 1 2 3\n"))


def test_degenerate_face_rejected():
    with pytest.raises(TopologyError):
        Mesh(np.eye(3), [[0, 0, 1]])


def test_tetrahedron_ply_edges(tmp_path):
    text = """ply
format ascii 1.0
element vertex 4
property float x
property float y
property float z
element face 4
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""
    m = load_mesh(_write(tmp_path, "tet.ply", text))
    # brute force: collect every unordered vertex pair that shares a face
    pairs = {frozenset((f[i], f[j])) for f in m.faces.tolist() for i in range(3) for j in range(3) if i != j}
    assert len(m.edges) == len(pairs) == 6


def test_obj_ply_round_trip(tmp_path, ico2):
    save_obj(ico2, tmp_path / "a.obj")
    save_ply(ico2, tmp_path / "a.ply")
    for p in ("a.obj", "a.ply"):
        m = load_mesh(tmp_path / p)
        assert np.array_equal(m.vertices, ico2.vertices)
        assert np.array_equal(m.faces, ico2.faces)


def test_normalize_cube():
    m = normalize_mesh(cube_mesh(center=(5, 5, 5), half=2.0))
    assert np.allclose(m.vertices.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-12)
    assert np.allclose(np.abs(m.vertices), 1 / np.sqrt(3), atol=1e-12)


def test_normalize_idempotent(ico3):
    once = normalize_mesh(ico3.with_vertices(ico3.vertices * 3 + 1))
    twice = normalize_mesh(once)
    assert np.abs(once.vertices - twice.vertices).max() < 1e-9
    assert np.array_equal(once.faces, twice.faces)


def test_normalize_zero_extent():
    with pytest.raises(ZeroExtentError):
        normalize_mesh(Mesh(np.ones((3, 3)), [[0, 1, 2]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100), st.floats(-50, 50))
def test_normalize_invariants(seed, scale, shift):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((20, 3)) * scale + shift
    m = normalize_mesh(Mesh(v, [[0, 1, 2]]))
    assert np.abs(m.vertices.mean(axis=0)).max() < 1e-9
    assert abs(np.linalg.norm(m.vertices, axis=1).max() - 1) < 1e-9


def test_corpus_shapes_and_topology():
    spec = CorpusSpec(subject_count=2, scans_per_subject=3, vertex_count=162)
    meshes = generate_corpus(spec)
    assert len(meshes) == 6
    assert all(m.n_vertices == 162 for m in meshes)
    assert all(np.array_equal(m.faces, meshes[0].faces) for m in meshes)


def test_corpus_zero_amplitudes_identical():
    spec = CorpusSpec(subject_count=2, scans_per_subject=3, vertex_count=162, identity_amplitude=0,
                      expression_amplitude=0, noise_amplitude=0)
    meshes = generate_corpus(spec)
    assert all(np.array_equal(m.vertices, meshes[0].vertices) for m in meshes)


def test_corpus_deterministic(tmp_path):
    spec = CorpusSpec(subject_count=3, scans_per_subject=2, vertex_count=162)
    a, b = generate_corpus(spec), generate_corpus(spec)
    assert all(x.vertices.tobytes() == y.vertices.tobytes() for x, y in zip(a, b))
    write_corpus(a, spec, tmp_path / "c1")
    write_corpus(b, spec, tmp_path / "c2")
    for f in sorted((tmp_path / "c1").iterdir()):
        assert f.read_bytes() == (tmp_path / "c2" / f.name).read_bytes()
    loaded, manifest = read_corpus(tmp_path / "c1")
    assert manifest["corpus_spec"]["subject_count"] == 3
    assert (tmp_path / "c1" / "s0_1.obj").exists()
    assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(loaded, a))


def test_corpus_amplitude_order_warns():
    with pytest.warns(UserWarning):
        CorpusSpec(identity_amplitude=0.001, expression_amplitude=0.01).validate()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        CorpusSpec().validate()


class _Scan:
    def __init__(self, s, k):
        self.subject_id, self.scan_id = s, k


def _scans(subjects, scans):
    return [_Scan(s, k) for s in range(subjects) for k in range(scans)]


def test_pairs_five_scans_plus_other():
    meshes = [_Scan(0, k) for k in range(5)] + [_Scan(1, 0)]
    pairs = [p for p in make_pairs(meshes, {0, 1}) if p.a[0] == 0]
    assert sum(p.label for p in pairs) == 20
    assert sum(1 - p.label for p in pairs) == 20


def test_pairs_two_by_two():
    pairs = make_pairs(_scans(2, 2), {0, 1})
    assert sum(p.label for p in pairs) == 4 and len(pairs) == 8


def test_pairs_single_subject_error():
    with pytest.raises(ValueError):
        make_pairs(_scans(1, 4), {0})


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 5), st.integers(0, 1000))
def test_pairs_balanced(subjects, scans, seed):
    pairs = make_pairs(_scans(subjects, scans), set(range(subjects)), seed=seed)
    pos = [p for p in pairs if p.label == 1]
    neg = [p for p in pairs if p.label == 0]
    assert len(pos) == len(neg) == subjects * scans * (scans - 1)
    assert all(p.a[0] == p.b[0] for p in pos) and all(p.a[0] != p.b[0] for p in neg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(0, 1000))
def test_split_disjoint_and_sized(n, seed):
    s = split_subjects(range(n), seed=seed)
    assert s.train | s.val | s.test == set(range(n))
    assert not (s.train & s.val or s.train & s.test or s.val & s.test)
    assert len(s.val) == int(np.floor(0.15 * n + 1e-9))
    if n < 4:
        assert len(s.test) == int(np.floor(0.15 * n + 1e-9))
    else:
        assert len(s.test) == max(2, int(np.floor(0.15 * n + 1e-9)))


def test_split_default_proportions():
    s = split_subjects(range(20))
    assert (len(s.train), len(s.val), len(s.test)) == (14, 3, 3)


def test_crop_keeps_connected_face_region(ico3):
    m = crop_face(ico3.with_vertices(ico3.vertices * np.array([1.0, 1.0, 2.0])))
    assert 0 < m.n_vertices < ico3.n_vertices
    assert m.faces.max() < m.n_vertices
