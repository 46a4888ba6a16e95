"""Triangle meshes: validation, ASCII OBJ/PLY I/O, normalization, cropping,
the synthetic identity corpus and subject-disjoint pair generation."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import MeshParseError, TopologyError, ZeroExtentError


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    subject_id: object = None
    scan_id: object = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces)
        if faces.size and not np.issubdtype(faces.dtype, np.integer):
            raise TopologyError("face indices must be integers")
        self.faces = faces.astype(np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise TopologyError(f"face index out of range for {n} vertices")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise TopologyError("degenerate face (repeated vertex index)")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshParseError("non-finite vertex coordinate")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``i < j``."""
        return unique_edges(self.faces)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces.copy(), self.subject_id, self.scan_id)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    f = np.asarray(faces, dtype=np.int64)
    if f.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _read_obj(text: str):
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append([float(p) for p in parts[1:4]])
            elif tag == "f":
                if len(parts) < 4:
                    raise ValueError("face needs at least 3 indices")
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                # OBJ is 1-based; 0 and negatives are rejected as out of range
                faces.extend(_fan([i - 1 if i > 0 else -1 for i in idx]))
        except ValueError as exc:
            raise MeshParseError(f"line {lineno}: {exc}") from None
    return verts, faces


def _read_ply(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError("missing 'ply' magic")
    n_vert = n_face = None
    vert_props = []
    current = None
    body_start = None
    for i, line in enumerate(lines[1:], 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise MeshParseError("only ASCII PLY is supported")
        elif tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_vert = int(tok[2])
            elif current == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            vert_props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None or n_vert is None:
        raise MeshParseError("incomplete PLY header")
    try:
        xyz = [vert_props.index(c) for c in "xyz"]
    except ValueError:
        raise MeshParseError("PLY vertex element lacks x/y/z") from None
    body = [ln.split() for ln in lines[body_start:] if ln.strip()]
    n_face = n_face or 0
    if len(body) < n_vert + n_face:
        raise MeshParseError("PLY body shorter than declared element counts")
    try:
        verts = [[float(row[j]) for j in xyz] for row in body[:n_vert]]
        faces = []
        for row in body[n_vert:n_vert + n_face]:
            k = int(row[0])
            if len(row) < k + 1 or k < 3:
                raise ValueError("bad face row")
            faces.extend(_fan([int(v) for v in row[1:k + 1]]))
    except (ValueError, IndexError) as exc:
        raise MeshParseError(f"PLY body: {exc}") from None
    return verts, faces


def load_mesh(path, format: str | None = None, subject_id=None, scan_id=None) -> Mesh:
    """Read an ASCII OBJ or PLY file. The result is validated but not normalized."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    text = path.read_text()
    if fmt == "obj":
        verts, faces = _read_obj(text)
    elif fmt == "ply":
        verts, faces = _read_ply(text)
    else:
        raise MeshParseError(f"unsupported mesh format {fmt!r}")
    if not verts:
        raise MeshParseError("no vertices")
    return Mesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3),
                subject_id, scan_id)


def save_obj(mesh: Mesh, path) -> None:
    out = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(out) + "\n")


def save_ply(mesh: Mesh, path) -> None:
    head = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
            "property double x", "property double y", "property double z",
            f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    body = [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(head + body) + "\n")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def normalize_mesh(mesh: Mesh) -> Mesh:
    """Translate the vertex centroid to the origin and scale the farthest vertex to norm 1."""
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    scale = np.sqrt((v * v).sum(axis=1)).max()
    if not scale > 0:
        raise ZeroExtentError("all vertices coincide")
    return mesh.with_vertices(v / scale)


def largest_component(mesh: Mesh) -> Mesh:
    """Keep the largest face-connected component; drop unreferenced vertices."""
    n = mesh.n_vertices
    e = mesh.edges
    adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    used = np.zeros(n, dtype=bool)
    used[mesh.faces.ravel()] = True
    counts = np.bincount(labels[used], minlength=labels.max() + 1)
    keep = (labels == np.argmax(counts)) & used
    return _submesh(mesh, keep)


def _submesh(mesh: Mesh, keep: np.ndarray) -> Mesh:
    face_ok = keep[mesh.faces].all(axis=1)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    return Mesh(mesh.vertices[keep], remap[mesh.faces[face_ok]], mesh.subject_id, mesh.scan_id)


def crop_face(mesh: Mesh, factor: float = 1.2) -> Mesh:
    """Radius crop around the vertex centroid followed by a largest-component filter."""
    d = np.linalg.norm(mesh.vertices - mesh.vertices.mean(axis=0), axis=1)
    keep = d <= factor * np.median(d)
    cropped = _submesh(mesh, keep)
    if len(cropped.faces) == 0:
        raise TopologyError("crop removed every face")
    return largest_component(cropped)


def prepare_mesh(mesh: Mesh, crop: bool = True) -> Mesh:
    """Data-preparation stage: optional crop, then normalization."""
    if crop:
        mesh = crop_face(mesh)
    return normalize_mesh(mesh)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
    (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
    (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def icosphere(subdivisions: int = 3) -> Mesh:
    """Unit icosphere with outward (counter-clockwise) faces; 10*4**s + 2 vertices."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = list(_ICO_FACES)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


def icosphere_level(vertex_count: int) -> int:
    s = 0
    while 10 * 4 ** s + 2 < vertex_count:
        s += 1
    if 10 * 4 ** s + 2 != vertex_count:
        raise ValueError(f"vertex_count must be 10*4**s + 2 (12, 42, 162, 642, ...), got {vertex_count}")
    return s


@dataclass(frozen=True)
class CorpusSpec:
    subject_count: int = 20
    scans_per_subject: int = 8
    vertex_count: int = 642
    master_seed: int = 20240611
    identity_amplitude: float = 0.04
    expression_amplitude: float = 0.012
    noise_amplitude: float = 0.002

    def validate(self) -> None:
        for name in ("subject_count", "scans_per_subject", "vertex_count"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ValueError("master_seed must fit in 64 bits")
        amps = (self.identity_amplitude, self.expression_amplitude, self.noise_amplitude)
        if min(amps) < 0:
            raise ValueError("amplitudes must be nonnegative")
        icosphere_level(self.vertex_count)
        if any(a > 0 for a in amps) and not amps[0] > amps[1] > amps[2]:
            warnings.warn("expected identity_amplitude > expression_amplitude > noise_amplitude", stacklevel=2)


IDENTITY_MODES = slice(1, 9)
EXPRESSION_MODES = slice(9, 21)


def _sphere_modes(base: Mesh) -> np.ndarray:
    from .spectral import build_graph, normalized_laplacian, smallest_eigenpairs

    k = min(EXPRESSION_MODES.stop, base.n_vertices)
    basis = smallest_eigenpairs(normalized_laplacian(build_graph(base)), k)
    return basis.vectors * np.sqrt(base.n_vertices)


def generate_corpus(spec: CorpusSpec) -> list[Mesh]:
    """Deterministic corpus of radially deformed icospheres.

    Subject identity is a low-frequency radial field on sphere-graph modes 1-8;
    each scan adds a mid-frequency field on modes 9-20 plus Gaussian jitter.
    """
    spec.validate()
    base = icosphere(icosphere_level(spec.vertex_count))
    modes = _sphere_modes(base)
    id_modes = modes[:, IDENTITY_MODES]
    ex_modes = modes[:, EXPRESSION_MODES]
    out = []
    for s in range(spec.subject_count):
        id_rng = np.random.default_rng([spec.master_seed, 0, s])
        identity = id_modes @ id_rng.standard_normal(id_modes.shape[1])
        for k in range(spec.scans_per_subject):
            rng = np.random.default_rng([spec.master_seed, 1, s, k])
            expression = ex_modes @ rng.standard_normal(ex_modes.shape[1])
            jitter = rng.standard_normal(base.vertices.shape)
            r = 1.0 + spec.identity_amplitude * identity + spec.expression_amplitude * expression
            v = r[:, None] * base.vertices + spec.noise_amplitude * jitter
            out.append(Mesh(v, base.faces.copy(), subject_id=s, scan_id=k))
    return out


def write_corpus(meshes: Sequence[Mesh], spec: CorpusSpec, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scans = []
    for m in meshes:
        name = f"s{m.subject_id}_{m.scan_id}.obj"
        save_obj(m, directory / name)
        scans.append({"subject_id": m.subject_id, "scan_id": m.scan_id, "file": name})
    manifest = {"corpus_spec": asdict(spec), "scans": scans}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_corpus(directory) -> tuple[list[Mesh], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    meshes = [load_mesh(directory / s["file"], subject_id=s["subject_id"], scan_id=s["scan_id"])
              for s in manifest["scans"]]
    return meshes, manifest


# ---------------------------------------------------------------------------
# splits and pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: frozenset = field(default_factory=frozenset)
    val: frozenset = field(default_factory=frozenset)
    test: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ValueError("splits must be subject-disjoint")

    def to_json(self) -> dict:
        return {k: sorted(getattr(self, k), key=str) for k in ("train", "val", "test")}


def split_subjects(subject_ids: Iterable, seed: int = 0, val_frac: float = 0.15,
                   test_frac: float = 0.15) -> DatasetSplit:
    """Random 70/15/15 subject split; val/test sizes are floored so rounding favours train.

    Corpora of four or more subjects always hold out at least two test subjects.
    """
    ids = sorted(set(subject_ids), key=str)
    order = np.random.default_rng(seed).permutation(len(ids))
    ids = [ids[i] for i in order]
    n_val = int(np.floor(val_frac * len(ids) + 1e-9))
    n_test = int(np.floor(test_frac * len(ids) + 1e-9))
    if len(ids) >= 4 and test_frac > 0:
        n_test = max(n_test, 2)  # impostor pairs need two held-out subjects
    test = frozenset(ids[:n_test])
    val = frozenset(ids[n_test:n_test + n_val])
    train = frozenset(ids[n_test + n_val:])
    return DatasetSplit(train, val, test)


class Pair(NamedTuple):
    a: tuple
    b: tuple
    label: int


def make_pairs(meshes: Sequence, subjects: Iterable, seed: int = 0) -> list[Pair]:
    """Balanced verification pairs restricted to ``subjects``.

    Every subject contributes all ordered same-subject scan pairs (label 1) and
    the same number of cross-subject pairs (label 0), drawn round-robin over
    the other subjects from a seeded rotation.
    """
    wanted = set(subjects)
    scans: dict = {}
    for m in meshes:
        if m.subject_id in wanted:
            scans.setdefault(m.subject_id, []).append((m.subject_id, m.scan_id))
    if len(scans) < 2:
        raise ValueError("need at least two subjects with scans to form mismatch pairs")
    order = sorted(scans, key=str)
    pairs: list[Pair] = []
    for si, s in enumerate(order):
        own = sorted(scans[s], key=str)
        matches = [Pair(a, b, 1) for a in own for b in own if a != b]
        pairs.extend(matches)
        if not matches:
            continue
        others = order[:si] + order[si + 1:]
        rng = np.random.default_rng([seed, si])
        shift = int(rng.integers(len(others)))
        others = others[shift:] + others[:shift]
        offsets = [int(rng.integers(len(scans[o]))) for o in others]
        for m in range(len(matches)):
            o = m % len(others)
            cycle = m // len(others)
            other_scans = sorted(scans[others[o]], key=str)
            a = own[(m + cycle) % len(own)]
            b = other_scans[(offsets[o] + cycle) % len(other_scans)]
            pairs.append(Pair(a, b, 0))
    return pairs
