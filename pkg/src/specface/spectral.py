"""Mesh graphs, the symmetric normalized Laplacian and the graph Fourier transform."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .errors import DisconnectedMeshError, EigenSolverError, ShapeMismatchError, TopologyError

DENSE_LIMIT = 2000
EIG_TOL = 1e-8
RESIDUAL_TOL = 1e-6


@dataclass
class MeshGraph:
    adjacency: sp.csr_matrix
    degrees: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.adjacency.shape[0]


@dataclass
class SpectralBasis:
    values: np.ndarray   # (K,) ascending
    vectors: np.ndarray  # (|V|, K), orthonormal columns

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def n_vertices(self) -> int:
        return self.vectors.shape[0]


def graph_from_faces(faces, n_vertices: int, require_connected: bool = True) -> MeshGraph:
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices)).tocsr()
    adj.data[:] = 1.0  # edges shared by two faces were summed by tocsr
    degrees = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)
    if require_connected:
        n_comp, _ = connected_components(adj, directed=False)
        if n_comp != 1:
            raise DisconnectedMeshError(f"mesh graph has {n_comp} connected components")
    return MeshGraph(adj, degrees)


def build_graph(mesh) -> MeshGraph:
    """Undirected vertex graph: ``i ~ j`` iff both appear in some face."""
    return graph_from_faces(mesh.faces, len(mesh.vertices))


def normalized_laplacian(graph: MeshGraph) -> sp.csr_matrix:
    """``I - D^{-1/2} A D^{-1/2}``."""
    d = np.asarray(graph.degrees, dtype=np.float64)
    if np.any(d <= 0):
        raise TopologyError("zero-degree vertex; normalized Laplacian undefined")
    inv_sqrt = sp.diags(1.0 / np.sqrt(d))
    lap = sp.identity(len(d), format="csr") - inv_sqrt @ graph.adjacency @ inv_sqrt
    return sp.csr_matrix(lap)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry (first on ties) is positive."""
    v = np.array(vectors, dtype=np.float64, copy=True)
    if v.size == 0:
        return v
    idx = np.argmax(np.abs(v), axis=0)
    sign = np.sign(v[idx, np.arange(v.shape[1])])
    sign[sign == 0] = 1.0
    return v * sign


def smallest_eigenpairs(lap, k: int, method: str = "auto", maxiter: int | None = None) -> SpectralBasis:
    """K smallest eigenpairs of a symmetric matrix.

    ``method="dense"`` runs LAPACK on the full matrix; ``"lanczos"`` runs a
    shift-invert block Lanczos iteration (``maxiter`` caps block steps). ``"auto"`` picks dense
    up to ``DENSE_LIMIT`` vertices.
    """
    n = lap.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= |V| (K={k}, |V|={n})")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "lanczos"
    if method == "dense" or k >= n - 1:
        dense = lap.toarray() if sp.issparse(lap) else np.asarray(lap, dtype=np.float64)
        vals, vecs = scipy.linalg.eigh(dense, subset_by_index=[0, k - 1])
    elif method == "lanczos":
        vals, vecs = _lanczos_smallest(sp.csc_matrix(lap), k, maxiter or 50 * k)
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    order = np.argsort(vals, kind="stable")
    basis = SpectralBasis(np.asarray(vals[order]), fix_signs(vecs[:, order]))
    res = residuals(lap, basis)
    if np.max(res) > RESIDUAL_TOL:
        raise EigenSolverError(f"eigenpair residual {np.max(res):.3e} exceeds {RESIDUAL_TOL}")
    return basis


def _lanczos_smallest(lap: sp.csc_matrix, k: int, maxiter: int, shift: float = 1e-3):
    """Shift-invert block Lanczos with full reorthogonalization and restarts.

    Works on ``(L + shift*I)^{-1}`` so the smallest eigenvalues of ``L`` are the
    dominant ones. The block width exceeds K, so repeated eigenvalues (common on
    symmetric meshes) are captured, which a single-vector Krylov space cannot do.
    """
    n = lap.shape[0]
    lu = spla.splu(sp.csc_matrix(lap + shift * sp.identity(n, format="csc")))
    block = min(n, k + 4)
    steps = max(2, min(8, (n // block) - 1))
    x, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((n, block)))
    used = 0
    while used < maxiter:
        basis = x
        cur = x
        for _ in range(steps):
            w = lu.solve(cur)
            scale = np.linalg.norm(w, axis=0)
            for _ in range(2):  # full reorthogonalization, twice for stability
                w -= basis @ (basis.T @ w)
            w, r = np.linalg.qr(w)
            keep = np.abs(np.diag(r)) > 1e-12 * scale
            if not keep.any():
                break
            cur = w[:, keep]
            basis = np.hstack([basis, cur])
            used += 1
            if basis.shape[1] >= n:
                break
        small = basis.T @ (lap @ basis)
        w_vals, y = np.linalg.eigh(0.5 * (small + small.T))
        vecs = basis @ y[:, :k]
        vals = w_vals[:k]
        res = np.linalg.norm(lap @ vecs - vecs * vals, axis=0)
        if res.max() <= EIG_TOL:
            return vals, vecs
        x, _ = np.linalg.qr(basis @ y[:, :block])
    raise EigenSolverError(f"block Lanczos did not converge within {maxiter} block iterations")


def residuals(lap, basis: SpectralBasis) -> np.ndarray:
    """``||L u_i - lambda_i u_i||_2`` for each eigenpair."""
    r = lap @ basis.vectors - basis.vectors * basis.values
    return np.linalg.norm(r, axis=0)


def mesh_basis(mesh, k: int, method: str = "auto") -> SpectralBasis:
    return smallest_eigenpairs(normalized_laplacian(build_graph(mesh)), k, method=method)


def gft(basis: SpectralBasis, f: np.ndarray) -> np.ndarray:
    """Truncated graph Fourier transform ``U^T f`` (shape K x n)."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] != basis.n_vertices:
        raise ShapeMismatchError(f"signal has {f.shape[0]} rows, basis has {basis.n_vertices} vertices")
    return basis.vectors.T @ f


def lowpass_reconstruct(basis: SpectralBasis, coeffs: np.ndarray) -> np.ndarray:
    """Inverse transform ``U F`` from the retained coefficients."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim == 1:
        coeffs = coeffs[:, None]
    if coeffs.shape[0] != basis.k:
        raise ShapeMismatchError(f"{coeffs.shape[0]} coefficient rows for a K={basis.k} basis")
    return basis.vectors @ coeffs


# ---------------------------------------------------------------------------
# basis cache: magic, version, |V|, K, then little-endian float64 eigenvalues
# followed by eigenvectors in column-major order
# ---------------------------------------------------------------------------

BASIS_MAGIC = b"SFBASIS\x00"
BASIS_VERSION = 1
_BASIS_HEADER = struct.Struct("<8sIQQ")


def topology_hash(mesh) -> str:
    """Content hash of the mesh graph (the Laplacian depends only on faces and |V|)."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", len(mesh.vertices)))
    h.update(np.ascontiguousarray(mesh.faces, dtype="<i8").tobytes())
    return h.hexdigest()


def write_basis(basis: SpectralBasis, path) -> None:
    header = _BASIS_HEADER.pack(BASIS_MAGIC, BASIS_VERSION, basis.n_vertices, basis.k)
    payload = (np.asarray(basis.values, dtype="<f8").tobytes()
               + np.asarray(basis.vectors, dtype="<f8").tobytes(order="F"))
    Path(path).write_bytes(header + payload)


def read_basis(path) -> SpectralBasis:
    raw = Path(path).read_bytes()
    if len(raw) < _BASIS_HEADER.size:
        raise ValueError("truncated basis file")
    magic, version, n, k = _BASIS_HEADER.unpack_from(raw)
    if magic != BASIS_MAGIC or version != BASIS_VERSION:
        raise ValueError("not a basis cache file (bad magic/version)")
    body = np.frombuffer(raw, dtype="<f8", offset=_BASIS_HEADER.size)
    if body.size != k + n * k:
        raise ValueError("basis file size does not match header")
    values = body[:k].astype(np.float64)
    vectors = body[k:].reshape((n, k), order="F").astype(np.float64)
    return SpectralBasis(values, vectors)


class BasisCache:
    """Directory of basis files keyed by mesh topology hash and K."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, mesh, k: int) -> Path:
        return self.directory / f"{topology_hash(mesh)[:32]}_k{k}.basis"

    def get(self, mesh, k: int, method: str = "auto") -> SpectralBasis:
        path = self.path_for(mesh, k)
        if path.exists():
            return read_basis(path)
        basis = mesh_basis(mesh, k, method)
        write_basis(basis, path)
        return basis
