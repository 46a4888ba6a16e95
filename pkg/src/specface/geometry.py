"""Per-vertex geometric descriptors: the 10-column signal matrix fed to the GFT."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import kernels
from .errors import TopologyError

DESCRIPTOR_COLUMNS = (
    "x", "y", "z", "nx", "ny", "nz",
    "mean_dihedral", "gaussian_curv", "mean_curv", "vertex_area",
)
N_DESCRIPTORS = len(DESCRIPTOR_COLUMNS)
SCALAR_COLUMNS = slice(6, 10)


def _face_normals(mesh) -> np.ndarray:
    v, f = mesh.vertices, mesh.faces
    cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(cr, axis=1, keepdims=True)
    return cr / np.where(norm > 0, norm, 1.0)


def _incidence(mesh) -> np.ndarray:
    counts = np.bincount(mesh.faces.ravel(), minlength=mesh.n_vertices)
    if np.any(counts == 0):
        raise TopologyError(f"{int(np.sum(counts == 0))} vertices belong to no face")
    return counts


def vertex_normals(mesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length."""
    _incidence(mesh)
    acc, _, _, _ = kernels.face_geometry(mesh.vertices, mesh.faces)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise TopologyError("vertex normal undefined (incident faces cancel or have zero area)")
    return acc / norm


def _edge_faces(mesh):
    """Undirected edge keys with the faces on each side."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    owner = np.tile(np.arange(len(f)), 3)
    keys, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return keys, counts, owner[order], starts


def boundary_vertices(mesh) -> np.ndarray:
    keys, counts, _, _ = _edge_faces(mesh)
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[keys[counts == 1].ravel()] = True
    return mask


def dihedral_angles(mesh) -> np.ndarray:
    """Mean angle between adjacent face normals over each vertex's interior edges.

    0 for flat neighbourhoods and for vertices that touch only boundary edges.
    """
    keys, counts, faces_sorted, starts = _edge_faces(mesh)
    interior = counts == 2
    fa = faces_sorted[starts[interior]]
    fb = faces_sorted[starts[interior] + 1]
    fn = _face_normals(mesh)
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", fn[fa], fn[fb]), -1.0, 1.0))
    ends = keys[interior]
    n = mesh.n_vertices
    total = np.bincount(ends.ravel(), weights=np.repeat(ang, 2), minlength=n)
    count = np.bincount(ends.ravel(), minlength=n)
    return np.divide(total, count, out=np.zeros(n), where=count > 0)


def angle_deficit(mesh) -> np.ndarray:
    """``2*pi - sum(angles)`` at interior vertices, ``pi - sum(angles)`` on the boundary."""
    _, angle_sum, _, _ = kernels.face_geometry(mesh.vertices, mesh.faces)
    full = np.where(boundary_vertices(mesh), np.pi, 2 * np.pi)
    return full - angle_sum


def mixed_area(mesh) -> np.ndarray:
    """Mixed Voronoi area per vertex (barycentric split for obtuse triangles)."""
    _incidence(mesh)
    _, _, area, _ = kernels.face_geometry(mesh.vertices, mesh.faces)
    return area


def gaussian_curvature(mesh) -> np.ndarray:
    """Angle deficit divided by mixed area."""
    area = mixed_area(mesh)
    return angle_deficit(mesh) / np.where(area > 0, area, 1.0)


def mean_curvature(mesh, normals: np.ndarray | None = None) -> np.ndarray:
    """Signed mean curvature from the cotangent Laplacian (positive on a sphere with outward faces)."""
    if normals is None:
        normals = vertex_normals(mesh)
    _, _, area, lap = kernels.face_geometry(mesh.vertices, mesh.faces)
    return np.einsum("ij,ij->i", lap, normals) / (4.0 * np.where(area > 0, area, 1.0))


def _standardize(col: np.ndarray) -> np.ndarray:
    c = col - col.mean()
    sd = c.std()
    return c / sd if sd > 1e-12 else c


def assemble_descriptors(mesh, standardize: bool = True) -> np.ndarray:
    """|V| x 10 descriptor matrix in ``DESCRIPTOR_COLUMNS`` order.

    The four scalar columns are z-scored per mesh when ``standardize`` is set;
    coordinates and normals stay raw.
    """
    _incidence(mesh)
    acc, angle_sum, area, lap = kernels.face_geometry(mesh.vertices, mesh.faces)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise TopologyError("vertex normal undefined")
    normals = acc / norm
    safe_area = np.where(area > 0, area, 1.0)
    deficit = np.where(boundary_vertices(mesh), np.pi, 2 * np.pi) - angle_sum
    out = np.empty((mesh.n_vertices, N_DESCRIPTORS))
    out[:, 0:3] = mesh.vertices
    out[:, 3:6] = normals
    out[:, 6] = dihedral_angles(mesh)
    out[:, 7] = deficit / safe_area
    out[:, 8] = np.einsum("ij,ij->i", lap, normals) / (4.0 * safe_area)
    out[:, 9] = area
    if standardize:
        for j in range(SCALAR_COLUMNS.start, SCALAR_COLUMNS.stop):
            out[:, j] = _standardize(out[:, j])
    if not np.all(np.isfinite(out)):
        raise TopologyError("non-finite descriptor value")
    return out


def export_descriptors_csv(desc: np.ndarray, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DESCRIPTOR_COLUMNS)
        for row in desc:
            w.writerow([repr(float(x)) for x in row])
