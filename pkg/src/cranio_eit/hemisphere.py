"""Triangulated upper-hemisphere grids and P1 surface operators.

The crown of every head in this package is parametrized over the closed
upper unit hemisphere.  This module owns the reference triangulation of
that hemisphere (geodesic subdivision of a fixed 4-triangle partition),
the P1 mass/stiffness matrices used for Sobolev inner products of radial
fields, and barycentric point location for interpolating nodal fields at
arbitrary directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

# Coarse partition: north pole plus the four equator cardinal points.
_BASE_VERTICES = np.array(
    [
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)
# Oriented so normals point away from the origin.
_BASE_TRIANGLES = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]])


@dataclass(frozen=True)
class HemisphereGrid:
    """Geodesic triangulation of the closed upper unit hemisphere."""

    level: int
    vertices: np.ndarray  # (nv, 3) unit vectors, x3 >= 0
    triangles: np.ndarray  # (nt, 3) int, outward oriented
    _tree: cKDTree = field(repr=False, compare=False, default=None)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def rim_vertices(self) -> np.ndarray:
        """Indices of equator vertices ordered by increasing azimuth."""
        on_rim = np.flatnonzero(np.abs(self.vertices[:, 2]) < 1e-13)
        phi = np.arctan2(self.vertices[on_rim, 1], self.vertices[on_rim, 0])
        return on_rim[np.argsort(np.mod(phi, 2.0 * np.pi))]

    def locate(self, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Find containing triangles and barycentric weights for unit directions.

        Uses central (gnomonic) projection: a direction d lies in spherical
        triangle (v0, v1, v2) iff d = c0 v0 + c1 v1 + c2 v2 with c >= 0.
        Returns (triangle indices, (n, 3) barycentric weights).
        """
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(norms <= 0.0):
            raise ValueError("zero direction passed to locate")
        d = d / norms
        tree = self._centroid_tree()
        k = min(24, self.n_triangles)
        _, cand = tree.query(d, k=k)
        cand = np.atleast_2d(cand)
        # c = V^{-1} d per candidate triangle, batched.
        inv = self._vertex_inverses()
        c = np.einsum("pkij,pj->pki", inv[cand], d)
        ok = np.all(c >= -1e-12, axis=2)
        first = np.argmax(ok, axis=1)
        found = ok[np.arange(len(d)), first]
        tri_idx = cand[np.arange(len(d)), first]
        bary = c[np.arange(len(d)), first]
        if not np.all(found):
            # Rare near-degenerate queries: fall back to maximizing the
            # smallest coefficient over all triangles.
            for p in np.flatnonzero(~found):
                call = inv @ d[p]
                best = np.argmax(call.min(axis=1))
                tri_idx[p] = best
                bary[p] = call[best]
        bary = bary / bary.sum(axis=1, keepdims=True)
        return tri_idx, bary

    def interpolate(self, nodal: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Evaluate a nodal field at arbitrary unit directions (P1)."""
        tri_idx, bary = self.locate(directions)
        vals = np.asarray(nodal, dtype=float)[self.triangles[tri_idx]]
        return np.einsum("pi,pi->p", vals, bary)

    def _centroid_tree(self) -> cKDTree:
        if self._tree is None:
            cents = self.vertices[self.triangles].mean(axis=1)
            object.__setattr__(self, "_tree", cKDTree(cents))
        return self._tree

    def _vertex_inverses(self) -> np.ndarray:
        cached = getattr(self, "_inv_cache", None)
        if cached is None:
            mats = self.vertices[self.triangles].transpose(0, 2, 1)
            cached = np.linalg.inv(mats)
            object.__setattr__(self, "_inv_cache", cached)
        return cached


def build_grid(level: int) -> HemisphereGrid:
    """Subdivide the 4-triangle hemisphere partition `level` times."""
    if level < 0:
        raise ValueError("subdivision level must be non-negative")
    verts = [row for row in _BASE_VERTICES]
    tris = _BASE_TRIANGLES.copy()
    for _ in range(level):
        verts, tris = _subdivide_once(verts, tris)
    vertices = np.array(verts)
    grid = HemisphereGrid(level=level, vertices=vertices, triangles=tris)
    _check_grid(grid)
    return grid


def _subdivide_once(verts: list[np.ndarray], tris: np.ndarray):
    midpoint: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        idx = midpoint.get(key)
        if idx is None:
            m = verts[a] + verts[b]
            m = m / np.linalg.norm(m)
            if abs(m[2]) < 1e-15:
                m[2] = 0.0
            verts.append(m)
            idx = len(verts) - 1
            midpoint[key] = idx
        return idx

    out = np.empty((4 * len(tris), 3), dtype=tris.dtype)
    for t, (a, b, c) in enumerate(tris):
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out[4 * t : 4 * t + 4] = [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
    return verts, out


def _check_grid(grid: HemisphereGrid) -> None:
    r = np.linalg.norm(grid.vertices, axis=1)
    if np.max(np.abs(r - 1.0)) > 1e-12:
        raise AssertionError("grid vertices left the unit sphere")
    if np.min(grid.vertices[:, 2]) < -1e-12:
        raise AssertionError("grid vertex below the equator")
    # Outward orientation: triangle normal has positive radial component.
    p = grid.vertices[grid.triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    if np.min(np.einsum("ti,ti->t", n, p.mean(axis=1))) <= 0.0:
        raise AssertionError("grid triangle with inward orientation")


def triangle_geometry(points: np.ndarray, triangles: np.ndarray):
    """Areas, unit normals and P1 gradients for a 3D triangle mesh.

    Returns (areas (nt,), normals (nt, 3), grads (nt, 3, 3)) where
    grads[t, i] is the in-plane gradient of the hat function of local
    vertex i on triangle t.
    """
    p = points[triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    nn = np.linalg.norm(n, axis=1)
    if np.any(nn <= 0.0):
        raise ValueError("degenerate triangle in surface mesh")
    areas = 0.5 * nn
    normals = n / nn[:, None]
    # Edge opposite local vertex i.
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grads = np.cross(normals[:, None, :], e) / (2.0 * areas[:, None, None])
    return areas, normals, grads


def surface_mass(points: np.ndarray, triangles: np.ndarray) -> sp.csr_matrix:
    """P1 mass matrix of a triangulated surface embedded in 3D."""
    areas, _, _ = triangle_geometry(points, triangles)
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    vals = areas[:, None, None] * local
    return _scatter(points.shape[0], triangles, vals)


def surface_stiffness(points: np.ndarray, triangles: np.ndarray) -> sp.csr_matrix:
    """P1 stiffness (surface gradient) matrix of a triangulated surface."""
    areas, _, grads = triangle_geometry(points, triangles)
    vals = areas[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    return _scatter(points.shape[0], triangles, vals)


def _scatter(n: int, triangles: np.ndarray, vals: np.ndarray) -> sp.csr_matrix:
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    mat = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(n, n))
    return mat.tocsr()


def spherical_angles(directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Polar angle (from +x3) and azimuth of unit directions."""
    d = np.atleast_2d(directions)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2.0 * np.pi)
    return theta, phi


def direction(theta: float | np.ndarray, phi: float | np.ndarray) -> np.ndarray:
    """Unit direction(s) from polar/azimuthal angles."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
