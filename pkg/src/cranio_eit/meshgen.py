"""Head meshing: crown subdivision, electrode insertion, layered tets.

The head occupies the star-shaped volume between a crown surface (radial
graph over the upper hemisphere) and the flat base plane x3 = 0.  Surface
meshes are built by sampling the shape model on a subdivided hemisphere
grid and closing the base with a graded disk triangulation.  Electrodes
are circular footprints in the tangent-plane projection around their
center points; inserting one re-triangulates the patch of surface
triangles that meets the extended footprint so that element boundaries
align with the footprint circle, without adding or moving patch-boundary
vertices.  Tetrahedralization places scaled copies of the whole closed
surface around an interior center and splits the resulting prisms, so the
boundary triangulation of the volume mesh is identical to its input
surface.  All coordinates are meters.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .hemisphere import build_grid, direction
from .shape_model import ShapeModel

# Footprint-circle resolution of re-triangulated electrode patches: target
# edge length as a fraction of the footprint radius.  Chosen so the ring
# polygon area stays within a few percent of the disk while the scaled
# interior shells keep acceptable tet quality.
_PATCH_EDGE_FRACTION = 0.45


@dataclass(frozen=True)
class ElectrodeLayout:
    """Electrode center angles and footprint radii (meters)."""

    theta: np.ndarray
    phi: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        radii = np.atleast_1d(np.asarray(self.radii, dtype=float))
        if not (theta.shape == phi.shape == radii.shape):
            raise ValueError("layout angle/radius arrays must have equal length")
        if np.any(theta <= 0.0) or np.any(theta >= np.pi / 2):
            raise ValueError("electrode polar angles must lie strictly inside (0, pi/2)")
        if np.any(radii <= 0.0):
            raise ValueError("electrode radii must be positive")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "radii", radii)

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def directions(self) -> np.ndarray:
        return direction(self.theta, self.phi)

    def shifted(self, dtheta=None, dphi=None) -> "ElectrodeLayout":
        return ElectrodeLayout(
            theta=self.theta + (0.0 if dtheta is None else dtheta),
            phi=self.phi + (0.0 if dphi is None else dphi),
            radii=self.radii,
        )


def belt_layout(counts, polar_deg, radius, phi_offset_deg=None) -> ElectrodeLayout:
    """Belts of equispaced electrodes at constant polar angles.

    Electrodes are numbered belt by belt starting from the frontal (phi=0)
    electrode of the first belt, circulating in positive azimuth.
    """
    counts = list(counts)
    polar = list(polar_deg)
    if len(counts) != len(polar):
        raise ValueError("need one polar angle per belt")
    offsets = list(phi_offset_deg) if phi_offset_deg is not None else [0.0] * len(counts)
    theta, phi = [], []
    for c, pol, off in zip(counts, polar, offsets):
        theta.extend([np.deg2rad(pol)] * c)
        phi.extend(np.deg2rad(off) + 2.0 * np.pi * np.arange(c) / c)
    return ElectrodeLayout(
        theta=np.array(theta), phi=np.array(phi), radii=np.full(len(theta), radius)
    )


@dataclass(frozen=True)
class ElectrodeFrame:
    """Tangent-plane chart at an electrode center."""

    center: np.ndarray
    normal: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    radius: float

    def project(self, pts: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(pts) - self.center
        return np.stack([d @ self.t1, d @ self.t2], axis=1)


@dataclass(frozen=True)
class SurfaceMesh:
    """Closed head surface: crown triangles first, base-disk triangles after."""

    points: np.ndarray
    triangles: np.ndarray
    tags: np.ndarray  # 0 scalp/base, m >= 1 electrode m
    n_crown_tris: int
    n_crown_base_points: int  # vertices of the subdivided crown graph
    rim: np.ndarray  # ordered cycle of equator vertex ids (CCW from above)
    level: int
    frames: tuple = ()

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def crown_triangles(self) -> np.ndarray:
        return self.triangles[: self.n_crown_tris]

    @property
    def bottom_triangles(self) -> np.ndarray:
        return self.triangles[self.n_crown_tris :]


@dataclass(frozen=True)
class HeadMesh:
    """Tetrahedral head mesh with tagged boundary triangulation."""

    points: np.ndarray
    tets: np.ndarray
    boundary: np.ndarray
    boundary_tags: np.ndarray
    surface_to_volume: np.ndarray  # vertex map from the generating surface
    frames: tuple
    layers: int
    prism_patterns: tuple = ()  # per-layer split codes, reusable for replay

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_electrodes(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class MeshTemplate:
    """Frozen discrete choices of one surface build, for smooth re-meshing.

    Re-building a perturbed geometry with the template of the base geometry
    keeps patch membership, local connectivity and lift assignments fixed,
    so the mesh depends smoothly on the shape and layout parameters.
    """

    level: int
    patches: tuple  # one _PatchPlan per electrode
    prism_patterns: tuple | None = None  # per-layer tet split codes


@dataclass(frozen=True)
class _PatchPlan:
    center_tri: int
    patch_tris: np.ndarray  # pre-insertion crown triangle ids
    polygon: np.ndarray  # ordered pre-insertion vertex ids (CCW)
    ring_radii: tuple
    ring_counts: tuple
    local_tris: np.ndarray  # indices: 0..len(polygon)-1 polygon, then generated
    local_tags: np.ndarray
    lift_tris: np.ndarray  # containing pre-insertion crown tri per generated point


# ---------------------------------------------------------------------------
# surface construction


@lru_cache(maxsize=8)
def _mesh_directions(level: int) -> tuple:
    """Tangentially relaxed copy of the subdivision directions.

    A few Laplacian smoothing sweeps on the unit sphere (rim vertices
    pinned) even out the triangle shapes the octahedral subdivision leaves
    near the equator.  Purely a mesh concern: the crown still samples the
    shape model as a radial graph over these fixed directions.
    """
    grid = build_grid(level)
    dirs = grid.vertices.copy()
    nv = dirs.shape[0]
    neighbors: list[set] = [set() for _ in range(nv)]
    for t in grid.triangles:
        for i in range(3):
            neighbors[t[i]].update((int(t[(i + 1) % 3]), int(t[(i + 2) % 3])))
    rows = np.repeat(np.arange(nv), [len(s) for s in neighbors])
    cols = np.concatenate([sorted(s) for s in neighbors]).astype(np.int64)
    inv_deg = 1.0 / np.array([len(s) for s in neighbors])
    movable = np.ones(nv, dtype=bool)
    movable[grid.rim_vertices()] = False
    for _ in range(12):
        mean = np.zeros_like(dirs)
        np.add.at(mean, rows, dirs[cols])
        mean *= inv_deg[:, None]
        upd = dirs + 0.6 * (mean - dirs)
        upd /= np.linalg.norm(upd, axis=1, keepdims=True)
        dirs[movable] = upd[movable]
    return grid, dirs


def subdivide_initial_surface(k: int, model: ShapeModel, alpha) -> SurfaceMesh:
    """Closed head surface at shape `alpha`: 4*4^k crown triangles plus base disk."""
    if k < 3:
        raise ValueError("crown subdivision level must be at least 3")
    grid, dirs = _mesh_directions(k)
    radii = grid.interpolate(model.radius_field(alpha), dirs)
    if radii.min() <= 0.0:
        raise ValueError("degenerate crown: non-positive radius")
    crown_pts = radii[:, None] * dirs
    rim = grid.rim_vertices()
    rim_angles = np.mod(
        np.arctan2(grid.vertices[rim][:, 1], grid.vertices[rim][:, 0]), 2.0 * np.pi
    )
    bottom_pts, bottom_tris = _base_disk(crown_pts, rim, rim_angles)
    points = np.vstack([crown_pts, bottom_pts])
    triangles = np.vstack([grid.triangles, bottom_tris])
    tags = np.zeros(triangles.shape[0], dtype=int)
    return SurfaceMesh(
        points=points,
        triangles=triangles,
        tags=tags,
        n_crown_tris=grid.triangles.shape[0],
        n_crown_base_points=crown_pts.shape[0],
        rim=rim,
        level=k,
    )


def _base_disk(crown_pts: np.ndarray, rim: np.ndarray, rim_angles: np.ndarray):
    """Graded triangulation of the flat base bounded by the rim cycle.

    Rings are scaled copies of the rim polygon; the point count halves when
    the azimuthal spacing falls below the rim spacing, keeping triangles
    near-isotropic all the way to the central fan.  Connectivity decisions
    use the fixed rim direction angles, so the topology is independent of
    the crown radii.
    """
    n_rim = rim.shape[0]
    rim_xy = crown_pts[rim][:, :2]
    step = 2.0 * np.pi / n_rim  # radial step as a fraction of mean radius

    loops = [(rim.copy(), 1.0, 1)]  # (vertex ids, scale, stride into rim)
    new_pts: list[np.ndarray] = []
    tris: list[np.ndarray] = []
    next_id = crown_pts.shape[0]
    scale, stride = 1.0, 1
    while True:
        nxt = scale - step
        count = n_rim // stride
        if nxt <= 1.5 * step or count <= 8:
            break
        if count > 8 and 2.0 * np.pi * nxt / count < 0.75 * step:
            stride *= 2
            count //= 2
        ids = np.arange(next_id, next_id + count)
        next_id += count
        new_pts.append(nxt * np.hstack([rim_xy[::stride], np.zeros((count, 1))]))
        loops.append((ids, nxt, stride))
        scale = nxt

    center_id = next_id
    new_pts.append(np.zeros((1, 3)))

    for outer, inner in zip(loops[:-1], loops[1:]):
        tris.append(
            _zip_loops(
                rim_angles[:: outer[2]], outer[0], rim_angles[:: inner[2]], inner[0]
            )
        )
    last = loops[-1]
    n = n_rim // last[2]
    fan = np.stack(
        [np.full(n, center_id), last[0], np.roll(last[0], -1)], axis=1
    )
    tris.append(fan)
    bottom = np.vstack(tris)
    # Wind so the outward normal points down (out of the head).
    bottom = bottom[:, ::-1]
    return np.vstack(new_pts), bottom


def _zip_loops(outer_ang, outer_ids, inner_ang, inner_ids) -> np.ndarray:
    """Triangulate the annulus between two star-shaped CCW loops.

    Both loops are given by their polar angles in [0, 2*pi); connectivity
    depends only on these angles.
    """
    oa = np.mod(np.asarray(outer_ang, dtype=float), 2.0 * np.pi)
    ia = np.mod(np.asarray(inner_ang, dtype=float), 2.0 * np.pi)
    o_ord = np.argsort(oa, kind="stable")
    i_ord = np.argsort(ia, kind="stable")
    o_ids, o_ang = np.asarray(outer_ids)[o_ord], oa[o_ord]
    i_ids, i_ang = np.asarray(inner_ids)[i_ord], ia[i_ord]
    # Rotate the inner loop to start at the smallest angle >= the outer start.
    shift = int(np.searchsorted(i_ang, o_ang[0]))
    i_ids = np.roll(i_ids, -shift)
    i_ang = np.roll(i_ang, -shift)
    i_ang = np.where(i_ang < o_ang[0] - 1e-15, i_ang + 2.0 * np.pi, i_ang)

    n_o, n_i = len(o_ids), len(i_ids)
    tris = np.empty((n_o + n_i, 3), dtype=np.int64)
    i = j = t = 0
    while i < n_o or j < n_i:
        next_o = o_ang[i + 1] if i + 1 < n_o else (o_ang[0] + 2.0 * np.pi if i < n_o else np.inf)
        next_i = i_ang[j + 1] if j + 1 < n_i else (i_ang[0] + 2.0 * np.pi if j < n_i else np.inf)
        cur_o = o_ids[i % n_o]
        cur_i = i_ids[j % n_i]
        if i < n_o and (j >= n_i or next_o <= next_i):
            tris[t] = (cur_o, o_ids[(i + 1) % n_o], cur_i)
            i += 1
        else:
            tris[t] = (cur_i, cur_o, i_ids[(j + 1) % n_i])
            j += 1
        t += 1
    return tris


def _tri_quality_2d(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    """Signed 2D quality: 4*sqrt(3)*area / sum of squared edge lengths.

    1 for an equilateral CCW triangle, <= 0 for degenerate or CW.
    """
    ar = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    s = ((b - a) ** 2).sum() + ((c - b) ** 2).sum() + ((a - c) ** 2).sum()
    return float(4.0 * np.sqrt(3.0) * ar / s)


def _flip_improve(xy: np.ndarray, tris: np.ndarray, cross_edge) -> np.ndarray:
    """Greedy edge flips that raise the minimum signed quality of each pair.

    Flips only edges whose replacement diagonal satisfies `cross_edge(u, v)`;
    in the annulus between a coarse polygon and its first interior ring this
    keeps every diagonal running between the two loops, so no flip can cut
    across the hole or the outer boundary.
    """
    out = [tuple(int(v) for v in t) for t in tris]
    for _ in range(200):
        edge_map: dict[tuple[int, int], list[int]] = {}
        for ti, t in enumerate(out):
            for k in range(3):
                e = (min(t[k], t[(k + 1) % 3]), max(t[k], t[(k + 1) % 3]))
                edge_map.setdefault(e, []).append(ti)
        flipped = False
        for e in sorted(edge_map):
            owners = edge_map[e]
            if len(owners) != 2:
                continue
            t1, t2 = out[owners[0]], out[owners[1]]
            a, b = e
            c = next(v for v in t1 if v != a and v != b)
            d = next(v for v in t2 if v != a and v != b)
            if not cross_edge(c, d):
                continue
            old = min(
                _tri_quality_2d(*(xy[v] for v in t1)),
                _tri_quality_2d(*(xy[v] for v in t2)),
            )
            # Preserve the winding of t1 when re-diagonalizing the quad.
            if t1[(t1.index(a) + 1) % 3] == b:
                n1, n2 = (a, d, c), (b, c, d)
            else:
                n1, n2 = (a, c, d), (b, d, c)
            new = min(
                _tri_quality_2d(*(xy[v] for v in n1)),
                _tri_quality_2d(*(xy[v] for v in n2)),
            )
            if new > old + 1e-12:
                out[owners[0]], out[owners[1]] = n1, n2
                flipped = True
                break
        if not flipped:
            break
    return np.array(out, dtype=np.int64)


def vertex_normals(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals of an oriented triangle mesh."""
    p = points[triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])  # 2 * area * unit normal
    out = np.zeros_like(points)
    for c in range(3):
        np.add.at(out, triangles[:, c], n)
    norms = np.linalg.norm(out, axis=1)
    norms[norms == 0.0] = 1.0
    return out / norms[:, None]


def tangent_projection(surface: SurfaceMesh, x: np.ndarray, radius: float = 0.0) -> ElectrodeFrame:
    """Tangent-plane frame at a point on the crown.

    The plane is spanned by the interpolated area-weighted vertex normals;
    the first in-plane axis is the projection of the global x1 direction
    unless that is near-parallel to the normal, in which case x2 is used.
    """
    x = np.asarray(x, dtype=float)
    crown = surface.crown_triangles
    cents = surface.points[crown].mean(axis=1)
    near = np.argsort(np.linalg.norm(cents - x, axis=1))[:12]
    tri, best = int(near[0]), -np.inf
    for t in near:
        p = surface.points[crown[t]]
        nrm = np.cross(p[1] - p[0], p[2] - p[0])
        nrm /= np.linalg.norm(nrm)
        off = abs((x - p[0]) @ nrm)
        frame = ElectrodeFrame(p[0], nrm, *_plane_axes(nrm), 0.0)
        bary = _bary_2d(frame.project(p), frame.project(x[None, :])[0])
        score = bary.min() - 1e3 * off
        if score > best:
            tri, best = int(t), score
    normals = vertex_normals(surface.points, surface.triangles)
    return _frame_at(surface.points, crown, normals, tri, x, radius, check=True)


def _plane_axes(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t1 = np.array([1.0, 0.0, 0.0])
    t1 = t1 - (t1 @ n) * n
    if np.linalg.norm(t1) < 0.3:
        t1 = np.array([0.0, 1.0, 0.0])
        t1 = t1 - (t1 @ n) * n
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


def _frame_at(points, crown_tris, normals, tri, x, radius, check=False) -> ElectrodeFrame:
    tvi = crown_tris[tri]
    p = points[tvi]
    e1, e2 = p[1] - p[0], p[2] - p[0]
    nrm = np.cross(e1, e2)
    nrm /= np.linalg.norm(nrm)
    if check:
        size = np.sqrt(np.linalg.norm(np.cross(e1, e2)))
        if abs((x - p[0]) @ nrm) > 1e-6 + 1e-6 * size:
            raise ValueError("point is not on the crown surface")
    # Barycentric coordinates of x in the (flat) containing triangle.
    a = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    b = np.array([(x - p[0]) @ e1, (x - p[0]) @ e2])
    st = np.linalg.solve(a, b)
    bary = np.array([1.0 - st.sum(), st[0], st[1]])
    n = bary @ normals[tvi]
    n /= np.linalg.norm(n)
    t1, t2 = _plane_axes(n)
    return ElectrodeFrame(center=x, normal=n, t1=t1, t2=t2, radius=radius)


# ---------------------------------------------------------------------------
# electrode insertion


def insert_electrodes(
    surface: SurfaceMesh,
    layout: ElectrodeLayout,
    mu: float = 1.5,
    template: MeshTemplate | None = None,
) -> tuple[SurfaceMesh, MeshTemplate]:
    """Carve electrode footprints into the crown triangulation.

    For every electrode the surface triangles meeting the extended footprint
    (radius mu * R in the tangent projection) are collected and replaced by a
    denser local triangulation whose vertices include a polygon ring at the
    exact footprint radius; triangles whose projected centroid lies inside
    the footprint are tagged with the electrode index.  Patch boundary
    vertices are preserved, so the rest of the surface is untouched.
    """
    if mu <= 1.0:
        raise ValueError("extension factor mu must exceed 1")
    if surface.frames:
        raise ValueError("surface already carries electrodes")
    pts = surface.points
    crown = surface.crown_triangles
    normals = vertex_normals(pts, surface.triangles)
    rim_set = set(int(v) for v in surface.rim)
    dirs = layout.directions()

    plans = []
    frames = []
    for m in range(layout.n):
        plan = template.patches[m] if template is not None else None
        if plan is None:
            tri_id = _locate_crown_ray(pts, crown, dirs[m])
        else:
            tri_id = plan.center_tri
        x_m = _ray_triangle(pts[crown[tri_id]], dirs[m])
        frame = _frame_at(pts, crown, normals, tri_id, x_m, float(layout.radii[m]))
        frames.append(frame)
        if plan is None:
            patch = _collect_patch(pts, crown, frame, mu * frame.radius, m, rim_set)
            plan = _PatchPlan(
                center_tri=tri_id,
                patch_tris=patch,
                polygon=np.empty(0, dtype=int),
                ring_radii=(),
                ring_counts=(),
                local_tris=np.empty((0, 3), dtype=int),
                local_tags=np.empty(0, dtype=bool),
                lift_tris=np.empty(0, dtype=int),
            )
        plans.append(plan)

    if template is None:
        for a in range(layout.n):
            for b in range(a + 1, layout.n):
                if np.intersect1d(plans[a].patch_tris, plans[b].patch_tris).size:
                    raise ValueError(
                        f"electrodes {a} and {b} overlap after extension"
                    )

    removed = np.zeros(crown.shape[0], dtype=bool)
    new_points: list[np.ndarray] = []
    new_tris: list[np.ndarray] = []
    new_tags: list[np.ndarray] = []
    next_id = surface.n_points
    final_plans = []
    for m in range(layout.n):
        plan, frame = plans[m], frames[m]
        fresh = template is None
        plan, local_pts, local_tris, local_tags = _build_patch(
            pts, crown, frame, mu, plan, fresh
        )
        removed[plan.patch_tris] = True
        n_poly = plan.polygon.shape[0]
        gen_ids = np.arange(next_id, next_id + local_pts.shape[0])
        next_id += local_pts.shape[0]
        lut = np.concatenate([plan.polygon, gen_ids])
        new_points.append(local_pts)
        new_tris.append(lut[local_tris])
        new_tags.append(np.where(local_tags, m + 1, 0))
        final_plans.append(plan)

    kept = ~removed
    crown_tris = np.vstack([crown[kept]] + new_tris)
    crown_tags = np.concatenate(
        [surface.tags[: surface.n_crown_tris][kept]] + new_tags
    )
    points = np.vstack([pts] + new_points) if new_points else pts
    triangles = np.vstack([crown_tris, surface.bottom_triangles])
    tags = np.concatenate([crown_tags, surface.tags[surface.n_crown_tris :]])
    out = SurfaceMesh(
        points=points,
        triangles=triangles,
        tags=tags,
        n_crown_tris=crown_tris.shape[0],
        n_crown_base_points=surface.n_crown_base_points,
        rim=surface.rim,
        level=surface.level,
        frames=tuple(frames),
    )
    _check_radial_orientation(out)
    return out, MeshTemplate(
        level=surface.level,
        patches=tuple(final_plans),
        prism_patterns=None if template is None else template.prism_patterns,
    )


def _locate_crown_ray(pts: np.ndarray, crown: np.ndarray, d: np.ndarray) -> int:
    """Crown triangle whose radial cone contains the unit direction `d`."""
    cents = pts[crown].mean(axis=1)
    cents = cents / np.linalg.norm(cents, axis=1, keepdims=True)
    order = np.argsort(-(cents @ d))[:48]
    best, best_val = int(order[0]), -np.inf
    for t in order:
        try:
            c = np.linalg.solve(pts[crown[t]].T, d)
        except np.linalg.LinAlgError:
            continue
        v = c.min() / max(np.abs(c).max(), 1e-300)
        if v > best_val:
            best, best_val = int(t), v
        if v >= -1e-12:
            return int(t)
    if best_val < -1e-6:
        raise ValueError("electrode direction misses the crown")
    return best


def _ray_triangle(tri_pts: np.ndarray, d: np.ndarray) -> np.ndarray:
    n = np.cross(tri_pts[1] - tri_pts[0], tri_pts[2] - tri_pts[0])
    denom = n @ d
    if abs(denom) < 1e-15:
        raise ValueError("electrode ray grazes the surface")
    return ((n @ tri_pts[0]) / denom) * d


def _collect_patch(pts, crown, frame, ext_radius, m, rim_set) -> np.ndarray:
    cents = pts[crown].mean(axis=1)
    near = np.flatnonzero(np.linalg.norm(cents - frame.center, axis=1) < 3.0 * ext_radius)
    hit = []
    for t in near:
        xy = frame.project(pts[crown[t]])
        if _dist_to_triangle(xy) < ext_radius:
            hit.append(int(t))
    if not hit:
        raise ValueError(f"electrode {m} footprint misses the crown")
    hit = np.array(sorted(hit))
    for t in hit:
        if sum(int(v) in rim_set for v in crown[t]) >= 2:
            raise ValueError(f"electrode {m} crosses the crown rim")
    # Injectivity of the tangent projection over the patch.
    patch_ids = np.unique(crown[hit])
    proj = frame.project(pts[patch_ids])
    tree = cKDTree(proj)
    pairs = tree.query_pairs(1e-12 * max(ext_radius, 1e-9))
    if pairs:
        raise ValueError(f"tangent projection not injective on electrode {m} patch")
    for t in hit:
        xy = frame.project(pts[crown[t]])
        if _signed_area(xy) <= 0.0:
            raise ValueError(f"tangent projection folds on electrode {m} patch")
    return hit


def _dist_to_triangle(xy: np.ndarray) -> float:
    """Distance from the origin to a 2D triangle (0 if inside)."""
    if _point_in_triangle(xy):
        return 0.0
    d = np.inf
    for i in range(3):
        a, b = xy[i], xy[(i + 1) % 3]
        ab = b - a
        t = np.clip(-(a @ ab) / (ab @ ab), 0.0, 1.0)
        d = min(d, float(np.linalg.norm(a + t * ab)))
    return d


def _point_in_triangle(xy: np.ndarray) -> bool:
    s = 0
    for i in range(3):
        a, b = xy[i], xy[(i + 1) % 3]
        cr = a[0] * (b[1] - a[1]) - a[1] * (b[0] - a[0])
        s += 1 if cr >= 0 else -1
    return abs(s) == 3


def _signed_area(xy: np.ndarray) -> float:
    return 0.5 * float(
        (xy[1, 0] - xy[0, 0]) * (xy[2, 1] - xy[0, 1])
        - (xy[1, 1] - xy[0, 1]) * (xy[2, 0] - xy[0, 0])
    )


def _build_patch(pts, crown, frame, mu, plan: _PatchPlan, fresh: bool):
    """Re-triangulate one electrode patch; returns lifted points and topology."""
    r = frame.radius
    patch = plan.patch_tris
    proj_tris = {int(t): frame.project(pts[crown[t]]) for t in patch}

    if fresh:
        edge_len = np.concatenate(
            [np.linalg.norm(np.diff(xy[[0, 1, 2, 0]], axis=0), axis=1)
             for xy in proj_tris.values()]
        )
        if mu * r < edge_len.mean():
            raise ValueError(
                "electrode footprint under-resolved: extended radius below the "
                "local element size; increase the subdivision level or the "
                "footprint radius"
            )
        polygon = _boundary_cycle(crown[patch])
        poly_xy = frame.project(pts[polygon])
        if _cycle_signed_area(poly_xy) < 0.0:
            polygon = polygon[::-1]
            poly_xy = poly_xy[::-1]
        _check_star_shaped(poly_xy)
        edge_min = _polygon_edge_clearance(poly_xy)
        if edge_min <= 1.02 * r:
            raise ValueError(
                "extended electrode footprint leaves too little clearance; "
                "refine the mesh or reduce the electrode radius"
            )
        # Circular rings: geometric descent from just inside the polygon's
        # guaranteed inscribed radius down to the footprint circle, then one
        # interior ring and a center fan.  The transition rings keep chord
        # triangles short even when the patch is much coarser than the
        # footprint.
        radii = []
        cur = 0.93 * edge_min
        while cur > 1.35 * r:
            radii.append(cur)
            cur *= 0.62
        ring_radii = tuple(radii) + (r, 0.5 * r)
        h_e = _PATCH_EDGE_FRACTION * r
        ring_counts = tuple(
            max(7, int(np.ceil(2.0 * np.pi * rho / h_e))) for rho in ring_radii
        )
    else:
        polygon = plan.polygon
        poly_xy = frame.project(pts[polygon])
        ring_radii = plan.ring_radii
        ring_counts = plan.ring_counts

    gen_xy, rings, ring_angles = _patch_points(ring_radii, ring_counts)
    if fresh:
        local_tris, local_tags = _patch_topology(
            poly_xy, polygon, gen_xy, rings, ring_angles, r
        )
        lift = _assign_lifts(gen_xy, proj_tris)
        plan = replace(
            plan,
            polygon=polygon,
            ring_radii=ring_radii,
            ring_counts=ring_counts,
            local_tris=local_tris,
            local_tags=local_tags,
            lift_tris=lift,
        )
    local_pts = _lift_points(gen_xy, plan.lift_tris, proj_tris, pts, crown)
    return plan, local_pts, plan.local_tris, plan.local_tags


def _boundary_cycle(tris: np.ndarray) -> np.ndarray:
    """Ordered boundary vertex cycle of a consistently oriented triangle set."""
    succ: dict[int, int] = {}
    edges = set()
    for t in tris:
        for i in range(3):
            edges.add((int(t[i]), int(t[(i + 1) % 3])))
    for u, v in sorted(edges):
        if (v, u) not in edges:
            if u in succ:
                raise ValueError("electrode patch boundary is not a simple cycle")
            succ[u] = v
    if not succ:
        raise ValueError("electrode patch has no boundary")
    start = min(succ)
    cycle = [start]
    cur = succ[start]
    while cur != start:
        cycle.append(cur)
        cur = succ[cur]
        if len(cycle) > len(succ):
            raise ValueError("electrode patch boundary is not a single cycle")
    if len(cycle) != len(succ):
        raise ValueError("electrode patch boundary has multiple components")
    return np.array(cycle, dtype=np.int64)


def _cycle_signed_area(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _check_star_shaped(poly_xy: np.ndarray) -> None:
    ang = np.mod(np.arctan2(poly_xy[:, 1], poly_xy[:, 0]), 2.0 * np.pi)
    order = np.argsort(ang, kind="stable")
    n = len(ang)
    pos = np.empty(n, dtype=int)
    pos[order] = np.arange(n)
    rot = np.mod(pos - pos[0], n)
    if not np.array_equal(rot, np.arange(n)):
        raise ValueError("electrode patch boundary is not star-shaped around the center")


def _polygon_edge_clearance(poly_xy: np.ndarray) -> float:
    d = np.inf
    n = len(poly_xy)
    for i in range(n):
        a, b = poly_xy[i], poly_xy[(i + 1) % n]
        ab = b - a
        t = np.clip(-(a @ ab) / (ab @ ab), 0.0, 1.0)
        d = min(d, float(np.linalg.norm(a + t * ab)))
    return d


def _patch_points(ring_radii, ring_counts):
    """Generated 2D points: concentric rings plus the center."""
    gen = []
    rings = []
    angles = []
    idx = 0
    for s, count in zip(ring_radii, ring_counts):
        ang = 2.0 * np.pi * np.arange(count) / count
        gen.append(np.stack([s * np.cos(ang), s * np.sin(ang)], axis=1))
        rings.append(np.arange(idx, idx + count))
        angles.append(ang)
        idx += count
    gen.append(np.zeros((1, 2)))
    rings.append(np.array([idx]))
    return np.vstack(gen), rings, angles


def _patch_topology(poly_xy, polygon, gen_xy, rings, ring_angles, r):
    """Zip polygon -> outer ring -> ... -> center; tag inside-footprint triangles."""
    n_poly = polygon.shape[0]
    local_poly = np.arange(n_poly)
    local_gen = n_poly + np.arange(gen_xy.shape[0])
    poly_ang = np.arctan2(poly_xy[:, 1], poly_xy[:, 0])
    all_xy = np.vstack([poly_xy, gen_xy])
    outer = _zip_loops(poly_ang, local_poly, ring_angles[0], local_gen[rings[0]])
    # The polygon is much coarser than the first ring; an angle sweep alone
    # can leave near-degenerate fan triangles at its long edges.
    outer = _flip_improve(
        all_xy, outer, lambda u, v: (u < n_poly) != (v < n_poly)
    )
    tris = [outer]
    for a, b, ang_a, ang_b in zip(
        rings[:-1], rings[1:-1], ring_angles[:-1], ring_angles[1:]
    ):
        tris.append(_zip_loops(ang_a, local_gen[a], ang_b, local_gen[b]))
    inner = rings[-2]
    center = local_gen[rings[-1][0]]
    n = inner.shape[0]
    fan = np.stack(
        [np.full(n, center), local_gen[inner], np.roll(local_gen[inner], -1)], axis=1
    )
    tris.append(fan)
    local_tris = np.vstack(tris)
    cents = all_xy[local_tris].mean(axis=1)
    local_tags = np.linalg.norm(cents, axis=1) < r
    return local_tris, local_tags


def _assign_lifts(gen_xy, proj_tris) -> np.ndarray:
    """Containing original patch triangle for each generated 2D point."""
    ids = sorted(proj_tris)
    out = np.empty(gen_xy.shape[0], dtype=np.int64)
    for p, xy in enumerate(gen_xy):
        best, best_val = ids[0], -np.inf
        for t in ids:
            b = _bary_2d(proj_tris[t], xy)
            v = b.min()
            if v > best_val:
                best, best_val = t, v
            if v >= -1e-12:
                break
        out[p] = best
    return out


def _bary_2d(tri_xy: np.ndarray, xy: np.ndarray) -> np.ndarray:
    t = np.column_stack([tri_xy[1] - tri_xy[0], tri_xy[2] - tri_xy[0]])
    st = np.linalg.solve(t, xy - tri_xy[0])
    return np.array([1.0 - st.sum(), st[0], st[1]])


def _lift_points(gen_xy, lift_tris, proj_tris, pts, crown) -> np.ndarray:
    out = np.empty((gen_xy.shape[0], 3))
    for p, (xy, t) in enumerate(zip(gen_xy, lift_tris)):
        b = _bary_2d(proj_tris[int(t)], xy)
        out[p] = b @ pts[crown[int(t)]]
    return out


def _check_radial_orientation(surface: SurfaceMesh) -> None:
    p = surface.points[surface.crown_triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    radial = np.einsum("ti,ti->t", n, p.mean(axis=1))
    if radial.min() <= 0.0:
        raise ValueError("crown triangle lost positive radial orientation")


# ---------------------------------------------------------------------------
# tetrahedralization


def tetrahedralize(
    surface: SurfaceMesh, layers: int, prism_patterns: tuple | None = None
) -> HeadMesh:
    """Layered tet mesh: scaled copies of the closed surface around an
    interior center, prisms split into tets, innermost shell coned to the
    center.  The boundary triangulation is the input surface unchanged.

    `prism_patterns` (from a previous mesh of the same topology) replays the
    recorded diagonal choices so the tet connectivity is bit-identical."""
    if layers < 1:
        raise ValueError("need at least one radial layer")
    pts = surface.points
    nv = pts.shape[0]
    crown_r = np.linalg.norm(pts[: surface.n_crown_base_points], axis=1)
    # Raising the scaling center reduces the shear of prisms over the flat
    # base, whose points travel mostly sideways between shells; raising it
    # too far shears the prisms under the crown top instead.
    center = np.array([0.0, 0.0, 0.45 * crown_r.min()])

    shells = [center[None, :]]
    for l in range(1, layers):
        t = l / layers
        shells.append(center[None, :] + t * (pts - center[None, :]))
    shells.append(pts)  # outermost shell bit-identical to the surface
    points = np.vstack(shells)

    def shell_ids(l: int) -> np.ndarray:
        return 1 + (l - 1) * nv + np.arange(nv)

    tets = [np.column_stack([np.zeros(surface.triangles.shape[0], dtype=np.int64),
                             shell_ids(1)[surface.triangles]])]
    patterns = []
    for l in range(1, layers):
        replay = None if prism_patterns is None else prism_patterns[l - 1]
        block, pat = _prism_split(
            surface.triangles, shell_ids(l), shell_ids(l + 1), points, replay
        )
        tets.append(block)
        patterns.append(pat)
    tets = np.vstack(tets)

    p = points[tets]
    vol6 = np.einsum(
        "ti,ti->t",
        np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]),
        p[:, 3] - p[:, 0],
    )
    flip = vol6 < 0
    if np.any(flip):
        tets[flip] = tets[flip][:, [0, 1, 3, 2]]
        vol6 = np.abs(vol6)
    bad = np.flatnonzero(vol6 <= 0.0)
    if bad.size:
        raise ValueError(f"tetrahedron {bad[0]} has non-positive volume")

    s2v = shell_ids(layers)
    return HeadMesh(
        points=points,
        tets=tets,
        boundary=s2v[surface.triangles],
        boundary_tags=surface.tags.copy(),
        surface_to_volume=s2v,
        frames=surface.frames,
        layers=layers,
        prism_patterns=tuple(patterns),
    )


def _prism_split(
    tris: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    points: np.ndarray,
    pattern: np.ndarray | None = None,
):
    """Split the prisms over `tris` between two shells into 3 tets each.

    Each vertical quad face is cut by its shorter diagonal (a shared,
    deterministic choice, so neighboring prisms conform); the rare cyclic
    assignments are repaired toward the id-based diagonal.  Returns the tet
    array and the per-prism pattern codes; passing recorded codes back in
    replays the exact connectivity on deformed geometry.
    """
    n = tris.shape[0]
    if pattern is None:
        lo, up = points[lower], points[upper]
        rise = np.empty((n, 3), dtype=np.int64)
        gap = np.empty((n, 3))
        for f in range(3):
            u, v = tris[:, f], tris[:, (f + 1) % 3]
            p_, q_ = np.minimum(u, v), np.maximum(u, v)
            d_pq = np.linalg.norm(lo[p_] - up[q_], axis=1)  # rises at q
            d_qp = np.linalg.norm(lo[q_] - up[p_], axis=1)  # rises at p
            rise[:, f] = np.where(d_pq <= d_qp, q_, p_)
            gap[:, f] = np.abs(d_pq - d_qp)
        pattern = _prism_patterns(tris, rise, gap)
    w = (pattern // 2).astype(np.int64)
    variant = pattern % 2
    rows = np.arange(n)
    x, y = (w + 1) % 3, (w + 2) % 3
    w0, x0, y0 = lower[tris[rows, w]], lower[tris[rows, x]], lower[tris[rows, y]]
    w1, x1, y1 = upper[tris[rows, w]], upper[tris[rows, x]], upper[tris[rows, y]]
    out = np.empty((n, 3, 4), dtype=np.int64)
    out[:, 0] = np.stack([w0, x0, y0, w1], axis=1)
    v0 = variant == 0  # third face rises at x
    out[v0, 1] = np.stack([x0, y0, x1, w1], axis=1)[v0]
    out[v0, 2] = np.stack([y0, y1, x1, w1], axis=1)[v0]
    v1 = ~v0  # third face rises at y
    out[v1, 1] = np.stack([x0, y0, y1, w1], axis=1)[v1]
    out[v1, 2] = np.stack([x0, y1, x1, w1], axis=1)[v1]
    return out.reshape(-1, 4), pattern


def _pattern_of(tri, rises) -> int:
    """Split code 2*w + variant, or -1 if the three diagonals form a cycle.

    `w` is the vertex whose upper copy both adjacent diagonals reach;
    `variant` says which end of the remaining face rises.
    """
    for j in range(3):
        if rises[j] == tri[j] and rises[(j + 2) % 3] == tri[j]:
            third = (j + 1) % 3
            return 2 * j + int(rises[third] != tri[(j + 1) % 3])
    return -1


def _prism_patterns(tris, rise, gap) -> np.ndarray:
    pattern = np.full(len(tris), -1, dtype=np.int8)
    for j in range(3):
        dbl = (rise[:, j] == tris[:, j]) & (rise[:, (j + 2) % 3] == tris[:, j])
        var = (rise[:, (j + 1) % 3] != tris[:, (j + 1) % 3]).astype(np.int8)
        pattern = np.where(dbl, (2 * j + var).astype(np.int8), pattern)
    cyclic = np.flatnonzero(pattern < 0)
    if cyclic.size == 0:
        return pattern

    # Cyclic diagonals cannot be split; revert faces (cheapest mismatch
    # first) to the never-cyclic id rule (rise at the larger vertex) until
    # every prism admits a split.  Flipped faces are frozen so the walk
    # terminates.
    def edge(i: int, f: int) -> tuple:
        u, v = int(tris[i, f]), int(tris[i, (f + 1) % 3])
        return (u, v) if u < v else (v, u)

    owners: dict[tuple, list] = {}
    edge_rise: dict[tuple, int] = {}
    for i in range(len(tris)):
        for f in range(3):
            e = edge(i, f)
            owners.setdefault(e, []).append(i)
            edge_rise[e] = int(rise[i, f])
    frozen: set = set()
    queue = deque(int(i) for i in cyclic)
    budget = 12 * len(tris) + 100
    while queue:
        budget -= 1
        if budget < 0:
            raise ValueError("prism diagonal repair did not converge")
        i = queue.popleft()
        rises = [edge_rise[edge(i, f)] for f in range(3)]
        code = _pattern_of(tris[i], rises)
        if code >= 0:
            pattern[i] = code
            continue
        for _, f in sorted((float(gap[i, f]), f) for f in range(3)):
            e = edge(i, f)
            if e in frozen:
                continue
            frozen.add(e)
            if edge_rise[e] != max(e):
                edge_rise[e] = max(e)
                queue.extend(owners[e])
                break
        queue.append(i)
    return pattern


def build_head_mesh(
    model: ShapeModel,
    alpha,
    layout: ElectrodeLayout,
    k: int,
    layers: int,
    mu: float = 1.5,
    template: MeshTemplate | None = None,
) -> tuple[HeadMesh, SurfaceMesh, MeshTemplate]:
    """Surface + electrodes + tets in one deterministic call."""
    surface = subdivide_initial_surface(k, model, alpha)
    surface, template = insert_electrodes(surface, layout, mu, template)
    mesh = tetrahedralize(surface, layers, template.prism_patterns)
    template = replace(template, prism_patterns=mesh.prism_patterns)
    return mesh, surface, template


# ---------------------------------------------------------------------------
# quality


@dataclass(frozen=True)
class QualityReport:
    n_points: int
    n_tets: int
    total_volume: float
    min_volume: float
    min_radius_ratio: float
    mean_radius_ratio: float
    min_dihedral_deg: float
    volume_histogram: tuple  # (counts, bin edges)

    def summary(self) -> str:
        return (
            f"{self.n_points} points, {self.n_tets} tets, "
            f"volume {self.total_volume:.6e} m^3, "
            f"radius ratio min {self.min_radius_ratio:.3f} "
            f"mean {self.mean_radius_ratio:.3f}, "
            f"min dihedral {self.min_dihedral_deg:.1f} deg"
        )


def mesh_quality(mesh: HeadMesh) -> QualityReport:
    p = mesh.points[mesh.tets]
    vol6 = np.einsum(
        "ti,ti->t",
        np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]),
        p[:, 3] - p[:, 0],
    )
    bad = np.flatnonzero(vol6 <= 0.0)
    if bad.size:
        raise ValueError(f"tetrahedron {bad[0]} has non-positive volume")
    vol = vol6 / 6.0

    faces = ((0, 1, 2), (0, 3, 1), (0, 2, 3), (1, 3, 2))
    areas = np.stack(
        [
            0.5
            * np.linalg.norm(
                np.cross(p[:, f[1]] - p[:, f[0]], p[:, f[2]] - p[:, f[0]]), axis=1
            )
            for f in faces
        ],
        axis=1,
    )
    r_in = 3.0 * vol / areas.sum(axis=1)

    # Circumradius via the linear system 2 (p_i - p_0) . c = |p_i|^2 - |p_0|^2.
    rhs = np.einsum("tid,tid->ti", p[:, 1:], p[:, 1:]) - np.einsum(
        "td,td->t", p[:, 0], p[:, 0]
    )[:, None]
    mat = 2.0 * (p[:, 1:] - p[:, :1])
    cc = np.linalg.solve(mat, rhs[:, :, None])[:, :, 0]
    r_circ = np.linalg.norm(cc - p[:, 0], axis=1)
    ratio = 3.0 * r_in / r_circ

    normals = [
        np.cross(p[:, f[1]] - p[:, f[0]], p[:, f[2]] - p[:, f[0]]) for f in faces
    ]
    normals = [n / np.linalg.norm(n, axis=1, keepdims=True) for n in normals]
    dih = []
    for i in range(4):
        for j in range(i + 1, 4):
            cosang = np.clip(np.einsum("td,td->t", normals[i], normals[j]), -1.0, 1.0)
            dih.append(np.pi - np.arccos(cosang))
    min_dih = np.min(np.stack(dih, axis=1))

    counts, edges = np.histogram(vol, bins=20)
    return QualityReport(
        n_points=mesh.n_points,
        n_tets=mesh.tets.shape[0],
        total_volume=float(vol.sum()),
        min_volume=float(vol.min()),
        min_radius_ratio=float(ratio.min()),
        mean_radius_ratio=float(ratio.mean()),
        min_dihedral_deg=float(np.rad2deg(min_dih)),
        volume_histogram=(counts.tolist(), edges.tolist()),
    )
