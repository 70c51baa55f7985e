from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cranio_eit.meshgen import (
    ElectrodeLayout,
    belt_layout,
    build_head_mesh,
    insert_electrodes,
    mesh_quality,
    subdivide_initial_surface,
    tangent_projection,
    tetrahedralize,
    vertex_normals,
)
from cranio_eit.shape_model import LibraryConfig, build_model, generate_library


@pytest.fixture(scope="module")
def model():
    lib = generate_library(LibraryConfig(n=20, grid_level=4), seed=11)
    return build_model(lib, n_keep=5)


@pytest.fixture(scope="module")
def mode_sd(model):
    # per-mode prior standard deviations of the shape coefficients
    return np.sqrt(model.eigenvalues[:5] / 19.0)


@pytest.fixture(scope="module")
def desk_layout():
    return belt_layout([4, 4], [62.0, 30.0], 0.015, phi_offset_deg=[0.0, 45.0])


@pytest.fixture(scope="module")
def desk(model, desk_layout):
    # coarse 8-electrode mesh, shared across structural tests
    return build_head_mesh(model, np.zeros(5), desk_layout, 3, 3)


@pytest.fixture(scope="module")
def head12(model):
    layout = belt_layout([8, 4], [70.0, 40.0], 0.009)
    mesh, surface, template = build_head_mesh(model, np.zeros(5), layout, 4, 4)
    return mesh, surface, template, layout


def assert_closed_oriented(triangles):
    directed = [
        (int(t[i]), int(t[(i + 1) % 3])) for t in triangles for i in range(3)
    ]
    assert len(set(directed)) == len(directed)
    count = Counter(tuple(sorted(e)) for e in directed)
    assert all(c == 2 for c in count.values())


def tagged_areas(surface):
    areas = {}
    for m in sorted(set(surface.tags.tolist())):
        if m == 0:
            continue
        p = surface.points[surface.triangles[surface.tags == m]]
        areas[m] = 0.5 * np.linalg.norm(
            np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1
        ).sum()
    return areas


def tet_volumes(mesh):
    p = mesh.points[mesh.tets]
    return (
        np.einsum(
            "ti,ti->t",
            np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]),
            p[:, 3] - p[:, 0],
        )
        / 6.0
    )


def enclosed_volume(points, triangles):
    p = points[triangles]
    return (
        np.einsum(
            "ti,ti->t", p.mean(axis=1), np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        ).sum()
        / 6.0
    )


class TestSubdivideSurface:
    def test_counts_and_closure(self, model):
        for k in (3, 4):
            s = subdivide_initial_surface(k, model, np.zeros(5))
            assert s.n_crown_tris == 4 * 4**k
            assert s.triangles.shape[0] > s.n_crown_tris  # base disk present
            assert np.all(s.tags == 0)
            assert_closed_oriented(s.triangles)
            # Euler characteristic of a sphere
            edges = {
                tuple(sorted((int(t[i]), int(t[(i + 1) % 3]))))
                for t in s.triangles
                for i in range(3)
            }
            assert s.n_points - len(edges) + s.triangles.shape[0] == 2

    def test_base_disk_in_plane_facing_down(self, model):
        s = subdivide_initial_surface(3, model, np.zeros(5))
        bottom = s.bottom_triangles
        assert np.all(s.points[np.unique(bottom)][:, 2] == 0.0)
        p = s.points[bottom]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        assert np.all(n[:, 2] < 0.0)

    def test_crown_radially_oriented(self, model):
        s = subdivide_initial_surface(3, model, np.zeros(5))
        p = s.points[s.crown_triangles]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        assert np.einsum("ti,ti->t", n, p.mean(axis=1)).min() > 0.0

    def test_deterministic(self, model):
        a = subdivide_initial_surface(3, model, np.zeros(5))
        b = subdivide_initial_surface(3, model, np.zeros(5))
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.triangles, b.triangles)

    def test_level_below_three_rejected(self, model):
        with pytest.raises(ValueError, match="at least 3"):
            subdivide_initial_surface(2, model, np.zeros(5))

    def test_degenerate_radius_rejected(self, model):
        with pytest.raises(ValueError, match="degenerate crown"):
            subdivide_initial_surface(3, model, np.full(5, -50.0))

    @settings(max_examples=10, deadline=None)
    @given(st.lists(st.floats(-1.5, 1.5), min_size=5, max_size=5))
    def test_valid_over_prior_range(self, coeffs):
        # structural validity over several prior standard deviations
        lib = generate_library(LibraryConfig(n=20, grid_level=4), seed=11)
        mdl = build_model(lib, n_keep=5)
        sd = np.sqrt(mdl.eigenvalues[:5] / 19.0)
        s = subdivide_initial_surface(3, mdl, np.asarray(coeffs) * sd)
        assert_closed_oriented(s.triangles)
        p = s.points[s.crown_triangles]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        assert np.einsum("ti,ti->t", n, p.mean(axis=1)).min() > 0.0


class TestElectrodeLayout:
    def test_belt_numbering(self):
        lay = belt_layout([3, 2], [60.0, 30.0], 0.01)
        assert lay.n == 5
        assert np.allclose(lay.theta[:3], np.radians(60.0))
        assert np.allclose(lay.theta[3:], np.radians(30.0))
        assert np.allclose(lay.phi[:3], [0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        assert np.allclose(lay.phi[3:], [0.0, np.pi])
        assert np.allclose(lay.radii, 0.01)

    def test_phi_offsets(self):
        lay = belt_layout([2, 2], [60.0, 30.0], 0.01, phi_offset_deg=[0.0, 45.0])
        assert np.allclose(lay.phi[2:], np.radians([45.0, 225.0]))

    def test_directions_unit(self):
        lay = belt_layout([4], [55.0], 0.01)
        d = lay.directions()
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
        assert np.allclose(d[:, 2], np.cos(np.radians(55.0)))

    def test_shifted(self):
        lay = belt_layout([2], [50.0], 0.01)
        moved = lay.shifted(np.array([0.01, -0.01]), np.array([0.0, 0.02]))
        assert np.allclose(moved.theta - lay.theta, [0.01, -0.01])
        assert np.allclose(moved.phi - lay.phi, [0.0, 0.02])

    def test_polar_bounds_rejected(self):
        with pytest.raises(ValueError):
            belt_layout([2], [0.0], 0.01)
        with pytest.raises(ValueError):
            belt_layout([2], [90.0], 0.01)

    def test_nonpositive_radius_rejected(self):
        with pytest.raises(ValueError):
            ElectrodeLayout(
                theta=np.array([0.5]), phi=np.array([0.0]), radii=np.array([0.0])
            )


class TestInsertElectrodes:
    def test_frames_match_layout(self, desk, desk_layout):
        _, surface, _ = desk
        assert len(surface.frames) == desk_layout.n
        d = desk_layout.directions()
        for m, fr in enumerate(surface.frames):
            assert fr.radius == desk_layout.radii[m]
            assert np.linalg.norm(fr.normal) == pytest.approx(1.0, abs=1e-12)
            c = fr.center / np.linalg.norm(fr.center)
            assert c @ d[m] > 0.999

    def test_still_closed_and_oriented(self, desk):
        _, surface, _ = desk
        assert_closed_oriented(surface.triangles)

    def test_tagged_area_matches_footprint(self, head12):
        _, surface, _, layout = head12
        areas = tagged_areas(surface)
        assert set(areas) == set(range(1, layout.n + 1))
        for m, a in areas.items():
            disk = np.pi * layout.radii[m - 1] ** 2
            # ring polygon inscribed in the footprint circle
            assert abs(a / disk - 1.0) < 0.05

    def test_template_replay_identical_topology(self, model, mode_sd, head12):
        mesh, surface, template, layout = head12
        shifts = [
            (0.05 * mode_sd, layout),
            (-0.1 * mode_sd, layout),
            (
                np.zeros(5),
                layout.shifted(
                    np.full(layout.n, 5e-3), np.full(layout.n, -5e-3)
                ),
            ),
        ]
        for alpha, lay in shifts:
            m2, s2, _ = build_head_mesh(model, alpha, lay, 4, 4, template=template)
            assert np.array_equal(s2.triangles, surface.triangles)
            assert np.array_equal(s2.tags, surface.tags)
            assert np.array_equal(m2.tets, mesh.tets)
            moved = np.linalg.norm(s2.points - surface.points, axis=1)
            assert 0.0 < moved.max() < 5e-3

    def test_tagged_area_stable_under_frozen_layout_shift(self, model, head12):
        # with the template frozen, electrode areas move only at second order
        mesh, surface, template, layout = head12
        base = tagged_areas(surface)
        rng = np.random.default_rng(3)
        for delta, bound in ((5e-3, 5e-4), (1e-2, 1e-3)):
            dth = rng.uniform(-delta, delta, layout.n)
            dph = rng.uniform(-delta, delta, layout.n)
            _, s2, _ = build_head_mesh(
                model, np.zeros(5), layout.shifted(dth, dph), 4, 4, template=template
            )
            new = tagged_areas(s2)
            worst = max(abs(new[m] / base[m] - 1.0) for m in base)
            assert worst < bound

    def test_double_insert_rejected(self, desk, desk_layout):
        _, surface, _ = desk
        with pytest.raises(ValueError, match="already carries electrodes"):
            insert_electrodes(surface, desk_layout)

    def test_unit_extension_rejected(self, model, desk_layout):
        s = subdivide_initial_surface(3, model, np.zeros(5))
        with pytest.raises(ValueError, match="must exceed 1"):
            insert_electrodes(s, desk_layout, mu=1.0)

    def test_overlap_rejected(self, model):
        s = subdivide_initial_surface(4, model, np.zeros(5))
        lay = ElectrodeLayout(
            theta=np.radians([55.0, 55.0]),
            phi=np.array([0.0, 0.02]),
            radii=np.array([0.009, 0.009]),
        )
        with pytest.raises(ValueError, match="overlap after extension"):
            insert_electrodes(s, lay)

    def test_rim_crossing_rejected(self, model):
        s = subdivide_initial_surface(4, model, np.zeros(5))
        lay = ElectrodeLayout(
            theta=np.radians([88.0]), phi=np.array([0.0]), radii=np.array([0.012])
        )
        with pytest.raises(ValueError, match="crosses the crown rim"):
            insert_electrodes(s, lay)

    def test_under_resolved_footprint_rejected(self, model):
        s = subdivide_initial_surface(3, model, np.zeros(5))
        lay = ElectrodeLayout(
            theta=np.radians([50.0]), phi=np.array([0.0]), radii=np.array([0.006])
        )
        with pytest.raises(ValueError, match="under-resolved"):
            insert_electrodes(s, lay)

    def test_projection_requires_surface_point(self, model):
        s = subdivide_initial_surface(3, model, np.zeros(5))
        with pytest.raises(ValueError, match="not on the crown surface"):
            tangent_projection(s, np.array([0.0, 0.0, 0.02]))

    def test_vertex_normals_outward(self, model):
        s = subdivide_initial_surface(3, model, np.zeros(5))
        n = vertex_normals(s.points, s.triangles)
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0)
        crown_ids = np.unique(s.crown_triangles)
        interior = crown_ids[s.points[crown_ids, 2] > 0.01]
        dots = np.einsum("ij,ij->i", n[interior], s.points[interior])
        assert dots.min() > 0.0


class TestTetrahedralize:
    def test_boundary_is_input_surface(self, desk):
        mesh, surface, _ = desk
        count = Counter()
        for tet in mesh.tets:
            for f in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
                count[tuple(sorted(int(tet[i]) for i in f))] += 1
        once = {f for f, c in count.items() if c == 1}
        declared = {tuple(sorted(int(v) for v in t)) for t in mesh.boundary}
        assert once == declared
        assert count.most_common(1)[0][1] == 2
        # boundary points are bit-identical to the surface points
        assert np.array_equal(mesh.points[mesh.surface_to_volume], surface.points)
        assert np.array_equal(mesh.boundary_tags, surface.tags)

    def test_positive_volumes(self, desk):
        mesh, _, _ = desk
        assert tet_volumes(mesh).min() > 0.0

    def test_volume_matches_surface(self, desk):
        mesh, surface, _ = desk
        vt = tet_volumes(mesh).sum()
        vs = enclosed_volume(surface.points, surface.triangles)
        assert vt == pytest.approx(vs, rel=1e-12)

    def test_deterministic(self, model, desk, desk_layout):
        mesh, _, _ = desk
        again, _, _ = build_head_mesh(model, np.zeros(5), desk_layout, 3, 3)
        assert np.array_equal(again.points, mesh.points)
        assert np.array_equal(again.tets, mesh.tets)

    def test_prism_pattern_replay(self, desk):
        mesh, surface, _ = desk
        again = tetrahedralize(surface, 3, mesh.prism_patterns)
        assert np.array_equal(again.tets, mesh.tets)

    def test_zero_layers_rejected(self, desk):
        _, surface, _ = desk
        with pytest.raises(ValueError, match="at least one radial layer"):
            tetrahedralize(surface, 0)

    def test_quality_floors(self, desk, head12):
        q3 = mesh_quality(desk[0])
        q4 = mesh_quality(head12[0])
        assert q3.min_radius_ratio > 0.03
        assert q4.min_radius_ratio > 0.011
        assert q3.mean_radius_ratio > 0.25
        assert q4.mean_radius_ratio > 0.25
        assert q3.min_dihedral_deg > 1.0
        assert q4.min_dihedral_deg > 0.4

    def test_quality_report_consistency(self, desk):
        mesh, surface, _ = desk
        q = mesh_quality(mesh)
        assert q.n_tets == mesh.tets.shape[0]
        assert q.n_points == mesh.points.shape[0]
        counts, edges = q.volume_histogram
        assert np.sum(counts) == q.n_tets
        assert q.total_volume == pytest.approx(
            enclosed_volume(surface.points, surface.triangles), rel=1e-12
        )
        assert 0.0 < q.min_radius_ratio <= q.mean_radius_ratio <= 1.0
