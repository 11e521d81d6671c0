import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from swflow.geometry import (
    MeshFormatError,
    TriMesh,
    adjacency,
    icosphere,
    load_mesh,
    make_rng,
    make_synthetic,
    parse_shape,
    sample_surface,
    sample_surface_with_faces,
    save_mesh,
    vertex_measure,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestTriMesh:
    def test_rejects_out_of_range_index(self):
        with pytest.raises(ValueError, match="out of range"):
            TriMesh(np.eye(3), [[0, 1, 3]])

    def test_rejects_degenerate_face(self):
        with pytest.raises(ValueError, match="degenerate"):
            TriMesh(np.eye(3), [[0, 1, 1]])

    def test_rejects_zero_area(self):
        with pytest.raises(ValueError, match="zero total surface area"):
            TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])

    def test_immutable(self, tetra):
        with pytest.raises(ValueError):
            tetra.vertices[0, 0] = 5.0

    def test_face_areas_cached_and_recomputable(self, triangle):
        assert triangle.face_areas[0] == 0.5
        np.testing.assert_array_equal(triangle.recompute_areas(), triangle.face_areas)


class TestLoadSave:
    def test_minimal_obj(self, tmp_path):
        p = write(tmp_path, "m.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        m = load_mesh(p)
        assert (m.n_vertices, m.n_faces) == (3, 1)

    def test_quad_face_names_line(self, tmp_path):
        p = write(tmp_path, "q.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(MeshFormatError, match="line 5: non-triangular face"):
            load_mesh(p)

    def test_malformed_vertex_names_line(self, tmp_path):
        p = write(tmp_path, "b.obj", "v 0 0 0\nv 1 x 0\n")
        with pytest.raises(MeshFormatError, match="line 2"):
            load_mesh(p)

    def test_empty_mesh(self, tmp_path):
        with pytest.raises(MeshFormatError, match="empty"):
            load_mesh(write(tmp_path, "e.obj", "# nothing\n"))

    def test_obj_slash_indices(self, tmp_path):
        p = write(tmp_path, "s.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n")
        assert load_mesh(p).n_faces == 1

    def test_tetra_structure(self, tmp_path, tetra):
        p = tmp_path / "t.obj"
        save_mesh(tetra, p)
        lines = p.read_text().splitlines()
        assert sum(l.startswith("v ") for l in lines) == 4
        assert sum(l.startswith("f ") for l in lines) == 4

    @pytest.mark.parametrize("suffix", [".obj", ".ply"])
    def test_round_trip_bitwise(self, tmp_path, suffix):
        rng = make_rng(3)
        m = make_synthetic("perturbed-sphere", 2, rng=rng)
        m = m.with_vertices(m.vertices * np.pi + rng.normal(size=m.vertices.shape) * 1e-7)
        p = tmp_path / f"m{suffix}"
        save_mesh(m, p)
        back = load_mesh(p)
        assert back == m
        assert back.vertices.tobytes() == m.vertices.tobytes()

    def test_ply_quad_rejected(self, tmp_path):
        text = (
            "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
            "property float z\nelement face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
        )
        with pytest.raises(MeshFormatError, match="line 14: non-triangular face"):
            load_mesh(write(tmp_path, "q.ply", text))

    def test_binary_ply_rejected(self, tmp_path):
        text = "ply\nformat binary_little_endian 1.0\nend_header\n"
        with pytest.raises(MeshFormatError, match="ASCII"):
            load_mesh(write(tmp_path, "b.ply", text))

    def test_save_into_missing_directory(self, tmp_path, tetra):
        with pytest.raises(OSError):
            save_mesh(tetra, tmp_path / "nope" / "m.obj")


class TestVertexMeasure:
    def test_order_and_values(self, tetra):
        np.testing.assert_array_equal(vertex_measure(tetra), tetra.vertices)

    def test_duplicates_retained(self, tmp_path):
        p = write(tmp_path, "d.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 0\nf 1 2 3\n")
        pts = vertex_measure(load_mesh(p))
        assert len(pts) == 4
        np.testing.assert_array_equal(pts[0], pts[3])


class TestSampleSurface:
    def test_single_triangle_support(self, triangle):
        pts = sample_surface(triangle, 5000, make_rng(1))
        # barycentric coordinates (1 - x - y, x, y) for this triangle
        bary = np.column_stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
        assert np.all(bary >= -1e-12) and np.all(bary <= 1 + 1e-12)
        np.testing.assert_allclose(bary.sum(axis=1), 1.0)
        assert np.allclose(pts[:, 2], 0.0)

    def test_area_weighting(self):
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]])
        m = TriMesh(v, [[0, 1, 2], [3, 4, 5]])  # areas 1 and 3
        _, face = sample_surface_with_faces(m, 100_000, make_rng(0))
        assert abs(np.mean(face == 1) - 0.75) < 0.01

    def test_chi_square_face_frequencies(self):
        m = make_synthetic("perturbed-sphere(0.3,3)", 1, rng=2)
        n = 100_000
        _, face = sample_surface_with_faces(m, n, make_rng(4))
        observed = np.bincount(face, minlength=m.n_faces)
        expected = n * m.face_areas / m.area
        assert stats.chisquare(observed, expected).pvalue > 1e-3

    def test_same_seed_same_points(self, tetra):
        a = sample_surface(tetra, 100, make_rng(9))
        b = sample_surface(tetra, 100, make_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_rejects_nonpositive_n(self, tetra):
        with pytest.raises(ValueError):
            sample_surface(tetra, 0, make_rng(0))


class TestAdjacency:
    def test_single_triangle(self, triangle):
        assert adjacency(triangle) == [[1, 2], [0, 2], [0, 1]]

    def test_shared_edge_listed_once(self):
        m = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]), [[0, 1, 2], [1, 3, 2]])
        adj = adjacency(m)
        assert adj[1].count(2) == 1 and adj[2].count(1) == 1

    def test_icosahedron_valence_matches_brute_force(self):
        v, f = icosphere(0)
        adj = adjacency(TriMesh(v, f))
        brute = {i: set() for i in range(len(v))}
        for tri in f:
            for a in tri:
                for b in tri:
                    if a != b:
                        brute[a].add(int(b))
        assert all(len(a) == 5 for a in adj)
        assert all(set(adj[i]) == brute[i] for i in brute)

    def test_symmetric_no_self_loops(self):
        adj = adjacency(make_synthetic("sphere", 2))
        for i, nb in enumerate(adj):
            assert i not in nb
            assert all(i in adj[j] for j in nb)


class TestSynthetic:
    @pytest.mark.parametrize("s,nv,nf", [(0, 12, 20), (1, 42, 80), (2, 162, 320), (3, 642, 1280)])
    def test_counts_and_euler(self, s, nv, nf):
        m = make_synthetic("sphere", s)
        assert (m.n_vertices, m.n_faces) == (nv, nf)
        assert m.euler_characteristic() == 2

    def test_ellipsoid_extent_ratio(self):
        m = make_synthetic("ellipsoid(2,1,1)", 2)
        ext = m.vertices.max(axis=0) - m.vertices.min(axis=0)
        assert abs(ext[0] / ext[1] - 2.0) < 1e-12 and abs(ext[1] / ext[2] - 1.0) < 1e-12

    def test_outward_orientation(self):
        m = make_synthetic("sphere", 2)
        tri = m.vertices[m.faces]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        assert np.all(np.sum(normals * tri.mean(axis=1), axis=1) > 0)

    def test_watertight(self):
        m = make_synthetic("perturbed-sphere", 2, rng=1)
        f = m.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        assert np.all(counts == 2)

    def test_perturbed_deterministic(self):
        assert make_synthetic("perturbed-sphere", 2, rng=5) == make_synthetic("perturbed-sphere", 2, rng=5)

    def test_scale(self):
        m = make_synthetic("sphere", 1, scale=30.0)
        np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 30.0)

    def test_unknown_shape(self):
        with pytest.raises(ValueError, match="unknown shape"):
            parse_shape("cube")

    def test_negative_subdivisions(self):
        with pytest.raises(ValueError):
            make_synthetic("sphere", -1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sampling_deterministic_for_any_seed(seed):
    m = make_synthetic("sphere", 1)
    np.testing.assert_array_equal(sample_surface(m, 64, make_rng(seed)), sample_surface(m, 64, make_rng(seed)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3))
def test_euler_characteristic_property(s):
    assert make_synthetic("perturbed-sphere", s, rng=s).euler_characteristic() == 2
