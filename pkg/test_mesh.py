import math
import struct

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from slicematch import shapes
from slicematch.exceptions import DataException
from slicematch.mesh import (TriMesh, cotangent_laplacian, geodesic_distances, load_mesh, read_ply, write_off,
        write_ply)

TETRAHEDRON_OFF = """OFF
4 4 0
0.35355339059327373 0.35355339059327373 0.35355339059327373
0.35355339059327373 -0.35355339059327373 -0.35355339059327373
-0.35355339059327373 0.35355339059327373 -0.35355339059327373
-0.35355339059327373 -0.35355339059327373 0.35355339059327373
3 0 1 2
3 0 3 1
3 0 2 3
3 1 3 2
"""


def write_text(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# Loading tests
def test_load_tetrahedron_off(tmp_path):
    mesh = load_mesh(write_text(tmp_path, "tet.off", TETRAHEDRON_OFF))
    assert mesh.n_vertices == 4
    assert mesh.n_faces == 4
    assert mesh.total_area == pytest.approx(math.sqrt(3.0), rel=1e-12)

def test_load_off_out_of_range_index(tmp_path):
    text = TETRAHEDRON_OFF.replace("3 1 3 2", "3 1 3 9")
    with pytest.raises(DataException) as error:
        load_mesh(write_text(tmp_path, "bad.off", text))
    assert "line 10" in str(error.value)
    assert "9" in str(error.value)

def test_load_off_malformed_counts(tmp_path):
    with pytest.raises(DataException) as error:
        load_mesh(write_text(tmp_path, "bad.off", "OFF\nfour four 0\n"))
    assert "line 2" in str(error.value)

def test_load_off_truncated(tmp_path):
    text = "\n".join(TETRAHEDRON_OFF.splitlines()[:8]) + "\n"
    with pytest.raises(DataException):
        load_mesh(write_text(tmp_path, "short.off", text))

def test_load_off_degenerate_face(tmp_path):
    text = "OFF\n4 2 0\n0 0 0\n1 0 0\n2 0 0\n0 1 0\n3 0 1 2\n3 0 1 3\n"
    with pytest.raises(DataException) as error:
        load_mesh(write_text(tmp_path, "flat.off", text))
    assert "degenerate" in str(error.value)
    assert "line 7" in str(error.value)

def test_load_off_disconnected(tmp_path):
    text = "OFF\n6 2 0\n0 0 0\n1 0 0\n0 1 0\n5 0 0\n6 0 0\n5 1 0\n3 0 1 2\n3 3 4 5\n"
    with pytest.raises(DataException) as error:
        load_mesh(write_text(tmp_path, "two.off", text))
    assert "disconnected" in str(error.value)

def test_load_off_quad_is_triangulated(tmp_path):
    mesh = load_mesh(write_text(tmp_path, "quad.off", "COFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"))
    assert mesh.n_faces == 2
    assert mesh.total_area == pytest.approx(1.0)

def test_load_obj_with_texture_indices(tmp_path):
    text = "# square\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1\nf -4 -2 -1\n"
    mesh = load_mesh(write_text(tmp_path, "square.obj", text))
    assert mesh.n_vertices == 4
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    assert mesh.total_area == pytest.approx(1.0)

def test_load_obj_zero_index(tmp_path):
    with pytest.raises(DataException) as error:
        load_mesh(write_text(tmp_path, "zero.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n"))
    assert "line 4" in str(error.value)

def test_load_unknown_format(tmp_path):
    with pytest.raises(DataException):
        load_mesh(write_text(tmp_path, "mesh.stl", "solid"))

def test_off_round_trip_preserves_order(tmp_path):
    mesh = shapes.bumpy(shapes.icosphere(1), seed=3)
    path = str(tmp_path / "sphere.off")
    write_off(path, mesh)
    loaded = load_mesh(path)
    assert np.array_equal(loaded.vertices, mesh.vertices)
    assert np.array_equal(loaded.faces, mesh.faces)

def test_ascii_ply_with_colors(tmp_path):
    mesh = shapes.unit_square()
    path = str(tmp_path / "square.ply")
    write_ply(path, mesh, colors=[[255, 0, 0], [0, 255, 0], [0, 0, 255], [10, 20, 30]])
    assert "property uchar red" in open(path).read()
    loaded = read_ply(path)
    assert np.array_equal(loaded.vertices, mesh.vertices)
    assert loaded.total_area == pytest.approx(1.0)

def test_binary_ply(tmp_path):
    mesh = shapes.tetrahedron()
    header = ("ply\nformat binary_little_endian 1.0\ncomment tetrahedron\nelement vertex 4\n"
            "property float x\nproperty float y\nproperty float z\nelement face 4\n"
            "property list uchar int vertex_indices\nend_header\n").encode("ascii")
    body = b"".join(struct.pack("<3f", *vertex) for vertex in mesh.vertices)
    body += b"".join(struct.pack("<B3i", 3, *face) for face in mesh.faces)
    path = tmp_path / "tet.ply"
    path.write_bytes(header + body)
    loaded = load_mesh(str(path))
    assert loaded.n_faces == 4
    assert loaded.total_area == pytest.approx(math.sqrt(3.0), rel=1e-6)

def test_binary_ply_truncated_reports_offset(tmp_path):
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n").encode("ascii")
    path = tmp_path / "short.ply"
    path.write_bytes(header + struct.pack("<3f", 0, 0, 0) + struct.pack("<2f", 1, 0))
    with pytest.raises(DataException) as error:
        load_mesh(str(path))
    assert "byte %d" % (len(header) + 12) in str(error.value)


# Mesh construction tests
def test_unit_square_area():
    assert shapes.unit_square().total_area == pytest.approx(1.0)

def test_repeated_vertex_rejected():
    with pytest.raises(DataException):
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])

def test_mesh_arrays_are_read_only():
    mesh = shapes.unit_square()
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 5.0

def test_permuted_mesh_keeps_geometry():
    mesh = shapes.bumpy(shapes.icosphere(1), seed=1)
    order = np.random.default_rng(0).permutation(mesh.n_vertices)
    permuted = mesh.permuted(order)
    assert np.array_equal(permuted.vertices, mesh.vertices[order])
    assert permuted.total_area == pytest.approx(mesh.total_area, rel=1e-12)


# Laplacian tests
def test_stiffness_rows_sum_to_zero():
    for mesh in [shapes.tetrahedron(), shapes.grid(4, 3), shapes.bumpy(shapes.icosphere(2), seed=4)]:
        stiffness, _ = cotangent_laplacian(mesh)
        assert np.max(np.abs(np.asarray(stiffness.sum(axis=1)))) < 1e-8

def test_stiffness_is_symmetric():
    stiffness, _ = cotangent_laplacian(shapes.bumpy(shapes.icosphere(2), seed=2))
    assert abs(stiffness - stiffness.T).max() <= 1e-10 * abs(stiffness).max()

def test_unit_square_cotangent_weights():
    stiffness, _ = cotangent_laplacian(shapes.unit_square())
    dense = stiffness.toarray()
    for i, j in [(0, 1), (1, 2), (2, 3), (3, 0)]:
        assert dense[i, j] == pytest.approx(-0.5, abs=1e-12)
    assert dense[0, 2] == pytest.approx(0.0, abs=1e-12)

def test_mass_trace_is_total_area():
    mesh = shapes.bumpy(shapes.icosphere(2), seed=5)
    _, mass = cotangent_laplacian(mesh)
    assert mass.diagonal().sum() == pytest.approx(mesh.total_area, rel=1e-10)
    assert np.all(mass.diagonal() > 0)

def test_stiffness_is_positive_semidefinite():
    stiffness, _ = cotangent_laplacian(shapes.bumpy(shapes.icosphere(2), seed=6))
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.normal(size=stiffness.shape[0])
        assert x.dot(stiffness.dot(x)) >= -1e-8

def test_operators_invariant_to_rigid_motion():
    mesh = shapes.bumpy(shapes.icosphere(2), seed=7)
    moved = mesh.transformed(Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix(), [1.0, -2.0, 0.5])
    stiffness, mass = cotangent_laplacian(mesh)
    moved_stiffness, moved_mass = cotangent_laplacian(moved)
    assert abs(stiffness - moved_stiffness).max() < 1e-8
    assert abs(mass - moved_mass).max() < 1e-8

def test_operators_under_uniform_scaling():
    mesh = shapes.bumpy(shapes.icosphere(2), seed=8)
    stiffness, mass = cotangent_laplacian(mesh)
    scaled_stiffness, scaled_mass = cotangent_laplacian(mesh.transformed(scale=3.0))
    assert abs(stiffness - scaled_stiffness).max() < 1e-8
    assert np.allclose(scaled_mass.diagonal(), 9.0 * mass.diagonal(), rtol=1e-10)


# Geodesic tests
def test_geodesic_along_strip():
    mesh = shapes.strip(6, spacing=0.5)
    distances = geodesic_distances(mesh, [0])
    assert distances[0, 6] == pytest.approx(3.0, abs=1e-12)

def test_geodesic_source_is_zero():
    mesh = shapes.icosphere(2)
    distances = geodesic_distances(mesh, [5, 17])
    assert distances.shape == (2, mesh.n_vertices)
    assert distances[0, 5] == 0.0
    assert distances[1, 17] == 0.0
    assert distances[0, 17] == pytest.approx(distances[1, 5], abs=1e-12)

def test_geodesic_antipodal_icosphere():
    mesh = shapes.icosphere(3)
    assert mesh.n_vertices == 642
    source = 0
    antipode = int(np.argmin(np.linalg.norm(mesh.vertices + mesh.vertices[source], axis=1)))
    distance = geodesic_distances(mesh, [source])[0, antipode]
    assert math.pi <= distance <= 1.10 * math.pi

def test_geodesic_invariances():
    mesh = shapes.bumpy(shapes.icosphere(2), seed=9)
    distances = geodesic_distances(mesh, [0, 10])
    moved = mesh.transformed(Rotation.from_euler("z", 0.7).as_matrix(), [3.0, 0.0, 0.0])
    assert np.allclose(geodesic_distances(moved, [0, 10]), distances, atol=1e-8)
    assert np.allclose(geodesic_distances(mesh.transformed(scale=2.5), [0, 10]), 2.5 * distances, atol=1e-8)

def test_geodesic_bad_source():
    with pytest.raises(DataException):
        geodesic_distances(shapes.tetrahedron(), [4])
