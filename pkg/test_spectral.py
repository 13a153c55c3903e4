import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from slicematch import shapes
from slicematch.exceptions import DataException
from slicematch.mesh import cotangent_laplacian
from slicematch.spectral import FeatureMatrix, SpectralBasis, compute_basis, project, wks


def basis_of(mesh, k):
    stiffness, mass = cotangent_laplacian(mesh)
    return compute_basis(stiffness, mass, k), stiffness, mass


# Basis tests
def test_basis_is_mass_orthonormal():
    basis, _, mass = basis_of(shapes.bumpy(shapes.icosphere(2), seed=1), 20)
    gram = basis.phi.T.dot(mass.dot(basis.phi))
    assert np.max(np.abs(gram - np.eye(20))) < 1e-6

def test_first_eigenfunction_is_constant():
    basis, _, _ = basis_of(shapes.bumpy(shapes.icosphere(2), seed=2), 10)
    assert basis.eigenvalues[0] <= 1e-8
    column = basis.phi[:, 0]
    assert (column.max() - column.min()) / abs(column.mean()) < 1e-5

def test_eigenvalues_ascending():
    basis, _, _ = basis_of(shapes.bumpy(shapes.icosphere(2), seed=3), 30)
    assert np.all(np.diff(basis.eigenvalues) >= 0)
    assert basis.eigenvalues[0] <= 1e-6 * basis.eigenvalues[-1]

def test_eigen_residuals_dense():
    basis, stiffness, mass = basis_of(shapes.bumpy(shapes.icosphere(2), seed=4), 20)
    for i in range(1, basis.k):
        w_phi = stiffness.dot(basis.phi[:, i])
        residual = w_phi - basis.eigenvalues[i] * mass.dot(basis.phi[:, i])
        assert np.linalg.norm(residual) <= 1e-6 * np.linalg.norm(w_phi)

def test_sparse_solver_on_large_mesh():
    mesh = shapes.bumpy(shapes.icosphere(4), seed=5)
    assert mesh.n_vertices > 1000
    basis, stiffness, mass = basis_of(mesh, 12)
    gram = basis.phi.T.dot(mass.dot(basis.phi))
    assert np.max(np.abs(gram - np.eye(12))) < 1e-6
    for i in range(1, basis.k):
        w_phi = stiffness.dot(basis.phi[:, i])
        residual = w_phi - basis.eigenvalues[i] * mass.dot(basis.phi[:, i])
        assert np.linalg.norm(residual) <= 1e-6 * np.linalg.norm(w_phi)

def test_sphere_spectrum():
    basis, _, _ = basis_of(shapes.icosphere(3), 10)
    expected = [2, 2, 2, 6, 6, 6, 6, 6]
    assert np.allclose(basis.eigenvalues[1:9], expected, rtol=0.05)

def test_sign_convention():
    basis, _, _ = basis_of(shapes.bumpy(shapes.icosphere(2), seed=6), 15)
    largest = np.argmax(np.abs(basis.phi), axis=0)
    assert np.all(basis.phi[largest, np.arange(15)] > 0)

def test_k_must_be_below_vertex_count():
    stiffness, mass = cotangent_laplacian(shapes.tetrahedron())
    with pytest.raises(DataException):
        compute_basis(stiffness, mass, 4)
    with pytest.raises(DataException):
        compute_basis(stiffness, mass, 0)

def test_basis_file_round_trip(tmp_path):
    basis, _, mass = basis_of(shapes.bumpy(shapes.icosphere(1), seed=7), 8)
    path = str(tmp_path / "shape.spec")
    basis.to_file(path)
    loaded = SpectralBasis.from_file(path, mass)
    assert np.array_equal(loaded.phi, basis.phi)
    assert np.array_equal(loaded.eigenvalues, basis.eigenvalues)
    with open(path, "rb") as spec_file:
        assert spec_file.read(4) == b"SPEC"

def test_basis_file_bad_magic(tmp_path):
    path = tmp_path / "broken.spec"
    path.write_bytes(b"NOPE" + b"\x01\x00\x00\x00" + b"\x00" * 16)
    with pytest.raises(DataException):
        SpectralBasis.from_file(str(path), np.ones(4))

def test_feature_file_round_trip(tmp_path):
    features = FeatureMatrix(np.random.default_rng(0).normal(size=(7, 3)))
    path = str(tmp_path / "features.fmat")
    features.to_file(path)
    assert np.array_equal(FeatureMatrix.from_file(path).values, features.values)

def test_feature_matrix_rejects_non_finite():
    with pytest.raises(DataException):
        FeatureMatrix([[0.0, np.nan]])


# Projection tests
def test_project_basis_gives_identity():
    basis, _, _ = basis_of(shapes.bumpy(shapes.icosphere(2), seed=8), 16)
    assert np.max(np.abs(project(basis, basis.phi) - np.eye(16))) < 1e-6

def test_project_zero_features():
    basis, _, _ = basis_of(shapes.icosphere(1), 6)
    assert np.array_equal(project(basis, np.zeros((basis.n, 4))), np.zeros((6, 4)))

def test_project_is_linear():
    basis, _, _ = basis_of(shapes.bumpy(shapes.icosphere(2), seed=9), 12)
    rng = np.random.default_rng(1)
    f, g = rng.normal(size=(basis.n, 5)), rng.normal(size=(basis.n, 5))
    combined = project(basis, 2.0 * f - 0.5 * g)
    assert np.max(np.abs(combined - (2.0 * project(basis, f) - 0.5 * project(basis, g)))) < 1e-10

def test_project_matches_weighted_least_squares():
    basis, _, _ = basis_of(shapes.bumpy(shapes.icosphere(2), seed=10), 12)
    features = np.random.default_rng(2).normal(size=(basis.n, 4))
    root_mass = np.sqrt(basis.mass)[:, None]
    oracle = np.linalg.lstsq(root_mass * basis.phi, root_mass * features, rcond=None)[0]
    coefficients = project(basis, features)
    assert np.max(np.abs(coefficients - oracle)) < 1e-8

    residual = features - basis.phi.dot(coefficients)
    energy = np.sum(basis.mass[:, None] * residual ** 2)
    complement = np.sum(basis.mass[:, None] * features ** 2) - np.sum(coefficients ** 2)
    assert energy == pytest.approx(complement, rel=1e-8)

def test_project_dimension_mismatch():
    basis, _, _ = basis_of(shapes.icosphere(1), 6)
    with pytest.raises(DataException):
        project(basis, np.zeros((basis.n + 1, 2)))


# WKS tests
def test_wks_default_dimension():
    basis, _, _ = basis_of(shapes.bumpy(shapes.icosphere(2), seed=11), 40)
    descriptors = wks(basis)
    assert descriptors.values.shape == (basis.n, 128)
    assert np.all(descriptors.values >= 0)

def test_wks_invariant_to_rigid_motion():
    mesh = shapes.bumpy(shapes.icosphere(2), seed=12)
    moved = mesh.transformed(Rotation.from_euler("xyz", [1.0, 0.2, -0.4]).as_matrix(), [0.0, 5.0, 1.0])
    original = wks(basis_of(mesh, 30)[0], 32).values
    transformed = wks(basis_of(moved, 30)[0], 32).values
    assert np.max(np.abs(original - transformed)) < 1e-6

def test_wks_equal_on_mirrored_vertices():
    mesh = shapes.bumpy(shapes.icosphere(2), amplitude=0.15, seed=13, symmetric=True)
    partner = shapes.mirror_partner(mesh)
    descriptors = wks(basis_of(mesh, 40)[0], 64).values
    assert np.max(np.abs(descriptors - descriptors[partner])) < 1e-5

def test_wks_needs_two_nonzero_eigenvalues():
    basis, _, _ = basis_of(shapes.icosphere(1), 2)
    with pytest.raises(DataException):
        wks(basis)
