# Truncated Laplace-Beltrami eigenbases, spectral projection and wave kernel signatures.

import logging

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as sla

from . import binary
from .exceptions import DataException, NumericalException

logger = logging.getLogger(__name__)

DEFAULT_EIGENFUNCTIONS = 200
DEFAULT_WKS_ENERGIES = 128
DEFAULT_WKS_VARIANCE = 7.0

# Shift-invert parameters for the sparse eigensolver.
EIGEN_SHIFT = -1e-8
EIGEN_TOLERANCE = 1e-8

# Below this many vertices the generalized problem is solved densely.
DENSE_SOLVER_LIMIT = 1000

# Eigenvalues at or below this fraction of the largest are treated as zero (constant functions).
ZERO_EIGENVALUE = 1e-6

BASIS_MAGIC = b"SPEC"
FEATURE_MAGIC = b"FMAT"
FORMAT_VERSION = 1


def _mass_diagonal(mass):
    if sparse.issparse(mass):
        return np.asarray(mass.diagonal(), dtype=np.float64)
    mass = np.asarray(mass, dtype=np.float64)
    return np.diag(mass).copy() if mass.ndim == 2 else mass.copy()


class SpectralBasis(object):
    """
    The first k eigenfunctions of a mesh's Laplace-Beltrami operator, mass-orthonormal (Phi^T M Phi = I), with
    ascending eigenvalues and the lumped mass diagonal defining the inner product.
    """

    def __init__(self, phi, eigenvalues, mass):
        phi = np.array(phi, dtype=np.float64)
        eigenvalues = np.array(eigenvalues, dtype=np.float64)
        mass = _mass_diagonal(mass)
        if phi.ndim != 2 or eigenvalues.shape != (phi.shape[1],) or mass.shape != (phi.shape[0],):
            raise DataException("Inconsistent basis shapes: phi %s, eigenvalues %s, mass %s"
                    % (repr(phi.shape), repr(eigenvalues.shape), repr(mass.shape)))

        for array in (phi, eigenvalues, mass):
            array.setflags(write=False)
        self.phi = phi
        self.eigenvalues = eigenvalues
        self.mass = mass

    @property
    def n(self):
        return self.phi.shape[0]

    @property
    def k(self):
        return self.phi.shape[1]

    def truncated(self, k):
        """
        Return the basis restricted to its first k eigenfunctions.
        """
        if k < 1 or k > self.k:
            raise DataException("Cannot truncate a %d-function basis to %d functions" % (self.k, k))
        return SpectralBasis(self.phi[:, :k], self.eigenvalues[:k], self.mass)

    def pinv(self):
        """
        The pseudo-inverse Phi^T M (k x n), which maps per-vertex functions to spectral coefficients.
        """
        return self.phi.T * self.mass[None, :]

    def permuted(self, order):
        """
        The same basis for a mesh relabeled with TriMesh.permuted(order).
        """
        return SpectralBasis(self.phi[order], self.eigenvalues, self.mass[order])

    def to_file(self, file_name):
        """
        Write the eigenvalues and eigenfunctions in the SPEC cache format (the mass is not stored).
        """
        with open(file_name, "wb") as stream:
            binary.write_header(stream, BASIS_MAGIC, FORMAT_VERSION, self.n, self.k)
            binary.write_array(stream, self.eigenvalues)
            binary.write_array(stream, self.phi)

    @staticmethod
    def from_file(file_name, mass):
        """
        Load a SPEC cache file; the mass matrix comes from the mesh the cache was computed for.
        """
        with open(file_name, "rb") as stream:
            n, k = binary.read_header(stream, file_name, BASIS_MAGIC, FORMAT_VERSION, 2)
            eigenvalues = binary.read_array(stream, file_name, (k,))
            phi = binary.read_array(stream, file_name, (n, k))
            binary.expect_end(stream, file_name)

        mass = _mass_diagonal(mass)
        if mass.shape != (n,):
            raise DataException("%s: basis has %d rows but the mass matrix has %d" % (file_name, n, len(mass)))
        return SpectralBasis(phi, eigenvalues, mass)


class FeatureMatrix(object):
    """
    Per-vertex descriptors (n x d), one row per vertex of the owning mesh.
    """

    def __init__(self, values):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2:
            raise DataException("Features must be a 2-D array, got shape " + repr(values.shape))
        if not np.all(np.isfinite(values)):
            raise DataException("Features contain non-finite entries")
        values.setflags(write=False)
        self.values = values

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def to_file(self, file_name):
        with open(file_name, "wb") as stream:
            binary.write_header(stream, FEATURE_MAGIC, FORMAT_VERSION, self.rows, self.dim)
            binary.write_array(stream, self.values)

    @staticmethod
    def from_file(file_name):
        """
        Load an FMAT file, e.g. features learned by an external extractor.
        """
        with open(file_name, "rb") as stream:
            rows, cols = binary.read_header(stream, file_name, FEATURE_MAGIC, FORMAT_VERSION, 2)
            values = binary.read_array(stream, file_name, (rows, cols))
            binary.expect_end(stream, file_name)
        return FeatureMatrix(values)


def compute_basis(stiffness, mass, k=DEFAULT_EIGENFUNCTIONS):
    """
    Solve W phi = lambda M phi for the k smallest eigenvalues.

    Small meshes use a dense generalized solver; larger ones use shift-invert Lanczos (ARPACK) just below zero.
    Columns are mass-normalized, the first column is set to the exact constant function, and each column is
    signed so that its largest-magnitude entry is positive.
    """
    n = stiffness.shape[0]
    if stiffness.shape != (n, n) or mass.shape != (n, n):
        raise DataException("Stiffness %s and mass %s must be square and of equal size"
                % (repr(stiffness.shape), repr(mass.shape)))
    if k < 1 or k >= n:
        raise DataException("Cannot compute %d eigenfunctions on a mesh with %d vertices (need k < n)" % (k, n))

    if n <= DENSE_SOLVER_LIMIT:
        eigenvalues, phi = scipy.linalg.eigh(stiffness.toarray(), mass.toarray(), subset_by_index=[0, k - 1])
    else:
        try:
            eigenvalues, phi = sla.eigsh(stiffness.tocsc(), k=k, M=mass.tocsc(), sigma=EIGEN_SHIFT, which="LM",
                    tol=EIGEN_TOLERANCE, maxiter=max(5 * k, 100))
        except sla.ArpackNoConvergence as error:
            raise NumericalException("Eigensolver did not converge for k=%d on %d vertices: %s" % (k, n, error))

    order = np.argsort(eigenvalues, kind="stable")
    eigenvalues, phi = eigenvalues[order], phi[:, order]
    eigenvalues = np.maximum(eigenvalues, 0.0)

    diagonal = _mass_diagonal(mass)
    phi = phi / np.sqrt(np.sum(diagonal[:, None] * phi ** 2, axis=0))[None, :]
    if eigenvalues[0] <= ZERO_EIGENVALUE * max(eigenvalues[-1], 1.0):
        eigenvalues[0] = 0.0
        phi[:, 0] = 1.0 / np.sqrt(diagonal.sum())

    largest = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[largest, np.arange(k)])
    signs[signs == 0] = 1.0
    phi = phi * signs[None, :]

    logger.debug("Computed %d eigenpairs on %d vertices, lambda_max=%g", k, n, eigenvalues[-1])
    return SpectralBasis(phi, eigenvalues, diagonal)


def project(basis, features):
    """
    Spectral coefficients A = Phi^T M F (k x d) of per-vertex features F.
    """
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != basis.n:
        raise DataException("Features have %d rows but the basis has %d" % (values.shape[0], basis.n))
    return basis.phi.T.dot(basis.mass[:, None] * values)


def wks(basis, num_energies=DEFAULT_WKS_ENERGIES, variance_scale=DEFAULT_WKS_VARIANCE):
    """
    Wave kernel signature of every vertex.

    The energies are log-spaced between the logs of the smallest and largest nonzero eigenvalues, pulled in by
    2 sigma at each end, with sigma = variance_scale times (log range / num_energies). Column e is
    sum_i g_i(e) phi_i(x)^2 / sum_i g_i(e) with Gaussian weights g_i(e) = exp(-(e - log lambda_i)^2 / (2 sigma^2)).
    """
    if num_energies < 1:
        raise DataException("WKS needs at least one energy, got %d" % num_energies)

    nonzero = basis.eigenvalues > ZERO_EIGENVALUE * max(basis.eigenvalues[-1], 1.0)
    log_eigenvalues = np.log(basis.eigenvalues[nonzero])
    if len(log_eigenvalues) < 2 or log_eigenvalues[-1] <= log_eigenvalues[0]:
        raise DataException("WKS needs at least two distinct nonzero eigenvalues, the basis has %d nonzero"
                % len(log_eigenvalues))

    e_min, e_max = log_eigenvalues[0], log_eigenvalues[-1]
    sigma = variance_scale * (e_max - e_min) / num_energies
    energies = np.linspace(e_min + 2 * sigma, e_max - 2 * sigma, num_energies)

    weights = np.exp(-(energies[:, None] - log_eigenvalues[None, :]) ** 2 / (2 * sigma ** 2))
    weights /= weights.sum(axis=1, keepdims=True)

    return FeatureMatrix((basis.phi[:, nonzero] ** 2).dot(weights.T))
