# Regularized functional maps: the closed-form solve, its structural losses and point-map conversion.

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import binary
from .exceptions import DataException, NumericalException
from .ot import DTYPE, as_tensor

logger = logging.getLogger(__name__)

FMAP_MAGIC = b"FMAP"
FORMAT_VERSION = 1

# Rows compared at once by the nearest-neighbor search.
NN_CHUNK = 2048


@dataclass
class FmapConfig:
    """
    Weight of the resolvent mask regularizer and the resolvent shift gamma.
    """
    lambda_reg: float = 1e-2
    resolvent_gamma: float = 0.5

    def validate(self):
        if not self.lambda_reg >= 0:
            raise DataException("lambda_reg must be non-negative, got " + repr(self.lambda_reg))
        if not self.resolvent_gamma > 0:
            raise DataException("resolvent_gamma must be positive, got " + repr(self.resolvent_gamma))
        return self


class FunctionalMapPair(object):
    """
    The two k x k maps between spectral coefficient spaces: C_xy takes X coefficients to Y coefficients and C_yx
    takes Y coefficients to X coefficients.
    """

    def __init__(self, c_xy, c_yx):
        c_xy, c_yx = as_tensor(c_xy), as_tensor(c_yx)
        k = c_xy.shape[0]
        if c_xy.shape != (k, k) or c_yx.shape != (k, k):
            raise DataException("Functional maps must be square and of equal size, got %s and %s"
                    % (repr(tuple(c_xy.shape)), repr(tuple(c_yx.shape))))
        if not (torch.all(torch.isfinite(c_xy)) and torch.all(torch.isfinite(c_yx))):
            raise DataException("Functional maps contain non-finite entries")
        self.c_xy = c_xy
        self.c_yx = c_yx

    @property
    def k(self):
        return self.c_xy.shape[0]

    def to_file(self, file_name):
        with open(file_name, "wb") as stream:
            binary.write_header(stream, FMAP_MAGIC, FORMAT_VERSION, self.k)
            binary.write_array(stream, self.c_xy.detach().numpy())
            binary.write_array(stream, self.c_yx.detach().numpy())

    @staticmethod
    def from_file(file_name):
        with open(file_name, "rb") as stream:
            k, = binary.read_header(stream, file_name, FMAP_MAGIC, FORMAT_VERSION, 1)
            c_xy = binary.read_array(stream, file_name, (k, k))
            c_yx = binary.read_array(stream, file_name, (k, k))
            binary.expect_end(stream, file_name)
        return FunctionalMapPair(c_xy, c_yx)


def resolvent_mask(evals_from, evals_to, gamma=0.5, scale=None):
    """
    Mask D[i, j] = |r(to_i) - r(from_j)|^2 with the resolvent r(l) = l / (l + gamma), penalizing entries of a map
    that connect eigenfunctions of different frequency. Eigenvalues are divided by `scale`, by default the largest
    eigenvalue of either list.
    """
    evals_from, evals_to = as_tensor(evals_from).detach(), as_tensor(evals_to).detach()
    if scale is None:
        scale = max(evals_from.max().item(), evals_to.max().item())
    if scale <= 0:
        scale = 1.0

    resolvent_from = (evals_from / scale) / (evals_from / scale + gamma)
    resolvent_to = (evals_to / scale) / (evals_to / scale + gamma)
    return (resolvent_to[:, None] - resolvent_from[None, :]) ** 2


def solve_fmap(a, b, evals_x, evals_y, config=None):
    """
    The functional map C minimizing ||C A - B||^2 + lambda * sum_ij D_ij C_ij^2, where A and B are the k x d
    spectral coefficients of the descriptors on X and Y. The mask is diagonal per row of C, so every row is an
    independent k x k system (A A^T + lambda diag(D_i)) c_i = A b_i; all rows are solved in one batch. The result is
    differentiable in A and B.
    """
    config = (config or FmapConfig()).validate()
    a, b = as_tensor(a), as_tensor(b)
    k = a.shape[0]
    if a.ndim != 2 or b.shape != a.shape:
        raise DataException("Coefficient matrices must share shape (k, d), got %s and %s"
                % (repr(tuple(a.shape)), repr(tuple(b.shape))))
    if len(evals_x) != k or len(evals_y) != k:
        raise DataException("Expected %d eigenvalues per shape, got %d and %d" % (k, len(evals_x), len(evals_y)))

    if config.lambda_reg == 0 and torch.linalg.matrix_rank(a.detach()).item() < k:
        raise NumericalException("Functional map system is singular: descriptors span fewer than %d directions" % k)

    mask = resolvent_mask(evals_x, evals_y, config.resolvent_gamma)
    gram = torch.matmul(a, a.T)
    systems = gram[None, :, :] + config.lambda_reg * torch.diag_embed(mask)
    rhs = torch.matmul(b, a.T)

    rows, info = torch.linalg.solve_ex(systems, rhs[:, :, None])
    if torch.any(info > 0) or not torch.all(torch.isfinite(rows)):
        raise NumericalException("Functional map system is singular (lambda_reg=%g)" % config.lambda_reg)
    return rows[:, :, 0]


def solve_fmap_pair(a, b, evals_x, evals_y, config=None):
    """
    Solve both directions independently: C_xy from (A, B) and C_yx from (B, A) with the eigenvalue roles swapped.
    """
    return FunctionalMapPair(solve_fmap(a, b, evals_x, evals_y, config), solve_fmap(b, a, evals_y, evals_x, config))


def bijectivity_loss(c_xy, c_yx):
    identity = torch.eye(c_xy.shape[0], dtype=DTYPE)
    return torch.sum((c_xy @ c_yx - identity) ** 2) + torch.sum((c_yx @ c_xy - identity) ** 2)


def orthogonality_loss(c_xy, c_yx):
    identity = torch.eye(c_xy.shape[0], dtype=DTYPE)
    return torch.sum((c_xy.T @ c_xy - identity) ** 2) + torch.sum((c_yx.T @ c_yx - identity) ** 2)


def fmap_structural_loss(pair, alpha1=1.0, alpha2=1.0):
    """
    alpha1 times the bijectivity loss (both compositions close to the identity) plus alpha2 times the
    orthogonality loss (both maps close to area preserving), with squared Frobenius norms.
    """
    return alpha1 * bijectivity_loss(pair.c_xy, pair.c_yx) + alpha2 * orthogonality_loss(pair.c_xy, pair.c_yx)


def _mass_vector(mass):
    if hasattr(mass, "diagonal") and not isinstance(mass, (np.ndarray, torch.Tensor)):
        mass = mass.diagonal()
    return as_tensor(mass).detach()


def proper_loss(c_xy, pi_yx, phi_x, phi_y, mass_y):
    """
    ||C_xy - Phi_y^T M_y Pi_yx Phi_x||^2: how far C_xy is from the map induced by the (soft) point map Pi_yx, an
    n_y x n_x matrix sending functions on X to functions on Y.
    """
    c_xy, pi_yx = as_tensor(c_xy), as_tensor(pi_yx)
    phi_x, phi_y = as_tensor(phi_x).detach(), as_tensor(phi_y).detach()
    mass_y = _mass_vector(mass_y)
    if pi_yx.shape != (phi_y.shape[0], phi_x.shape[0]) or mass_y.shape != (phi_y.shape[0],):
        raise DataException("Similarity %s does not fit bases with %d and %d vertices"
                % (repr(tuple(pi_yx.shape)), phi_x.shape[0], phi_y.shape[0]))
    if c_xy.shape != (phi_y.shape[1], phi_x.shape[1]):
        raise DataException("Functional map %s does not fit bases of size %d and %d"
                % (repr(tuple(c_xy.shape)), phi_x.shape[1], phi_y.shape[1]))

    induced = (phi_y.T * mass_y[None, :]) @ (pi_yx @ phi_x)
    return torch.sum((c_xy - induced) ** 2)


def pointmap_to_fmap(pointmap, basis_x, basis_y):
    """
    The functional map C_yx = Phi_x^T M_x Phi_y[T] of a vertex map T sending each vertex of X to a vertex of Y.
    """
    pointmap = np.asarray(pointmap, dtype=np.int64)
    if pointmap.shape != (basis_x.n,) or pointmap.min() < 0 or pointmap.max() >= basis_y.n:
        raise DataException("Point map must send each of %d vertices to [0, %d)" % (basis_x.n, basis_y.n))
    return torch.from_numpy(basis_x.pinv().dot(basis_y.phi[pointmap]))


def nearest_rows(x, y):
    """
    For every row of x, the index of the nearest row of y in Euclidean distance; ties go to the lowest index.
    """
    x, y = as_tensor(x).detach(), as_tensor(y).detach()
    if x.shape[1] != y.shape[1]:
        raise DataException("Cannot compare rows of width %d and %d" % (x.shape[1], y.shape[1]))
    nearest = [torch.argmin(torch.cdist(chunk, y, compute_mode="donot_use_mm_for_euclid_dist"), dim=1)
            for chunk in torch.split(x, NN_CHUNK)]
    return torch.cat(nearest).numpy()


def fmap_to_pointmap(c_yx, phi_x, phi_y):
    """
    Recover the vertex map X -> Y from C_yx by matching the rows of Phi_x C_yx to the rows of Phi_y.
    """
    c_yx, phi_x, phi_y = as_tensor(c_yx).detach(), as_tensor(phi_x), as_tensor(phi_y)
    if c_yx.shape != (phi_x.shape[1], phi_y.shape[1]):
        raise DataException("Functional map %s does not fit bases of size %d and %d"
                % (repr(tuple(c_yx.shape)), phi_x.shape[1], phi_y.shape[1]))
    return nearest_rows(phi_x @ c_yx, phi_y)
