# Feature alignment: soft similarities, the optimal-transport alignment losses and the unsupervised objective.

import logging
from dataclasses import dataclass

import torch

from . import fmap, ot
from .exceptions import DataException, NumericalException
from .ot import WeightedSamples, as_tensor

logger = logging.getLogger(__name__)

OT_VARIANTS = ("biSW", "biEBSW", "uniSW", "uniEBSW", "MSE")


@dataclass
class LossConfig:
    """
    Weights and options of the unsupervised objective lambda1 * L_fmap + lambda2 * L_ot + lambda3 * L_proper.
    """
    lambda1: float = 1.0
    lambda2: float = 100.0
    lambda3: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    p: float = 2.0
    n_projections: int = 200
    tau: float = 0.07
    ot_variant: str = "biEBSW"
    area_weights: bool = False
    seed: int = 0

    def validate(self):
        for name in ("lambda1", "lambda2", "lambda3", "alpha1", "alpha2"):
            if not getattr(self, name) >= 0:
                raise DataException("%s must be non-negative, got %r" % (name, getattr(self, name)))
        if not self.p >= 1:
            raise DataException("p must be at least 1, got " + repr(self.p))
        if self.n_projections < 1:
            raise DataException("n_projections must be at least 1, got " + repr(self.n_projections))
        if not self.tau > 0:
            raise DataException("tau must be positive, got " + repr(self.tau))
        if self.ot_variant not in OT_VARIANTS:
            raise DataException("Unknown OT variant %r (expected one of %s)" % (self.ot_variant, ", ".join(OT_VARIANTS)))
        return self


class SoftSimilarity(object):
    """
    A row-stochastic n_x x n_y matrix relaxing a point map from X to Y.
    """

    def __init__(self, matrix, tau=None):
        self.matrix = matrix
        self.tau = tau


def normalize_rows(features):
    """
    Scale every row to unit Euclidean length, so that dot products are cosine similarities.
    """
    features = as_tensor(features)
    return features / torch.linalg.vector_norm(features, dim=1, keepdim=True).clamp_min(1e-12)


def soft_similarity(f_x, f_y, tau=0.07):
    """
    Row softmax of F_x F_y^T / tau. Rows are expected to be normalized by the caller.
    """
    f_x, f_y = as_tensor(f_x), as_tensor(f_y)
    if f_x.shape[1] != f_y.shape[1]:
        raise DataException("Feature dimensions differ: %d and %d" % (f_x.shape[1], f_y.shape[1]))
    if not (torch.all(torch.isfinite(f_x)) and torch.all(torch.isfinite(f_y))):
        raise DataException("Features contain non-finite entries")
    if not tau > 0:
        raise DataException("tau must be positive, got " + repr(tau))
    return SoftSimilarity(torch.softmax(torch.matmul(f_x, f_y.T) / tau, dim=1), tau)


def _matrix(similarity):
    return similarity.matrix if isinstance(similarity, SoftSimilarity) else as_tensor(similarity)


def _samples(values, weights):
    if weights is None:
        return WeightedSamples.uniform(values)
    return WeightedSamples(values, weights)


def _directional_costs(f_x, f_y, pi_xy, projections, p, weights_x=None):
    """
    Per-slice W_p^p between F_x and its soft image F_y_hat = Pi_xy F_y, both carrying the measure of X.
    """
    f_x, f_y, pi_xy = as_tensor(f_x), as_tensor(f_y), _matrix(pi_xy)
    if pi_xy.shape != (f_x.shape[0], f_y.shape[0]):
        raise DataException("Similarity %s does not fit %d and %d feature rows"
                % (repr(tuple(pi_xy.shape)), f_x.shape[0], f_y.shape[0]))
    image = torch.matmul(pi_xy, f_y)
    return ot.slice_costs(_samples(f_x, weights_x), _samples(image, weights_x), projections, p)


def unisw_loss(f_x, f_y, pi_xy, projections, p=2, weights_x=None):
    return ot.pth_root(torch.mean(_directional_costs(f_x, f_y, pi_xy, projections, p, weights_x)), p)


def uniebsw_loss(f_x, f_y, pi_xy, projections, p=2, weights_x=None):
    costs = _directional_costs(f_x, f_y, pi_xy, projections, p, weights_x)
    return ot.pth_root(torch.sum(costs * ot.energy_weights(costs)), p)


def bisw_loss(f_x, f_y, pi_xy, pi_yx, projections, p=2, weights_x=None, weights_y=None):
    """
    Bidirectional sliced Wasserstein loss: both directions share the projections and are averaged over slices
    before the root.
    """
    costs = (_directional_costs(f_x, f_y, pi_xy, projections, p, weights_x)
            + _directional_costs(f_y, f_x, pi_yx, projections, p, weights_y))
    return ot.pth_root(torch.mean(costs), p)


def biebsw_loss(f_x, f_y, pi_xy, pi_yx, projections, p=2, weights_x=None, weights_y=None):
    """
    Bidirectional energy-based sliced Wasserstein loss. A single set of slice weights, the softmax of the summed
    directional costs, is shared by both directions.
    """
    costs = (_directional_costs(f_x, f_y, pi_xy, projections, p, weights_x)
            + _directional_costs(f_y, f_x, pi_yx, projections, p, weights_y))
    return ot.pth_root(torch.sum(costs * ot.energy_weights(costs)), p)


def mse_alignment_loss(f_x, f_y, pi_xy, pi_yx):
    """
    ||F_x - Pi_xy F_y||^2 / n_x + ||F_y - Pi_yx F_x||^2 / n_y.
    """
    f_x, f_y = as_tensor(f_x), as_tensor(f_y)
    pi_xy, pi_yx = _matrix(pi_xy), _matrix(pi_yx)
    return (torch.sum((f_x - pi_xy @ f_y) ** 2) / f_x.shape[0]
            + torch.sum((f_y - pi_yx @ f_x) ** 2) / f_y.shape[0])


def ot_alignment_loss(variant, f_x, f_y, pi_xy, pi_yx, projections, p=2, weights_x=None, weights_y=None):
    """
    The alignment loss selected by name (one of OT_VARIANTS).
    """
    if variant == "biSW":
        return bisw_loss(f_x, f_y, pi_xy, pi_yx, projections, p, weights_x, weights_y)
    if variant == "biEBSW":
        return biebsw_loss(f_x, f_y, pi_xy, pi_yx, projections, p, weights_x, weights_y)
    if variant == "uniSW":
        return unisw_loss(f_x, f_y, pi_xy, projections, p, weights_x)
    if variant == "uniEBSW":
        return uniebsw_loss(f_x, f_y, pi_xy, projections, p, weights_x)
    if variant == "MSE":
        return mse_alignment_loss(f_x, f_y, pi_xy, pi_yx)
    raise DataException("Unknown OT variant %r (expected one of %s)" % (variant, ", ".join(OT_VARIANTS)))


class LossParts(object):
    """
    The three terms of the unsupervised objective for one shape pair, as 0-dim tensors.
    """

    def __init__(self, l_fmap, l_ot, l_proper, pair=None):
        self.l_fmap = l_fmap
        self.l_ot = l_ot
        self.l_proper = l_proper
        self.pair = pair

    def as_row(self):
        return [self.l_fmap.detach().item(), self.l_ot.detach().item(), self.l_proper.detach().item()]


def total_loss(parts, config):
    return config.lambda1 * parts.l_fmap + config.lambda2 * parts.l_ot + config.lambda3 * parts.l_proper


def compute_loss_parts(f_x, f_y, basis_x, basis_y, config, projections=None, fmap_config=None,
        similarities=None):
    """
    Evaluate every term of the objective for features F_x, F_y on a pair of shapes.

    Features are row-normalized, then (unless `similarities` supplies a fixed (Pi_xy, Pi_yx), e.g. from Sinkhorn)
    soft similarities are built both ways. The descriptors are projected on both bases, the two functional maps are
    solved, and the properness term compares each map with the one induced by the similarity in the same direction.
    """
    config.validate()
    f_x, f_y = normalize_rows(f_x), normalize_rows(f_y)
    if projections is None:
        projections = ot.sample_projections(config.n_projections, f_x.shape[1], config.seed)

    if similarities is None:
        pi_xy = soft_similarity(f_x, f_y, config.tau).matrix
        pi_yx = soft_similarity(f_y, f_x, config.tau).matrix
    else:
        pi_xy, pi_yx = _matrix(similarities[0]), _matrix(similarities[1])

    phi_x, phi_y = as_tensor(basis_x.phi), as_tensor(basis_y.phi)
    mass_x, mass_y = as_tensor(basis_x.mass), as_tensor(basis_y.mass)
    a = (phi_x.T * mass_x[None, :]) @ f_x
    b = (phi_y.T * mass_y[None, :]) @ f_y
    pair = fmap.solve_fmap_pair(a, b, basis_x.eigenvalues, basis_y.eigenvalues, fmap_config)

    l_fmap = fmap.fmap_structural_loss(pair, config.alpha1, config.alpha2)

    weights_x = weights_y = None
    if config.area_weights:
        weights_x = WeightedSamples.from_mass(f_x, mass_x).weights
        weights_y = WeightedSamples.from_mass(f_y, mass_y).weights
    l_ot = ot_alignment_loss(config.ot_variant, f_x, f_y, pi_xy, pi_yx, projections, config.p, weights_x, weights_y)

    # C_xy carries X functions to Y, matching pi_yx (rows on Y); C_yx matches pi_xy.
    l_proper = (fmap.proper_loss(pair.c_xy, pi_yx, phi_x, phi_y, mass_y)
            + fmap.proper_loss(pair.c_yx, pi_xy, phi_y, phi_x, mass_x))

    parts = LossParts(l_fmap, l_ot, l_proper, pair)
    total = total_loss(parts, config)
    if not torch.isfinite(total):
        raise NumericalException("Objective is not finite (fmap %s, ot %s, proper %s)"
                % (l_fmap.detach().item(), l_ot.detach().item(), l_proper.detach().item()))
    return parts


def nn_map(f_x, f_y):
    """
    Send every row of F_x to its Euclidean nearest row of F_y (lowest index on ties).
    """
    return fmap.nearest_rows(f_x, f_y)
