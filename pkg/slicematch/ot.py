# Optimal transport kernels: closed-form 1D Wasserstein, sliced and energy-based sliced Wasserstein,
# log-domain Sinkhorn and an exact linear-programming oracle for small instances.

import logging
import time

import numpy as np
import scipy.optimize
import torch
from scipy import sparse

from .exceptions import DataException, NumericalException

logger = logging.getLogger(__name__)

DTYPE = torch.float64

WEIGHT_TOLERANCE = 1e-12
PROJECTION_TOLERANCE = 1e-12

DEFAULT_EPSILON_REL = 1e-2
DEFAULT_SINKHORN_ITERS = 100
DEFAULT_SINKHORN_TOL = 1e-6

# The exact oracle refuses problems with more transport variables than this.
LP_SIZE_CAP = 10000

BENCH_COLUMNS = ("op", "n", "d", "L", "wall_ns", "peak_bytes")


def as_tensor(values):
    """
    Convert arrays (or tensors of another dtype) into float64 tensors, leaving float64 tensors untouched so
    autograd graphs survive.
    """
    if isinstance(values, torch.Tensor):
        return values if values.dtype == DTYPE else values.to(DTYPE)
    return torch.tensor(np.asarray(values, dtype=np.float64))


def pth_root(value, p):
    # value ** (1/p) with a finite (zero) gradient at exactly zero.
    tiny = torch.finfo(DTYPE).tiny
    return torch.where(value > 0, value.clamp_min(tiny) ** (1.0 / p), torch.zeros_like(value))


class WeightedSamples(object):
    """
    An empirical probability measure: s support points in R^d with non-negative weights summing to one.
    """

    def __init__(self, values, weights):
        values = as_tensor(values)
        if values.ndim == 1:
            values = values[:, None]
        weights = as_tensor(weights).detach()
        if values.ndim != 2 or values.shape[0] == 0:
            raise DataException("Samples must be a non-empty (s, d) array, got shape " + repr(tuple(values.shape)))
        if weights.shape != (values.shape[0],):
            raise DataException("Expected %d weights, got shape %s" % (values.shape[0], repr(tuple(weights.shape))))
        if not torch.all(torch.isfinite(weights)) or torch.any(weights < 0):
            raise DataException("Weights must be finite and non-negative")
        if abs(weights.sum().item() - 1.0) > WEIGHT_TOLERANCE:
            raise DataException("Weights must sum to 1, got %.17g" % weights.sum().item())

        self.values = values
        self.weights = weights

    @property
    def size(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    @staticmethod
    def uniform(values):
        values = as_tensor(values)
        count = values.shape[0]
        return WeightedSamples(values, torch.full((count,), 1.0 / count, dtype=DTYPE))

    @staticmethod
    def from_mass(values, mass):
        """
        Samples weighted by per-vertex area (the lumped mass diagonal), normalized to a probability measure.
        """
        mass = as_tensor(mass).detach()
        if torch.any(mass <= 0):
            raise DataException("Vertex areas must be positive")
        weights = mass / mass.sum()
        # Renormalize the rounding error away so the weights pass the unit-sum check.
        weights[-1] = 1.0 - weights[:-1].sum()
        return WeightedSamples(values, weights)


class ProjectionSet(object):
    """
    L unit directions in R^d, stored as the rows of theta, and the seed they were drawn with.
    """

    def __init__(self, theta, seed=None):
        theta = as_tensor(theta).detach()
        if theta.ndim != 2 or theta.shape[0] == 0:
            raise DataException("Projections must be a non-empty (L, d) array, got shape " + repr(tuple(theta.shape)))
        norms = torch.linalg.vector_norm(theta, dim=1)
        if torch.any(torch.abs(norms - 1.0) > PROJECTION_TOLERANCE):
            raise DataException("Projection directions must have unit length")
        self.theta = theta
        self.seed = seed

    @property
    def count(self):
        return self.theta.shape[0]

    @property
    def dim(self):
        return self.theta.shape[1]


def sample_projections(count, dim, seed):
    """
    Draw `count` directions uniformly from the unit sphere in R^dim (normalized standard Gaussians).
    """
    if count < 1 or dim < 1:
        raise DataException("Need at least one projection of dimension at least one, got L=%d d=%d" % (count, dim))
    generator = torch.Generator().manual_seed(int(seed))
    theta = torch.randn((count, dim), generator=generator, dtype=DTYPE)
    theta = theta / torch.linalg.vector_norm(theta, dim=1, keepdim=True)
    return ProjectionSet(theta, seed)


def _sorted_slices(samples, theta):
    """
    Project the samples on every direction and return, per slice, the sorted values and the cumulative weights.
    Shapes are (L, s). The sort is stable, so ties keep the original index order.
    """
    projected = torch.matmul(theta, samples.values.T)
    values, order = torch.sort(projected, dim=1, stable=True)
    cumulative = torch.cumsum(samples.weights[order], dim=1)
    return values, cumulative


def _quantiles(levels, cumulative, values):
    index = torch.searchsorted(cumulative, levels, right=False)
    return torch.take_along_dim(values, torch.clip(index, 0, values.shape[1] - 1), dim=1)


def slice_costs(a, b, projections, p=2):
    """
    W_p^p between the projections of a and b on every direction, as an (L,) tensor.

    Both quantile functions are evaluated at the merged breakpoints of the two cumulative weight vectors, so
    unequal sizes and non-uniform weights are exact. The sorted matching is fixed during the backward pass.
    """
    if p < 1:
        raise DataException("Wasserstein order must be at least 1, got " + repr(p))
    theta = projections.theta if isinstance(projections, ProjectionSet) else as_tensor(projections)
    if a.dim != b.dim or a.dim != theta.shape[1]:
        raise DataException("Dimension mismatch: samples %d and %d, projections %d" % (a.dim, b.dim, theta.shape[1]))

    values_a, cumulative_a = _sorted_slices(a, theta)
    values_b, cumulative_b = _sorted_slices(b, theta)

    levels = torch.sort(torch.cat((cumulative_a, cumulative_b), dim=1), dim=1).values
    quantiles_a = _quantiles(levels, cumulative_a, values_a)
    quantiles_b = _quantiles(levels, cumulative_b, values_b)

    widths = torch.diff(levels, dim=1, prepend=torch.zeros_like(levels[:, :1]))
    return torch.sum(widths * torch.abs(quantiles_a - quantiles_b) ** p, dim=1)


def wasserstein_1d(a, b, p=2):
    """
    Exact W_p^p between two weighted 1D sample sets.
    """
    if a.dim != 1 or b.dim != 1:
        raise DataException("wasserstein_1d needs one-dimensional samples, got d=%d and d=%d" % (a.dim, b.dim))
    return slice_costs(a, b, torch.ones((1, 1), dtype=DTYPE), p)[0]


def sw_distance(a, b, projections, p=2):
    """
    Monte Carlo sliced Wasserstein distance ((1/L) sum_l W_p^p(theta_l a, theta_l b))^(1/p).
    """
    return pth_root(torch.mean(slice_costs(a, b, projections, p)), p)


def energy_weights(costs):
    """
    Importance weights of the slices under the exponential energy: softmax of the slice costs.
    """
    return torch.softmax(costs, dim=0)


def ebsw_is(a, b, projections, p=2):
    """
    Importance-sampled energy-based sliced Wasserstein distance (sum_l v_l softmax(v)_l)^(1/p), which puts more
    weight on the slices that separate the measures most.
    """
    costs = slice_costs(a, b, projections, p)
    return pth_root(torch.sum(costs * energy_weights(costs)), p)


class Coupling(object):
    """
    A transport plan between two discrete measures, with its transport cost <matrix, cost>.
    """

    def __init__(self, matrix, mu, nu, cost, converged=True, iterations=0, marginal_error=0.0, potentials=None):
        self.matrix = matrix
        self.mu = mu
        self.nu = nu
        self.cost = cost
        self.converged = converged
        self.iterations = iterations
        self.marginal_error = marginal_error
        self.potentials = potentials

    def row_error(self):
        return torch.max(torch.abs(self.matrix.sum(dim=1) - self.mu)).item()

    def column_error(self):
        return torch.max(torch.abs(self.matrix.sum(dim=0) - self.nu)).item()


def sq_euclidean_cost(x, y):
    """
    Pairwise squared Euclidean distances between the rows of x and y.
    """
    x, y = as_tensor(x), as_tensor(y)
    cost = (x * x).sum(dim=1)[:, None] + (y * y).sum(dim=1)[None, :] - 2.0 * torch.matmul(x, y.T)
    return cost.clamp_min(0.0)


def _marginal(weights, count, positive=True):
    if weights is None:
        return torch.full((count,), 1.0 / count, dtype=DTYPE)
    weights = as_tensor(weights).detach()
    if weights.shape != (count,) or abs(weights.sum().item() - 1.0) > 1e-9:
        raise DataException("Marginal must be %d weights summing to 1" % count)
    if torch.any(weights < 0) or (positive and torch.any(weights == 0)):
        raise DataException("Marginal weights must be " + ("positive" if positive else "non-negative"))
    return weights


def sinkhorn(cost, mu=None, nu=None, epsilon_rel=DEFAULT_EPSILON_REL, epsilon=None,
        max_iters=DEFAULT_SINKHORN_ITERS, tol=DEFAULT_SINKHORN_TOL, potentials=None, anneal_stages=0):
    """
    Entropy-regularized optimal transport by log-domain Sinkhorn iterations.

    The regularization is `epsilon` when given, otherwise epsilon_rel times the largest cost entry. Each iteration
    projects on the row marginal and then on the column marginal, so columns are always exact; iteration stops once
    the largest row violation falls below tol. Running out of iterations is reported on the coupling, not raised.
    Uniform marginals are used when mu or nu is None. The computation is differentiable in `cost`.

    `potentials` warm-starts the dual variables (f, g) in cost units, typically from the `potentials` of a coupling
    computed on a nearby cost; the returned coupling carries its final (detached) potentials.
    Without potentials, anneal_stages > 0 first solves at 2 ** anneal_stages times the regularization and halves
    it stage by stage, each stage warm-starting the next; `iterations` counts the final stage only.
    """
    cost = as_tensor(cost)
    if cost.ndim != 2:
        raise DataException("Cost must be a matrix, got shape " + repr(tuple(cost.shape)))
    if not torch.all(torch.isfinite(cost)):
        raise DataException("Cost matrix has non-finite entries")
    rows, columns = cost.shape
    mu, nu = _marginal(mu, rows), _marginal(nu, columns)

    if epsilon is None:
        scale = cost.detach().abs().max().item()
        epsilon = epsilon_rel * (scale if scale > 0 else 1.0)
    if epsilon <= 0:
        raise DataException("Sinkhorn regularization must be positive, got " + repr(epsilon))
    if anneal_stages > 0 and potentials is None:
        potentials = sinkhorn(cost.detach(), mu, nu, epsilon=2.0 * epsilon, max_iters=max_iters, tol=tol,
                anneal_stages=anneal_stages - 1).potentials

    log_mu, log_nu = torch.log(mu), torch.log(nu)
    if potentials is None:
        f, g = torch.zeros(rows, dtype=DTYPE), torch.zeros(columns, dtype=DTYPE)
    else:
        f, g = (as_tensor(p).detach() for p in potentials)
        if f.shape != (rows,) or g.shape != (columns,):
            raise DataException("Potentials of shape %s and %s do not fit a %d x %d cost"
                    % (repr(tuple(f.shape)), repr(tuple(g.shape)), rows, columns))
    converged, error, iteration = False, float("inf"), 0

    for iteration in range(1, max_iters + 1):
        f = epsilon * (log_mu - torch.logsumexp((g[None, :] - cost) / epsilon, dim=1))
        g = epsilon * (log_nu - torch.logsumexp((f[:, None] - cost) / epsilon, dim=0))

        log_plan = (f[:, None] + g[None, :] - cost) / epsilon
        error = torch.max(torch.abs(torch.exp(torch.logsumexp(log_plan, dim=1)) - mu)).item()
        if error < tol:
            converged = True
            break

    plan = torch.exp((f[:, None] + g[None, :] - cost) / epsilon)
    if not converged:
        logger.warning("Sinkhorn stopped after %d iterations with marginal error %.3g (tol %.3g)",
                iteration, error, tol)
    else:
        logger.debug("Sinkhorn converged in %d iterations (epsilon=%.3g)", iteration, epsilon)

    return Coupling(plan, mu, nu, torch.sum(plan * cost), converged, iteration, error, (f.detach(), g.detach()))


def exact_transport_lp(cost, mu, nu):
    """
    Solve the discrete optimal transport problem exactly with the HiGHS dual simplex solver.
    """
    cost = np.asarray(cost.detach().numpy() if isinstance(cost, torch.Tensor) else cost, dtype=np.float64)
    rows, columns = cost.shape
    if rows * columns > LP_SIZE_CAP:
        raise DataException("Exact transport is limited to %d variables, got %d x %d" % (LP_SIZE_CAP, rows, columns))
    mu, nu = _marginal(mu, rows, positive=False).numpy(), _marginal(nu, columns, positive=False).numpy()

    # Variable (i, j) lives at i * columns + j.
    row_sums = sparse.kron(sparse.eye(rows), np.ones((1, columns)))
    column_sums = sparse.kron(np.ones((1, rows)), sparse.eye(columns))
    result = scipy.optimize.linprog(cost.ravel(), A_eq=sparse.vstack([row_sums, column_sums]).tocsr(),
            b_eq=np.concatenate([mu, nu]), bounds=(0, None), method="highs-ds",
            options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if result.status != 0:
        raise NumericalException("Transport LP failed: " + result.message)

    plan = np.maximum(result.x.reshape(rows, columns), 0.0)
    return Coupling(torch.from_numpy(plan), torch.from_numpy(mu), torch.from_numpy(nu),
            torch.tensor(float(np.sum(plan * cost)), dtype=DTYPE))


def exact_wasserstein_lp(a, b, p=2):
    """
    Exact W_p^p between two weighted sample sets under the Euclidean ground cost; returns (cost, Coupling).
    """
    if a.dim != b.dim:
        raise DataException("Dimension mismatch: %d and %d" % (a.dim, b.dim))
    if a.size * b.size > LP_SIZE_CAP:
        raise DataException("Exact transport is limited to %d variables, got %d x %d" % (LP_SIZE_CAP, a.size, b.size))
    distances = torch.cdist(a.values.detach(), b.values.detach(), compute_mode="donot_use_mm_for_euclid_dist")
    coupling = exact_transport_lp(distances ** p, a.weights, b.weights)
    return coupling.cost.item(), coupling


def bench(sizes, dims, n_projections=200, seed=0, sinkhorn_iters=DEFAULT_SINKHORN_ITERS, repeats=3):
    """
    Time sw_distance and sinkhorn on random Gaussian feature sets. Returns rows matching BENCH_COLUMNS; wall_ns is
    the best of `repeats` runs and peak_bytes the size of the dominant tensors (the projected slices of both sets
    for SW, the dense cost matrix for Sinkhorn).
    """
    generator = torch.Generator().manual_seed(int(seed))
    rows = []
    for d in dims:
        projections = sample_projections(n_projections, d, seed)
        for n in sizes:
            a = WeightedSamples.uniform(torch.randn((n, d), generator=generator, dtype=DTYPE))
            b = WeightedSamples.uniform(torch.randn((n, d), generator=generator, dtype=DTYPE))

            elapsed = []
            for _ in range(repeats):
                start = time.perf_counter_ns()
                sw_distance(a, b, projections)
                elapsed.append(time.perf_counter_ns() - start)
            rows.append(("sw", n, d, n_projections, min(elapsed), 2 * n * n_projections * 8))

            start = time.perf_counter_ns()
            sinkhorn(sq_euclidean_cost(a.values, b.values), max_iters=sinkhorn_iters)
            rows.append(("sinkhorn", n, d, n_projections, time.perf_counter_ns() - start, n * n * 8))

            logger.info("Benchmarked n=%d d=%d: sw %d ns, sinkhorn %d ns", n, d, rows[-2][4], rows[-1][4])
    return rows
