# Test-time refinement of a pair's features against Sinkhorn couplings, and the unsupervised per-vertex refiner.

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import binary, ot
from .align import LossConfig, compute_loss_parts, nn_map, normalize_rows, total_loss
from .autodiff import Tape
from .exceptions import DataException, NumericalException
from .fmap import FmapConfig
from .ot import as_tensor
from .spectral import FeatureMatrix

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "l_fmap", "l_ot", "l_proper", "total")

REFINER_MAGIC = b"RFNW"
FORMAT_VERSION = 1

DIVERGENCE_LIMIT = 1e6

# Regularization doublings a cold-started refinement coupling anneals down from.
SINKHORN_ANNEAL_STAGES = 4


@dataclass
class RefineConfig:
    """
    Options of the adaptive refinement loop.

    Every iteration moves the row-normalized features against the gradient of the objective, taken with the
    Sinkhorn coupling frozen (or differentiated through, with unrolled=True). The gradient is rescaled so that a
    step of length s moves the features by s per vertex in root mean square; the first trial uses step_size. With
    step_halving a trial that raises the objective is halved up to max_halvings times, and a step accepted at full
    length doubles the next trial (never beyond max_step, or step_size if larger). Each Sinkhorn run warm-starts
    from the potentials of the previous one.
    """
    iterations: int = 12
    step_size: float = 1e-2
    max_step: float = 0.25
    epsilon_rel: float = 1e-2
    sinkhorn_iters: int = 1000
    sinkhorn_tol: float = 1e-6
    step_halving: bool = True
    max_halvings: int = 10
    unrolled: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    fmap: FmapConfig = field(default_factory=FmapConfig)

    def validate(self):
        if self.iterations < 0:
            raise DataException("iterations must be non-negative, got " + repr(self.iterations))
        if not self.step_size > 0:
            raise DataException("step_size must be positive, got " + repr(self.step_size))
        if not self.max_step > 0:
            raise DataException("max_step must be positive, got " + repr(self.max_step))
        if not self.epsilon_rel > 0:
            raise DataException("epsilon_rel must be positive, got " + repr(self.epsilon_rel))
        if self.sinkhorn_iters < 1 or self.max_halvings < 0:
            raise DataException("sinkhorn_iters must be positive and max_halvings non-negative")
        self.loss.validate()
        self.fmap.validate()
        return self


class RefineResult(object):

    def __init__(self, features_x, features_y, point_map, trace):
        self.features_x = features_x
        self.features_y = features_y
        self.point_map = point_map
        self.trace = trace


def _values(features):
    if isinstance(features, FeatureMatrix):
        features = features.values
    return as_tensor(features).detach()


def refinement_coupling(f_x, f_y, config, differentiable=False, potentials=None):
    """
    The entropic coupling between the row-normalized features under squared Euclidean cost, with uniform
    marginals. Gradients flow into the features only when `differentiable` is set. Without warm-start potentials
    the regularization is annealed down to its target.
    """
    cost = ot.sq_euclidean_cost(normalize_rows(f_x), normalize_rows(f_y))
    if not differentiable:
        cost = cost.detach()
    return ot.sinkhorn(cost, epsilon_rel=config.epsilon_rel, max_iters=config.sinkhorn_iters,
            tol=config.sinkhorn_tol, potentials=potentials, anneal_stages=SINKHORN_ANNEAL_STAGES)


def coupling_similarities(coupling):
    """
    Row-stochastic similarities in both directions from one coupling pi: Pi_xy = n_x * pi and Pi_yx = n_y * pi^T.
    """
    plan = coupling.matrix
    return plan * plan.shape[0], plan.T * plan.shape[1]


def sinkhorn_similarities(f_x, f_y, config, differentiable=False):
    return coupling_similarities(refinement_coupling(f_x, f_y, config, differentiable))


def _rms(gradient_x, gradient_y):
    count = gradient_x.shape[0] + gradient_y.shape[0]
    return math.sqrt((torch.sum(gradient_x ** 2).item() + torch.sum(gradient_y ** 2).item()) / count)


def adaptive_refine(mesh_x, mesh_y, basis_x, basis_y, f_x, f_y, config=None):
    """
    Refine a pair's features by gradient steps on the unsupervised objective, with the soft similarities
    replaced by Sinkhorn couplings recomputed from the current features, then match by nearest neighbors.

    The trace holds one row per iteration (iter, l_fmap, l_ot, l_proper, total), row 0 being the input; each
    total is evaluated with the coupling of its own features, and a candidate is accepted only if its total does
    not exceed the previous row. Once no trial step is accepted the features are final and the remaining rows
    repeat the last one. The refined features are returned row-normalized. With zero iterations the inputs are
    matched as is.
    """
    config = (config or RefineConfig()).validate()
    f_x, f_y = _values(f_x), _values(f_y)
    if f_x.shape[0] != mesh_x.n_vertices or f_y.shape[0] != mesh_y.n_vertices:
        raise DataException("Features have %d and %d rows but the meshes have %d and %d vertices"
                % (f_x.shape[0], f_y.shape[0], mesh_x.n_vertices, mesh_y.n_vertices))
    if basis_x.n != mesh_x.n_vertices or basis_y.n != mesh_y.n_vertices:
        raise DataException("Bases do not belong to the given meshes")

    if config.iterations == 0:
        return RefineResult(f_x.numpy(), f_y.numpy(), nn_map(f_x, f_y), [])

    f_x, f_y = normalize_rows(f_x), normalize_rows(f_y)
    projections = ot.sample_projections(config.loss.n_projections, f_x.shape[1], config.loss.seed)
    warm = {"potentials": None}

    def objective(features_x, features_y, differentiable=False):
        coupling = refinement_coupling(features_x, features_y, config, differentiable and config.unrolled,
                warm["potentials"])
        warm["potentials"] = coupling.potentials
        parts = compute_loss_parts(features_x, features_y, basis_x, basis_y, config.loss, projections,
                config.fmap, coupling_similarities(coupling))
        return parts, total_loss(parts, config.loss)

    with torch.no_grad():
        parts, total = objective(f_x, f_y)
    trace = [[0] + parts.as_row() + [total.item()]]

    step = config.step_size
    for iteration in range(1, config.iterations + 1):
        tape = Tape({"x": f_x, "y": f_y})
        _, root = objective(tape.leaves["x"], tape.leaves["y"], differentiable=True)
        gradients = tape.gradients(root)
        grad_x, grad_y = torch.from_numpy(gradients["x"]), torch.from_numpy(gradients["y"])
        scale = _rms(grad_x, grad_y)

        accepted, trial = None, step
        if scale > 0 and math.isfinite(scale):
            grad_x, grad_y = grad_x / scale, grad_y / scale
            for _ in range(config.max_halvings + 1 if config.step_halving else 1):
                candidate_x, candidate_y = f_x - trial * grad_x, f_y - trial * grad_y
                try:
                    with torch.no_grad():
                        parts, total = objective(candidate_x, candidate_y)
                except NumericalException:
                    if not config.step_halving:
                        raise
                    trial /= 2.0
                    continue
                if not config.step_halving or total.item() <= trace[-1][-1]:
                    accepted = (candidate_x, candidate_y, parts, total)
                    break
                trial /= 2.0

        if accepted is None:
            logger.debug("Refinement stopped at iteration %d: no trial step lowers the objective", iteration)
            trace += [[later] + trace[-1][1:] for later in range(iteration, config.iterations + 1)]
            break

        f_x, f_y, parts, total = accepted
        trace.append([iteration] + parts.as_row() + [total.item()])
        logger.debug("Refinement iteration %d: total %.6g (step %.3g)", iteration, total.item(), trial)
        if config.step_halving and trial == step:
            step = min(2.0 * step, max(config.max_step, config.step_size))
        else:
            step = trial

    logger.info("Refined features over %d iterations: %.6g -> %.6g", config.iterations, trace[0][-1], trace[-1][-1])
    f_x, f_y = normalize_rows(f_x), normalize_rows(f_y)
    return RefineResult(f_x.numpy(), f_y.numpy(), nn_map(f_x, f_y), trace)


class FeatureRefiner(object):
    """
    A per-vertex multilayer perceptron turning descriptors into matching features. Layer i holds a weight matrix
    (in x out) and a bias; every layer but the last is followed by tanh.
    """

    def __init__(self, weights, biases):
        if len(weights) == 0 or len(weights) != len(biases):
            raise DataException("A refiner needs matching, non-empty weight and bias lists")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DataException("Layer %d has weight %s and bias %s" % (index, repr(w.shape), repr(b.shape)))
            if index > 0 and w.shape[0] != self.weights[index - 1].shape[1]:
                raise DataException("Layer %d expects %d inputs but the previous layer has %d outputs"
                        % (index, w.shape[0], self.weights[index - 1].shape[1]))

    @staticmethod
    def initialize(layer_sizes, seed=0):
        """
        Random orthogonal weights and zero biases for layers of the given widths, e.g. [128, 256, 256]. A layer that
        does not narrow gets orthonormal rows, and is then an isometry before its tanh; a narrowing layer gets
        orthonormal columns.
        """
        if len(layer_sizes) < 2:
            raise DataException("Need at least input and output widths, got " + repr(layer_sizes))
        rng = np.random.default_rng(seed)
        weights = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            q, r = np.linalg.qr(rng.normal(size=(max(fan_in, fan_out), min(fan_in, fan_out))))
            q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
            weights.append(q.T if fan_in < fan_out else q)
        return FeatureRefiner(weights, [np.zeros(size) for size in layer_sizes[1:]])

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def params(self):
        params = {}
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            params["w%d" % index] = w
            params["b%d" % index] = b
        return params

    @staticmethod
    def from_params(params):
        count = len(params) // 2
        return FeatureRefiner([np.asarray(params["w%d" % i]) for i in range(count)],
                [np.asarray(params["b%d" % i]) for i in range(count)])

    @staticmethod
    def apply(params, features):
        """
        Forward pass with the given (possibly recording) parameter tensors.
        """
        count = len(params) // 2
        hidden = as_tensor(features)
        for index in range(count):
            hidden = hidden @ params["w%d" % index] + params["b%d" % index]
            if index < count - 1:
                hidden = torch.tanh(hidden)
        return hidden

    def transform(self, features):
        values = _values(features)
        if values.shape[1] != self.in_dim:
            raise DataException("Refiner expects %d input features, got %d" % (self.in_dim, values.shape[1]))
        with torch.no_grad():
            params = {name: torch.from_numpy(value) for name, value in self.params().items()}
            return FeatureMatrix(FeatureRefiner.apply(params, values).numpy())

    def to_file(self, file_name):
        with open(file_name, "wb") as stream:
            binary.write_header(stream, REFINER_MAGIC, FORMAT_VERSION, len(self.weights))
            for w, b in zip(self.weights, self.biases):
                binary.write_sizes(stream, w.shape[0], w.shape[1])
                binary.write_array(stream, w)
                binary.write_array(stream, b)

    @staticmethod
    def from_file(file_name):
        weights, biases = [], []
        with open(file_name, "rb") as stream:
            layers, = binary.read_header(stream, file_name, REFINER_MAGIC, FORMAT_VERSION, 1)
            for _ in range(layers):
                rows, cols = binary.read_sizes(stream, file_name, 2)
                weights.append(binary.read_array(stream, file_name, (rows, cols)))
                biases.append(binary.read_array(stream, file_name, (cols,)))
            binary.expect_end(stream, file_name)
        return FeatureRefiner(weights, biases)


def cosine_learning_rate(epoch, epochs, maximum=1e-3, minimum=1e-4):
    """
    Learning rate annealed from `maximum` at epoch 0 to `minimum` at the last epoch along a half cosine.
    """
    if epochs <= 1:
        return maximum
    return minimum + 0.5 * (maximum - minimum) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def train_refiner(pairs, config=None, epochs=50, seed=0, layer_sizes=None, learning_rate=1e-3,
        min_learning_rate=1e-4, max_halvings=10):
    """
    Fit a FeatureRefiner by minimizing the mean unsupervised objective (with soft similarities) over shape pairs.

    Each pair is ((mesh_x, basis_x, descriptors_x), (mesh_y, basis_y, descriptors_y)). Training is full-batch
    gradient descent with a cosine-annealed learning rate; a step that raises the loss is halved until it does not.
    Returns the refiner and the trace of accepted losses (initial loss first).
    """
    config = (config or RefineConfig()).validate()
    if not pairs:
        raise DataException("Training needs at least one pair")

    descriptors = []
    for (mesh_x, basis_x, wks_x), (mesh_y, basis_y, wks_y) in pairs:
        wks_x, wks_y = _values(wks_x), _values(wks_y)
        if wks_x.shape[0] != mesh_x.n_vertices or wks_y.shape[0] != mesh_y.n_vertices:
            raise DataException("Descriptors do not match their meshes")
        descriptors.append((wks_x, wks_y, basis_x, basis_y))
    in_dim = descriptors[0][0].shape[1]
    if any(x.shape[1] != in_dim or y.shape[1] != in_dim for x, y, _, _ in descriptors):
        raise DataException("All descriptors must share one dimension")

    layer_sizes = layer_sizes or [in_dim, 256, 256]
    if layer_sizes[0] != in_dim:
        raise DataException("Refiner input width %d does not match descriptor dimension %d" % (layer_sizes[0], in_dim))
    refiner = FeatureRefiner.initialize(layer_sizes, seed)
    projections = ot.sample_projections(config.loss.n_projections, layer_sizes[-1], config.loss.seed)

    def mean_loss(params):
        losses = []
        for wks_x, wks_y, basis_x, basis_y in descriptors:
            parts = compute_loss_parts(FeatureRefiner.apply(params, wks_x), FeatureRefiner.apply(params, wks_y),
                    basis_x, basis_y, config.loss, projections, config.fmap)
            losses.append(total_loss(parts, config.loss))
        return torch.stack(losses).mean()

    def evaluate(params):
        with torch.no_grad():
            return mean_loss({name: torch.from_numpy(value) for name, value in params.items()}).item()

    params = refiner.params()
    trace = [evaluate(params)]
    if trace[0] > DIVERGENCE_LIMIT:
        raise NumericalException("Refiner training diverged: loss %.6g exceeds %g" % (trace[0], DIVERGENCE_LIMIT))

    for epoch in range(epochs):
        tape = Tape(params)
        gradients = tape.gradients(tape.evaluate(mean_loss))
        step = cosine_learning_rate(epoch, epochs, learning_rate, min_learning_rate)

        loss = trace[-1]
        for _ in range(max_halvings + 1):
            candidate = {name: value - step * gradients[name] for name, value in params.items()}
            try:
                candidate_loss = evaluate(candidate)
            except NumericalException:
                candidate_loss = math.inf
            if candidate_loss <= trace[-1]:
                params, loss = candidate, candidate_loss
                break
            step /= 2.0

        trace.append(loss)
        logger.debug("Epoch %d: loss %.6g (step %.3g)", epoch, loss, step)

    logger.info("Trained refiner for %d epochs: loss %.6g -> %.6g", epochs, trace[0], trace[-1])
    return FeatureRefiner.from_params(params), trace
