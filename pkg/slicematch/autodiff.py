# Reverse-mode gradients of scalar loss programs over named parameters, and finite-difference checks of them.

import logging

import numpy as np
import torch

from .exceptions import DataException
from .ot import DTYPE, as_tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


class Tape(object):
    """
    The parameter leaves of one optimization: float64 tensors that record every operation applied to them.

    A loss program receives a dict of leaves and returns a 0-dim tensor; calling it again with the same inputs
    reproduces the value bit-exactly on CPU.
    """

    def __init__(self, params):
        if not params:
            raise DataException("A tape needs at least one parameter")
        self.leaves = {}
        for name, value in params.items():
            leaf = as_tensor(value).detach().clone()
            leaf.requires_grad_(True)
            self.leaves[name] = leaf

    def evaluate(self, loss_program):
        root = loss_program(self.leaves)
        if not isinstance(root, torch.Tensor):
            raise DataException("Loss program must return a tensor, got " + type(root).__name__)
        if root.numel() != 1:
            raise DataException("Loss program must return a scalar, got shape " + repr(tuple(root.shape)))
        return root.reshape(())

    def gradients(self, root):
        """
        Backpropagate from the root; leaves the loss does not depend on get zero gradients.
        """
        leaves = list(self.leaves.values())
        if not root.requires_grad:
            return {name: np.zeros(tuple(leaf.shape)) for name, leaf in self.leaves.items()}
        grads = torch.autograd.grad(root, leaves, allow_unused=True)
        return {name: (np.zeros(tuple(leaf.shape)) if grad is None else grad.detach().numpy().copy())
                for (name, leaf), grad in zip(self.leaves.items(), grads)}


def value_and_grad(loss_program, params):
    """
    Evaluate loss_program on fresh leaves built from `params` (name -> array) and return (value, gradients), the
    gradients as numpy arrays shaped like their parameters.
    """
    tape = Tape(params)
    root = tape.evaluate(loss_program)
    return root.item(), tape.gradients(root)


class FiniteDifferenceReport(object):
    """
    Central-difference check of an analytic gradient at sampled coordinates. Each entry of `errors` is
    (name, index, analytic, numeric, relative error).
    """

    def __init__(self, errors, tolerance):
        self.errors = errors
        self.tolerance = tolerance
        self.max_relative_error = max(error[4] for error in errors) if errors else 0.0
        self.passed = self.max_relative_error <= tolerance

    def __repr__(self):
        return "FiniteDifferenceReport(max_relative_error=%.3g, passed=%s)" % (self.max_relative_error, self.passed)


def _evaluate(loss_program, values):
    with torch.no_grad():
        leaves = {name: torch.from_numpy(value).to(DTYPE) for name, value in values.items()}
        return loss_program(leaves).item()


def finite_difference_check(loss_program, params, h=DEFAULT_STEP, tolerance=DEFAULT_TOLERANCE, num_coordinates=10,
        seed=0, gradients=None):
    """
    Compare gradients against central differences at `num_coordinates` randomly chosen coordinates (all of them if
    there are fewer). The step is h * max(1, |x|). Relative errors are taken against the larger of the two
    magnitudes, floored at 1e-6 * (1 + max |analytic|) so coordinates with vanishing gradient do not dominate.
    `gradients` defaults to the reverse-mode gradients of the program; passing others checks those instead.
    """
    values = {name: np.array(as_tensor(value).detach().numpy(), dtype=np.float64) for name, value in params.items()}
    if gradients is None:
        _, gradients = value_and_grad(loss_program, values)

    coordinates = [(name, index) for name, value in values.items() for index in np.ndindex(value.shape)]
    if not coordinates:
        raise DataException("No coordinates to check")
    rng = np.random.default_rng(seed)
    if len(coordinates) > num_coordinates:
        chosen = rng.choice(len(coordinates), size=num_coordinates, replace=False)
        coordinates = [coordinates[i] for i in sorted(chosen)]

    scale = 1.0 + max(np.max(np.abs(g)) if np.size(g) else 0.0 for g in gradients.values())
    errors = []
    for name, index in coordinates:
        original = values[name][index]
        step = h * max(1.0, abs(original))

        values[name][index] = original + step
        upper = _evaluate(loss_program, values)
        values[name][index] = original - step
        lower = _evaluate(loss_program, values)
        values[name][index] = original

        numeric = (upper - lower) / (2.0 * step)
        analytic = float(np.asarray(gradients[name])[index])
        denominator = max(abs(numeric), abs(analytic), 1e-6 * scale)
        errors.append((name, index, analytic, numeric, abs(numeric - analytic) / denominator))

    report = FiniteDifferenceReport(errors, tolerance)
    logger.debug("%s over %d coordinates", report, len(errors))
    return report
