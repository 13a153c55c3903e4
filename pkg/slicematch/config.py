# Pipeline configuration: every tunable of the matching pipeline under one flat key namespace.

import logging
from dataclasses import dataclass, field

from .exceptions import DataException
from .refine import RefineConfig

logger = logging.getLogger(__name__)

WEIGHT_SCHEMES = ("uniform", "area")

# Flat configuration key -> (section, attribute). Section None is the PipelineConfig itself.
KEYS = {
    "k": (None, "k"),
    "wks_dim": (None, "wks_dim"),
    "wks_variance": (None, "wks_variance"),
    "seed": (None, "seed"),
    "weight_scheme": (None, "weight_scheme"),
    "jobs": (None, "jobs"),
    "lambda_reg": ("fmap", "lambda_reg"),
    "resolvent_gamma": ("fmap", "resolvent_gamma"),
    "lambda1": ("loss", "lambda1"),
    "lambda2": ("loss", "lambda2"),
    "lambda3": ("loss", "lambda3"),
    "alpha1": ("loss", "alpha1"),
    "alpha2": ("loss", "alpha2"),
    "p": ("loss", "p"),
    "n_projections": ("loss", "n_projections"),
    "tau": ("loss", "tau"),
    "ot_variant": ("loss", "ot_variant"),
    "iterations": ("refine", "iterations"),
    "step_size": ("refine", "step_size"),
    "max_step": ("refine", "max_step"),
    "epsilon_rel": ("refine", "epsilon_rel"),
    "sinkhorn_iters": ("refine", "sinkhorn_iters"),
    "sinkhorn_tol": ("refine", "sinkhorn_tol"),
    "step_halving": ("refine", "step_halving"),
    "max_halvings": ("refine", "max_halvings"),
    "unrolled": ("refine", "unrolled"),
}

TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


def _parse(text, current):
    """
    Parse a configuration value into the type of the field's current value.
    """
    if isinstance(current, bool):
        word = text.lower()
        if word in TRUE_WORDS:
            return True
        if word in FALSE_WORDS:
            return False
        raise ValueError("expected a boolean")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


@dataclass
class PipelineConfig:
    """
    All pipeline settings. The refinement section owns the loss and functional-map sections.
    """
    k: int = 200
    wks_dim: int = 128
    wks_variance: float = 7.0
    seed: int = 0
    weight_scheme: str = "uniform"
    jobs: int = 1
    refine: RefineConfig = field(default_factory=RefineConfig)

    @property
    def loss(self):
        return self.refine.loss

    @property
    def fmap(self):
        return self.refine.fmap

    def _section(self, name):
        return self if name is None else getattr(self, name)

    def get(self, key):
        section, attribute = KEYS[key]
        return getattr(self._section(section), attribute)

    def set(self, key, value):
        """
        Set a flat key; string values are parsed into the field's type.
        """
        if key not in KEYS:
            raise DataException("Unknown configuration key " + repr(key))
        section, attribute = KEYS[key]
        target = self._section(section)
        if isinstance(value, str):
            try:
                value = _parse(value.strip(), getattr(target, attribute))
            except ValueError as error:
                raise DataException("Bad value %r for %s: %s" % (value, key, error))
        setattr(target, attribute, value)

    def override(self, values):
        """
        Apply key -> value overrides, skipping None (flags that were not given).
        """
        for key, value in values.items():
            if value is not None:
                self.set(key, value)
        return self

    def validate(self):
        if self.k < 1:
            raise DataException("k must be positive, got " + repr(self.k))
        if self.wks_dim < 1:
            raise DataException("wks_dim must be positive, got " + repr(self.wks_dim))
        if not self.wks_variance > 0:
            raise DataException("wks_variance must be positive, got " + repr(self.wks_variance))
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise DataException("weight_scheme must be one of %s, got %r" % (", ".join(WEIGHT_SCHEMES), self.weight_scheme))
        if self.jobs < 1:
            raise DataException("jobs must be positive, got " + repr(self.jobs))

        self.loss.seed = self.seed
        self.loss.area_weights = self.weight_scheme == "area"
        self.refine.validate()
        return self

    @staticmethod
    def from_file(path):
        """
        Read `key = value` lines. Blank lines and lines starting with '#' are skipped.
        """
        config = PipelineConfig()
        with open(path, "r") as config_file:
            for number, line in enumerate(config_file, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DataException("%s: line %d: expected 'key = value', got %s" % (path, number, repr(line)))
                key, value = (part.strip() for part in line.split("=", 1))
                try:
                    config.set(key, value)
                except DataException as error:
                    raise DataException("%s: line %d: %s" % (path, number, error))

        logger.debug("Loaded configuration from %s", path)
        return config

    def to_file(self, path, keys=None):
        """
        Write `key = value` lines for the given keys (every key by default) in the format read by from_file.
        """
        with open(path, "w") as config_file:
            for key in keys or KEYS:
                config_file.write("%s = %s\n" % (key, self.get(key)))
