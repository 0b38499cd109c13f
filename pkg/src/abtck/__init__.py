"""Augmented Bayesian treed co-kriging for multifidelity computer models."""

from .design import AugmentedDesign, Domain, FidelityDataset, FidelityLevel, build_augmentation, lhs_sample
from .errors import ConfigError, DomainError, NumericalSingularityError
from .gpcore import BasisSpec, GammaMixture, LevelParams, ModelSpec, NIGPrior
from .treepart import PartitionTree, TreePriorConfig

__version__ = "0.1.0"
