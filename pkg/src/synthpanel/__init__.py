"""Synthetic control and generalized synthetic control for single-unit case studies.

Submodules: ``panel`` (data model and CSV ingestion), ``transform`` (outcome
transforms and principal components), ``scm`` (weights, V search, fit
diagnostics), ``placebo`` (permutation inference), ``gsc`` (interactive fixed
effects), ``dgp`` (simulators and oracles), ``cli`` (config-driven runs).
"""

from .errors import ConfigError, DataError, NumericalError, SynthPanelError
from .panel import BalancedPanel, TreatmentAssignment, build_panel, load_long_csv
from .scm import fit, solve_weights
from .gsc import gsc_fit

__version__ = "0.1.0"

__all__ = [
    "BalancedPanel",
    "TreatmentAssignment",
    "build_panel",
    "load_long_csv",
    "fit",
    "solve_weights",
    "gsc_fit",
    "SynthPanelError",
    "ConfigError",
    "DataError",
    "NumericalError",
]
