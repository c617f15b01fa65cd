"""Sequential two-photon excitation of a biexciton cascade.

Fock-space model of the emitted photonic state, a Monte Carlo time-tag
simulator and the correlation analysis used to compare the two.
"""
from . import correlate, fock, montecarlo, protocol, tagio
from .fock import DensityOperator, ModeLabel, ModeRegister, PureState
from .montecarlo import DetectorModel, ExperimentConfig, PhaseModel, run_experiment
from .protocol import CascadeParams, coefficients
from .tagio import TagStream, read_tags, write_tags

__version__ = "0.1.0"

__all__ = [
    "correlate", "fock", "montecarlo", "protocol", "tagio",
    "DensityOperator", "ModeLabel", "ModeRegister", "PureState",
    "DetectorModel", "ExperimentConfig", "PhaseModel", "run_experiment",
    "CascadeParams", "coefficients",
    "TagStream", "read_tags", "write_tags",
]
