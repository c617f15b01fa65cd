"""Analytic model of sequential two-photon excitation of a biexciton cascade.

Times are in picoseconds throughout.  The emitted light is

    alpha |0000> + beta |1001> + gamma |1111>

over the modes (B,e), (X,e), (B,l), (X,l), with real non-negative amplitudes.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import fock
from .fock import Bin, Energy, ModeLabel, ModeRegister, PureState, Spatial, UndefinedCorrelation

__all__ = [
    "CascadeParams",
    "Coefficients",
    "HomPrediction",
    "PSI_MODES",
    "coefficients",
    "build_psi",
    "mean_photon_number",
    "analytic_g2",
    "single_pulse_state",
    "max_indistinguishability",
    "hom_input_state",
    "hom_output_state",
    "hom_g2_analytic",
    "hom_g2_oracle",
    "hom_prediction",
    "mutual_information_partitions",
]

DEGENERATE_RATE_TOL = 1e-6

PSI_MODES = (
    ModeLabel(Energy.B, Bin.EARLY),
    ModeLabel(Energy.X, Bin.EARLY),
    ModeLabel(Energy.B, Bin.LATE),
    ModeLabel(Energy.X, Bin.LATE),
)


@dataclass(frozen=True)
class CascadeParams:
    tau_B: float = 142.0
    tau_X: float = 187.0
    delta_t: float = 100.0
    prep_fidelity: float = 1.0

    def __post_init__(self):
        if not (self.tau_B > 0 and self.tau_X > 0):
            raise ValueError(f"lifetimes must be positive, got tau_B={self.tau_B}, tau_X={self.tau_X}")
        if not self.delta_t >= 0:
            raise ValueError(f"delta_t must be >= 0, got {self.delta_t}")
        if not 0.0 <= self.prep_fidelity <= 1.0:
            raise ValueError(f"prep_fidelity must lie in [0, 1], got {self.prep_fidelity}")

    @property
    def gamma_B(self) -> float:
        return 1.0 / self.tau_B

    @property
    def gamma_X(self) -> float:
        return 1.0 / self.tau_X


@dataclass(frozen=True)
class Coefficients:
    alpha_sq: float
    beta_sq: float
    gamma_sq: float

    def __iter__(self):
        return iter((self.alpha_sq, self.beta_sq, self.gamma_sq))

    @property
    def amplitudes(self) -> tuple:
        return tuple(math.sqrt(max(p, 0.0)) for p in self)


@dataclass(frozen=True)
class HomPrediction:
    phi: float
    g2: float


def _params(params_or_tau_B, tau_X=None, delta_t=None) -> CascadeParams:
    if isinstance(params_or_tau_B, CascadeParams):
        return params_or_tau_B
    return CascadeParams(float(params_or_tau_B), float(tau_X), float(delta_t))


def coefficients(tau_B, tau_X=None, delta_t=None) -> Coefficients:
    """Branch probabilities (de-excited, unchanged, re-excited) after the delay.

    Accepts either a :class:`CascadeParams` or the three times directly.
    """
    p = _params(tau_B, tau_X, delta_t)
    gb, gx, dt = p.gamma_B, p.gamma_X, p.delta_t
    if math.isinf(dt):
        return Coefficients(0.0, 0.0, 1.0)
    a = math.exp(-gb * dt)
    if abs(gx - gb) / gb < DEGENERATE_RATE_TOL:
        b = gb * dt * math.exp(-gb * dt)
    else:
        # e^{-gb dt} - e^{-gx dt} factored around the slower rate; -expm1 keeps
        # precision for small delays and nothing here can overflow
        slow, diff = min(gb, gx), abs(gx - gb)
        b = gb * math.exp(-slow * dt) * -math.expm1(-diff * dt) / diff
    # 1 - a - b written to avoid cancellation at small dt
    g = -math.expm1(-gb * dt) - b
    g = min(max(g, 0.0), 1.0)
    return Coefficients(a, b, g)


def build_psi(params: CascadeParams, cutoff: int = fock.DEFAULT_CUTOFF, spatial=Spatial.NONE) -> PureState:
    modes = tuple(m.with_spatial(spatial) for m in PSI_MODES)
    a, b, g = coefficients(params).amplitudes
    reg = ModeRegister(modes, cutoff)
    return PureState.from_amplitudes(
        reg, {(0, 0, 0, 0): a, (1, 0, 0, 1): b, (1, 1, 1, 1): g}, normalize=True
    )


def mean_photon_number(params: CascadeParams) -> float:
    """Mean photons per energy mode (equivalently per time-bin mode)."""
    c = coefficients(params)
    return c.beta_sq + 2.0 * c.gamma_sq


def _mode_key(mode) -> tuple:
    if isinstance(mode, ModeLabel):
        return mode.energy, mode.bin
    e, b = mode
    return Energy(e), Bin(b)


def analytic_g2(params: CascadeParams, mode1, mode2) -> float:
    """Closed-form second-order correlation between two (energy, bin) modes of psi."""
    k1, k2 = _mode_key(mode1), _mode_key(mode2)
    c = coefficients(params)
    if k1 == k2:
        if c.beta_sq + c.gamma_sq <= 0:
            raise UndefinedCorrelation(f"mode {k1} is never populated")
        return 0.0
    if {k1, k2} == {(Energy.B, Bin.LATE), (Energy.X, Bin.EARLY)}:
        if c.gamma_sq <= 0:
            raise UndefinedCorrelation("gamma^2 = 0")
        return 1.0 / c.gamma_sq
    if c.gamma_sq <= 0 or c.beta_sq + c.gamma_sq <= 0:
        raise UndefinedCorrelation("a mode of the pair is never populated")
    return 1.0 / (c.beta_sq + c.gamma_sq)


def single_pulse_state(theta: float, cutoff: int = fock.DEFAULT_CUTOFF) -> PureState:
    """cos(θ/2)|0_B 0_X> + sin(θ/2)|1_B 1_X> for one pulse of area θ."""
    modes = (ModeLabel(Energy.B, Bin.EARLY), ModeLabel(Energy.X, Bin.EARLY))
    reg = ModeRegister(modes, cutoff)
    return PureState.from_amplitudes(reg, {(0, 0): math.cos(theta / 2), (1, 1): math.sin(theta / 2)}, normalize=True)


def max_indistinguishability(tau_B: float, tau_X: float) -> float:
    if not (tau_B >= 0 and tau_X > 0):
        raise ValueError("lifetimes must be positive")
    return 1.0 / (1.0 + tau_B / tau_X)


def hom_input_state(params: CascadeParams, phi: float, cutoff: int = fock.DEFAULT_CUTOFF) -> PureState:
    """Two copies of psi on spatial inputs a and b; every photon in b picks up phase φ."""
    psi_a = build_psi(params, cutoff, Spatial.A)
    a, b, g = coefficients(params).amplitudes
    reg_b = ModeRegister(tuple(m.with_spatial(Spatial.B) for m in PSI_MODES), cutoff)
    psi_b = PureState.from_amplitudes(
        reg_b,
        {(0, 0, 0, 0): a, (1, 0, 0, 1): b * np.exp(2j * phi), (1, 1, 1, 1): g * np.exp(4j * phi)},
        normalize=True,
    )
    return fock.tensor_product(psi_a, psi_b)


def _hom_pairs() -> list:
    return [
        (m.with_spatial(Spatial.A), m.with_spatial(Spatial.B), m.with_spatial(Spatial.C), m.with_spatial(Spatial.D))
        for m in PSI_MODES
    ]


def hom_output_state(params: CascadeParams, phi: float, cutoff: int = fock.DEFAULT_CUTOFF) -> PureState:
    if cutoff < 2:
        raise fock.TruncationError("HOM output needs cutoff >= 2")
    return fock.beamsplitter(hom_input_state(params, phi, cutoff), _hom_pairs(), 0.5)


def hom_g2_analytic(params: CascadeParams, phi: float) -> float:
    """Cross-output correlation with spectral and temporal modes unresolved."""
    a, b, g = coefficients(params)
    mu = b + 2.0 * g
    if mu <= 0:
        raise UndefinedCorrelation("no photons emitted")
    denom = 4.0 * mu * mu
    const = (2 * b * b + 13 * b * g + 12 * g * g + a * (b + 6 * g)) / denom
    return const - b * (a + g) * math.cos(2.0 * phi) / denom


def hom_g2_oracle(params: CascadeParams, phi: float) -> float:
    """Brute-force counterpart of :func:`hom_g2_analytic` from the 8-mode output state."""
    out = hom_output_state(params, phi)
    out_c = [m.with_spatial(Spatial.C) for m in PSI_MODES]
    out_d = [m.with_spatial(Spatial.D) for m in PSI_MODES]
    return fock.g2_between(out, out_c, out_d)


def hom_prediction(params: CascadeParams, phi: float) -> HomPrediction:
    return HomPrediction(phi, hom_g2_analytic(params, phi))


def bipartitions(modes=PSI_MODES) -> list:
    """All unordered bipartitions, each as (part containing modes[0], complement)."""
    modes = tuple(modes)
    first, rest = modes[0], modes[1:]
    out = []
    for k in range(0, len(rest)):
        for combo in itertools.combinations(rest, k):
            part1 = (first,) + combo
            part2 = tuple(m for m in modes if m not in part1)
            out.append((part1, part2))
    return out


def mutual_information_partitions(params: CascadeParams) -> list:
    """``[(part1, part2, bits), ...]`` for the 7 bipartitions of psi."""
    psi = build_psi(params)
    return [(p1, p2, fock.mutual_information(psi, p1, p2)) for p1, p2 in bipartitions(psi.modes)]
