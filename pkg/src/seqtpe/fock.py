"""Truncated bosonic Fock-space algebra over labeled modes.

States are held densely as complex tensors with one axis per mode, each axis
of length ``cutoff + 1``.  Everything here is exact linear algebra; the
largest state the package builds (two copies of the four-mode cascade state
after a beamsplitter) has 3**8 = 6561 amplitudes.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Energy",
    "Bin",
    "Spatial",
    "ModeLabel",
    "ModeRegister",
    "PureState",
    "DensityOperator",
    "FockError",
    "TruncationError",
    "UndefinedCorrelation",
    "vacuum",
    "basis_state",
    "tensor_product",
    "apply_ladder",
    "number_expectation",
    "g2_between",
    "partial_trace",
    "entropy",
    "mutual_information",
    "beamsplitter",
    "DEFAULT_CUTOFF",
]

DEFAULT_CUTOFF = 2
EIGENVALUE_FLOOR = 1e-12
NORM_TOL = 1e-9


class FockError(ValueError):
    """Invalid mode, register or state for the requested operation."""


class TruncationError(FockError):
    """An operation would populate an occupation above the register cutoff."""


class UndefinedCorrelation(ArithmeticError):
    """A normalized correlation has a vanishing denominator."""


class Energy(str, enum.Enum):
    B = "B"
    X = "X"


class Bin(str, enum.Enum):
    EARLY = "e"
    LATE = "l"


class Spatial(str, enum.Enum):
    A = "a"
    B = "b"
    C = "c"
    D = "d"
    NONE = "none"


@dataclass(frozen=True, order=True)
class ModeLabel:
    energy: Energy
    bin: Bin
    spatial: Spatial = Spatial.NONE

    def __post_init__(self):
        object.__setattr__(self, "energy", Energy(self.energy))
        object.__setattr__(self, "bin", Bin(self.bin))
        object.__setattr__(self, "spatial", Spatial(self.spatial))

    def __str__(self):
        s = f"{self.energy.value}_{self.bin.value}"
        if self.spatial is not Spatial.NONE:
            s += f"^{self.spatial.value}"
        return s

    def with_spatial(self, spatial) -> "ModeLabel":
        return ModeLabel(self.energy, self.bin, Spatial(spatial))


@dataclass(frozen=True)
class ModeRegister:
    modes: tuple
    cutoff: int = DEFAULT_CUTOFF

    def __post_init__(self):
        modes = tuple(self.modes)
        object.__setattr__(self, "modes", modes)
        if len(modes) < 1:
            raise FockError("a register needs at least one mode")
        if int(self.cutoff) < 1:
            raise FockError(f"cutoff must be >= 1, got {self.cutoff}")
        seen = set()
        for m in modes:
            if not isinstance(m, ModeLabel):
                raise FockError(f"not a ModeLabel: {m!r}")
            if m in seen:
                raise FockError(f"duplicate mode label {m}")
            seen.add(m)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def local_dim(self) -> int:
        return self.cutoff + 1

    @property
    def dim(self) -> int:
        return self.local_dim ** self.n_modes

    @property
    def shape(self) -> tuple:
        return (self.local_dim,) * self.n_modes

    def index(self, mode: ModeLabel) -> int:
        try:
            return self.modes.index(mode)
        except ValueError:
            raise FockError(f"mode {mode} not in register") from None

    def indices(self, modes: Iterable[ModeLabel]) -> list:
        return [self.index(m) for m in modes]

    def subregister(self, modes: Sequence[ModeLabel]) -> "ModeRegister":
        return ModeRegister(tuple(modes), self.cutoff)


@dataclass(frozen=True, eq=False)
class PureState:
    """State vector over ``register``; ``tensor`` has one axis per mode.

    ``normalized=False`` flags intermediates such as the output of a ladder
    operator.
    """

    register: ModeRegister
    tensor: np.ndarray = field(repr=False)
    normalized: bool = True

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=complex)
        if t.shape != self.register.shape:
            raise FockError(f"tensor shape {t.shape} does not match register {self.register.shape}")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "tensor", t)
        if self.normalized and abs(self.norm_sq() - 1.0) > NORM_TOL:
            raise FockError(f"state flagged normalized has norm^2 {self.norm_sq():.12g}")

    @classmethod
    def from_amplitudes(cls, register: ModeRegister, amplitudes: dict, normalize: bool = False) -> "PureState":
        """Build from ``{occupation tuple: amplitude}``."""
        t = np.zeros(register.shape, dtype=complex)
        for occ, amp in amplitudes.items():
            occ = tuple(int(n) for n in occ)
            if len(occ) != register.n_modes:
                raise FockError(f"occupation {occ} has wrong length for {register.n_modes} modes")
            if any(n < 0 or n > register.cutoff for n in occ):
                raise TruncationError(f"occupation {occ} exceeds cutoff {register.cutoff}")
            t[occ] += amp
        if normalize:
            nrm = np.linalg.norm(t)
            if nrm == 0:
                raise FockError("cannot normalize the zero vector")
            t = t / nrm
        return cls(register, t)

    @property
    def modes(self) -> tuple:
        return self.register.modes

    @property
    def vector(self) -> np.ndarray:
        return self.tensor.reshape(-1)

    def norm_sq(self) -> float:
        return float(np.vdot(self.tensor, self.tensor).real)

    def amplitude(self, occupation) -> complex:
        occ = tuple(int(n) for n in occupation)
        if any(n > self.register.cutoff for n in occ):
            return 0j
        return complex(self.tensor[occ])

    def amplitudes(self, tol: float = 1e-15) -> dict:
        """Nonzero amplitudes keyed by occupation tuple, in lexicographic order."""
        nz = np.argwhere(np.abs(self.tensor) > tol)
        return {tuple(int(i) for i in idx): complex(self.tensor[tuple(idx)]) for idx in nz}

    def is_zero(self, tol: float = 1e-15) -> bool:
        return not np.any(np.abs(self.tensor) > tol)

    def normalize(self) -> "PureState":
        n = math.sqrt(self.norm_sq())
        if n == 0:
            raise FockError("cannot normalize the zero vector")
        return PureState(self.register, self.tensor / n)

    def reorder(self, modes: Sequence[ModeLabel]) -> "PureState":
        """Same state with axes permuted into the given mode order."""
        perm = self.register.indices(modes)
        if sorted(perm) != list(range(self.register.n_modes)):
            raise FockError("reorder needs a permutation of all register modes")
        return PureState(ModeRegister(tuple(modes), self.register.cutoff),
                         np.transpose(self.tensor, perm), self.normalized)

    def __str__(self):
        header = " ".join(str(m) for m in self.modes)
        lines = [f"# {header}"]
        for occ, amp in self.amplitudes(tol=1e-14).items():
            lines.append(f"{''.join(str(n) for n in occ)} : {amp.real:+.12f}{amp.imag:+.12f}j")
        return "\n".join(lines)


@dataclass(frozen=True, eq=False)
class DensityOperator:
    register: ModeRegister
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        d = self.register.dim
        if m.shape != (d, d):
            raise FockError(f"matrix shape {m.shape} does not match register dimension {d}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_pure(cls, state: PureState) -> "DensityOperator":
        v = state.vector
        return cls(state.register, np.outer(v, v.conj()))

    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def check(self, herm_tol: float = 1e-12, trace_tol: float = 1e-9, eig_tol: float = 1e-9) -> None:
        """Raise FockError unless Hermitian, unit-trace and positive semidefinite."""
        if np.max(np.abs(self.matrix - self.matrix.conj().T)) > herm_tol:
            raise FockError("density operator is not Hermitian")
        if abs(self.trace() - 1.0) > trace_tol:
            raise FockError(f"density operator trace {self.trace():.12g} != 1")
        if self.eigenvalues().min() < -eig_tol:
            raise FockError("density operator has negative eigenvalues")


def vacuum(modes: Sequence[ModeLabel], cutoff: int = DEFAULT_CUTOFF) -> PureState:
    return basis_state(modes, (0,) * len(modes), cutoff)


def basis_state(modes: Sequence[ModeLabel], occupation, cutoff: int = DEFAULT_CUTOFF) -> PureState:
    reg = ModeRegister(tuple(modes), cutoff)
    return PureState.from_amplitudes(reg, {tuple(occupation): 1.0})


def tensor_product(s1: PureState, s2: PureState) -> PureState:
    if s1.register.cutoff != s2.register.cutoff:
        raise FockError("tensor product needs equal cutoffs")
    shared = set(s1.modes) & set(s2.modes)
    if shared:
        raise FockError(f"overlapping mode label {sorted(shared)[0]}")
    reg = ModeRegister(s1.modes + s2.modes, s1.register.cutoff)
    t = np.multiply.outer(s1.tensor, s2.tensor)
    return PureState(reg, t, normalized=s1.normalized and s2.normalized)


def _lower_tensor(t: np.ndarray, axis: int) -> np.ndarray:
    cutoff = t.shape[axis] - 1
    out = np.zeros_like(t)
    src = [slice(None)] * t.ndim
    dst = [slice(None)] * t.ndim
    src[axis] = slice(1, None)
    dst[axis] = slice(0, cutoff)
    shape = [1] * t.ndim
    shape[axis] = cutoff
    out[tuple(dst)] = t[tuple(src)] * np.sqrt(np.arange(1, cutoff + 1)).reshape(shape)
    return out


def _raise_tensor(t: np.ndarray, axis: int) -> np.ndarray:
    cutoff = t.shape[axis] - 1
    top = np.take(t, cutoff, axis=axis)
    if np.any(np.abs(top) > 0):
        raise TruncationError(f"raising would exceed cutoff {cutoff}")
    out = np.zeros_like(t)
    src = [slice(None)] * t.ndim
    dst = [slice(None)] * t.ndim
    src[axis] = slice(0, cutoff)
    dst[axis] = slice(1, None)
    shape = [1] * t.ndim
    shape[axis] = cutoff
    out[tuple(dst)] = t[tuple(src)] * np.sqrt(np.arange(1, cutoff + 1)).reshape(shape)
    return out


def apply_ladder(state: PureState, mode: ModeLabel, direction: str) -> PureState:
    """Apply ``a`` (``"lower"``) or ``a†`` (``"raise"``) on one mode; the result is unnormalized."""
    axis = state.register.index(mode)
    if direction == "lower":
        t = _lower_tensor(state.tensor, axis)
    elif direction == "raise":
        t = _raise_tensor(state.tensor, axis)
    else:
        raise FockError(f"direction must be 'lower' or 'raise', got {direction!r}")
    return PureState(state.register, t, normalized=False)


def _as_modes(mode) -> list:
    if isinstance(mode, ModeLabel):
        return [mode]
    modes = list(mode)
    if not modes:
        raise FockError("empty mode set")
    return modes


def _occupation_grid(register: ModeRegister, axis: int) -> np.ndarray:
    shape = [1] * register.n_modes
    shape[axis] = register.local_dim
    return np.arange(register.local_dim).reshape(shape)


def number_expectation(state: PureState, mode) -> float:
    """<a†a> for one mode, or the summed number operator of several modes."""
    probs = np.abs(state.tensor) ** 2
    total = 0.0
    for m in _as_modes(mode):
        axis = state.register.index(m)
        total += float(np.sum(probs * _occupation_grid(state.register, axis)))
    return total


def _normal_ordered_pair(state: PureState, m1: ModeLabel, m2: ModeLabel) -> float:
    # <a1† a2† a2 a1> = || a2 a1 psi ||^2
    t = _lower_tensor(state.tensor, state.register.index(m1))
    t = _lower_tensor(t, state.register.index(m2))
    return float(np.vdot(t, t).real)


def g2_between(state: PureState, mode1, mode2, tol: float = 1e-12) -> float:
    """Normalized second-order correlation between two modes.

    ``mode1``/``mode2`` may each be a collection of modes, in which case the
    composite number operators are used and the numerator is the sum of the
    normally-ordered pair terms.
    """
    modes1, modes2 = _as_modes(mode1), _as_modes(mode2)
    n1 = number_expectation(state, modes1)
    n2 = number_expectation(state, modes2)
    if n1 <= tol or n2 <= tol:
        raise UndefinedCorrelation("mean photon number vanishes in one of the modes")
    num = 0.0
    for a in modes1:
        for b in modes2:
            num += _normal_ordered_pair(state, a, b)
    return num / (n1 * n2)


def partial_trace(state, keep: Sequence[ModeLabel]) -> DensityOperator:
    """Reduced density operator on ``keep`` (in the order given)."""
    keep = list(keep)
    if not keep:
        raise FockError("keep-set must be nonempty")
    reg = state.register
    if len(set(keep)) != len(keep):
        raise FockError("duplicate modes in keep-set")
    kidx = reg.indices(keep)
    ridx = [i for i in range(reg.n_modes) if i not in kidx]
    sub = reg.subregister(keep)
    dk = sub.dim
    if isinstance(state, PureState):
        t = np.transpose(state.tensor, kidx + ridx).reshape(dk, -1)
        return DensityOperator(sub, t @ t.conj().T)
    if isinstance(state, DensityOperator):
        n = reg.n_modes
        t = state.matrix.reshape(reg.shape + reg.shape)
        perm = kidx + ridx + [n + i for i in kidx] + [n + i for i in ridx]
        dr = reg.dim // dk
        t = np.transpose(t, perm).reshape(dk, dr, dk, dr)
        return DensityOperator(sub, np.einsum("ajbj->ab", t))
    raise TypeError(f"expected PureState or DensityOperator, got {type(state).__name__}")


def entropy(rho: DensityOperator) -> float:
    """Von Neumann entropy in bits."""
    lam = rho.eigenvalues()
    lam = lam[lam > EIGENVALUE_FLOOR]
    return float(max(0.0, -np.sum(lam * np.log2(lam))))


def mutual_information(state: PureState, part1: Sequence[ModeLabel], part2: Sequence[ModeLabel]) -> float:
    part1, part2 = list(part1), list(part2)
    if not part1 or not part2:
        raise FockError("both parts must be nonempty")
    if set(part1) & set(part2):
        raise FockError("parts overlap")
    if set(part1) | set(part2) != set(state.modes) or len(part1) + len(part2) != state.register.n_modes:
        raise FockError("parts must partition the register")
    s1 = entropy(partial_trace(state, part1))
    s2 = entropy(partial_trace(state, part2))
    s12 = entropy(partial_trace(state, list(state.modes)))
    return s1 + s2 - s12


def _bs_matrix(cutoff: int, transmittance: float) -> np.ndarray:
    """U[nc, nd, na, nb] for the two-mode transformation, output axes up to 2*cutoff."""
    t = math.sqrt(transmittance)
    r = math.sqrt(1.0 - transmittance)
    out_dim = 2 * cutoff + 1
    U = np.zeros((out_dim, out_dim, cutoff + 1, cutoff + 1))
    for na in range(cutoff + 1):
        for nb in range(cutoff + 1):
            pref = 1.0 / math.sqrt(math.factorial(na) * math.factorial(nb))
            # (t c† + r d†)^na (r c† - t d†)^nb |0>
            for i in range(na + 1):
                ca = math.comb(na, i) * t ** i * r ** (na - i)
                for j in range(nb + 1):
                    cb = math.comb(nb, j) * r ** j * (-t) ** (nb - j)
                    nc = i + j
                    nd = na + nb - nc
                    U[nc, nd, na, nb] += pref * ca * cb * math.sqrt(math.factorial(nc) * math.factorial(nd))
    return U


def beamsplitter(state: PureState, pairs, transmittance: float = 0.5, tol: float = 1e-12) -> PureState:
    """Apply a lossless beamsplitter to each ``(in1, in2, out1, out2)`` mode quadruple.

    Creation operators map as ``a† -> √T c† + √(1-T) d†`` and
    ``b† -> √(1-T) c† - √T d†``.  The transformation matrix is its own inverse,
    so feeding the outputs back in as inputs recovers the original state.
    Output labels take the axis positions of their inputs.
    """
    if not 0.0 <= transmittance <= 1.0:
        raise FockError(f"transmittance must lie in [0, 1], got {transmittance}")
    reg = state.register
    cutoff = reg.cutoff
    U = _bs_matrix(cutoff, transmittance)
    modes = list(reg.modes)
    t = state.tensor
    for a, b, c, d in pairs:
        if (a.energy, a.bin) != (b.energy, b.bin):
            raise FockError(f"beamsplitter inputs {a} and {b} differ in energy or time bin")
        if a.spatial == b.spatial:
            raise FockError(f"beamsplitter inputs {a} and {b} share a spatial mode")
        ia, ib = reg.index(a), reg.index(b)
        # move the pair to the front, transform, move back
        rest = [i for i in range(t.ndim) if i not in (ia, ib)]
        tt = np.transpose(t, [ia, ib] + rest)
        out = np.tensordot(U, tt, axes=([2, 3], [0, 1]))
        if np.any(np.abs(out[cutoff + 1:]) > tol) or np.any(np.abs(out[:, cutoff + 1:]) > tol):
            raise TruncationError(f"beamsplitter output on ({c}, {d}) exceeds cutoff {cutoff}")
        out = out[: cutoff + 1, : cutoff + 1]
        t = np.transpose(out, np.argsort([ia, ib] + rest))
        modes[ia], modes[ib] = c, d
    new_reg = ModeRegister(tuple(modes), cutoff)
    return PureState(new_reg, t, normalized=state.normalized)


def all_occupations(register: ModeRegister):
    return itertools.product(range(register.local_dim), repeat=register.n_modes)
