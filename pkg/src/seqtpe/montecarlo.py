"""Classical Monte Carlo emulation of the two-pulse experiment.

Each laser cycle draws a cascade history (exponential decays, pulse success
with probability ``prep_fidelity``), turns it into emission events, and a
detector model turns events into integer-picosecond time tags.

Random numbers come from counter-based Philox substreams keyed by
``(seed, block, purpose)``, where a block is a fixed run of
``BLOCK_CYCLES`` consecutive cycles.  Blocks are simulated independently,
so the merged stream does not depend on how many workers were used.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .fock import Energy, UndefinedCorrelation
from .protocol import CascadeParams, coefficients, hom_g2_analytic, mean_photon_number
from .tagio import HOM_CHANNEL_MAP, TagStream, TimeTag

__all__ = [
    "Polarization",
    "EmissionEvent",
    "DetectorModel",
    "ExperimentConfig",
    "PhaseModel",
    "EmissionRecord",
    "block_rng",
    "simulate_cycle",
    "simulate_cycles",
    "expected_click_rate",
    "expected_photon_ratio",
    "simulate_emissions",
    "detect",
    "run_experiment",
    "synth_hom_stream",
    "apply_deadtime",
]

BLOCK_CYCLES = 1 << 16
_EMISSION, _DETECTION = 0, 1


class Polarization(str, enum.Enum):
    H = "H"
    V = "V"


@dataclass(frozen=True)
class EmissionEvent:
    kind: Energy
    cascade_index: int
    time: float
    polarization: Polarization


@dataclass(frozen=True)
class DetectorModel:
    """Four-channel detection: each energy goes to a fiber splitter and two detectors.

    ``efficiency`` is either one value for all channels or a mapping
    ``{channel: efficiency}``.  Times in ps, dark rate in Hz.
    """

    efficiency: float | dict = 1.0
    jitter_sigma: float = 0.0
    deadtime: float = 0.0
    dark_rate: float = 0.0
    splitter_ratio: float = 0.5
    polarization_filter: str = "none"
    channel_map: dict = field(default_factory=lambda: {"B": (1, 2), "X": (3, 4)})

    def __post_init__(self):
        chans = [c for pair in self.channel_map.values() for c in pair]
        if len(set(chans)) != len(chans):
            raise ValueError(f"channel ids must be distinct, got {chans}")
        if not 0.0 <= self.splitter_ratio <= 1.0:
            raise ValueError(f"splitter_ratio must lie in [0, 1], got {self.splitter_ratio}")
        if self.polarization_filter not in ("H", "V", "none"):
            raise ValueError(f"polarization_filter must be H, V or none, got {self.polarization_filter!r}")
        if self.jitter_sigma < 0 or self.deadtime < 0 or self.dark_rate < 0:
            raise ValueError("jitter_sigma, deadtime and dark_rate must be non-negative")
        for ch in chans:
            if not 0.0 <= self.channel_efficiency(ch) <= 1.0:
                raise ValueError(f"efficiency of channel {ch} outside [0, 1]")

    @classmethod
    def ideal(cls, **kw) -> "DetectorModel":
        return cls(**kw)

    @classmethod
    def lab(cls, **kw) -> "DetectorModel":
        """Detection settings of the reported setup: 80 % SNSPDs, 40 ps jitter, 100 ns dead time."""
        base = dict(efficiency=0.8, jitter_sigma=40.0, deadtime=100_000.0, dark_rate=50.0,
                    polarization_filter="H")
        base.update(kw)
        return cls(**base)

    @property
    def channels(self) -> list:
        return sorted(c for pair in self.channel_map.values() for c in pair)

    def channel_efficiency(self, channel: int) -> float:
        if isinstance(self.efficiency, dict):
            return float(self.efficiency.get(channel, self.efficiency.get(str(channel), 0.0)))
        return float(self.efficiency)

    def channel_map_header(self) -> str:
        return ",".join(f"{c}:{e}" for c, e in sorted((c, e) for e, pair in self.channel_map.items() for c in pair))


@dataclass(frozen=True)
class ExperimentConfig:
    """One simulated measurement run.

    ``pulse_offset`` places the first pulse inside the cycle so that timing
    jitter never produces negative or wrapped times.  ``failed_pulse_policy``
    decides what the second pulse does in cycles where the first one failed:
    ``"inert"`` (the emitter was unavailable for the whole cycle) or
    ``"reexcite"`` (the second pulse acts on the ground state like any other).
    """

    params: CascadeParams = field(default_factory=CascadeParams)
    detector: DetectorModel = field(default_factory=DetectorModel)
    rep_period: int = 12_500
    n_cycles: int = 1000
    seed: int = 0
    second_pulse: bool = True
    pulse_offset: float = 1000.0
    min_delta_t: float = 12.0
    failed_pulse_policy: str = "inert"

    def __post_init__(self):
        if self.n_cycles < 0:
            raise ValueError("n_cycles must be >= 0")
        if self.rep_period <= 0:
            raise ValueError("rep_period must be positive")
        if not self.params.delta_t < self.rep_period:
            raise ValueError(f"delta_t={self.params.delta_t} must be smaller than rep_period={self.rep_period}")
        if self.second_pulse and self.params.delta_t < self.min_delta_t:
            raise ValueError(f"delta_t={self.params.delta_t} below the minimum pulse separation {self.min_delta_t}")
        if not 0 <= self.pulse_offset < self.rep_period:
            raise ValueError("pulse_offset must lie inside the repetition period")
        if self.failed_pulse_policy not in ("inert", "reexcite"):
            raise ValueError(f"unknown failed_pulse_policy {self.failed_pulse_policy!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def header(self) -> dict:
        p, d = self.params, self.detector
        return {
            "rep_period_ps": str(int(self.rep_period)),
            "n_cycles": str(int(self.n_cycles)),
            "channel_map": d.channel_map_header(),
            "seed": str(int(self.seed)),
            "tau_b_ps": repr(float(p.tau_B)),
            "tau_x_ps": repr(float(p.tau_X)),
            "delta_t_ps": repr(float(p.delta_t)),
            "prep_fidelity": repr(float(p.prep_fidelity)),
            "second_pulse": str(bool(self.second_pulse)).lower(),
            "pulse_offset_ps": repr(float(self.pulse_offset)),
            "failed_pulse_policy": self.failed_pulse_policy,
            "efficiency": repr(d.efficiency),
            "jitter_ps": repr(float(d.jitter_sigma)),
            "deadtime_ps": repr(float(d.deadtime)),
            "dark_rate_hz": repr(float(d.dark_rate)),
            "split_ratio": repr(float(d.splitter_ratio)),
            "polarization_filter": d.polarization_filter,
        }


@dataclass(frozen=True)
class EmissionRecord:
    """Columnar emission events; ``kind`` 0 = B, 1 = X; ``pol`` 0 = H, 1 = V."""

    cycle: np.ndarray
    kind: np.ndarray
    cascade: np.ndarray
    time: np.ndarray
    pol: np.ndarray

    def __len__(self):
        return len(self.cycle)

    def photons_per_cycle(self, n_cycles: int) -> np.ndarray:
        return np.bincount(self.cycle, minlength=n_cycles)


def block_rng(seed: int, block: int, purpose: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(block), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


def simulate_cycles(params: CascadeParams, n: int, rng: np.random.Generator, *,
                    second_pulse: bool = True, failed_pulse_policy: str = "inert") -> EmissionRecord:
    """Vectorized cascade histories for ``n`` cycles; times relative to the first pulse."""
    F = params.prep_fidelity
    dt = params.delta_t
    exc1 = rng.random(n) < F
    tB1 = rng.exponential(params.tau_B, n)
    tX1 = tB1 + rng.exponential(params.tau_X, n)
    pol1 = rng.integers(0, 2, n)
    pulse2 = rng.random(n) < F
    tB2 = dt + rng.exponential(params.tau_B, n)
    tX2 = tB2 + rng.exponential(params.tau_X, n)
    pol2 = rng.integers(0, 2, n)

    if second_pulse:
        in_B = exc1 & (tB1 >= dt)
        in_X = exc1 & (tB1 < dt) & (dt <= tX1)
        ground = exc1 & (tX1 < dt)
        emit1 = (in_B & ~pulse2) | in_X | ground
        ground2 = ground | (~exc1 if failed_pulse_policy == "reexcite" else np.zeros(n, bool))
        emit2 = ground2 & pulse2
    else:
        emit1 = exc1
        emit2 = np.zeros(n, bool)

    idx = np.arange(n, dtype=np.int64)
    c1, c2 = idx[emit1], idx[emit2]
    cycle = np.concatenate([c1, c1, c2, c2])
    kind = np.concatenate([np.zeros(len(c1)), np.ones(len(c1)), np.zeros(len(c2)), np.ones(len(c2))]).astype(np.int8)
    cascade = np.concatenate([np.ones(2 * len(c1)), np.full(2 * len(c2), 2)]).astype(np.int8)
    time = np.concatenate([tB1[emit1], tX1[emit1], tB2[emit2], tX2[emit2]])
    pol = np.concatenate([pol1[emit1], pol1[emit1], pol2[emit2], pol2[emit2]]).astype(np.int8)
    order = np.lexsort((time, cycle))
    return EmissionRecord(cycle[order], kind[order], cascade[order], time[order], pol[order])


def _photon_number_probs(params: CascadeParams, second_pulse: bool, failed_pulse_policy: str) -> tuple:
    """(P(1), P(2)) for the photons of one energy in one cycle of :func:`simulate_cycles`."""
    F = params.prep_fidelity
    if not second_pulse:
        return F, 0.0
    a, b, g = coefficients(params)
    p2 = F * F * g
    p1 = F * ((1.0 - F) * a + b + g) - p2
    if failed_pulse_policy == "reexcite":
        p1 += (1.0 - F) * F
    return p1, p2


def _dead_cycles(deadtime: float, rep_period: float) -> float:
    # later cycles blocked by a click; at an exact multiple the next tag survives half the time
    k = deadtime / rep_period
    if k <= 0:
        return 0.0
    if math.isclose(k, round(k)):
        return round(k) - 0.5
    return math.ceil(k) - 1.0


def expected_click_rate(params: CascadeParams, detector: DetectorModel, energy: str = "B",
                        rep_period: float = 12_500, second_pulse: bool = True,
                        failed_pulse_policy: str = "inert") -> float:
    """Expected tags per cycle on the two channels of ``energy``.

    Two photons of one energy in one cycle reaching the same detector give a
    single click (the dead time exceeds the cycle); across cycles the channel
    is treated as a non-paralyzable counter.
    """
    p1, p2 = _photon_number_probs(params, second_pulse, failed_pulse_policy)
    pol = 1.0 if detector.polarization_filter == "none" else 0.5
    first, second = detector.channel_map[energy]
    dead = _dead_cycles(detector.deadtime, rep_period)
    total = 0.0
    for ch, split in ((first, detector.splitter_ratio), (second, 1.0 - detector.splitter_ratio)):
        q = detector.channel_efficiency(ch) * pol * split
        r = p1 * q + p2 * (1.0 - (1.0 - q) ** 2) + detector.dark_rate * rep_period * 1e-12
        total += r / (1.0 + r * dead)
    return total


def expected_photon_ratio(params: CascadeParams, detector: DetectorModel | None = None,
                          rep_period: float = 12_500, failed_pulse_policy: str = "inert",
                          energy: str = "B") -> float:
    """Two-pulse over single-pulse tag rate of one energy, as the simulator should give it.

    Without a detector this is the photon-number ratio ``1 - F (alpha^2 - gamma^2)``,
    which equals the mean photon number when ``prep_fidelity == 1``.
    """
    F = params.prep_fidelity
    if F <= 0:
        raise UndefinedCorrelation("single-pulse run emits nothing at zero fidelity")
    if detector is None:
        p1, p2 = _photon_number_probs(params, True, failed_pulse_policy)
        return (p1 + 2.0 * p2) / F
    two = expected_click_rate(params, detector, energy, rep_period, True, failed_pulse_policy)
    one = expected_click_rate(params, detector, energy, rep_period, False)
    return two / one


def simulate_cycle(params: CascadeParams, rng: np.random.Generator, **kw) -> list:
    """Emission events of a single cycle, ordered in time."""
    rec = simulate_cycles(params, 1, rng, **kw)
    return [
        EmissionEvent(Energy.B if k == 0 else Energy.X, int(c), float(t), Polarization.H if p == 0 else Polarization.V)
        for k, c, t, p in zip(rec.kind, rec.cascade, rec.time, rec.pol)
    ]


@numba.njit(cache=True)
def _deadtime_mask(channel, time, deadtime, channels):
    keep = np.ones(len(time), dtype=np.bool_)
    last = np.empty(len(channels), dtype=np.int64)
    seen = np.zeros(len(channels), dtype=np.bool_)
    for i in range(len(time)):
        k = -1
        for j in range(len(channels)):
            if channels[j] == channel[i]:
                k = j
                break
        if seen[k] and time[i] - last[k] < deadtime:
            keep[i] = False
        else:
            last[k] = time[i]
            seen[k] = True
    return keep


def apply_deadtime(channel: np.ndarray, time: np.ndarray, deadtime: float) -> np.ndarray:
    """Boolean mask of tags accepted by independent per-channel dead times (sorted input)."""
    if deadtime <= 0 or len(time) == 0:
        return np.ones(len(time), dtype=bool)
    chans = np.unique(channel)
    return _deadtime_mask(channel, time, float(deadtime), chans)


def _detect_arrays(kind, pol, abs_time, detector: DetectorModel, rng: np.random.Generator,
                   window_start: float, window_len: float):
    """Filter, route, lose, jitter and add dark counts; dead time is applied by the caller."""
    n = len(kind)
    keep = np.ones(n, bool)
    if detector.polarization_filter != "none":
        keep &= pol == (0 if detector.polarization_filter == "H" else 1)
    route_first = rng.random(n) < detector.splitter_ratio
    lost_u = rng.random(n)
    jitter = rng.normal(0.0, 1.0, n) * detector.jitter_sigma
    chan = np.empty(n, np.int64)
    for e_code, energy in ((0, "B"), (1, "X")):
        first, second = detector.channel_map[energy]
        sel = kind == e_code
        chan[sel] = np.where(route_first[sel], first, second)
    lut = np.zeros(max(detector.channels) + 1)
    for ch in detector.channels:
        lut[ch] = detector.channel_efficiency(ch)
    keep &= lost_u < lut[chan]
    t = np.floor(abs_time[keep] + jitter[keep]).astype(np.int64)
    c = chan[keep]

    if detector.dark_rate > 0:
        mean = detector.dark_rate * window_len * 1e-12
        dark_c, dark_t = [], []
        for ch in detector.channels:
            k = rng.poisson(mean)
            dark_t.append(np.floor(window_start + rng.random(k) * window_len).astype(np.int64))
            dark_c.append(np.full(k, ch, np.int64))
        c = np.concatenate([c] + dark_c)
        t = np.concatenate([t] + dark_t)
    ok = t >= 0
    return c[ok], t[ok]


def detect(events, detector: DetectorModel, cycle_start: float, rng: np.random.Generator,
           rep_period: float = 12_500) -> list:
    """Time tags produced by one cycle's emission events (times relative to ``cycle_start``)."""
    kind = np.array([0 if e.kind == Energy.B else 1 for e in events], dtype=np.int8)
    pol = np.array([0 if e.polarization == Polarization.H else 1 for e in events], dtype=np.int8)
    t = np.array([e.time for e in events], dtype=float) + cycle_start
    c, tt = _detect_arrays(kind, pol, t, detector, rng, cycle_start, rep_period)
    order = np.lexsort((c, tt))
    c, tt = c[order], tt[order]
    mask = apply_deadtime(c, tt, detector.deadtime)
    return [TimeTag(int(a), int(b)) for a, b in zip(c[mask], tt[mask])]


def _block_bounds(n_cycles: int) -> list:
    return [(b, b * BLOCK_CYCLES, min(n_cycles, (b + 1) * BLOCK_CYCLES))
            for b in range(math.ceil(n_cycles / BLOCK_CYCLES))]


def _emit_block(config: ExperimentConfig, block: int, start: int, stop: int) -> EmissionRecord:
    rng = block_rng(config.seed, block, _EMISSION)
    rec = simulate_cycles(config.params, stop - start, rng, second_pulse=config.second_pulse,
                          failed_pulse_policy=config.failed_pulse_policy)
    return EmissionRecord(rec.cycle + start, rec.kind, rec.cascade, rec.time, rec.pol)


def _run_block(args):
    config, block, start, stop = args
    rec = _emit_block(config, block, start, stop)
    rng = block_rng(config.seed, block, _DETECTION)
    abs_time = rec.cycle * float(config.rep_period) + config.pulse_offset + rec.time
    return _detect_arrays(rec.kind, rec.pol, abs_time, config.detector, rng,
                          start * float(config.rep_period), (stop - start) * float(config.rep_period))


def simulate_emissions(config: ExperimentConfig) -> EmissionRecord:
    """All emission events of a run (before detection), same substreams as :func:`run_experiment`."""
    parts = [_emit_block(config, b, s, e) for b, s, e in _block_bounds(config.n_cycles)]
    if not parts:
        z = np.zeros(0)
        return EmissionRecord(z.astype(np.int64), z.astype(np.int8), z.astype(np.int8), z, z.astype(np.int8))
    return EmissionRecord(*(np.concatenate([getattr(p, f) for p in parts])
                            for f in ("cycle", "kind", "cascade", "time", "pol")))


def run_experiment(config: ExperimentConfig, workers: int = 1) -> TagStream:
    """Simulate ``config.n_cycles`` cycles and return the sorted tag stream.

    The stream header carries the run metadata (cycle count and config echo).
    """
    jobs = [(config, b, s, e) for b, s, e in _block_bounds(config.n_cycles)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, jobs))
    else:
        parts = [_run_block(j) for j in jobs]
    header = config.header()
    if not parts:
        return TagStream.empty(header)
    c = np.concatenate([p[0] for p in parts])
    t = np.concatenate([p[1] for p in parts])
    order = np.lexsort((c, t))
    c, t = c[order], t[order]
    mask = apply_deadtime(c, t, config.detector.deadtime)
    return TagStream(c[mask], t[mask], header)


@dataclass(frozen=True)
class PhaseModel:
    """Interferometer phase: fixed, or redrawn uniformly every ``stability_interval`` seconds."""

    kind: str = "random"
    phi: float = 0.0
    stability_interval: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "random"):
            raise ValueError(f"unknown phase model {self.kind!r}")
        if self.stability_interval <= 0:
            raise ValueError("stability_interval must be positive")

    def draw(self, n_segments: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n_segments, float(self.phi))
        return rng.uniform(0.0, 2 * math.pi, n_segments)


def _bernoulli_positions(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of successes among ``n`` Bernoulli(p) trials, via geometric gaps."""
    if p <= 0 or n <= 0:
        return np.zeros(0, np.int64)
    if p >= 1:
        return np.arange(n, dtype=np.int64)
    chunks, pos = [], -1
    batch = int(n * p + 6 * math.sqrt(n * p) + 16)
    while pos < n - 1:
        gaps = rng.geometric(p, batch)
        steps = pos + np.cumsum(gaps)
        chunks.append(steps)
        pos = int(steps[-1])
    allpos = np.concatenate(chunks)
    return allpos[allpos < n]


def synth_hom_stream(params: CascadeParams, phase_model: PhaseModel, detector: DetectorModel,
                     duration_s: float, rng: np.random.Generator, rep_period: int = 12_500,
                     pulse_offset: float = 1000.0) -> TagStream:
    """Click stream at the two interferometer outputs (channels 1 = c, 2 = d).

    Per cycle, output c clicks with probability ``p_c = eta_1 * 2 mu``, d with
    ``p_d = eta_2 * 2 mu``, and both with ``g2(phi) * p_c * p_d``, where phi is
    the phase of the current stability interval.  Cycles are independent, so
    side-peak coincidences occur at rate ``p_c * p_d``.
    """
    mu = mean_photon_number(params)
    if mu <= 0:
        raise UndefinedCorrelation("no photons emitted")
    p_c = min(1.0, detector.channel_efficiency(1) * 2 * mu)
    p_d = min(1.0, detector.channel_efficiency(2) * 2 * mu)
    n_total = int(round(duration_s * 1e12 / rep_period))
    seg_len = max(1, int(round(phase_model.stability_interval * 1e12 / rep_period)))
    n_seg = math.ceil(n_total / seg_len) if n_total else 0
    phases = phase_model.draw(n_seg, rng)
    chans, times = [], []
    for s in range(n_seg):
        start, stop = s * seg_len, min(n_total, (s + 1) * seg_len)
        g2 = hom_g2_analytic(params, phases[s])
        p_both = min(g2 * p_c * p_d, p_c, p_d)
        p_any = p_c + p_d - p_both
        cyc = _bernoulli_positions(stop - start, p_any, rng) + start
        u = rng.random(len(cyc)) * p_any
        both = u < p_both
        c_only = (u >= p_both) & (u < p_c)
        d_only = u >= p_c
        c_cyc = cyc[both | c_only]
        d_cyc = cyc[both | d_only]
        chans += [np.ones(len(c_cyc), np.int64), np.full(len(d_cyc), 2, np.int64)]
        times += [c_cyc, d_cyc]
    header = {"rep_period_ps": str(rep_period), "n_cycles": str(n_total), "channel_map": HOM_CHANNEL_MAP,
              "tau_b_ps": repr(float(params.tau_B)), "tau_x_ps": repr(float(params.tau_X)),
              "delta_t_ps": repr(float(params.delta_t)), "phase_model": phase_model.kind,
              "stability_interval_s": repr(float(phase_model.stability_interval))}
    if not chans:
        return TagStream.empty(header)
    c = np.concatenate(chans)
    cyc = np.concatenate(times)
    t = cyc * float(rep_period) + pulse_offset + rng.normal(0.0, 1.0, len(cyc)) * detector.jitter_sigma
    t = np.floor(t).astype(np.int64)
    if detector.dark_rate > 0:
        window = n_total * float(rep_period)
        extra_c, extra_t = [], []
        for ch in (1, 2):
            k = rng.poisson(detector.dark_rate * window * 1e-12)
            extra_t.append(np.floor(rng.random(k) * window).astype(np.int64))
            extra_c.append(np.full(k, ch, np.int64))
        c = np.concatenate([c] + extra_c)
        t = np.concatenate([t] + extra_t)
    ok = t >= 0
    c, t = c[ok], t[ok]
    order = np.lexsort((c, t))
    c, t = c[order], t[order]
    mask = apply_deadtime(c, t, detector.deadtime)
    return TagStream(c[mask], t[mask], header)
