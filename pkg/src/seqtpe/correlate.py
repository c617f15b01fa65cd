"""From time tags to observables: arrival histograms, EMG onset fits,
two-time correlation maps with quadrant-normalized g2, mean photon number
ratios, and windowed HOM correlations.

The estimator classes follow the scikit-learn protocol (``get_params``,
``fit`` returning ``self``, learned attributes with a trailing underscore),
so they can be cloned and grid-searched like any other estimator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_bin_width, check_channels, check_positive, check_stream
from .tagio import TagStream

__all__ = [
    "Histogram1D",
    "EMGFit",
    "FitError",
    "CorrelationMap2D",
    "QuadrantResult",
    "MuPoint",
    "HomWindowResult",
    "QUADRANTS",
    "arrival_histogram",
    "emg_pdf",
    "emg_cdf",
    "emg_bin_counts",
    "EMGRegressor",
    "fit_emg",
    "two_time_map",
    "quadrant_g2",
    "QuadrantCorrelator",
    "mean_photon_curve",
    "coincidence_counts",
    "hom_windowed_g2",
    "HOMWindowedG2",
]

QUADRANTS = ("ee", "el", "le", "ll")
SQRT2 = math.sqrt(2.0)


class FitError(RuntimeError):
    """Fit did not converge or found no decaying structure; ``best`` holds the last iterate."""

    def __init__(self, message: str, best: "EMGFit | None" = None):
        super().__init__(message)
        self.best = best


# -- histograms -------------------------------------------------------------

@dataclass(frozen=True)
class Histogram1D:
    bin_width: float
    origin: float
    counts: np.ndarray

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.size < 1:
            raise ValueError("counts must be a nonempty 1-D array")
        object.__setattr__(self, "counts", counts)

    @property
    def bin_starts(self) -> np.ndarray:
        return self.origin + self.bin_width * np.arange(len(self.counts))

    @property
    def bin_centers(self) -> np.ndarray:
        return self.bin_starts + 0.5 * self.bin_width

    def crop(self, lo: float, hi: float) -> "Histogram1D":
        """Bins whose start lies in ``[lo, hi)``."""
        s = self.bin_starts
        sel = np.flatnonzero((s >= lo) & (s < hi))
        if sel.size == 0:
            raise ValueError("crop range selects no bins")
        return Histogram1D(self.bin_width, float(s[sel[0]]), self.counts[sel[0]: sel[-1] + 1])

    def to_csv(self) -> str:
        rows = ["bin_start_ps,count"]
        rows += [f"{_num(s)},{int(c)}" for s, c in zip(self.bin_starts, self.counts)]
        return "\n".join(rows) + "\n"


def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def arrival_histogram(stream: TagStream, channels, rep_period: int, bin_width: int) -> Histogram1D:
    """Tag times folded modulo the repetition period."""
    stream = check_stream(stream)
    chans = check_channels(channels)
    rep_period, bin_width = check_bin_width(rep_period, bin_width)
    t = stream.time[np.isin(stream.channel, chans)]
    counts = np.bincount((t % rep_period) // bin_width, minlength=rep_period // bin_width)
    return Histogram1D(float(bin_width), 0.0, counts.astype(np.int64))


# -- exponentially modified Gaussian ----------------------------------------

def emg_pdf(t, t0: float, tau: float, sigma: float) -> np.ndarray:
    """Unit-area one-sided exponential (onset t0, decay tau) convolved with a Gaussian of width sigma."""
    u = np.asarray(t, dtype=float) - t0
    if sigma <= 0:
        return np.where(u >= 0, np.exp(-np.maximum(u, 0.0) / tau) / tau, 0.0)
    z = sigma / (SQRT2 * tau) - u / (SQRT2 * sigma)
    out = np.empty_like(z)
    pos = z >= 0
    # exp(s^2/2tau^2 - u/tau) erfc(z) == exp(-u^2/2s^2) erfcx(z); the latter cannot overflow for z >= 0
    out[pos] = np.exp(-0.5 * (u[pos] / sigma) ** 2) * special.erfcx(z[pos])
    neg = ~pos
    out[neg] = np.exp(0.5 * (sigma / tau) ** 2 - u[neg] / tau) * special.erfc(z[neg])
    return out / (2.0 * tau)


def emg_cdf(t, t0: float, tau: float, sigma: float) -> np.ndarray:
    u = np.asarray(t, dtype=float) - t0
    if sigma <= 0:
        return np.where(u > 0, -np.expm1(-np.maximum(u, 0.0) / tau), 0.0)
    return special.ndtr(u / sigma) - tau * emg_pdf(t, t0, tau, sigma)


def emg_bin_counts(bin_starts, bin_width: float, amplitude: float, t0: float, tau: float, sigma: float) -> np.ndarray:
    """Expected counts per bin: amplitude times the model integral over each bin."""
    s = np.asarray(bin_starts, dtype=float)
    return amplitude * (emg_cdf(s + bin_width, t0, tau, sigma) - emg_cdf(s, t0, tau, sigma))


@dataclass(frozen=True)
class EMGFit:
    t0: float
    tau: float
    sigma: float
    amplitude: float
    residual_norm: float
    n_iter: int = 0
    converged: bool = True


class EMGRegressor(RegressorMixin, BaseEstimator):
    """Least-squares EMG fit to a binned arrival-time distribution.

    ``X`` holds the (uniformly spaced) bin start times and ``y`` the counts.
    The amplitude is solved linearly at every step; onset, decay time and
    width are found by Nelder-Mead seeded from a coarse scan over the onset.

    A fit is rejected with :class:`FitError` when the simplex does not meet
    ``tol`` within ``max_iter`` iterations, when the decay time exceeds
    ``max_tau_fraction`` of the histogram span, when the onset falls outside
    the histogram, or when the relative residual norm exceeds
    ``max_residual``.
    """

    def __init__(self, fix_sigma=None, max_iter=4000, tol=1e-6, n_grid=41,
                 max_tau_fraction=0.5, max_residual=0.5, min_populated=20):
        self.fix_sigma = fix_sigma
        self.max_iter = max_iter
        self.tol = tol
        self.n_grid = n_grid
        self.max_tau_fraction = max_tau_fraction
        self.max_residual = max_residual
        self.min_populated = min_populated

    def _shape(self, theta, starts, bw, span):
        t0 = theta[0] * span
        tau = math.exp(theta[1])
        sigma = float(self.fix_sigma) if self.fix_sigma is not None else abs(theta[2]) * bw
        return t0, tau, sigma, emg_bin_counts(starts, bw, 1.0, t0, tau, sigma)

    def fit(self, X, y):
        X = check_array(X, ensure_2d=False, dtype=float).reshape(-1)
        y = check_array(y, ensure_2d=False, dtype=float).reshape(-1)
        if X.shape != y.shape:
            raise ValueError("X and y must have the same length")
        if len(X) < 2:
            raise ValueError("need at least two bins")
        widths = np.diff(X)
        bw = float(widths[0])
        if bw <= 0 or not np.allclose(widths, bw):
            raise ValueError("bin starts must be uniformly increasing")
        if np.count_nonzero(y) < self.min_populated:
            raise FitError(f"histogram has fewer than {self.min_populated} populated bins")

        start, span = float(X[0]), float(X[-1] + bw - X[0])
        norm_y = float(np.linalg.norm(y))

        def objective(theta):
            _, tau, _, s = self._shape(theta, X, bw, span)
            if not np.isfinite(tau) or tau <= 0:
                return np.inf
            ss = float(s @ s)
            if ss <= 0 or not np.isfinite(ss):
                return float(y @ y)
            amp = max(float(s @ y) / ss, 0.0)
            r = amp * s - y
            return float(r @ r)

        peak = int(np.argmax(y))
        t_peak = float(X[peak] + 0.5 * bw)
        after = y[peak:]
        tau0 = max(float(np.sum(after * (X[peak:] + 0.5 * bw - t_peak)) / max(after.sum(), 1.0)), bw)
        sig0 = float(self.fix_sigma) if self.fix_sigma is not None else 2.0 * bw
        lo = max(start, t_peak - 3 * sig0 - 2 * tau0)
        grid = np.linspace(lo, t_peak, self.n_grid)
        seeds = []
        for t0 in grid:
            th = [t0 / span, math.log(tau0)] + ([] if self.fix_sigma is not None else [sig0 / bw])
            seeds.append((objective(th), th))
        th0 = min(seeds, key=lambda s: s[0])[1]

        res = optimize.minimize(
            objective, np.asarray(th0, dtype=float), method="Nelder-Mead",
            options={"maxiter": int(self.max_iter), "xatol": float(self.tol),
                     "fatol": float(self.tol) * max(objective(th0), 1e-300) * 1e-6, "adaptive": True},
        )
        t0, tau, sigma, s = self._shape(res.x, X, bw, span)
        ss = float(s @ s)
        amp = max(float(s @ y) / ss, 0.0) if ss > 0 else 0.0
        resid = float(np.linalg.norm(amp * s - y)) / norm_y if norm_y > 0 else math.inf
        best = EMGFit(t0, tau, sigma, amp, resid, int(res.nit), bool(res.success))

        self.t0_, self.tau_, self.sigma_, self.amplitude_ = t0, tau, sigma, amp
        self.residual_norm_, self.n_iter_, self.bin_width_ = resid, int(res.nit), bw
        self.result_ = best
        if not res.success:
            raise FitError(f"EMG fit did not converge: {res.message}", best)
        if tau > self.max_tau_fraction * span:
            raise FitError(f"decay time {tau:.4g} ps exceeds {self.max_tau_fraction} of the span; "
                           "no decaying structure", best)
        if not start <= t0 <= start + span:
            raise FitError(f"onset {t0:.4g} ps outside the histogram", best)
        if resid > self.max_residual:
            raise FitError(f"relative residual norm {resid:.3g} exceeds {self.max_residual}", best)
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, ensure_2d=False, dtype=float).reshape(-1)
        return emg_bin_counts(X, self.bin_width_, self.amplitude_, self.t0_, self.tau_, self.sigma_)


def fit_emg(hist: Histogram1D, fix_sigma=None, **kw) -> EMGFit:
    est = EMGRegressor(fix_sigma=fix_sigma, **kw).fit(hist.bin_starts, hist.counts)
    return est.result_


# -- two-time maps ------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationMap2D:
    """``counts[i, j]``: pairs with t1 (channel set A) in bin i and t2 (set B) in bin j."""

    bin_width: float
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("correlation map must be square")
        object.__setattr__(self, "counts", c)

    @property
    def side(self) -> int:
        return self.counts.shape[0]

    @property
    def extent(self) -> float:
        return self.bin_width * self.side

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def transpose(self) -> "CorrelationMap2D":
        return CorrelationMap2D(self.bin_width, self.counts.T.copy())

    def to_csv(self) -> str:
        rows = ["t1_ps,t2_ps,count"]
        ii, jj = np.nonzero(self.counts)
        for i, j in zip(ii.tolist(), jj.tolist()):
            rows.append(f"{_num(i * self.bin_width)},{_num(j * self.bin_width)},{int(self.counts[i, j])}")
        return "\n".join(rows) + "\n"


def two_time_map(stream: TagStream, channels_A, channels_B, rep_period: int, bin_width: int = 25,
                 pairing: str = "same_cycle", extent=None) -> CorrelationMap2D:
    """Histogram of (t1 mod T, t2 mod T) over A/B tag pairs.

    ``same_cycle`` pairs tags of one laser cycle; ``displaced_one_cycle``
    pairs an A tag of cycle k with the B tags of cycle k + 1.  A tag is never
    paired with itself when the channel sets overlap.
    """
    stream = check_stream(stream)
    rep_period, bin_width = check_bin_width(rep_period, bin_width)
    A, B = check_channels(channels_A, "channels_A"), check_channels(channels_B, "channels_B")
    if pairing == "same_cycle":
        shift = 0
    elif pairing == "displaced_one_cycle":
        shift = 1
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    extent = rep_period if extent is None else int(extent)
    if extent <= 0 or extent % bin_width:
        raise ValueError("extent must be a positive multiple of bin_width")
    side = extent // bin_width

    ia = np.flatnonzero(np.isin(stream.channel, A))
    ib = np.flatnonzero(np.isin(stream.channel, B))
    ca, cb = stream.time[ia] // rep_period, stream.time[ib] // rep_period
    ta, tb = stream.time[ia] - ca * rep_period, stream.time[ib] - cb * rep_period
    lo = np.searchsorted(cb, ca + shift, "left")
    hi = np.searchsorted(cb, ca + shift, "right")
    n = hi - lo
    total = int(n.sum())
    counts = np.zeros(side * side, dtype=np.int64)
    if total:
        a_sel = np.repeat(np.arange(len(ia)), n)
        b_sel = np.repeat(lo - np.cumsum(n) + n, n) + np.arange(total)
        ok = ia[a_sel] != ib[b_sel]
        x, y = ta[a_sel[ok]] // bin_width, tb[b_sel[ok]] // bin_width
        inside = (x < side) & (y < side)
        counts = np.bincount(x[inside] * side + y[inside], minlength=side * side)
    return CorrelationMap2D(float(bin_width), counts.reshape(side, side).astype(np.int64))


@dataclass(frozen=True)
class QuadrantResult:
    boundary: float
    raw: dict
    raw_displaced: dict
    g2: dict

    def rows(self, delta_t: float, pair: str) -> list:
        return [(delta_t, pair, q, self.raw[q], self.g2[q]) for q in QUADRANTS]


def _quadrant_sums(counts: np.ndarray, k: int) -> dict:
    return {
        "ee": int(counts[:k, :k].sum()),
        "el": int(counts[:k, k:].sum()),
        "le": int(counts[k:, :k].sum()),
        "ll": int(counts[k:, k:].sum()),
    }


def quadrant_g2(same_map: CorrelationMap2D, displaced_map: CorrelationMap2D, t0: float, delta_t: float) -> QuadrantResult:
    """Quadrant sums of the same-cycle map normalized by those of the displaced map.

    The time-bin boundary is ``t0 + delta_t``; a map bin is early when its
    center lies before the boundary, so a boundary on a bin edge puts tags at
    exactly the boundary time into the late bin.  A quadrant with no displaced
    counts has ``g2 = None``.
    """
    if same_map.bin_width != displaced_map.bin_width or same_map.side != displaced_map.side:
        raise ValueError("same-cycle and displaced maps differ in geometry")
    boundary = float(t0) + float(delta_t)
    if not 0 < boundary < same_map.extent:
        raise ValueError(f"boundary {boundary} outside the map extent {same_map.extent}")
    bw = same_map.bin_width
    centers = (np.arange(same_map.side) + 0.5) * bw
    k = int(np.count_nonzero(centers < boundary))
    raw = _quadrant_sums(same_map.counts, k)
    disp = _quadrant_sums(displaced_map.counts, k)
    g2 = {q: (raw[q] / disp[q] if disp[q] > 0 else None) for q in QUADRANTS}
    return QuadrantResult(boundary, raw, disp, g2)


class QuadrantCorrelator(TransformerMixin, BaseEstimator):
    """Quadrant-normalized g2 between two channel sets.

    ``fit`` calibrates the arrival time of the first pulse (``t0_``) with an
    EMG fit to the folded arrival histogram of ``fit_channels`` (default:
    ``channels_a``), unless ``t0`` is given.  ``transform`` maps a tag stream
    to the row ``[g2_ee, g2_el, g2_le, g2_ll]`` (NaN where undefined).
    """

    def __init__(self, channels_a=(1, 2), channels_b=(3, 4), delta_t=100.0, rep_period=12_500,
                 bin_width=25, t0=None, fit_channels=None, fit_bin_width=5, fit_range=1500.0, fix_sigma=None):
        self.channels_a = channels_a
        self.channels_b = channels_b
        self.delta_t = delta_t
        self.rep_period = rep_period
        self.bin_width = bin_width
        self.t0 = t0
        self.fit_channels = fit_channels
        self.fit_bin_width = fit_bin_width
        self.fit_range = fit_range
        self.fix_sigma = fix_sigma

    def fit(self, X, y=None):
        stream = check_stream(X)
        if self.t0 is not None:
            self.t0_ = float(self.t0)
            self.onset_fit_ = None
            return self
        chans = self.channels_a if self.fit_channels is None else self.fit_channels
        hist = arrival_histogram(stream, chans, self.rep_period, self.fit_bin_width)
        peak = float(hist.bin_starts[int(np.argmax(hist.counts))])
        hist = hist.crop(peak - self.fit_range, peak + self.fit_range)
        self.onset_fit_ = fit_emg(hist, fix_sigma=self.fix_sigma)
        self.t0_ = self.onset_fit_.t0
        return self

    def maps(self, X) -> tuple:
        same = two_time_map(X, self.channels_a, self.channels_b, self.rep_period, self.bin_width, "same_cycle")
        disp = two_time_map(X, self.channels_a, self.channels_b, self.rep_period, self.bin_width,
                            "displaced_one_cycle")
        return same, disp

    def quadrants(self, X) -> QuadrantResult:
        check_is_fitted(self, "t0_")
        same, disp = self.maps(check_stream(X))
        return quadrant_g2(same, disp, self.t0_, self.delta_t)

    def transform(self, X):
        res = self.quadrants(X)
        return np.array([[np.nan if res.g2[q] is None else res.g2[q] for q in QUADRANTS]])


# -- mean photon number ----------------------------------------------------------

@dataclass(frozen=True)
class MuPoint:
    delta_t: float
    mu_B: float
    mu_X: float
    err_B: float
    err_X: float


def _rate(stream: TagStream, channels, n_cycles=None) -> tuple:
    n = int(stream.n_cycles if n_cycles is None else n_cycles)
    if n <= 0:
        raise ValueError("stream reports no cycles")
    k = int(np.count_nonzero(np.isin(stream.channel, check_channels(channels))))
    return k / n, k


def mean_photon_curve(two_pulse_streams: dict, one_pulse_stream: TagStream, channels=None) -> list:
    """Per energy, tags per cycle under two pulses over tags per cycle under one pulse.

    ``err_*`` are Poisson standard errors of the ratios.
    """
    channels = channels or {"B": (1, 2), "X": (3, 4)}
    ref = {e: _rate(one_pulse_stream, ch) for e, ch in channels.items()}
    for e, (r, k) in ref.items():
        if k == 0:
            raise ZeroDivisionError(f"no single-pulse counts for energy {e}")
    out = []
    for dt in sorted(two_pulse_streams):
        vals = {}
        for e, ch in channels.items():
            r2, k2 = _rate(two_pulse_streams[dt], ch)
            r1, k1 = ref[e]
            ratio = r2 / r1
            if k2:
                err = ratio * math.sqrt(1.0 / k2 + 1.0 / k1)
            else:
                # no counts: quote the one-count level as the error
                err = (1.0 / two_pulse_streams[dt].n_cycles) / r1
            vals[e] = (ratio, err)
        out.append(MuPoint(float(dt), vals["B"][0], vals["X"][0], vals["B"][1], vals["X"][1]))
    return out


# -- HOM -------------------------------------------------------------------------------

def _side_offsets(n_side_peaks: int) -> list:
    ks = []
    m = 1
    while len(ks) < n_side_peaks:
        ks.append(m)
        if len(ks) < n_side_peaks:
            ks.append(-m)
        m += 1
    return ks


def coincidence_counts(stream: TagStream, rep_period: int, offsets, channel_c: int = 1, channel_d: int = 2) -> tuple:
    """For each tag on ``channel_c``: number of ``channel_d`` tags in each delay peak.

    Peak k collects delays ``t_d - t_c`` within ``(k T - T/2, k T + T/2)``.
    Returns ``(t_c, counts)`` with ``counts`` of shape ``(len(offsets), n_c)``.
    """
    tc = stream.time[stream.channel == channel_c]
    td = stream.time[stream.channel == channel_d]
    half = rep_period / 2.0
    counts = np.empty((len(offsets), len(tc)), dtype=np.int64)
    for i, k in enumerate(offsets):
        lo = np.searchsorted(td, tc + k * rep_period - half, "right")
        hi = np.searchsorted(td, tc + k * rep_period + half, "left")
        counts[i] = hi - lo
    return tc, counts


@dataclass(frozen=True)
class HomWindowResult:
    series: np.ndarray
    mean: float
    std: float
    n_excluded: int
    window_starts: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_csv(self) -> str:
        rows = ["window_index,g2"] + [f"{i},{float(g)!r}" for i, g in enumerate(self.series)]
        return "\n".join(rows) + "\n"


class HOMWindowedG2(BaseEstimator):
    """Cross-output g2 of a HOM stream in sliding windows.

    Each window's g2 is the zero-delay coincidence count divided by the mean
    of the ``n_side_peaks`` nearest side peaks.  Windows with fewer than
    ``min_side_coincidences`` side-peak coincidences in total are excluded
    and counted in ``n_excluded_``.  ``window`` and ``shift`` in seconds.
    """

    def __init__(self, rep_period=12_500, window=1.0, shift=0.005, n_side_peaks=6,
                 min_side_coincidences=10, channel_c=1, channel_d=2):
        self.rep_period = rep_period
        self.window = window
        self.shift = shift
        self.n_side_peaks = n_side_peaks
        self.min_side_coincidences = min_side_coincidences
        self.channel_c = channel_c
        self.channel_d = channel_d

    def fit(self, X, y=None):
        stream = check_stream(X)
        window_ps = check_positive(self.window, "window") * 1e12
        shift_ps = check_positive(self.shift, "shift") * 1e12
        if int(self.n_side_peaks) < 1:
            raise ValueError("n_side_peaks must be >= 1")
        duration = float(stream.n_cycles) * self.rep_period if "n_cycles" in stream.header else (
            float(stream.time[-1]) if len(stream) else 0.0)
        if duration < window_ps:
            raise ValueError(f"stream duration {duration * 1e-12:.4g} s shorter than the window")
        offsets = [0] + _side_offsets(int(self.n_side_peaks))
        tc, counts = coincidence_counts(stream, self.rep_period, offsets, self.channel_c, self.channel_d)
        cum = np.zeros((len(offsets), len(tc) + 1), dtype=np.int64)
        np.cumsum(counts, axis=1, out=cum[:, 1:])
        n_win = int(math.floor((duration - window_ps) / shift_ps + 1e-9)) + 1
        starts = np.arange(n_win) * shift_ps
        i0 = np.searchsorted(tc, starts, "left")
        i1 = np.searchsorted(tc, starts + window_ps, "left")
        sums = cum[:, i1] - cum[:, i0]
        zero, side = sums[0], sums[1:]
        side_total = side.sum(axis=0)
        ok = side_total >= max(int(self.min_side_coincidences), 1)
        g2 = zero[ok] / (side_total[ok] / float(len(offsets) - 1))
        self.series_ = g2
        self.window_starts_ = starts[ok] * 1e-12
        self.n_excluded_ = int(np.count_nonzero(~ok))
        self.mean_ = float(np.mean(g2)) if g2.size else math.nan
        self.std_ = float(np.std(g2, ddof=1)) if g2.size > 1 else math.nan
        return self

    @property
    def result_(self) -> HomWindowResult:
        check_is_fitted(self, "series_")
        return HomWindowResult(self.series_, self.mean_, self.std_, self.n_excluded_, self.window_starts_)


def hom_windowed_g2(stream: TagStream, rep_period: int = 12_500, window: float = 1.0, shift: float = 0.005,
                    n_side_peaks: int = 6, **kw) -> HomWindowResult:
    est = HOMWindowedG2(rep_period=rep_period, window=window, shift=shift, n_side_peaks=n_side_peaks, **kw)
    return est.fit(stream).result_
