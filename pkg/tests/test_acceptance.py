"""Acceptance gate: one test per criterion, each reported as PASS/FAIL in the summary."""
import itertools
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import optimize

from seqtpe import correlate, fock, protocol
from seqtpe.correlate import QUADRANTS, Histogram1D, QuadrantCorrelator
from seqtpe.fock import Bin, Energy, ModeLabel
from seqtpe.montecarlo import (DetectorModel, ExperimentConfig, PhaseModel, run_experiment, simulate_cycles,
                               synth_hom_stream)
from seqtpe.protocol import PSI_MODES, CascadeParams
from seqtpe.tagio import dumps

NOMINAL = (142.0, 187.0)
BE, XE, BL, XL = PSI_MODES


def philox(seed):
    return np.random.Generator(np.random.Philox(seed))


class Checks:
    """Collects named boolean checks so a criterion reports every failing part."""

    def __init__(self):
        self.failed = []
        self.t = time.perf_counter()

    def __call__(self, name, ok):
        if not ok:
            self.failed.append(name)

    def elapsed(self):
        return time.perf_counter() - self.t

    def finish(self, record, number, budget, detail=""):
        dt = self.elapsed()
        self("runtime", dt < budget)
        ok = not self.failed
        msg = f"{detail} [{dt:.1f} s / {budget:g} s]"
        if not ok:
            msg += " failed: " + ", ".join(self.failed)
        record(number, ok, msg.strip())
        assert ok, msg


def test_criterion_01_coefficient_closure(record_criterion):
    c = Checks()
    worst = 0.0
    tau_b = 142.0
    for ratio in (0.25, 0.5, 1.0, 187.0 / 142.0, 2.0, 5.0):
        for dt in np.linspace(0.0, 10 * max(tau_b, tau_b * ratio), 200):
            a, b, g = protocol.coefficients(tau_b, tau_b * ratio, float(dt))
            worst = max(worst, abs(a + b + g - 1.0))
            c("unit interval", all(0.0 <= x <= 1.0 for x in (a, b, g)))
        c("zero delay", tuple(protocol.coefficients(tau_b, tau_b * ratio, 0.0)) == (1.0, 0.0, 0.0))
        far = protocol.coefficients(tau_b, tau_b * ratio, 1e6)
        c("long delay", far.gamma_sq == pytest.approx(1.0, abs=1e-12))
    c("closure", worst < 1e-12)
    c.finish(record_criterion, 1, 1.0, f"max |sum - 1| = {worst:.1e}")


def test_criterion_02_beta_peak(record_criterion):
    c = Checks()
    tau_b = 142.0
    beta = lambda dt: protocol.coefficients(tau_b, tau_b / 2.0, dt).beta_sq  # noqa: E731
    t_star = tau_b * math.log(2)
    peak = beta(t_star)
    c("peak value", abs(peak - 0.25) < 1e-9)
    # an independent maximization lands on the same delay
    res = optimize.minimize_scalar(lambda t: -beta(t), bounds=(1.0, 6 * tau_b), method="bounded",
                                   options={"xatol": 1e-6})
    c("peak location", abs(res.x - t_star) < 1e-3)
    c.finish(record_criterion, 2, 1.0, f"beta^2 max {peak:.12f} at {res.x:.4f} ps (ln2 tau_B = {t_star:.4f})")


def test_criterion_03_g2_closed_form_vs_fock(record_criterion):
    c = Checks()
    worst = 0.0
    for dt in np.geomspace(5.0, 2000.0, 10):
        p = CascadeParams(*NOMINAL, float(dt))
        psi = protocol.build_psi(p)
        for m1, m2 in itertools.combinations_with_replacement(PSI_MODES, 2):
            a = protocol.analytic_g2(p, m1, m2)
            worst = max(worst, abs(a - fock.g2_between(psi, m1, m2)))
            if m1 == m2:
                c("same mode exactly zero", a == 0.0)
    p = CascadeParams(*NOMINAL, 100.0)
    v = protocol.analytic_g2(p, BL, XE)
    c("1/gamma^2", v == pytest.approx(1.0 / protocol.coefficients(p).gamma_sq, rel=1e-12))
    c("about 7.93", abs(v - 7.93) < 0.005)
    c("oracle", worst < 1e-9)
    c.finish(record_criterion, 3, 1.0, f"max |analytic - fock| = {worst:.1e}; g2(Bl,Xe) = {v:.4f}")


def test_criterion_04_mean_photon_number(record_criterion):
    c = Checks()
    groups = [[BE, BL], [XE, XL], [BE, XE], [BL, XL]]
    worst = 0.0
    values = []
    for dt in (0.0, 100.0, 1e5):
        p = CascadeParams(*NOMINAL, dt)
        psi = protocol.build_psi(p)
        mu = protocol.mean_photon_number(p)
        values.append(mu)
        for g in groups:
            worst = max(worst, abs(fock.number_expectation(psi, g) - mu))
    c("operator sums", worst < 1e-12)
    c("zero", values[0] == 0.0)
    c("0.632", abs(values[1] - 0.632) < 5e-4)
    c("two", abs(values[2] - 2.0) < 1e-12)
    c.finish(record_criterion, 4, 1.0, "mu = " + ", ".join(f"{v:.4f}" for v in values) + f"; max dev {worst:.1e}")


def test_criterion_05_hom_oracle(record_criterion):
    c = Checks()
    worst = 0.0
    for dt in (10.0, 50.0, 100.0, 400.0, 2000.0):
        p = CascadeParams(*NOMINAL, dt)
        for phi in np.linspace(0.0, math.pi, 17):
            worst = max(worst, abs(protocol.hom_g2_analytic(p, phi) - protocol.hom_g2_oracle(p, phi)))
    full = CascadeParams(*NOMINAL, 1e6)
    lim = (protocol.hom_g2_analytic(full, 0.0), protocol.hom_g2_oracle(full, 0.0))
    c("gamma = 1 limit", all(abs(x - 0.75) < 1e-9 for x in lim))
    p = CascadeParams(*NOMINAL, 100.0)
    pair = (protocol.hom_g2_oracle(p, 0.0), protocol.hom_g2_oracle(p, math.pi / 2))
    c("phi = 0", abs(pair[0] - 0.894) < 1e-3)
    c("phi = pi/2", abs(pair[1] - 1.190) < 1e-3)
    c("grid", worst < 1e-9)
    c.finish(record_criterion, 5, 30.0, f"max |analytic - oracle| = {worst:.1e}; pair ({pair[0]:.4f}, {pair[1]:.4f})")


def test_criterion_06_mutual_information(record_criterion):
    c = Checks()
    reg = fock.ModeRegister(PSI_MODES, 1)
    ghz = fock.PureState.from_amplitudes(reg, {(0, 0, 0, 0): 1, (1, 1, 1, 1): 1}, normalize=True)
    ghz_mi = [fock.mutual_information(ghz, p1, p2) for p1, p2 in protocol.bipartitions()]
    c("GHZ", all(abs(v - 2.0) < 1e-9 for v in ghz_mi))
    p = CascadeParams(*NOMINAL, 100.0)
    psi = protocol.build_psi(p)
    mi = fock.mutual_information(psi, [BE, BL], [XE, XL])
    h = -sum(x * math.log2(x) for x in protocol.coefficients(p))
    c("2H", abs(mi - 2 * h) < 1e-9)
    c("about 2.82", abs(mi - 2.82) < 5e-3)
    c("exceeds GHZ", mi > max(ghz_mi))
    c.finish(record_criterion, 6, 1.0, f"GHZ {len(ghz_mi)} partitions at 2; psi B|X = {mi:.6f} bits")


def test_criterion_07_monte_carlo_convergence(record_criterion):
    c = Checks()
    p = CascadeParams(*NOMINAL, 100.0)
    n = 10**6
    counts = simulate_cycles(p, n, philox(7)).photons_per_cycle(n)
    z = []
    for k, prob in zip((0, 2, 4), protocol.coefficients(p)):
        frac = np.mean(counts == k)
        z.append((frac - prob) / math.sqrt(prob * (1 - prob) / n))
    c("fractions", all(abs(v) < 3 for v in z))

    cfg = ExperimentConfig(params=p, detector=DetectorModel.ideal(), n_cycles=10**7, seed=7)
    stream = run_experiment(cfg)
    pairs = {"BB": ((1,), (2,), Energy.B, Energy.B), "XX": ((3,), (4,), Energy.X, Energy.X),
             "BX": ((1, 2), (3, 4), Energy.B, Energy.X)}
    worst_rel, worst_zero = 0.0, 0.0
    for a, b, e1, e2 in pairs.values():
        est = QuadrantCorrelator(channels_a=a, channels_b=b, delta_t=100.0, t0=cfg.pulse_offset).fit(stream)
        res = est.quadrants(stream)
        for q in QUADRANTS:
            m1 = ModeLabel(e1, Bin.EARLY if q[0] == "e" else Bin.LATE)
            m2 = ModeLabel(e2, Bin.EARLY if q[1] == "e" else Bin.LATE)
            expected = protocol.analytic_g2(p, m1, m2)
            got = res.g2[q]
            if expected == 0.0:
                worst_zero = max(worst_zero, got)
            else:
                worst_rel = max(worst_rel, abs(got - expected) / expected)
    c("quadrant g2 within 5%", worst_rel < 0.05)
    c("same-energy same-bin below 0.05", worst_zero < 0.05)
    c.finish(record_criterion, 7, 600.0,
             f"fraction z = {', '.join(f'{v:+.2f}' for v in z)}; worst rel {worst_rel:.3f}; zero quadrants max {worst_zero:.3f}")


def test_criterion_08_imperfect_preparation(record_criterion):
    c = Checks()
    F = 0.87
    det = DetectorModel.lab(deadtime=0.0)
    n = 10**6
    one = run_experiment(ExperimentConfig(params=CascadeParams(*NOMINAL, prep_fidelity=F), detector=det, n_cycles=n,
                                          second_pulse=False, seed=80))
    two = run_experiment(ExperimentConfig(params=CascadeParams(*NOMINAL, 1e-3, prep_fidelity=F), detector=det,
                                          n_cycles=n, min_delta_t=0.0, seed=81))
    (pt,) = correlate.mean_photon_curve({1e-3: two}, one)
    zs = [(pt.mu_B - (1 - F)) / pt.err_B, (pt.mu_X - (1 - F)) / pt.err_X]
    c("within 3 sigma", all(abs(v) < 3 for v in zs))
    c.finish(record_criterion, 8, 60.0,
             f"mu_B = {pt.mu_B:.4f} +- {pt.err_B:.4f}, mu_X = {pt.mu_X:.4f} +- {pt.err_X:.4f} (target 0.13)")


def test_criterion_09_max_indistinguishability(record_criterion):
    c = Checks()
    v = protocol.max_indistinguishability(*NOMINAL)
    c("0.568", abs(v - 0.568) <= 1e-3)
    c.finish(record_criterion, 9, 1.0, f"V_max = {v:.5f}")


def test_criterion_10_fit_recovery(record_criterion):
    c = Checks()
    g = philox(10)
    n = 10**6
    x = 500.0 + g.exponential(142.0, n) + g.normal(0.0, 40.0, n)
    edges = np.arange(0.0, 3005.0, 5.0)
    hist = Histogram1D(5.0, 0.0, np.histogram(x, edges)[0])
    fit = correlate.fit_emg(hist)
    c("t0", abs(fit.t0 - 500.0) < 2.0)
    c("tau", abs(fit.tau - 142.0) < 0.02 * 142.0)
    c.finish(record_criterion, 10, 10.0, f"t0 = {fit.t0:.2f} ps, tau = {fit.tau:.2f} ps, sigma = {fit.sigma:.2f} ps")


def test_criterion_11_hom_windowed(record_criterion):
    c = Checks()
    duration, window, shift = 20.0, 1.0, 0.05
    click_prob = 1.5e-3
    n_indep = duration / window

    def stream(dt, model, seed):
        p = CascadeParams(*NOMINAL, dt)
        eff = click_prob / (2 * protocol.mean_photon_number(p))
        det = DetectorModel(efficiency=eff, jitter_sigma=40.0, channel_map={"OUT": (1, 2)})
        s = synth_hom_stream(p, model, det, duration, philox(seed))
        return p, correlate.hom_windowed_g2(s, 12_500, window, shift)

    parts = []
    for phi, seed in ((0.0, 110), (math.pi / 2, 111)):
        p, res = stream(100.0, PhaseModel("constant", phi), seed)
        target = protocol.hom_g2_analytic(p, phi)
        z = (res.mean - target) / (res.std / math.sqrt(n_indep))
        c(f"constant phi={phi:.3f}", abs(z) < 3)
        parts.append(f"phi {phi:.2f}: {res.mean:.4f} vs {target:.4f} (z {z:+.2f})")
    stds = {}
    for dt, seed in ((100.0, 112), (1000.0, 113)):
        p, res = stream(dt, PhaseModel("random", stability_interval=1.0), seed)
        lo, hi = protocol.hom_g2_analytic(p, 0.0), protocol.hom_g2_analytic(p, math.pi / 2)
        sigma = res.std / math.sqrt(n_indep)
        if hi - lo > 6 * sigma:
            c(f"envelope dt={dt:g}", lo <= res.mean <= hi)
            how = "strict"
        else:
            # envelope narrower than the resolution of the mean: require consistency with it
            c(f"envelope dt={dt:g}", lo - 3 * sigma <= res.mean <= hi + 3 * sigma)
            how = "within 3 sigma"
        parts.append(f"random dt {dt:g}: {res.mean:.4f} vs [{lo:.4f}, {hi:.4f}] {how} (sigma {sigma:.4f})")
        stds[dt] = res.std
    c("fluctuations shrink with delay", stds[1000.0] < stds[100.0])
    parts.append(f"random std {stds[100.0]:.3f} (100 ps) vs {stds[1000.0]:.3f} (1000 ps)")
    c.finish(record_criterion, 11, 120.0, "; ".join(parts))


def _cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "seqtpe", *args], cwd=cwd, capture_output=True)


def test_criterion_12_determinism(record_criterion, tmp_path):
    c = Checks()
    sim = ["simulate", "--cycles", "300000", "--seed", "12", "--dt", "80"]
    outs = []
    for i, workers in enumerate(("1", "4", "1")):
        path = tmp_path / f"sim{i}.tags"
        proc = _cli(sim + ["--workers", workers, "--out", str(path)], tmp_path)
        c("simulate exit", proc.returncode == 0)
        outs.append(path.read_bytes())
    c("simulate bytes", outs[0] == outs[1] == outs[2])
    # in-process run agrees with the CLI output too
    cfg = ExperimentConfig(params=CascadeParams(*NOMINAL, 80.0, prep_fidelity=0.9), detector=DetectorModel.lab(),
                           n_cycles=300_000, seed=12)
    c("library bytes", dumps(run_experiment(cfg, workers=2)).encode() == outs[0])

    reports = []
    for i, workers in enumerate(("1", "4", "1")):
        out = tmp_path / f"report{i}"
        proc = _cli(["report", "--cycles", "150000", "--points", "4", "--seed", "5", "--workers", workers,
                     "--out", str(out)], tmp_path)
        c("report exit", proc.returncode == 0)
        reports.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    c("report bytes", reports[0] == reports[1] == reports[2] and len(reports[0]) == 5)
    c.finish(record_criterion, 12, 600.0, "simulate and report identical over workers {1, 4} and reruns")
