import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqtpe import correlate, protocol
from seqtpe.fock import Energy
from seqtpe.montecarlo import (DetectorModel, ExperimentConfig, PhaseModel, apply_deadtime, block_rng, detect,
                               expected_photon_ratio, run_experiment, simulate_cycle, simulate_cycles,
                               simulate_emissions, synth_hom_stream)
from seqtpe.protocol import CascadeParams
from seqtpe.tagio import dumps


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.0, 3000.0), st.floats(0.0, 1.0))
def test_event_ordering(seed, dt, F):
    rec = simulate_cycles(CascadeParams(delta_t=dt, prep_fidelity=F), 200, rng(seed))
    for casc in (1, 2):
        sel = rec.cascade == casc
        b = rec.time[sel & (rec.kind == 0)]
        x = rec.time[sel & (rec.kind == 1)]
        cyc_b = rec.cycle[sel & (rec.kind == 0)]
        cyc_x = rec.cycle[sel & (rec.kind == 1)]
        np.testing.assert_array_equal(cyc_b, cyc_x)
        assert np.all(x > b)
        if casc == 2:
            assert np.all(b >= dt)


def test_simulate_cycle_events():
    ev = simulate_cycle(CascadeParams(delta_t=1e6), rng(1))
    assert len(ev) == 4
    assert [e.kind for e in ev] == [Energy.B, Energy.X, Energy.B, Energy.X]
    assert ev[0].polarization == ev[1].polarization
    assert simulate_cycle(CascadeParams(delta_t=0.0), rng(1)) == []


def test_limits_every_cycle():
    full = simulate_cycles(CascadeParams(delta_t=1e6), 1000, rng(2))
    assert np.all(full.photons_per_cycle(1000) == 4)
    none = simulate_cycles(CascadeParams(delta_t=0.0), 1000, rng(2))
    assert len(none.cycle) == 0


@pytest.mark.parametrize("dt", [20.0, 60.0, 100.0, 250.0, 800.0])
def test_photon_count_statistics(dt):
    n = 10**6
    p = CascadeParams(delta_t=dt)
    counts = simulate_cycles(p, n, rng(int(dt))).photons_per_cycle(n)
    assert set(np.unique(counts)) <= {0, 2, 4}
    for k, prob in zip((0, 2, 4), protocol.coefficients(p)):
        frac = np.mean(counts == k)
        assert abs(frac - prob) < 3 * math.sqrt(prob * (1 - prob) / n) + 1e-12


def test_single_pulse_and_failed_pulse_policies():
    n = 200_000
    p = CascadeParams(delta_t=1e-3, prep_fidelity=0.87)
    one = simulate_cycles(p, n, rng(3), second_pulse=False)
    inert = simulate_cycles(p, n, rng(3))
    reex = simulate_cycles(p, n, rng(3), failed_pulse_policy="reexcite")
    n1 = np.count_nonzero(one.kind == 0)
    assert n1 / n == pytest.approx(0.87, abs=0.003)
    assert np.count_nonzero(inert.kind == 0) / n1 == pytest.approx(0.13, abs=0.004)
    assert np.count_nonzero(reex.kind == 0) / n1 == pytest.approx(0.26, abs=0.005)


def test_detect_ideal_is_bijective():
    events = simulate_cycle(CascadeParams(delta_t=1e6), rng(4))
    tags = detect(events, DetectorModel.ideal(), 12_500.0, rng(5))
    assert len(tags) == 4
    assert sorted(t.time for t in tags) == sorted(math.floor(12_500.0 + e.time) for e in events)
    by_time = {math.floor(12_500.0 + e.time): e.kind for e in events}
    for t in tags:
        assert t.channel in ((1, 2) if by_time[t.time] == Energy.B else (3, 4))


def test_detect_zero_efficiency_gives_only_dark_counts():
    events = simulate_cycle(CascadeParams(delta_t=1e6), rng(4))
    assert detect(events, DetectorModel(efficiency=0.0), 0.0, rng(5)) == []
    det = DetectorModel(efficiency=0.0, dark_rate=1e9)
    tags = detect(events, det, 0.0, rng(5))
    assert len(tags) > 0
    assert all(0 <= t.time < 12_500 for t in tags)


def test_detector_validation():
    with pytest.raises(ValueError):
        DetectorModel(splitter_ratio=1.5)
    with pytest.raises(ValueError):
        DetectorModel(channel_map={"B": (1, 2), "X": (2, 3)})
    with pytest.raises(ValueError):
        DetectorModel(polarization_filter="D")
    with pytest.raises(ValueError):
        DetectorModel(efficiency={1: 1.2})


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(params=CascadeParams(delta_t=12_500.0))
    with pytest.raises(ValueError):
        ExperimentConfig(params=CascadeParams(delta_t=5.0))
    ExperimentConfig(params=CascadeParams(delta_t=5.0), min_delta_t=0.0)
    ExperimentConfig(params=CascadeParams(delta_t=5.0), second_pulse=False)


def test_zero_cycles():
    s = run_experiment(ExperimentConfig(n_cycles=0))
    assert len(s) == 0
    assert s.n_cycles == 0
    assert s.header["seed"] == "0"


def test_deadtime_mask():
    c = np.array([1, 1, 2, 1, 1])
    t = np.array([0, 50, 60, 100, 180])
    assert apply_deadtime(c, t, 100.0).tolist() == [True, False, True, True, False]


def test_deadtime_invariant_on_simulated_stream():
    det = DetectorModel.lab(deadtime=30_000.0)
    s = run_experiment(ExperimentConfig(detector=det, n_cycles=100_000, seed=8))
    for ch in det.channels:
        t = s.time[s.channel == ch]
        assert np.all(np.diff(t) >= 30_000)


def test_dark_count_rate():
    det = DetectorModel(efficiency=0.0, dark_rate=50.0)
    rep = 10**9  # 1 ms cycles: 1e5 cycles span 100 s
    s = run_experiment(ExperimentConfig(detector=det, rep_period=rep, n_cycles=100_000, seed=9))
    duration = 100.0
    for ch in det.channels:
        k = np.count_nonzero(s.channel == ch)
        assert abs(k - 50.0 * duration) < 3 * math.sqrt(50.0 * duration)


def test_determinism_across_workers_and_runs():
    cfg = ExperimentConfig(detector=DetectorModel.lab(), n_cycles=150_000, seed=11)
    a = run_experiment(cfg, workers=1)
    b = run_experiment(cfg, workers=3)
    c = run_experiment(cfg, workers=1)
    assert dumps(a) == dumps(b) == dumps(c)
    other = run_experiment(ExperimentConfig(detector=DetectorModel.lab(), n_cycles=150_000, seed=12))
    assert dumps(other) != dumps(a)


def test_block_rng_substreams_differ():
    x = block_rng(1, 0, 0).random(4)
    assert not np.allclose(x, block_rng(1, 1, 0).random(4))
    assert not np.allclose(x, block_rng(1, 0, 1).random(4))
    np.testing.assert_array_equal(x, block_rng(1, 0, 0).random(4))


def test_emissions_cover_all_cycles():
    cfg = ExperimentConfig(params=CascadeParams(delta_t=1e4, prep_fidelity=1.0), n_cycles=70_000, seed=1)
    rec = simulate_emissions(cfg)
    assert np.all(rec.photons_per_cycle(70_000) == 4)


def test_jitter_recovered_by_emg_fit():
    det = DetectorModel(jitter_sigma=40.0)
    cfg = ExperimentConfig(params=CascadeParams(prep_fidelity=1.0), detector=det, n_cycles=10**6,
                           second_pulse=False, seed=13)
    s = run_experiment(cfg)
    hist = correlate.arrival_histogram(s, [1, 2], cfg.rep_period, 5).crop(500.0, 2500.0)
    fit = correlate.fit_emg(hist)
    assert fit.sigma == pytest.approx(40.0, rel=0.1)
    assert fit.tau == pytest.approx(142.0, rel=0.02)
    assert fit.t0 == pytest.approx(cfg.pulse_offset, abs=2.0)


@pytest.mark.parametrize("dt", [15.0, 150.0, 1500.0])
def test_expected_ratio_tracks_realistic_detection(dt):
    det = DetectorModel.lab()
    base = dict(detector=det, n_cycles=500_000)
    one = run_experiment(ExperimentConfig(params=CascadeParams(prep_fidelity=0.9), second_pulse=False, seed=20,
                                          **base))
    two = run_experiment(ExperimentConfig(params=CascadeParams(delta_t=dt, prep_fidelity=0.9), seed=21, **base))
    (pt,) = correlate.mean_photon_curve({dt: two}, one)
    expected = expected_photon_ratio(CascadeParams(delta_t=dt, prep_fidelity=0.9), det)
    assert abs(pt.mu_B - expected) < 3 * pt.err_B


def test_expected_ratio_ideal_limits():
    assert expected_photon_ratio(CascadeParams(delta_t=100.0)) == pytest.approx(
        protocol.mean_photon_number(CascadeParams(delta_t=100.0)), abs=1e-15)
    assert expected_photon_ratio(CascadeParams(delta_t=0.0, prep_fidelity=0.87)) == pytest.approx(0.13)


def test_phase_model():
    with pytest.raises(ValueError):
        PhaseModel("wobbly")
    with pytest.raises(ValueError):
        PhaseModel("random", stability_interval=0.0)
    assert np.all(PhaseModel("constant", 0.3).draw(5, rng()) == 0.3)
    ph = PhaseModel("random").draw(1000, rng())
    assert ph.min() >= 0 and ph.max() < 2 * math.pi


def test_synth_hom_stream_rates_and_header():
    p = CascadeParams()
    eff = 2e-3 / (2 * protocol.mean_photon_number(p))
    det = DetectorModel(efficiency=eff, channel_map={"OUT": (1, 2)})
    s = synth_hom_stream(p, PhaseModel("constant", 0.0), det, 1.0, rng(5))
    assert s.n_cycles == 80_000_000
    assert s.channel_map == {1: "OUT_C", 2: "OUT_D"}
    assert s.is_sorted()
    for ch in (1, 2):
        assert np.count_nonzero(s.channel == ch) == pytest.approx(2e-3 * s.n_cycles, rel=0.01)
