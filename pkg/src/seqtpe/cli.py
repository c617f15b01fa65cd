"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data or parse
error, 3 numerical failure (fit non-convergence, undefined correlation).
"""
from __future__ import annotations

import argparse
import io
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import correlate, protocol
from .correlate import QUADRANTS, FitError
from .fock import UndefinedCorrelation
from .montecarlo import (DetectorModel, ExperimentConfig, PhaseModel, expected_photon_ratio, run_experiment,
                         synth_hom_stream)
from .protocol import CascadeParams
from .tagio import TagParseError, TagStream, read_tags, write_tags

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    tau_b: float = 142.0
    tau_x: float = 187.0
    dt: float = 100.0
    fprep: float = 0.9
    jitter: float = 40.0
    deadtime: float = 100_000.0
    dark_rate: float = 50.0
    efficiency: float = 0.8
    split_ratio: float = 0.5
    polarization_filter: str = "H"
    rep_period: int = 12_500
    cycles: int = 100_000
    seed: int = 0
    bin_width: int = 25
    window: float = 1.0
    shift: float = 0.005
    side_peaks: int = 6
    out: str = ""
    workers: int = 1

    def params(self, **kw) -> CascadeParams:
        base = dict(tau_B=self.tau_b, tau_X=self.tau_x, delta_t=self.dt, prep_fidelity=self.fprep)
        base.update(kw)
        return CascadeParams(**base)

    def detector(self) -> DetectorModel:
        return DetectorModel(efficiency=self.efficiency, jitter_sigma=self.jitter, deadtime=self.deadtime,
                             dark_rate=self.dark_rate, splitter_ratio=self.split_ratio,
                             polarization_filter=self.polarization_filter)

    def experiment(self, **kw) -> ExperimentConfig:
        params = self.params(**{k: kw.pop(k) for k in list(kw) if k in ("delta_t", "prep_fidelity")})
        base = dict(params=params, detector=self.detector(), rep_period=self.rep_period,
                    n_cycles=self.cycles, seed=self.seed)
        base.update(kw)
        return ExperimentConfig(**base)


_FLAG_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"float": float, "int": int, "str": str}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_run_flags(p: argparse.ArgumentParser, names) -> None:
    helps = {
        "tau_b": "biexciton lifetime [ps]",
        "tau_x": "exciton lifetime [ps]",
        "dt": "pulse separation [ps]",
        "fprep": "preparation fidelity [0-1]",
        "jitter": "detector timing jitter sigma [ps]",
        "deadtime": "detector dead time [ps]",
        "dark_rate": "dark count rate per channel [Hz]",
        "efficiency": "detection efficiency per channel [0-1]",
        "split_ratio": "probability of routing to the first detector of a pair [0-1]",
        "polarization_filter": "transmitted polarization: H, V or none",
        "rep_period": "laser repetition period [ps]",
        "cycles": "number of laser cycles",
        "seed": "64-bit random seed",
        "bin_width": "histogram/map bin width [ps]",
        "window": "HOM analysis window [s]",
        "shift": "HOM window shift [s]",
        "side_peaks": "number of side peaks for HOM normalization",
        "out": "output file (or directory for report); default stdout",
        "workers": "worker processes for simulation",
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                       type=_CASTS[_FLAG_FIELDS[name]], help=helps[name])


def _resolve(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise FileNotFoundError(str(exc)) from exc
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"config file {args.config}: {exc}") from exc
        for key, value in data.items():
            key = key.replace("-", "_")
            if key not in _FLAG_FIELDS:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = _CASTS[_FLAG_FIELDS[key]](value)
    for name in _FLAG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return RunConfig(**values)


def _parse_list(text: str, cast=float) -> list:
    return [cast(x) for x in text.split(",") if x.strip()]


def _fmt(x) -> str:
    if x is None:
        return "nan"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(v if isinstance(v, str) else _fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _emit(text: str, out: str) -> None:
    if out:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- analytic --------------------------------------------------------------------------

ANALYTIC_HEADER = ["delta_t_ps", "alpha_sq", "beta_sq", "gamma_sq", "mu"] + [
    f"g2_{pair}_{q}" for pair in ("BB", "BX") for q in QUADRANTS
]


def _safe_g2(params, m1, m2):
    try:
        return protocol.analytic_g2(params, m1, m2)
    except UndefinedCorrelation:
        return None


def analytic_row(params: CascadeParams) -> list:
    c = protocol.coefficients(params)
    row = [params.delta_t, c.alpha_sq, c.beta_sq, c.gamma_sq, protocol.mean_photon_number(params)]
    for e2 in ("B", "X"):
        for q in QUADRANTS:
            row.append(_safe_g2(params, ("B", q[0]), (e2, q[1])))
    return row


def cmd_analytic(args, cfg: RunConfig) -> int:
    dts = _parse_list(args.dts) if args.dts else [cfg.dt]
    rows = [analytic_row(cfg.params(delta_t=dt, prep_fidelity=1.0)) for dt in dts]
    _emit(_csv(ANALYTIC_HEADER, rows), cfg.out)
    return EXIT_OK


def cmd_mutual_info(args, cfg: RunConfig) -> int:
    params = cfg.params(prep_fidelity=1.0)
    rows = []
    for p1, p2, mi in protocol.mutual_information_partitions(params):
        rows.append([" ".join(map(str, p1)), " ".join(map(str, p2)), mi])
    _emit(_csv(["part1", "part2", "mutual_information_bits"], rows), cfg.out)
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    exp = cfg.experiment(second_pulse=not args.single_pulse, failed_pulse_policy=args.policy)
    stream = run_experiment(exp, workers=cfg.workers)
    _write_stream(stream, cfg.out)
    return EXIT_OK


def _write_stream(stream: TagStream, out: str) -> None:
    if out:
        write_tags(stream, out)
    else:
        write_tags(stream, sys.stdout)


# -- analyze ---------------------------------------------------------------------------

def _header_float(stream: TagStream, key: str, fallback):
    return float(stream.header[key]) if key in stream.header else fallback


PAIRS = {"BB": ((1,), (2,)), "XX": ((3,), (4,)), "BX": ((1, 2), (3, 4))}


def calibrate_t0(stream: TagStream) -> float:
    """First-pulse arrival from an EMG fit to the biexciton arrival histogram."""
    est = correlate.QuadrantCorrelator(channels_a=(1, 2), rep_period=stream.rep_period).fit(stream)
    return float(est.t0_)


def quadrant_rows(stream: TagStream, delta_t: float, bin_width: int, t0: float) -> list:
    rows = []
    for name, (a, b) in PAIRS.items():
        q = correlate.QuadrantCorrelator(channels_a=a, channels_b=b, delta_t=delta_t, rep_period=stream.rep_period,
                                         bin_width=bin_width, t0=t0).fit(stream)
        res = q.quadrants(stream)
        rows += [[delta_t, name, qq, res.raw[qq], res.g2[qq]] for qq in QUADRANTS]
    return rows


def cmd_analyze(args, cfg: RunConfig) -> int:
    if args.kind == "mu":
        if not args.reference:
            raise UsageError("analyze mu needs --reference (single-pulse tag file)")
        streams = {}
        for path in args.tags:
            s = read_tags(path)
            streams[_header_float(s, "delta_t_ps", math.nan)] = s
        ref = read_tags(args.reference)
        pts = correlate.mean_photon_curve(streams, ref)
        rows = [[p.delta_t, p.mu_B, p.mu_X] for p in pts]
        _emit(_csv(["delta_t_ps", "mu_B", "mu_X"], rows), cfg.out)
        return EXIT_OK
    if len(args.tags) != 1:
        raise UsageError(f"analyze {args.kind} takes exactly one tag file")
    stream = read_tags(args.tags[0])
    rep = stream.rep_period
    if args.kind == "hist":
        chans = _parse_list(args.channels, int) if args.channels else [1, 2]
        hist = correlate.arrival_histogram(stream, chans, rep, cfg.bin_width)
        _emit(hist.to_csv(), cfg.out)
    elif args.kind == "map":
        a = _parse_list(args.channels_a, int)
        b = _parse_list(args.channels_b, int)
        m = correlate.two_time_map(stream, a, b, rep, cfg.bin_width, args.pairing)
        _emit(m.to_csv(), cfg.out)
    elif args.kind == "quadrants":
        dt = cfg.dt if args.dt_flag else _header_float(stream, "delta_t_ps", cfg.dt)
        t0 = args.t0
        if t0 is None:
            t0 = calibrate_t0(read_tags(args.reference) if args.reference else stream)
            print(f"t0={t0!r}", file=sys.stderr)
        rows = quadrant_rows(stream, dt, cfg.bin_width, t0)
        _emit(_csv(["delta_t_ps", "pair", "quadrant", "raw", "g2"], rows), cfg.out)
    return EXIT_OK


# -- hom -------------------------------------------------------------------------------

def _phis(args) -> list:
    if args.phis:
        return _parse_list(args.phis)
    return list(np.linspace(0.0, math.pi, 17))


def cmd_hom(args, cfg: RunConfig) -> int:
    if args.kind in ("analytic", "oracle"):
        fn = protocol.hom_g2_analytic if args.kind == "analytic" else protocol.hom_g2_oracle
        dts = _parse_list(args.dts) if args.dts else [cfg.dt]
        rows = []
        for dt in dts:
            p = cfg.params(delta_t=dt, prep_fidelity=1.0)
            rows += [[dt, phi, fn(p, phi)] for phi in _phis(args)]
        _emit(_csv(["delta_t_ps", "phi_rad", "g2"], rows), cfg.out)
    elif args.kind == "synthesize":
        p = cfg.params(prep_fidelity=1.0)
        model = PhaseModel(args.phase, args.phi, args.stability)
        # detection efficiency chosen so each output clicks with the requested probability
        eff = args.click_prob / (2.0 * protocol.mean_photon_number(p))
        if not 0.0 < eff <= 1.0:
            raise ValueError(f"--click-prob {args.click_prob} not reachable with mean photon number "
                             f"{protocol.mean_photon_number(p):.4g}")
        det = DetectorModel(efficiency=eff, jitter_sigma=cfg.jitter, deadtime=cfg.deadtime,
                            dark_rate=cfg.dark_rate, channel_map={"OUT": (1, 2)})
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
        stream = synth_hom_stream(p, model, det, args.duration, rng, rep_period=cfg.rep_period)
        stream.header["seed"] = str(cfg.seed)
        _write_stream(stream, cfg.out)
    else:
        if not args.tags:
            raise UsageError("hom analyze needs --tags")
        stream = read_tags(args.tags)
        res = correlate.hom_windowed_g2(stream, stream.rep_period, cfg.window, cfg.shift, cfg.side_peaks)
        _emit(res.to_csv(), cfg.out)
        print(f"mean={res.mean!r} std={res.std!r} windows={len(res.series)} excluded={res.n_excluded}",
              file=sys.stderr)
    return EXIT_OK


# -- report ----------------------------------------------------------------------------

def _manifest_block(name: str, params: dict) -> str:
    lines = [f'["{name}"]']
    for k, v in params.items():
        if isinstance(v, str):
            lines.append(f'{k} = "{v}"')
        elif isinstance(v, bool):
            lines.append(f"{k} = {str(v).lower()}")
        elif isinstance(v, (list, tuple)):
            lines.append(f"{k} = [{', '.join(_fmt(x) for x in v)}]")
        else:
            lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def report_pipeline(cfg: RunConfig, outdir: str, n_points: int = 12) -> list:
    """Write figure-data CSVs plus ``manifest.toml`` into ``outdir``; returns the file names."""
    os.makedirs(outdir, exist_ok=True)
    # the worker count never changes the data, so it is not part of the echo
    run_echo = {k: v for k, v in asdict(cfg).items() if k not in ("out", "workers")}
    blocks, written = [], []

    def put(name, text, params):
        with open(os.path.join(outdir, name), "w", newline="\n") as fh:
            fh.write(text)
        blocks.append(_manifest_block(name, params))
        written.append(name)

    # populations for Gamma_X = 2 Gamma_B
    tau_b = cfg.tau_b
    sweep = np.linspace(0.0, 6.0 * tau_b, 121)
    rows = []
    for dt in sweep:
        c = protocol.coefficients(tau_b, tau_b / 2.0, float(dt))
        rows.append([float(dt), c.alpha_sq, c.beta_sq, c.gamma_sq])
    put("fig1b_populations.csv", _csv(["delta_t_ps", "alpha_sq", "beta_sq", "gamma_sq"], rows),
        {"tau_b_ps": tau_b, "tau_x_ps": tau_b / 2.0, "prep_fidelity": 1.0, "delta_t_ps": list(sweep)})

    # mean photon number vs delay, MC normalized to one pulse
    dts = np.geomspace(12.0, 2000.0, n_points)
    det = cfg.detector()
    single = run_experiment(cfg.experiment(second_pulse=False), workers=cfg.workers)
    streams = {}
    for i, dt in enumerate(dts):
        streams[float(dt)] = run_experiment(cfg.experiment(delta_t=float(dt), seed=cfg.seed + 1 + i),
                                            workers=cfg.workers)
    pts = correlate.mean_photon_curve(streams, single)
    rows = []
    for p in pts:
        params = cfg.params(delta_t=p.delta_t)
        expect = [expected_photon_ratio(params, det, cfg.rep_period, energy=e) for e in ("B", "X")]
        rows.append([p.delta_t, p.mu_B, p.mu_X, p.err_B, p.err_X, *expect, protocol.mean_photon_number(params)])
    put("fig2d_mean_photon_number.csv",
        _csv(["delta_t_ps", "mu_B", "mu_X", "err_B", "err_X", "mu_expected_B", "mu_expected_X", "mu_ideal"], rows),
        dict(run_echo, delta_t_ps=list(dts), single_pulse_seed=cfg.seed,
             two_pulse_seeds=[cfg.seed + 1 + i for i in range(len(dts))]))

    # quadrant-normalized correlations vs delay, from the same runs; the
    # first-pulse arrival is calibrated once on the single-pulse run
    t0 = calibrate_t0(single)
    rows = []
    for dt, s in streams.items():
        rows += quadrant_rows(s, dt, cfg.bin_width, t0)
    put("fig4_quadrants.csv", _csv(["delta_t_ps", "pair", "quadrant", "raw", "g2"], rows),
        dict(run_echo, delta_t_ps=list(dts), t0_ps=t0))

    # unresolved HOM correlation at phi = 0 and pi/2
    hom_dts = np.geomspace(5.0, 2000.0, 60)
    rows = []
    for dt in hom_dts:
        p = cfg.params(delta_t=float(dt), prep_fidelity=1.0)
        rows.append([float(dt), protocol.hom_g2_analytic(p, 0.0), protocol.hom_g2_analytic(p, math.pi / 2)])
    put("fig5a_hom.csv", _csv(["delta_t_ps", "g2_phi0", "g2_phi_pi2"], rows),
        {"tau_b_ps": cfg.tau_b, "tau_x_ps": cfg.tau_x, "delta_t_ps": list(hom_dts)})

    with open(os.path.join(outdir, "manifest.toml"), "w", newline="\n") as fh:
        fh.write("\n".join(blocks))
    written.append("manifest.toml")
    return written


def cmd_report(args, cfg: RunConfig) -> int:
    if not cfg.out:
        raise UsageError("report needs --out DIRECTORY")
    for name in report_pipeline(cfg, cfg.out, args.points):
        print(os.path.join(cfg.out, name), file=sys.stderr)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqtpe", description="Sequential two-photon excitation: model, simulator, analysis.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    model_flags = ["tau_b", "tau_x", "dt", "out"]
    mc_flags = ["tau_b", "tau_x", "dt", "fprep", "jitter", "deadtime", "dark_rate", "efficiency",
                "split_ratio", "polarization_filter", "rep_period", "cycles", "seed", "out", "workers"]

    p = sub.add_parser("analytic", help="coefficients, mean photon number and g2 closed forms")
    _add_run_flags(p, model_flags)
    p.add_argument("--dts", help="comma-separated delays [ps] (overrides --dt)")
    p.add_argument("--config", help="TOML config file")
    p.set_defaults(func=cmd_analytic)

    p = sub.add_parser("mutual-info", help="mutual information of every bipartition")
    _add_run_flags(p, model_flags)
    p.add_argument("--config")
    p.set_defaults(func=cmd_mutual_info)

    p = sub.add_parser("simulate", help="Monte Carlo time tags")
    _add_run_flags(p, mc_flags)
    p.add_argument("--single-pulse", action="store_true", help="omit the second pulse (reference run)")
    p.add_argument("--policy", choices=("inert", "reexcite"), default="inert",
                   help="second-pulse action in cycles where the first pulse failed")
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="histograms, maps, quadrant g2 or mean photon numbers from tag files")
    p.add_argument("kind", choices=("hist", "map", "quadrants", "mu"))
    p.add_argument("--tags", nargs="+", required=True, help="tag file(s)")
    p.add_argument("--reference", help="single-pulse tag file (mu normalization; t0 calibration for quadrants)")
    p.add_argument("--channels", help="comma-separated channels (hist)")
    p.add_argument("--channels-a", default="1,2")
    p.add_argument("--channels-b", default="3,4")
    p.add_argument("--pairing", choices=("same_cycle", "displaced_one_cycle"), default="same_cycle")
    p.add_argument("--t0", type=float, help="first-pulse arrival [ps]; fitted when omitted")
    _add_run_flags(p, ["bin_width", "dt", "out"])
    p.add_argument("--config")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("hom", help="HOM correlations: analytic, oracle, synthesize, analyze")
    p.add_argument("kind", choices=("analytic", "oracle", "synthesize", "analyze"))
    p.add_argument("--phis", help="comma-separated phases [rad]")
    p.add_argument("--dts", help="comma-separated delays [ps]")
    p.add_argument("--phase", choices=("constant", "random"), default="random")
    p.add_argument("--phi", type=float, default=0.0, help="constant phase [rad]")
    p.add_argument("--stability", type=float, default=1.0, help="phase stability interval [s]")
    p.add_argument("--duration", type=float, default=10.0, help="stream duration [s]")
    p.add_argument("--click-prob", type=float, default=1.5e-3,
                   help="mean clicks per cycle at each output (synthesize)")
    p.add_argument("--tags", help="tag file (analyze)")
    _add_run_flags(p, ["tau_b", "tau_x", "dt", "jitter", "deadtime", "dark_rate", "rep_period",
                       "seed", "window", "shift", "side_peaks", "out"])
    p.add_argument("--config")
    p.set_defaults(func=cmd_hom)

    p = sub.add_parser("report", help="full pipeline: figure data CSVs and manifest")
    _add_run_flags(p, mc_flags + ["bin_width"])
    p.add_argument("--points", type=int, default=12, help="number of log-spaced delays for MC curves")
    p.add_argument("--config")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args.dt_flag = getattr(args, "dt", None) is not None
        cfg = _resolve(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (TagParseError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"seqtpe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, UndefinedCorrelation, ZeroDivisionError) as exc:
        print(f"seqtpe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"seqtpe: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
