"""Command-line front end: ``simulate``, ``fit``, ``evaluate``, ``convert`` and ``surface``.

Each run writes a ``manifest.json`` holding the resolved configuration and
seeds.  Passing that file back with ``--manifest`` reproduces the outputs
byte for byte; wall-clock timings go to ``timing.json`` so they do not
disturb that guarantee.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, io
from .analysis import METHODS, POOLED, StudyConfig, cost_surface, monte_carlo_study, outlier_stats
from .bayes import WEIGHT_MODES, PriorSpec, SamplerOptions, run_chain
from .kinetics import (KINETIC_NAMES, AcquisitionConfig, KineticParams, SampledCurve,
                       forward_model, gamma_variate_aif, signal_to_concentration, time_grid)
from .nlls import FitBounds, fit_map_nlls
from .phantom import (BASELINE_SNR, NOISE_MODES, SCENARIO_DT, SCENARIOS, TOTAL_TIME,
                      GroundTruthPhantom, NoisySeries, build_phantom, simulate_series)

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_IO = 0, 2, 3, 4
REPORT_ROWS = ((POOLED, "All"),) + tuple(zip(KINETIC_NAMES, ("F_b", "v_p", "v_e", "PS")))


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved settings of one command; serialised into the manifest."""

    command: str
    scenario: str = "stress"
    method: str = "bayes"
    methods: tuple = ("bayes", "nlls")
    snr: float = 15.0
    seed: int = 0
    steps: int = 4000
    burn_in: int = 1000
    chains: int = 2
    realizations: int = 20
    starts: int = 100
    hct: float = 0.0
    dt: float | None = None
    total_time: float = TOTAL_TIME
    noise: str = "signal"
    baseline_snr: float = BASELINE_SNR
    anneal: float = 1.0
    weights: str = "current"
    input: str | None = None
    signal: str | None = None
    s_lv0: float | None = None
    n_baseline: int = 5
    dump_chains: bool = False
    bounds_lower: tuple = FitBounds().lower
    bounds_upper: tuple = FitBounds().upper
    prior: dict = field(default_factory=dict)
    params: tuple = (1.0, 0.08, 0.16, 0.4, 0.1)

    def grid_dt(self) -> float:
        return self.dt if self.dt is not None else SCENARIO_DT[self.scenario]

    def prior_spec(self, method: str | None = None) -> PriorSpec:
        method = method or self.method
        base = PriorSpec(weights=self.weights)
        if method == "bayes-nonhier":
            base = PriorSpec.non_hierarchical(weights=self.weights)
        return dataclasses.replace(base, **self.prior) if self.prior else base

    def fit_bounds(self) -> FitBounds:
        return FitBounds(tuple(self.bounds_lower), tuple(self.bounds_upper))

    def sampler_options(self) -> SamplerOptions:
        return SamplerOptions(anneal_start=self.anneal)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
            elif isinstance(value, float) and math.isinf(value):
                out[key] = "inf"
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise UsageError(f"unknown manifest fields: {sorted(unknown)}")
        values = {}
        for key, value in payload.items():
            if value == "inf":
                value = math.inf
            if isinstance(value, list):
                value = tuple(value)
            values[key] = value
        return cls(**values)


# ---------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out: Path, cfg: RunConfig, seeds: dict, inputs: dict | None = None) -> None:
    payload = {"tool": "myoperf", "version": __version__, "config": cfg.to_json(), "seeds": seeds}
    if inputs:
        payload["inputs"] = inputs
    io.write_json(out / "manifest.json", payload)


def _write_timing(out: Path, started: float, workers: int) -> None:
    io.write_json(out / "timing.json", {"wall_time_s": round(time.perf_counter() - started, 3),
                                        "workers": workers})


def _load_series(folder: Path, hct: float) -> NoisySeries:
    aif = io.read_aif(folder / "aif.csv")
    mask = io.read_mask(folder / "mask.csv")
    ids, _, curves = io.read_curves(folder / "curves.csv", aif.times)
    masked = np.flatnonzero(mask.ravel())
    if not np.array_equal(ids, masked):
        raise io.InputError(f"{folder / 'curves.csv'}: voxel ids do not match mask.csv")
    return NoisySeries(aif, curves, curves.copy(), mask, math.nan, None, math.nan, hct, ids)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, out: Path, workers: int = 1) -> None:
    started = time.perf_counter()
    if cfg.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {cfg.scenario!r}")
    phantom = build_phantom(cfg.scenario)
    grid = time_grid(cfg.grid_dt(), cfg.total_time)
    series = simulate_series(phantom, grid, snr=cfg.snr, seed=cfg.seed, hct=cfg.hct,
                             noise=cfg.noise, baseline_snr=cfg.baseline_snr)
    out.mkdir(parents=True, exist_ok=True)
    width = phantom.width
    io.write_aif(out / "aif.csv", series.aif)
    io.write_curves(out / "curves.csv", series.voxel_ids, series.times, series.curves)
    io.write_mask(out / "mask.csv", phantom.mask)
    truth = phantom.param_matrix()
    io.write_map(out / "truth.csv", series.voxel_ids, truth, ["truth"] * len(truth), width)
    _write_manifest(out, cfg, {"noise": cfg.seed})
    _write_timing(out, started, workers)


def cmd_fit(cfg: RunConfig, out: Path, workers: int = 1) -> None:
    started = time.perf_counter()
    if cfg.method not in METHODS:
        raise UsageError(f"unknown method {cfg.method!r}; expected one of {METHODS}")
    if cfg.input is None:
        raise UsageError("fit needs --input")
    folder = Path(cfg.input)
    series = _load_series(folder, cfg.hct)
    width = series.mask.shape[1]
    out.mkdir(parents=True, exist_ok=True)
    stats: dict = {"method": cfg.method, "n_voxels": int(series.voxel_ids.size)}

    if cfg.method == "nlls":
        fit = fit_map_nlls(series, bounds=cfg.fit_bounds(), n_starts=cfg.starts, seed=cfg.seed,
                           workers=workers)
        est = fit.estimates()
        failed, high = outlier_stats(est, fit.statuses())
        io.write_map(out / "maps.csv", fit.voxel_ids, est, fit.statuses(), width)
        stats.update(failed_fraction=failed, outlier_fraction=high,
                     successful_starts=[r.n_successful_starts for r in fit.results])
        seeds = {"restarts": cfg.seed}
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = run_chain(series, spec=cfg.prior_spec(), n_steps=cfg.steps, burn_in=cfg.burn_in,
                            n_chains=cfg.chains, seed=cfg.seed, workers=workers,
                            options=cfg.sampler_options())
        est = res.medians
        io.write_map(out / "maps.csv", res.voxel_ids, est, ["ok"] * len(est), width)
        io.write_voxel_table(out / "cov.csv", io.COV_HEADER, res.voxel_ids, res.summary.cov)
        io.write_voxel_table(out / "rhat.csv", io.RHAT_HEADER, res.voxel_ids, res.rhat)
        if cfg.dump_chains:
            io.write_chains(out / "chains.csv", res.voxel_ids, res.chains)
        failed, high = outlier_stats(est)
        acc = res.acceptance
        finite = np.isfinite(res.rhat)
        stats.update(
            failed_fraction=failed, outlier_fraction=high, converged=res.converged,
            warnings=res.warnings,
            rhat_below_limit_fraction=float(np.mean(res.rhat[finite] < 1.1)) if finite.any() else None,
            acceptance_mean={name: float(np.mean(acc[..., k]))
                             for k, name in enumerate(("f_b", "v_p", "v_e", "ps", "tau0",
                                                       "alpha_f_b", "alpha_ps"))
                             if np.isfinite(acc[..., k]).any()},
            acceptance_in_band_fraction=float(np.mean((acc >= 0.15) & (acc <= 0.35))),
        )
        seeds = {"chains": cfg.seed}
    io.write_json(out / "stats.json", _json_safe(stats))
    inputs = {name: _sha256(folder / name) for name in ("aif.csv", "curves.csv", "mask.csv")}
    _write_manifest(out, cfg, seeds, inputs)
    _write_timing(out, started, workers)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else str(value)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def cmd_evaluate(cfg: RunConfig, out: Path, workers: int = 1) -> None:
    started = time.perf_counter()
    methods = tuple(cfg.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown methods {bad}; expected a subset of {METHODS}")
    if cfg.realizations < 2:
        raise UsageError("--realizations must be >= 2")
    study = StudyConfig(cfg.scenario, cfg.realizations, methods, cfg.seed, cfg.snr, cfg.steps,
                        cfg.burn_in, cfg.chains, cfg.starts, workers, cfg.sampler_options(),
                        cfg.fit_bounds(), {m: cfg.prior_spec(m) for m in methods if m != "nlls"})
    report = monte_carlo_study(study)
    out.mkdir(parents=True, exist_ok=True)

    summaries = {m: report.summary(m) for m in methods}
    comparisons = report.p_values()
    header = ["parameter"]
    for m in methods:
        header += [f"{m}_mean", f"{m}_std"]
    header += [f"p_{pair.replace(':', '_vs_')}" for pair in comparisons] or ["p_value"]
    rows = []
    for key, label in REPORT_ROWS:
        row = [label]
        for m in methods:
            row += list(summaries[m][key])
        row += [comparisons[pair][key].p for pair in comparisons] or [""]
        rows.append(row)
    io.write_rows(out / "nmse_report.csv", header, rows)

    def values():
        for m in methods:
            for n, run in enumerate(report.runs[m], start=1):
                yield (m, n, run.seed, *run.nmse)
    io.write_rows(out / "nmse_values.csv", ("method", "realization", "seed") + KINETIC_NAMES, values())
    _write_manifest(out, cfg, {"base": cfg.seed,
                               "realizations": [cfg.seed + n for n in range(1, cfg.realizations + 1)]})
    _write_timing(out, started, workers)


def cmd_convert(cfg: RunConfig, out: Path, workers: int = 1) -> None:
    started = time.perf_counter()
    if cfg.s_lv0 is None:
        raise UsageError("convert needs --s-lv0")
    if not cfg.s_lv0 > 0:
        raise UsageError("--s-lv0 must be > 0")
    if cfg.signal is None:
        raise UsageError("convert needs --signal")
    acq = AcquisitionConfig(n_baseline=cfg.n_baseline)
    ids, times, signal = io.read_curves(Path(cfg.signal), header=io.SIGNAL_HEADER)
    try:
        conc = np.array([signal_to_concentration(SampledCurve(times, s), cfg.s_lv0, acq).values
                         for s in signal])
    except ValueError as exc:
        raise io.InputError(f"{cfg.signal}: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    io.write_curves(out / "curves.csv", ids, times, conc)
    _write_manifest(out, cfg, {}, {"signal": _sha256(Path(cfg.signal))})
    _write_timing(out, started, workers)


def cmd_surface(cfg: RunConfig, out: Path, workers: int = 1) -> None:
    started = time.perf_counter()
    grid = time_grid(cfg.grid_dt(), cfg.total_time)
    aif = gamma_variate_aif(grid)
    truth = KineticParams.from_array(cfg.params)
    clean = forward_model(truth, aif, hct=cfg.hct)
    values = _noisy_copy(clean, cfg) if math.isfinite(cfg.snr) else clean.values
    surface = cost_surface(SampledCurve(grid, values), aif, bounds=cfg.fit_bounds(), hct=cfg.hct)
    out.mkdir(parents=True, exist_ok=True)
    io.write_rows(out / "cost_surface.csv", ("f_b", "tau0", "chi2"),
                  ((fb, t0, surface.chi2[i, j]) for i, fb in enumerate(surface.f_b)
                   for j, t0 in enumerate(surface.tau0)))
    fb_min, t0_min = surface.minimum()
    io.write_json(out / "surface_min.json", {"f_b": fb_min, "tau0": t0_min,
                                             "chi2": float(surface.chi2.min())})
    _write_manifest(out, cfg, {"noise": cfg.seed})
    _write_timing(out, started, workers)


def _noisy_copy(clean: SampledCurve, cfg: RunConfig) -> np.ndarray:
    """One noisy copy of ``clean`` with the phantom noise model (voxel id 0)."""
    params = np.asarray(cfg.params, float).reshape(1, 1, 5)
    ph = GroundTruthPhantom("custom", params, np.zeros((1, 1), bool), np.ones((1, 1), bool))
    series = simulate_series(ph, clean.times, snr=cfg.snr, seed=cfg.seed, hct=cfg.hct,
                             noise=cfg.noise, baseline_snr=cfg.baseline_snr)
    return series.curves[0]


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate,
            "convert": cmd_convert, "surface": cmd_surface}


# ---------------------------------------------------------------------------
# argument parsing


def _snr(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("snr must be > 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="myoperf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--manifest", type=Path, help="rerun with the config stored in a manifest.json")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=1, help="parallel processes (outputs do not depend on it)")
        p.add_argument("--hct", type=float)

    def sampler(p):
        p.add_argument("--steps", type=int)
        p.add_argument("--burn-in", type=int)
        p.add_argument("--chains", type=int)
        p.add_argument("--starts", type=int, help="NLLS restarts per voxel")
        p.add_argument("--anneal", type=float, help="initial likelihood temperature during burn-in (1 = off)")
        p.add_argument("--weights", choices=WEIGHT_MODES, help="spatial weight evaluation (default current)")

    def phantom(p):
        p.add_argument("--scenario", choices=SCENARIOS)
        p.add_argument("--snr", type=_snr)
        p.add_argument("--dt", type=float, help="sampling interval in minutes (default per scenario)")
        p.add_argument("--noise", choices=NOISE_MODES)
        p.add_argument("--baseline-snr", type=float)

    p = sub.add_parser("simulate", help="write a noisy phantom series")
    common(p)
    phantom(p)

    p = sub.add_parser("fit", help="estimate parameter maps from a series folder")
    common(p)
    sampler(p)
    p.add_argument("--input", type=Path, help="folder with aif.csv, curves.csv, mask.csv")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--dump-chains", action="store_true", default=None)

    p = sub.add_parser("evaluate", help="Monte-Carlo comparison of estimators")
    common(p)
    sampler(p)
    phantom(p)
    p.add_argument("--method", dest="methods", action="append", choices=METHODS,
                   help="method to include (repeatable; default bayes and nlls)")
    p.add_argument("--realizations", type=int)

    p = sub.add_parser("convert", help="signal intensities to concentration")
    common(p)
    p.add_argument("--signal", type=Path, help="long-format signal csv")
    p.add_argument("--s-lv0", type=float, help="pre-contrast left-ventricular blood signal")
    p.add_argument("--n-baseline", type=int)

    p = sub.add_parser("surface", help="chi-squared projected onto (f_b, tau0)")
    common(p)
    phantom(p)
    p.add_argument("--params", type=float, nargs=5, metavar=("F_B", "V_P", "V_E", "PS", "TAU0"))
    return parser


_SKIP = {"command", "out", "manifest", "workers"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.manifest is not None:
        try:
            payload = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"{args.manifest}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise io.InputError(f"{args.manifest}:{exc.lineno}: {exc.msg}") from None
        cfg = RunConfig.from_json(payload.get("config", {}))
        if cfg.command != args.command:
            raise UsageError(f"manifest is for {cfg.command!r}, not {args.command!r}")
        return cfg
    cfg = RunConfig(command=args.command)
    for key, value in vars(args).items():
        if key in _SKIP or value is None:
            continue
        if isinstance(value, Path):
            value = str(value)
        if isinstance(value, list):
            value = tuple(value)
        setattr(cfg, key, value)
    if args.command == "surface" and args.snr is None:
        cfg.snr = math.inf
    if args.command == "surface" and args.scenario is None:
        cfg.scenario = "rest"
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args.out, max(1, args.workers))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"myoperf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except io.InputError as exc:
        print(f"myoperf: input error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        where = f"{exc.filename}: " if getattr(exc, "filename", None) else ""
        print(f"myoperf: I/O error: {where}{exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
