"""Batch front end: ``resreset <subcommand> [options]``.

Every run writes ``manifest.json`` into the output directory. The manifest
hash covers the subcommand, the resolved settings, the seed and the package
version; each CSV starts with ``# manifest: <hash>`` and each JSON output
carries a ``manifest`` field. Timing lives only in the manifest, so reruns
with the same settings produce byte-identical data files.

Settings resolve as command-line flag > config file > built-in default.
The output directory may also come from ``RESRESET_OUT``.

Exit codes: 0 success, 2 usage, 3 unknown subcommand, 4 config error,
5 simulation error, 6 failed validation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ResResetError, UnknownSubcommand
from .params import derive_params, load_config

SUBCOMMANDS = ("simulate-cavity", "calibrate-detector", "readout-map", "optimize-depletion",
               "sweep-pulse-length", "rte-sweep", "validate")
EXIT_USAGE, EXIT_UNKNOWN, EXIT_CONFIG, EXIT_SIM, EXIT_VALIDATE = 2, 3, 4, 5, 6
OUT_ENV = "RESRESET_OUT"


def _version() -> str:
    from . import __version__
    return __version__


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    version: str
    out_dir: str
    wall_time: float = 0.0
    evaluations: int = 0
    files: list = field(default_factory=list)

    @property
    def hash(self) -> str:
        core = {"subcommand": self.subcommand, "config": self.config, "seed": self.seed,
                "version": self.version}
        blob = json.dumps(core, sort_keys=True, default=_jsonable)
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self) -> Path:
        path = Path(self.out_dir) / "manifest.json"
        data = asdict(self)
        data["hash"] = self.hash
        path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return str(v)


def _floats(text: str) -> list[float]:
    """Comma list, or ``start:stop:step`` (stop inclusive)."""
    text = text.strip()
    if ":" in text:
        a, b, c = (float(x) for x in text.split(":"))
        n = int(math.floor((b - a) / c + 1e-9)) + 1
        return [float(f"{a + k * c:.12g}") for k in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI device/readout file (default: shipped values)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else ./resreset_out)")
    common.add_argument("--workers", type=int, default=1)

    p = argparse.ArgumentParser(prog="resreset", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate-cavity", parents=[common],
                       help="field trajectories for a measurement tone plus free decay")
    s.add_argument("--state", type=int, choices=(0, 1), default=None)
    s.add_argument("--duration", type=float, default=3e-6)
    s.add_argument("--f-rf", type=float)
    s.add_argument("--drive-amplitude", type=float)
    s.add_argument("--kerr", type=float)
    s.add_argument("--dt", type=float, default=1e-9)

    s = sub.add_parser("calibrate-detector", parents=[common],
                       help="AllXY error versus injected photon number")
    s.add_argument("--nbar-max", type=float, default=4.0)
    s.add_argument("--points", type=int, default=9)
    s.add_argument("--pulse-duration", type=float, default=20e-9)
    s.add_argument("--min-r2", type=float, default=0.95)

    s = sub.add_parser("readout-map", parents=[common],
                       help="assignment fidelity over drive amplitude and frequency")
    s.add_argument("--amplitudes", type=_floats, help="drive amplitudes (rad/s)")
    s.add_argument("--frequencies", type=_floats, help="tone frequencies (Hz)")
    s.add_argument("--shots", type=int, default=4000)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--f-rf", type=float)
    s.add_argument("--drive-amplitude", type=float)

    s = sub.add_parser("optimize-depletion", parents=[common],
                       help="two-step Powell search for depletion pulses")
    s.add_argument("--kind", choices=("unconditional", "conditional"), default="unconditional")
    s.add_argument("--tau-p", type=float)
    s.add_argument("--mode", choices=("direct", "allxy"), default="direct")
    s.add_argument("--oracle-start", action="store_true",
                   help="start from the linear-cavity solution")
    s.add_argument("--kerr", type=float)
    s.add_argument("--max-evals", type=int, default=4000)

    s = sub.add_parser("sweep-pulse-length", parents=[common],
                       help="optimized residual and F_d versus depletion length")
    s.add_argument("--kind", choices=("unconditional", "conditional"), default="unconditional")
    s.add_argument("--tau-p", type=_floats, default=[150e-9, 200e-9, 250e-9, 300e-9, 330e-9])
    s.add_argument("--tau-d", type=float, default=400e-9)
    s.add_argument("--kerr", type=float)

    s = sub.add_parser("rte-sweep", parents=[common],
                       help="rounds to event versus tau_d for each depletion scheme")
    s.add_argument("--variant", choices=("flipping", "nonflipping_0", "nonflipping_1"),
                   default="flipping")
    s.add_argument("--scheme", type=_strs, default=["passive", "conditional", "unconditional"])
    s.add_argument("--model", choices=("simple", "extensive"), default="extensive")
    s.add_argument("--tau-d", type=_floats, default=_floats("100e-9:3000e-9:100e-9"))
    s.add_argument("--F-d", dest="F_d", type=float)
    s.add_argument("--envelope", choices=("quoted", "simulated"), default="quoted")
    s.add_argument("--mc-traces", type=int, default=0,
                   help="also sample this many Monte Carlo traces per point")
    s.add_argument("--max-rounds", type=int, default=100_000)
    s.add_argument("--raw-traces", type=int, default=0,
                   help="write this many raw outcome records at the RTE optimum")
    s.add_argument("--high-photon", choices=("raise", "detuned_pulses"), default="raise")

    sub.add_parser("validate", parents=[common], help="run the invariant suite")
    return p


# ---------------------------------------------------------------- settings

class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        loaded = load_config(args.config) if args.config else load_config()
        self.warnings = list(loaded.warnings)
        self.file_values = dict(loaded.values)
        if args.config:
            # the user file overrides the shipped values key by key
            base = load_config().values
            base.update(self.file_values)
            self.file_values = base
        self.resolved: dict = {}
        out = args.out or os.environ.get(OUT_ENV) or "resreset_out"
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(args.command, {}, args.seed, _version(), str(self.out))
        self.files: list[str] = []

    def setting(self, name: str, cli_value=None, default=None):
        """Flag > config file > default; the result is recorded in the manifest."""
        if cli_value is not None:
            v = cli_value
        elif name in self.file_values:
            v = self.file_values[name]
        else:
            v = default
        self.resolved[name] = v
        return v

    def params(self, kerr_flag=None):
        raw = {k: self.file_values[k] for k in self.file_values}
        kerr = self.setting("kerr", kerr_flag, 0.0)
        raw["kerr"] = kerr
        for k in ("T1", "T2echo", "f_q", "f_r0", "f_r1", "f_bare", "kappa_inv", "tau_r",
                  "tau_int", "latency_feedback"):
            if k in raw:
                self.resolved[k] = raw[k]
        return derive_params(raw)

    def readout_cfg(self, params, f_rf=None, amp=None, noise=None):
        from .readout import ReadoutConfig
        return ReadoutConfig(
            f_rf=float(self.setting("f_rf", f_rf, 0.5 * (params.f_r0 + params.f_r1))),
            drive_amplitude=float(self.setting("drive_amplitude", amp, 5.1e7)),
            tau_r=params.tau_r, tau_int=params.tau_int,
            noise_sigma=float(self.setting("noise_sigma", noise, 32.4)),
            t1_decay=bool(self.setting("t1_decay", None, 1)))

    def finalize_manifest(self):
        self.manifest.config = dict(sorted(self.resolved.items()))
        return self.manifest.hash

    @property
    def header(self) -> str:
        return f"manifest: {self.manifest.hash}"

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write_json(self, name: str, data: dict) -> Path:
        data = dict(data, manifest=self.manifest.hash)
        p = self.path(name)
        p.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return p


# ---------------------------------------------------------------- subcommands

def cmd_simulate_cavity(ctx: Context) -> int:
    from .cavity import evolve_field, fit_exponential_decay, write_trajectory_csv
    from .params import PulseSequence
    from .readout import measurement_tone

    a = ctx.args
    params = ctx.params(a.kerr)
    cfg = ctx.readout_cfg(params, a.f_rf, a.drive_amplitude)
    duration = ctx.setting("duration", a.duration)
    dt = ctx.setting("dt", a.dt)
    ctx.setting("state", a.state)
    ctx.finalize_manifest()
    seq = PulseSequence((measurement_tone(cfg, params),), duration)
    tr = {s: evolve_field(seq, s, params, dt=dt, t_end=duration) for s in (0, 1)}
    write_trajectory_csv(ctx.path("cavity_trajectory.csv"), tr[0], tr[1], params, ctx.header)
    fits = {}
    for s in (0, 1):
        sel = tr[s].t >= cfg.tau_r + 5 * dt
        rate, err = fit_exponential_decay(tr[s].nbar[sel], tr[s].t[sel])
        fits[str(s)] = {"kappa_inv_fit": 1.0 / rate if rate > 0 else math.inf,
                        "kappa_inv_err": err / rate ** 2 if rate > 0 else math.nan,
                        "nbar_peak": float(tr[s].nbar.max())}
    if a.state is not None:
        fits = {str(a.state): fits[str(a.state)]}
    ctx.write_json("cavity_summary.json", {"decay_fit": fits})
    ctx.manifest.evaluations = sum(len(t.t) for t in tr.values())
    return 0


def cmd_calibrate_detector(ctx: Context) -> int:
    from .qubit import calibrate_detector

    a = ctx.args
    params = ctx.params()
    nmax = ctx.setting("nbar_max", a.nbar_max)
    pts = ctx.setting("points", a.points)
    pd = ctx.setting("pulse_duration", a.pulse_duration)
    r2 = ctx.setting("min_r2", a.min_r2)
    ctx.finalize_manifest()
    grid = np.linspace(0.0, nmax, pts)
    cal = calibrate_detector(params, nbar_grid=grid, pulse_duration=pd, min_r2=r2)
    ctx.write_json("detector_calibration.json", cal.to_dict())
    ctx.manifest.evaluations = 2 * len(grid)
    return 0


def cmd_readout_map(ctx: Context) -> int:
    from .readout import (assignment_fidelity, discrimination_fidelity, fidelity_map,
                          readout_experiment, write_histogram_csv, write_map_csv)

    a = ctx.args
    params = ctx.params()
    cfg = ctx.readout_cfg(params, a.f_rf, a.drive_amplitude, a.noise_sigma)
    amps = ctx.setting("amplitudes", a.amplitudes,
                       [cfg.drive_amplitude * f for f in (0.5, 0.75, 1.0, 1.25)])
    mid = cfg.f_rf
    freqs = ctx.setting("frequencies", a.frequencies, [mid - 1e6, mid, mid + 1e6])
    shots = ctx.setting("shots", a.shots)
    ctx.finalize_manifest()
    fmap = fidelity_map(amps, freqs, cfg, params, n_shots=shots, seed=ctx.args.seed,
                        workers=ctx.args.workers)
    write_map_csv(ctx.path("readout_map.csv"), fmap, ctx.header)
    s = readout_experiment(cfg, params, shots, ctx.args.seed, stream_key=(len(amps), len(freqs)))
    write_histogram_csv(ctx.path("readout_histogram.csv"), s, header=ctx.header)
    fa, e01, e10 = assignment_fidelity(s)
    ctx.write_json("readout_metrics.json",
                   {"F_a": fa, "eps01": e01, "eps10": e10, "F_d": discrimination_fidelity(s)})
    ctx.manifest.evaluations = 2 * shots * (len(amps) * len(freqs) + 1)
    return 0


def _evaluator(ctx: Context, params):
    from .depletion import ResidualEvaluator
    from .readout import measurement_tone
    cfg = ctx.readout_cfg(params)
    return ResidualEvaluator(measurement_tone(cfg, params), params), cfg


def _start_params(kind, tau_p, ev, params, oracle):
    from .depletion import (ConditionalPulseParams, UnconditionalPulseParams,
                            conditional_linear_oracle, linear_oracle_unconditional)
    if kind == "unconditional":
        if oracle:
            return linear_oracle_unconditional(ev.measurement, tau_p, params)
        return UnconditionalPulseParams(tau_p=tau_p)
    base = ConditionalPulseParams(tau_p=tau_p, latency=params.latency_feedback)
    return conditional_linear_oracle(ev.measurement, base, params) if oracle else base


def cmd_optimize_depletion(ctx: Context) -> int:
    from .depletion import two_step_optimize
    from .powell import OptimizerOptions
    from .qubit import calibrate_detector

    a = ctx.args
    params = ctx.params(a.kerr)
    kind = ctx.setting("kind", a.kind)
    default_tp = params.latency_feedback if kind == "unconditional" else 30e-9
    tau_p = ctx.setting("tau_p", a.tau_p, default_tp)
    mode = ctx.setting("mode", a.mode)
    oracle = ctx.setting("oracle_start", a.oracle_start)
    max_evals = ctx.setting("max_evals", a.max_evals)
    ev, _ = _evaluator(ctx, params)
    ctx.finalize_manifest()
    start = _start_params(kind, tau_p, ev, params.with_updates(kerr=0.0), oracle)
    detector = None
    if mode == "allxy":
        detector = calibrate_detector(params, nbar_grid=np.linspace(0, 4, 9))
    opts = OptimizerOptions(x0=[0.0], f_tol=1e-10, x_tol=1e-10, max_evals=max_evals)
    rep = two_step_optimize(kind, start, ev, opts, mode=mode, detector=detector, seed=a.seed)
    data = rep.to_dict()
    ctx.write_json("depletion_report.json", data)
    with ctx.path("optimizer_trace.csv").open("w") as fh:
        fh.write(f"# {ctx.header}\n")
        fh.write("step,iteration,evaluations,value,point\n")
        for name, res in rep.traces.items():
            for it, n_ev, val, pt in res.trace:
                fh.write(f"{name},{it},{n_ev},{val:.12g},{' '.join(f'{v:.12g}' for v in pt)}\n")
    ctx.manifest.evaluations = sum(r.n_evals for r in rep.traces.values())
    return 0


def cmd_sweep_pulse_length(ctx: Context) -> int:
    from .depletion import sweep_pulse_length, write_sweep_csv

    a = ctx.args
    params = ctx.params(a.kerr)
    kind = ctx.setting("kind", a.kind)
    tps = ctx.setting("tau_p_list", a.tau_p)
    tau_d = ctx.setting("tau_d", a.tau_d)
    ev, rcfg = _evaluator(ctx, params)
    ctx.finalize_manifest()
    rows = sweep_pulse_length(kind, tps, tau_d, ev, use_oracle_start=params.kerr == 0,
                              readout_cfg=rcfg, workers=a.workers)
    write_sweep_csv(ctx.path("pulse_length_sweep.csv"), rows, ctx.header)
    ctx.manifest.evaluations = len(rows)
    return 0


def _envelopes(ctx: Context, schemes, params, source):
    from .qec import quoted_envelope, simulated_envelope
    if source == "quoted":
        return {s: quoted_envelope(s, params) for s in schemes}
    from .depletion import two_step_optimize
    ev, _ = _evaluator(ctx, params)
    lin = params.with_updates(kerr=0.0)
    out = {}
    for s in schemes:
        if s == "passive":
            out[s] = simulated_envelope("passive", None, ev)
            continue
        tp = 330e-9 if s == "unconditional" else 30e-9
        rep = two_step_optimize(s, _start_params(s, tp, ev, lin, params.kerr == 0), ev)
        out[s] = simulated_envelope(s, rep.params, ev)
    return out


def cmd_rte_sweep(ctx: Context) -> int:
    from .qec import (CycleConfig, rte_exact, rte_monte_carlo, sweep_tau_d, write_curves_csv,
                      write_raw_traces)

    a = ctx.args
    params = ctx.params()
    variant = ctx.setting("variant", a.variant)
    schemes = ctx.setting("schemes", a.scheme)
    model = ctx.setting("model", a.model)
    taus = ctx.setting("tau_d_list", a.tau_d)
    fd = ctx.setting("F_d", a.F_d, 0.999)
    source = ctx.setting("envelope", a.envelope)
    n_mc = ctx.setting("mc_traces", a.mc_traces)
    max_rounds = ctx.setting("max_rounds", a.max_rounds)
    n_raw = ctx.setting("raw_traces", a.raw_traces)
    high = ctx.setting("high_photon", a.high_photon)
    for s in schemes:
        if s not in ("passive", "conditional", "unconditional"):
            raise ConfigError(f"unknown scheme {s!r}", "rte-sweep.scheme")
    ctx.finalize_manifest()
    envs = _envelopes(ctx, schemes, params, source) if model == "extensive" else \
        {s: None for s in schemes}
    template = CycleConfig(variant=variant, tau_r=params.tau_r, model=model, F_d=fd,
                           high_photon=high)
    rows = sweep_tau_d(template, taus, params, envs, workers=a.workers)
    write_curves_csv(ctx.path(f"rte_{variant}.csv"), rows, ctx.header)
    summary = {}
    for s in schemes:
        best = [r for r in rows if r["scheme"] == s and r.get("optimal")]
        summary[s] = {"tau_d_opt": best[0]["tau_d"], "RTE_max": best[0]["RTE"]} if best else None
    if n_mc > 0:
        with ctx.path(f"rte_{variant}_mc.csv").open("w") as fh:
            fh.write(f"# {ctx.header}\n")
            fh.write("tau_d,scheme,RTE_exact,RTE_mc,RTE_mc_err,p_s_exact,p_s_mc,p_s_mc_err,"
                     "censored\n")
            for k, r in enumerate(rows):
                if not r["valid"]:
                    continue
                cfg = replace(template, tau_d=r["tau_d"], scheme=r["scheme"])
                mc = rte_monte_carlo(cfg, params, envs[r["scheme"]], n_mc, max_rounds,
                                     seed=a.seed + k, workers=a.workers)
                fh.write(f"{r['tau_d']:.12g},{r['scheme']},{r['RTE']:.12g},{mc.rte:.12g},"
                         f"{mc.rte_err:.12g},{r['p_s']:.12g},{mc.p_s:.12g},{mc.p_s_err:.12g},"
                         f"{mc.n_censored}\n")
    if n_raw > 0:
        for s in schemes:
            if not summary[s]:
                continue
            cfg = replace(template, tau_d=summary[s]["tau_d_opt"], scheme=s)
            mc = rte_monte_carlo(cfg, params, envs[s], n_raw, max_rounds, seed=a.seed,
                                 raw_traces=n_raw)
            write_raw_traces(ctx.path(f"raw_{variant}_{s}.txt"), mc.raw_traces, variant, a.seed,
                             ctx.manifest.hash)
    ctx.write_json(f"rte_{variant}_summary.json", {"optimum": summary})
    ctx.manifest.evaluations = len(rows)
    return 0


def cmd_validate(ctx: Context) -> int:
    from .invariants import run_all

    params = ctx.params()
    ctx.finalize_manifest()
    results = run_all(params)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    ctx.write_json("validate.json", {"checks": [asdict(r) for r in results]})
    ctx.manifest.evaluations = len(results)
    return 0 if all(r.ok for r in results) else EXIT_VALIDATE


COMMANDS = {
    "simulate-cavity": cmd_simulate_cavity,
    "calibrate-detector": cmd_calibrate_detector,
    "readout-map": cmd_readout_map,
    "optimize-depletion": cmd_optimize_depletion,
    "sweep-pulse-length": cmd_sweep_pulse_length,
    "rte-sweep": cmd_rte_sweep,
    "validate": cmd_validate,
}


def _fail(category: str, message: str, code: int) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    first = next((x for x in argv if not x.startswith("-")), None)
    if first is not None and first not in SUBCOMMANDS:
        err = UnknownSubcommand(f"unknown subcommand {first!r}; expected one of "
                                f"{', '.join(SUBCOMMANDS)}")
        return _fail(err.category, str(err), EXIT_UNKNOWN)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    t0 = time.perf_counter()
    try:
        ctx = Context(args)
        for w in ctx.warnings:
            print(f"warning: {w}", file=sys.stderr)
        code = COMMANDS[args.command](ctx)
    except ConfigError as exc:
        return _fail(exc.category, str(exc), EXIT_CONFIG)
    except ResResetError as exc:
        return _fail(exc.category, f"{args.command}: {exc}", EXIT_SIM)
    except (OSError, ValueError) as exc:
        return _fail("input", f"{args.command}: {exc}", EXIT_CONFIG)
    ctx.manifest.wall_time = time.perf_counter() - t0
    ctx.manifest.files = sorted(ctx.files)
    ctx.manifest.write()
    return code


def main() -> None:
    sys.exit(run())
