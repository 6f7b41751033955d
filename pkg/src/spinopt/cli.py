"""Command-line interface: ``spinopt {design,simulate,gradcheck,eval,init}``.

Exit codes: 0 success, 2 validation error, 3 numerical failure,
4 gradient check failure.
"""

from __future__ import annotations

import argparse
from dataclasses import replace
import json
import logging
import os
from pathlib import Path
import sys
import time

import numpy as np

from .adjoint import backprop, fd_check
from .config import load_config
from .constraint import check_gmax, ramp_down
from .evaluate import Perturbation, evaluate_perturbations
from .initpulse import make_initial_pulse
from .io import read_grid, read_magnetization, read_pulse, write_history, write_magnetization, write_pulse
from .model import PhysicsConstants, ValidationError
from .objective import evaluate_loss, nrmse
from .optim import HISTORY_COLUMNS, DesignProblem, NumericalError, design
from .sim import simulate

logger = logging.getLogger("spinopt")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_GRADCHECK = 0, 2, 3, 4
GRADCHECK_GATE = 1e-4


class GradcheckFailure(Exception):
    pass


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out)
    return cfg


def _outdir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _initial(cfg, target):
    return make_initial_pulse(cfg.init, cfg.grid, target, cfg.loss.kind, cfg.limits, cfg.consts)


def cmd_design(args):
    cfg = _config(args)
    target = cfg.target()
    t0 = time.perf_counter()
    init = _initial(cfg, target)
    problem = DesignProblem(
        cfg.grid, target, cfg.loss, cfg.limits, init, cfg.consts,
        n_outer=cfg.n_outer, mode=args.mode or cfg.mode, lbfgs=cfg.lbfgs, n_jobs=args.threads,
    )
    result = design(problem)
    exported = ramp_down(result.pulse, cfg.limits)
    check_gmax(exported, cfg.limits).raise_if_violated()

    sub, tgt = cfg.grid.select(cfg.grid.mask), target.select(cfg.grid.mask)
    m_sub, _ = simulate(sub, exported, consts=cfg.consts, n_jobs=args.threads)
    m_all, _ = simulate(cfg.grid, exported, consts=cfg.consts, n_jobs=args.threads)
    loss = evaluate_loss(cfg.loss, m_sub, tgt, exported.rf)[0]
    if not np.isfinite(loss):
        raise NumericalError("final loss is not finite")
    runtime = time.perf_counter() - t0

    out = _outdir(cfg.output_dir)
    write_pulse(out / "pulse.csv", exported)
    write_history(out / "history.csv", result.history, HISTORY_COLUMNS)
    write_magnetization(out / "final_mag.csv", m_all)
    report = {
        "loss_kind": cfg.loss.kind,
        "lambda": cfg.loss.lam,
        "mode": problem.mode,
        "initial_loss": result.initial_loss,
        "design_loss": result.loss,
        "final_loss": loss,
        "nrmse": nrmse(m_all, target, cfg.loss.kind),
        "n_samples": exported.n_samples,
        "n_design_samples": result.pulse.n_samples,
        "duration_s": exported.duration,
        "peak_b_gauss": float(np.max(np.abs(exported.rf), initial=0.0)),
        "peak_g_gauss_per_cm": check_gmax(exported, cfg.limits).peak.tolist(),
        "peak_s_gauss_per_cm_per_s": float(np.max(np.abs(exported.slew()), initial=0.0)),
        "outer_iterations": result.history[-1]["iter"],
        "warnings": result.warnings,
        "runtime_s": runtime,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(f"design finished: loss {loss:.6g}, NRMSE {report['nrmse']:.4f}, {runtime:.1f} s -> {out}")
    return EXIT_OK


def cmd_simulate(args):
    grid = read_grid(args.grid)
    pulse = read_pulse(args.pulse)
    gamma = PhysicsConstants().gamma
    if args.config:
        gamma = load_config(args.config).consts.gamma
    if args.gamma is not None:
        gamma = args.gamma
    m0 = read_magnetization(args.m0) if args.m0 else None
    m, _ = simulate(grid, pulse, m0, PhysicsConstants(gamma, pulse.dt), n_jobs=args.threads)
    out = _outdir(args.out or ".")
    write_magnetization(out / "final_mag.csv", m)
    print(f"simulated {grid.n_voxels} voxels over {pulse.n_samples} samples -> {out / 'final_mag.csv'}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _config(args)
    target = cfg.target()
    pulse = read_pulse(args.pulse) if args.pulse else _initial(cfg, target)
    sub, tgt = cfg.grid.select(cfg.grid.mask), target.select(cfg.grid.mask)
    consts = replace(cfg.consts, dt=pulse.dt)

    def loss_eval(p):
        m, traj = simulate(sub, p, consts=consts, n_jobs=args.threads)
        value, dm, d_rf = evaluate_loss(cfg.loss, m, tgt, p.rf)
        pg = backprop(traj, dm, sub, p, consts, n_jobs=args.threads)
        pg.d_rf[:] += d_rf
        return value, pg

    report = fd_check(loss_eval, pulse, args.h, samples=args.samples, seed=cfg.seed)
    summary = {
        "checked": report.n_checked,
        "max_rel_error": report.max_rel_error,
        "worst_component": report.worst_index,
        "h": args.h,
        "gate": GRADCHECK_GATE,
        "passed": report.max_rel_error <= GRADCHECK_GATE,
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        (_outdir(args.out) / "gradcheck.json").write_text(json.dumps(summary, indent=2))
    if not summary["passed"]:
        raise GradcheckFailure(f"max relative error {report.max_rel_error:.3g} exceeds {GRADCHECK_GATE}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    target = cfg.target()
    pulse = read_pulse(args.pulse)
    perts = list(cfg.perturbations)
    perts += [Perturbation(gradient_delay=k) for k in args.delay or []]
    perts += [Perturbation(offres_scale=f) for f in args.offres_scale or []]
    rows = evaluate_perturbations(
        cfg.grid, pulse, target, cfg.loss.kind, perts, replace(cfg.consts, dt=pulse.dt), args.threads
    )
    out = _outdir(cfg.output_dir)
    cols = ("gradient_delay", "offres_scale", "nrmse", "delta_pp")
    write_history(out / "eval.csv", rows, cols)
    for r in rows:
        print(f"delay {r['gradient_delay']:+d}  offres x{r['offres_scale']:g}  "
              f"NRMSE {r['nrmse']:.4f}  ({r['delta_pp']:+.2f} pp)")
    return EXIT_OK


def cmd_init(args):
    cfg = _config(args)
    pulse = _initial(cfg, cfg.target())
    out = _outdir(cfg.output_dir)
    write_pulse(out / "init_pulse.csv", pulse)
    print(f"initial pulse: {pulse.n_samples} samples ({pulse.duration * 1e3:.3f} ms) -> {out / 'init_pulse.csv'}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=os.cpu_count(), help="voxel worker threads")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="spinopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", parents=[common], help="optimise RF and gradient waveforms")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("alternating", "simultaneous"), default=None)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", parents=[common], help="forward Bloch simulation")
    p.add_argument("--grid", required=True)
    p.add_argument("--pulse", required=True)
    p.add_argument("--m0", default=None, help="initial magnetization CSV (voxel,mx,my,mz)")
    p.add_argument("--config", default=None, help="take gamma from this config")
    p.add_argument("--gamma", type=float, default=None, help="rad/s/G")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", parents=[common], help="adjoint vs finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--pulse", default=None, help="check at this pulse instead of the initializer's")
    p.add_argument("--samples", type=int, default=None, help="components to check (all by default)")
    p.add_argument("--h", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", parents=[common], help="NRMSE under gradient delay / off-resonance errors")
    p.add_argument("--config", required=True)
    p.add_argument("--pulse", required=True)
    p.add_argument("--delay", type=int, action="append", help="gradient delay in samples (repeatable)")
    p.add_argument("--offres-scale", type=float, action="append", help="off-resonance factor (repeatable)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("init", parents=[common], help="write the initial pulse")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_init)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GradcheckFailure as exc:
        print(f"gradient check failed: {exc}", file=sys.stderr)
        return EXIT_GRADCHECK


if __name__ == "__main__":
    sys.exit(main())
