"""Command line entry point.

    degencontrol <subcommand> [--config FILE] [--out DIR] [options]

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure (including a failed convergence study), 64 unknown subcommand.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NumericalError, ValidationError
from .experiments import ExperimentConfig, load_config, run_convergence_study, write_json

log = logging.getLogger("degencontrol")

COMMANDS = ("solve", "hum", "observability", "carleman-check", "weights-check", "convergence", "spectral")
EX_USAGE = 64


class _Failed(Exception):
    """A run that completed but did not meet its pass criterion."""


def _outdir(args, cfg: ExperimentConfig, name: str) -> Path:
    root = Path(args.out) if args.out else cfg.output_path()
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _manifest(d: Path, cfg: ExperimentConfig, files: list, extra: dict | None = None):
    write_json(d / "manifest.json", {"files": sorted(files), **(extra or {})}, cfg)


def cmd_solve(args, cfg):
    from .fields import smooth_bump
    from .parabolic import energy_bound, energy_trace, export_trajectory, solve_forward
    p = cfg.problem(n=args.n)
    phi0 = smooth_bump(p.grid, cfg.convergence.bump_radius, cfg.convergence.bump_amplitude)
    traj = solve_forward(p, None, phi0)
    tr = energy_trace(traj, p)
    d = _outdir(args, cfg, "solve")
    export_trajectory(d / "trajectory", traj, p, cfg.stamp())
    summary = {"problem": p.describe(), "l2_sq": tr["l2_sq"].tolist(),
               "max_step_residual": float(tr["residual"].max()), "energy_bound": energy_bound(traj, p)}
    write_json(d / "summary.json", summary, cfg)
    _manifest(d, cfg, ["trajectory.npy", "trajectory.json", "summary.json"])
    return summary


def cmd_hum(args, cfg):
    from .control import hum_solve
    from .fields import smooth_bump
    p = cfg.problem(n=args.n)
    beta = args.beta if args.beta is not None else cfg.hum.beta
    phi0 = smooth_bump(p.grid, cfg.hum.bump_radius)
    res = hum_solve(p, phi0, beta, cfg.hum.tol)
    d = _outdir(args, cfg, "hum")
    summary = res.save(d / f"hum_beta{beta:g}", cfg.hash)
    summary["problem"] = p.describe()
    _manifest(d, cfg, [f"hum_beta{beta:g}{s}" for s in (".npy", "_control.npy", ".json")])
    return summary


def cmd_observability(args, cfg):
    from .control import observability_constant
    o = cfg.observability
    out = {}
    for n in ([args.n] if args.n else cfg.sizes):
        p = cfg.problem(n=n)
        est = observability_constant(p, o.max_iters, o.tol, o.delta)
        out[str(n)] = est.as_dict()
    vals = [v["constant"] for v in out.values()]
    if len(vals) > 1:
        out["relative_change"] = abs(vals[-1] - vals[0]) / vals[0]
    d = _outdir(args, cfg, "observability")
    write_json(d / "observability.json", out, cfg)
    _manifest(d, cfg, ["observability.json"])
    return out


def cmd_carleman(args, cfg):
    from .carleman import build_eta, carleman_ratio, carleman_weights, weight_extremes
    from .parabolic import TimeGrid
    c = cfg.carleman
    tg = TimeGrid(c.T, c.M)
    d = _outdir(args, cfg, "carleman")
    out, files = {}, []
    for n in ([args.n] if args.n else c.sizes):
        p = cfg.problem(n=n, T=c.T, M=c.M)
        eta = build_eta(p.grid, cfg.domain, eps=0.0 if p.weight.kind != "regularized" else p.weight.epsilon)
        cw = carleman_weights(eta, c.s, c.lam, tg)
        stats = carleman_ratio(p, cw, samples=c.samples, seed=cfg.seeds[0])
        (d / f"ratios_n{n}.csv").write_text(stats.to_csv())
        files.append(f"ratios_n{n}.csv")
        out[str(n)] = {"ratio": stats.as_dict(), "weight_extremes": weight_extremes(cw, p.grid, tg),
                       "eta": {k: v for k, v in eta.report.items() if k != "critical_cells"}}
    Cs = [v["ratio"]["C"] for v in out.values()]
    if len(Cs) > 1 and min(Cs) > 0:
        out["C_spread"] = max(Cs) / min(Cs)
    write_json(d / "carleman.json", out, cfg)
    _manifest(d, cfg, files + ["carleman.json"])
    return out


def cmd_weights(args, cfg):
    from .weights import check_weight_identities, psi_bound_constants
    rep = check_weight_identities(args.eps, args.samples, cfg.seeds[0])
    out = {**rep.as_dict(), "max_residual": rep.max_residual(), "passed": rep.passed(),
           "bounds": psi_bound_constants(args.eps, args.samples, cfg.seeds[0])}
    d = _outdir(args, cfg, "weights")
    write_json(d / f"identities_eps{args.eps:g}.json", out, cfg)
    _manifest(d, cfg, [f"identities_eps{args.eps:g}.json"])
    if not rep.passed():
        raise _Failed(f"identity residual {rep.max_residual():.2e} above 1e-10")
    return out


def cmd_convergence(args, cfg):
    d = _outdir(args, cfg, "convergence")
    table = run_convergence_study(cfg, out_dir=d / "tasks")
    table.write_csv(d / "convergence.csv", cfg.stamp())
    write_json(d / "convergence.json", table.as_dict(), cfg)
    _manifest(d, cfg, ["convergence.csv", "convergence.json"])
    print("convergence study:", "PASS" if table.passed else "FAIL")
    if not table.passed:
        raise _Failed("error columns are not strictly decreasing")
    return table.as_dict()


def cmd_spectral(args, cfg):
    from .spectral import lowest_eigenpairs
    p = cfg.problem(n=args.n)
    res = lowest_eigenpairs(p.stiffness, p.mass, count=args.count)
    d = _outdir(args, cfg, "spectral")
    np.save(d / "eigenvectors.npy", p.grid.extend(res.vectors.T))
    out = {**res.as_dict(), "problem": p.describe()}
    write_json(d / "spectral.json", out, cfg)
    _manifest(d, cfg, ["spectral.json", "eigenvectors.npy"])
    return out


HANDLERS = {
    "solve": cmd_solve, "hum": cmd_hum, "observability": cmd_observability,
    "carleman-check": cmd_carleman, "weights-check": cmd_weights,
    "convergence": cmd_convergence, "spectral": cmd_spectral,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="degencontrol", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", metavar="subcommand")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML configuration (default: the shipped canonical one)")
        sp.add_argument("--out", help="output directory (default: config run.output_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("solve", "hum", "observability", "carleman-check", "spectral"):
            sp.add_argument("--n", type=int, help="grid size override")
        if name == "hum":
            sp.add_argument("--beta", type=float)
        if name == "weights-check":
            sp.add_argument("--eps", type=float, default=0.1)
            sp.add_argument("--samples", type=int, default=10_000)
        if name == "spectral":
            sp.add_argument("--count", type=int, default=2)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    first = next((a for a in argv if not a.startswith("-")), None)
    if first is None and not any(a in ("-h", "--help", "--version") for a in argv):
        ap.print_usage(sys.stderr)
        return EX_USAGE
    if first is not None and first not in COMMANDS:
        ap.print_usage(sys.stderr)
        print(f"degencontrol: unknown subcommand {first!r}", file=sys.stderr)
        return EX_USAGE
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = HANDLERS[args.command](args, cfg)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except _Failed as err:
        print(f"failed: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **cfg.stamp(), "result": _brief(out)}, indent=2,
                     default=str))
    return 0


def _brief(out: dict) -> dict:
    """Drop long lists from the console echo; files hold everything."""
    return {k: v for k, v in out.items() if not (isinstance(v, list) and len(v) > 12)}
