"""Experiment configuration and the regularization convergence study.

A configuration is one TOML file with sections ``domain``, ``grid``,
``time``, ``weight``, ``convergence``, ``carleman``, ``hum``,
``observability`` and ``run``.  Every output records the configuration hash
(SHA-256 of the parsed configuration without the output directory) and the
library version.  ``DEGENCONTROL_OUTPUT_ROOT`` overrides the output
directory.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .errors import ValidationError
from .geometry import DomainSpec
from .weights import WeightSpec

OUTPUT_ROOT_ENV = "DEGENCONTROL_OUTPUT_ROOT"
CANONICAL = Path(__file__).with_name("data") / "canonical.toml"


@dataclass(frozen=True)
class ConvergenceSettings:
    n: int = 65
    M: int = 128
    T: float = 1.0
    ladder: tuple = (4, 8, 16, 32, 64)
    k_ref: int = 256
    bump_radius: float = 0.5
    bump_amplitude: float = 1.0
    diagnostic_s: float = 2.0
    diagnostic_lam: float = 2.0


@dataclass(frozen=True)
class CarlemanSettings:
    s: float = 2.0
    lam: float = 2.0
    T: float = 2.0
    M: int = 64
    sizes: tuple = (33, 65)
    samples: int = 20


@dataclass(frozen=True)
class HUMSettings:
    beta: float = 1e-6
    betas: tuple = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    tol: float = 1e-8
    bump_radius: float = 0.5


@dataclass(frozen=True)
class ObservabilitySettings:
    delta: float = 1e-10
    max_iters: int = 200
    tol: float = 1e-10


@dataclass(frozen=True)
class ExperimentConfig:
    domain: DomainSpec = field(default_factory=DomainSpec)
    n: int = 33
    sizes: tuple = (33, 65)
    T: float = 1.0
    M: int = 64
    weight: WeightSpec = field(default_factory=lambda: WeightSpec("degenerate", 1.0))
    convergence: ConvergenceSettings = field(default_factory=ConvergenceSettings)
    carleman: CarlemanSettings = field(default_factory=CarlemanSettings)
    hum: HUMSettings = field(default_factory=HUMSettings)
    observability: ObservabilitySettings = field(default_factory=ObservabilitySettings)
    seeds: tuple = (0,)
    solver: str = "direct"
    workers: int = 1
    output_dir: str = "results"

    def describe(self) -> dict:
        d = asdict(self)
        d.pop("output_dir")
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root) if root else Path(self.output_dir)

    def stamp(self) -> dict:
        return {"config_hash": self.hash, "version": __version__}

    def problem(self, n: int | None = None, weight: WeightSpec | None = None, T: float | None = None,
                M: int | None = None):
        from .parabolic import ProblemSpec
        return ProblemSpec.build(self.domain, n or self.n, weight or self.weight,
                                 T or self.T, M or self.M, solver=self.solver)


# ------------------------------------------------------------ parsing

_SECTIONS = {
    "domain": {"half_width", "alpha", "control_center", "control_radius", "origin_ball_radius", "control_shape"},
    "grid": {"n", "sizes"},
    "time": {"T", "M"},
    "weight": {"kind", "epsilon"},
    "convergence": set(ConvergenceSettings.__dataclass_fields__),
    "carleman": set(CarlemanSettings.__dataclass_fields__),
    "hum": set(HUMSettings.__dataclass_fields__),
    "observability": set(ObservabilitySettings.__dataclass_fields__),
    "run": {"seeds", "solver", "workers", "output_dir"},
}


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _check(problems: list, where: str, ok: bool, msg: str):
    if not ok:
        problems.append(f"{where}: {msg}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a configuration; all problems are reported at once."""
    problems: list[str] = []
    for sec, body in raw.items():
        if sec not in _SECTIONS:
            problems.append(f"[{sec}]: unknown section")
            continue
        if not isinstance(body, dict):
            problems.append(f"[{sec}]: expected a table")
            continue
        for key in body:
            if key not in _SECTIONS[sec]:
                problems.append(f"{sec}.{key}: unknown field")
    if problems:
        raise ValidationError("invalid configuration: " + "; ".join(problems))

    def sec(name):
        return _tuples(raw.get(name, {}))

    try:
        domain = DomainSpec(**sec("domain"))
    except (ValidationError, TypeError) as err:
        raise ValidationError(f"invalid configuration: domain: {err}") from None
    g, t, w, r = sec("grid"), sec("time"), sec("weight"), sec("run")
    try:
        weight = WeightSpec(w.get("kind", "degenerate"), domain.alpha, w.get("epsilon"))
    except ValidationError as err:
        problems.append(f"weight: {err}")
        weight = None
    conv = ConvergenceSettings(**sec("convergence"))
    carl = CarlemanSettings(**sec("carleman"))
    hum = HUMSettings(**sec("hum"))
    obs = ObservabilitySettings(**sec("observability"))
    cfg_kw = {
        "domain": domain, "weight": weight, "convergence": conv, "carleman": carl, "hum": hum,
        "observability": obs, "n": g.get("n", 33), "sizes": g.get("sizes", (33, 65)),
        "T": t.get("T", 1.0), "M": t.get("M", 64), "seeds": r.get("seeds", (0,)),
        "solver": r.get("solver", "direct"), "workers": r.get("workers", 1),
        "output_dir": r.get("output_dir", "results"),
    }

    def odd_size(v):
        return isinstance(v, int) and v >= 9 and v % 2 == 1

    _check(problems, "grid.n", odd_size(cfg_kw["n"]), "must be an odd integer >= 9")
    _check(problems, "grid.sizes", all(odd_size(v) for v in cfg_kw["sizes"]), "must be odd integers >= 9")
    _check(problems, "time.T", isinstance(cfg_kw["T"], (int, float)) and cfg_kw["T"] > 0, "must be positive")
    _check(problems, "time.M", isinstance(cfg_kw["M"], int) and cfg_kw["M"] >= 8, "must be an integer >= 8")
    _check(problems, "run.solver", cfg_kw["solver"] in ("cg", "direct"), "must be 'cg' or 'direct'")
    _check(problems, "run.workers", isinstance(cfg_kw["workers"], int) and cfg_kw["workers"] >= 1,
           "must be a positive integer")
    _check(problems, "convergence.n", odd_size(conv.n), "must be an odd integer >= 9")
    _check(problems, "convergence.M", conv.M >= 8, "must be >= 8")
    _check(problems, "convergence.ladder", len(conv.ladder) >= 2 and all(k >= 2 for k in conv.ladder)
           and list(conv.ladder) == sorted(set(conv.ladder)), "must be increasing integers >= 2")
    _check(problems, "convergence.k_ref", conv.k_ref > max(conv.ladder, default=0), "must exceed the ladder")
    _check(problems, "convergence.bump_radius", 0 < conv.bump_radius < domain.half_width,
           "must lie in (0, L)")
    _check(problems, "carleman.sizes", all(odd_size(v) for v in carl.sizes), "must be odd integers >= 9")
    _check(problems, "carleman.samples", carl.samples >= 1, "must be positive")
    from .carleman import PARAMETER_BOX
    for key, val in (("s", carl.s), ("lam", carl.lam), ("T", carl.T)):
        lo, hi = PARAMETER_BOX[key]
        _check(problems, f"carleman.{key}", lo <= val <= hi, f"must lie in [{lo:g}, {hi:g}]")
    for key, val in (("s", conv.diagnostic_s), ("lam", conv.diagnostic_lam), ("T", conv.T)):
        lo, hi = PARAMETER_BOX[key]
        _check(problems, f"convergence.{'diagnostic_' + key if key != 'T' else 'T'}", lo <= val <= hi,
               f"must lie in [{lo:g}, {hi:g}]")
    from .control import BETA_RANGE
    lo, hi = BETA_RANGE
    _check(problems, "hum.beta", lo <= hum.beta <= hi, f"must lie in [{lo:g}, {hi:g}]")
    _check(problems, "hum.betas", all(lo <= b <= hi for b in hum.betas), f"must lie in [{lo:g}, {hi:g}]")
    _check(problems, "hum.tol", 0 < hum.tol < 1, "must lie in (0, 1)")
    _check(problems, "observability.delta", obs.delta > 0, "must be positive")
    if problems:
        raise ValidationError("invalid configuration: " + "; ".join(problems))
    return ExperimentConfig(**cfg_kw)


def load_config(path=None) -> ExperimentConfig:
    path = Path(path) if path else CANONICAL
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"configuration file {path} not found") from None
    except tomllib.TOMLDecodeError as err:
        raise ValidationError(f"malformed configuration {path}: {err}") from None
    try:
        return config_from_dict(raw)
    except TypeError as err:
        raise ValidationError(f"invalid configuration {path}: {err}") from None


# ------------------------------------------------------------ convergence study

@dataclass
class ConvergenceTable:
    k: list
    l2_error: list
    terminal_error: list
    diagnostic_log10: list
    k_ref: int
    params: dict

    @staticmethod
    def _strict(col) -> bool:
        return all(b < a for a, b in zip(col, col[1:]))

    @property
    def l2_decreasing(self) -> bool:
        return self._strict(self.l2_error)

    @property
    def terminal_decreasing(self) -> bool:
        return self._strict(self.terminal_error)

    @property
    def diagnostic_decreasing(self) -> bool:
        return self._strict(self.diagnostic_log10)

    @property
    def passed(self) -> bool:
        return self.l2_decreasing and self.terminal_decreasing and self.diagnostic_decreasing

    def rows(self):
        return list(zip(self.k, self.l2_error, self.terminal_error, self.diagnostic_log10))

    def as_dict(self) -> dict:
        return {"k": self.k, "l2_error": self.l2_error, "terminal_error": self.terminal_error,
                "diagnostic_log10": self.diagnostic_log10, "k_ref": self.k_ref,
                "l2_decreasing": self.l2_decreasing, "terminal_decreasing": self.terminal_decreasing,
                "diagnostic_decreasing": self.diagnostic_decreasing, "passed": self.passed, **self.params}

    def write_csv(self, path, stamp: dict | None = None):
        with open(path, "w", newline="") as fh:
            if stamp:
                fh.write("".join(f"# {k}: {v}\n" for k, v in stamp.items()))
            wr = csv.writer(fh)
            wr.writerow(["k", "l2_error", "terminal_error", "diagnostic_log10"])
            for row in self.rows():
                wr.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _regularized_run(args):
    domain, n, alpha, k, T, M, radius, amplitude, solver = args
    from .fields import smooth_bump
    from .parabolic import ProblemSpec, solve_forward
    p = ProblemSpec.build(domain, n, WeightSpec("regularized", alpha, 1.0 / k), T, M, solver=solver)
    return solve_forward(p, None, smooth_bump(p.grid, radius, amplitude))


def run_convergence_study(cfg: ExperimentConfig, out_dir=None) -> ConvergenceTable:
    """Solutions with w_k = psi_{1/k}^alpha against the k_ref solution, f = 0.

    Errors are ||phi_k - phi_ref|| in L^2(Q) (mass norm, levels 1..M with
    weight dt, matching implicit Euler) and at t = T.  The diagnostic column
    is log10 of k^{2-alpha} int_Q over B_{1/k} of xi^3 phi_k^2 e^{-2 s sigma}
    with the limit auxiliary function.  Runs are independent tasks; with
    ``cfg.workers > 1`` they go to a process pool.  With ``out_dir`` each
    task's row is written to its own JSON file before the merged table.
    """
    from .carleman import build_eta, carleman_weights, origin_ball_term
    from .parabolic import TimeGrid
    c = cfg.convergence
    alpha = cfg.domain.alpha
    ks = list(c.ladder) + [c.k_ref]
    tasks = [(cfg.domain, c.n, alpha, k, c.T, c.M, c.bump_radius, c.bump_amplitude, cfg.solver) for k in ks]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            sols = list(ex.map(_regularized_run, tasks))
    else:
        sols = [_regularized_run(t) for t in tasks]
    ref = sols[-1]
    p = cfg.problem(n=c.n, T=c.T, M=c.M)
    h2, dt = p.mass_diag, p.time.dt
    cw = carleman_weights(build_eta(p.grid, cfg.domain, eps=0.0), c.diagnostic_s, c.diagnostic_lam,
                          TimeGrid(c.T, c.M))
    l2, term, diag = [], [], []
    for k, u in zip(c.ladder, sols[:-1]):
        e = u - ref
        l2.append(math.sqrt(dt * h2 * float(np.sum(e[1:] ** 2))))
        term.append(math.sqrt(h2 * float(np.sum(e[-1] ** 2))))
        diag.append(origin_ball_term(u, cw, k, alpha) / math.log(10))
        if out_dir is not None:
            row = {"k": k, "l2_error": l2[-1], "terminal_error": term[-1], "diagnostic_log10": diag[-1],
                   **cfg.stamp()}
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            with open(Path(out_dir) / f"convergence_k{k}.json", "w") as fh:
                json.dump(row, fh, indent=2, sort_keys=True)
    params = {"n": c.n, "M": c.M, "T": c.T, "alpha": alpha, "bump_radius": c.bump_radius,
              "diagnostic_s": c.diagnostic_s, "diagnostic_lam": c.diagnostic_lam}
    return ConvergenceTable(list(c.ladder), l2, term, diag, c.k_ref, params)


def write_json(path, payload: dict, cfg: ExperimentConfig) -> dict:
    out = {**payload, **cfg.stamp()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True, default=_jsonable)
    return out


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")
