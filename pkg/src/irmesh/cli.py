"""Command-line front end.

Verbs::

    irmesh solve   [--config FILE] [--KEY VALUE ...]
    irmesh compare [--config FILE] [--strategies a,b,c] [--trials N] [--KEY VALUE ...]
    irmesh plot    RUN_DIR [RUN_DIR ...] [--out DIR]
    irmesh check   [--problem NAME] [--samples N] [--seed S]

Config files hold ``key = value`` lines (``#`` starts a comment); flags
override the file.  Exit codes: 0 success, 2 config error, 3 solve failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import reporting
from .basis import FAMILIES
from .driver import STRATEGIES, StrategyConfig, initial_guess, solve
from .mesh import uniform_mesh
from .models import DEFAULT_EPS_F, DEFAULT_EPS_THETA, DYNAMICS_FORMS, MODEL_NAMES, get_problem
from .optimizer import DIRECTIONS, SCALINGS, OptimizerConfig, project
from .problem import check_jacobian, validate
from .transcription import flat_bounds

EXIT_OK, EXIT_CONFIG, EXIT_SOLVE, EXIT_IO = 0, 2, 3, 4
FIXED_N_H, REFINING_N_H = 20, 2

log = logging.getLogger("irmesh")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    problem: str = "cartpole"
    strategy: str = "progressive"
    n_h: int | None = None  # 20 for the fixed mesh, 2 when refining
    degree_x: int = 2
    degree_u: int = 2
    family: str = "chebyshev-lobatto"
    n_q: int = 4
    eps_f: float | None = None  # per-problem default, 1.15e-1 for cartpole
    eps_rho: float = 0.999
    eps_theta: float | None = None  # per-problem default, 2e-4 for cartpole
    eps_q: float = 1e-1
    p_max: int = 4
    p: int | None = None
    max_outer_iterations: int = 100_000
    max_mesh_intervals: int = 2000
    eps_z: float = 1e-6
    armijo_sigma: float = 1e-4
    backtrack_factor: float = 0.5
    alpha_init: float = 1.0
    max_backtracks: int = 40
    max_inner_iterations: int = 10_000
    direction: str = "projected-conjugate-gradient"
    scaling: str = "mesh"
    interpolate: bool = True
    forward_tracking: bool = True
    dynamics_form: str = "printed"
    control_bound: float | None = None
    seed: int = 0
    jitter: float = 0.0
    out: str = "runs"

    def resolved_n_h(self) -> int:
        if self.n_h is not None:
            return self.n_h
        return FIXED_N_H if self.strategy == "fixed" else REFINING_N_H

    def resolved_eps_f(self) -> float:
        if self.eps_f is not None:
            return self.eps_f
        return DEFAULT_EPS_F.get(self.problem, 1.15e-1)

    def resolved_eps_theta(self) -> float:
        if self.eps_theta is not None:
            return self.eps_theta
        return DEFAULT_EPS_THETA.get(self.problem, 2e-4)

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(
            strategy=self.strategy,
            eps_f=self.resolved_eps_f(),
            eps_rho=self.eps_rho,
            eps_theta=self.resolved_eps_theta(),
            eps_q=self.eps_q,
            p_max=self.p_max,
            p=self.p,
            max_outer_iterations=self.max_outer_iterations,
            max_mesh_intervals=self.max_mesh_intervals,
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            eps_z=self.eps_z,
            armijo_sigma=self.armijo_sigma,
            backtrack_factor=self.backtrack_factor,
            alpha_init=self.alpha_init,
            max_backtracks=self.max_backtracks,
            max_inner_iterations=self.max_inner_iterations,
            direction=self.direction,
            scaling=self.scaling,
            interpolate=self.interpolate,
            forward_tracking=self.forward_tracking,
        )

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_h"] = self.resolved_n_h()
        d["eps_f"] = self.resolved_eps_f()
        d["eps_theta"] = self.resolved_eps_theta()
        return d


_CHOICES = {
    "problem": MODEL_NAMES,
    "strategy": STRATEGIES,
    "family": FAMILIES,
    "direction": DIRECTIONS,
    "scaling": SCALINGS,
    "dynamics_form": DYNAMICS_FORMS,
}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    optional = "None" in kind
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if kind.startswith("bool"):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            value = lowered in ("true", "1", "yes", "on")
        elif kind.startswith("int"):
            value = int(text)
        elif kind.startswith("float"):
            value = float(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"{key}: {value!r} is not one of {_CHOICES[key]}")
    return value


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    """Defaults, then the config file, then command-line overrides."""
    merged = {**file_values, **overrides}
    try:
        cfg = RunConfig(**merged)
        cfg.strategy_config()
        cfg.optimizer_config()
        uniform_mesh(cfg.resolved_n_h(), cfg.degree_x, cfg.degree_u, cfg.n_q, cfg.family)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.jitter < 0.0:
        raise ConfigError("jitter must be nonnegative")
    return cfg


def make_problem(cfg: RunConfig):
    try:
        return get_problem(cfg.problem, dynamics_form=cfg.dynamics_form, control_bound=cfg.control_bound)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None


def starting_point(problem, mesh, cfg: RunConfig) -> np.ndarray:
    """Straight-line guess, optionally jittered with seeded Gaussian noise."""
    z = initial_guess(problem, mesh).to_vector()
    if cfg.jitter > 0.0:
        rng = np.random.default_rng(cfg.seed)
        lower, upper = flat_bounds(problem, mesh)
        z = project(z + cfg.jitter * rng.standard_normal(z.size), lower, upper)
    return z


def execute(cfg: RunConfig):
    """Solve once; returns ``(problem, trace)``."""
    problem = make_problem(cfg)
    mesh = uniform_mesh(cfg.resolved_n_h(), cfg.degree_x, cfg.degree_u, cfg.n_q, cfg.family)
    z0 = starting_point(problem, mesh, cfg)
    _, trace = solve(problem, mesh, z0, cfg.strategy_config(), cfg.optimizer_config())
    return problem, trace


def timed(cfg: RunConfig, trials: int):
    """Run ``trials`` times; counts come from the first run, time is the minimum."""
    problem, trace = execute(cfg)
    best = trace.wall_time
    for _ in range(trials - 1):
        t = time.perf_counter()
        _, again = execute(cfg)
        best = min(best, time.perf_counter() - t)
        if again.jacobian_evals != trace.jacobian_evals:
            log.warning("%s: evaluation counts differ between trials", cfg.strategy)
    return problem, trace, best


def _summary_config(cfg: RunConfig) -> dict:
    d = cfg.as_dict()
    d["initial_guess"] = "straight line between boundary sets, u = 0, projected"
    return d


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    problem, trace = execute(cfg)
    files = reporting.run_files(problem, trace, _summary_config(cfg))
    reporting.write_files(out, files, {"verb": "solve", "strategy": cfg.strategy})
    s = trace.summary()
    print(
        f"{cfg.strategy}: {trace.status} f_M={trace.final_f:.6g} "
        f"jacobian_evals={s['total_jacobian_evals']} n_h={s['final_n_h']} time={trace.wall_time:.3f}s"
    )
    return EXIT_OK if trace.success else EXIT_SOLVE


def _compare_one(args):
    # Problems hold closures, so only the picklable trace crosses process boundaries.
    cfg, trials = args
    _, trace, best = timed(cfg, trials)
    return trace, best


def cmd_compare(base: RunConfig, strategies, trials: int, out: Path, parallel: bool) -> int:
    cfgs = [dataclasses.replace(base, strategy=s) for s in strategies]
    jobs = [(c, trials) for c in cfgs]
    if parallel:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_compare_one, jobs))
    else:
        results = [_compare_one(j) for j in jobs]
    summaries, series = [], {}
    for cfg, (trace, best) in zip(cfgs, results):
        problem = make_problem(cfg)
        files = reporting.run_files(problem, trace, _summary_config(cfg), trials, best)
        reporting.write_files(out / cfg.strategy, files, {"verb": "solve", "strategy": cfg.strategy})
        summaries.append(reporting.summary_dict(trace, None, trials, best))
        series[cfg.strategy] = [dict(zip(reporting.TRACE_COLUMNS, r.as_tuple())) for r in trace.rows]
        print(
            f"{cfg.strategy}: {trace.status} f_M={trace.final_f:.6g} "
            f"jacobian_evals={trace.jacobian_evals} min_time={best:.3f}s"
        )
    reporting.write_files(
        out,
        {
            "comparison.csv": reporting.comparison_csv(summaries),
            "convergence.csv": reporting.convergence_csv(series),
        },
        {"verb": "compare", "strategies": list(strategies), "runs": list(strategies)},
    )
    return EXIT_OK if all(s["success"] for s in summaries) else EXIT_SOLVE


def cmd_plot(run_dirs: list[Path], out: Path) -> int:
    runs = {}
    for d in run_dirs:
        runs[Path(d).resolve().name] = reporting.read_iterations(Path(d) / "iterations.csv")
    files = reporting.plot_files(runs)
    reporting.write_files(out, files, {"verb": "plot"})
    print(f"wrote {', '.join(sorted(files))} to {out}")
    return EXIT_OK


def cmd_check(problem_name: str, samples: int, seed: int, dynamics_form: str) -> int:
    try:
        problem = get_problem(problem_name, dynamics_form=dynamics_form)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    issues = validate(problem)
    for issue in issues:
        print(f"invalid: {issue}")
    rng = np.random.default_rng(seed)
    n_x, n_u = problem.n_x, problem.n_u
    points = [
        (rng.uniform(-2, 2, n_x), rng.uniform(-2, 2, n_x), rng.uniform(-2, 2, n_u)) for _ in range(samples)
    ]
    result = check_jacobian(problem.system, points)
    print(
        f"{problem.name}: validate={'ok' if not issues else 'failed'} "
        f"jacobian={'ok' if result.passed else 'failed'} max_rel_error={result.max_rel_error:.3e}"
    )
    return EXIT_OK if result.passed and not issues else EXIT_SOLVE


def _config_parser(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value configuration file")
    group = parser.add_argument_group("configuration overrides")
    for f in fields(RunConfig):
        help_text = f"default: {f.default}"
        if f.name in _CHOICES:
            help_text += f"; one of {', '.join(map(str, _CHOICES[f.name]))}"
        group.add_argument(
            "--" + f.name.replace("_", "-"), dest=f.name, default=argparse.SUPPRESS, help=help_text
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irmesh", description="Integrated residual solver with h-mesh refinement")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_solve = sub.add_parser("solve", help="solve one configuration")
    _config_parser(p_solve)

    p_cmp = sub.add_parser("compare", help="run several strategies on one problem")
    _config_parser(p_cmp)
    p_cmp.add_argument("--strategies", default="fixed,predictive,progressive")
    p_cmp.add_argument("--trials", type=int, default=10, help="timing trials per strategy (minimum is kept)")
    p_cmp.add_argument("--parallel", action="store_true", help="run strategies in separate processes")

    p_plot = sub.add_parser("plot", help="emit plot data and SVGs from run directories")
    p_plot.add_argument("run_dirs", nargs="+", type=Path)
    p_plot.add_argument("--out", type=Path, default=None)

    p_check = sub.add_parser("check", help="validate a model and check its Jacobian")
    p_check.add_argument("--problem", default="cartpole")
    p_check.add_argument("--samples", type=int, default=20)
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--dynamics-form", default="printed", choices=DYNAMICS_FORMS)
    return parser


def _load_config(ns) -> RunConfig:
    file_values = {}
    if ns.config is not None:
        try:
            text = ns.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        file_values = parse_config_text(text)
    overrides = {
        name: _convert(name, getattr(ns, name)) for name in _FIELD_TYPES if hasattr(ns, name)
    }
    return build_config(file_values, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if ns.verb == "solve":
            cfg = _load_config(ns)
            return cmd_solve(cfg, Path(cfg.out))
        if ns.verb == "compare":
            cfg = _load_config(ns)
            strategies = [s.strip() for s in ns.strategies.split(",") if s.strip()]
            bad = [s for s in strategies if s not in STRATEGIES]
            if len(strategies) < 2 or bad:
                raise ConfigError(f"compare needs >= 2 strategies from {STRATEGIES}")
            if ns.trials < 1:
                raise ConfigError("trials must be >= 1")
            return cmd_compare(cfg, strategies, ns.trials, Path(cfg.out), ns.parallel)
        if ns.verb == "plot":
            out = ns.out if ns.out is not None else ns.run_dirs[0]
            return cmd_plot(ns.run_dirs, out)
        if ns.verb == "check":
            return cmd_check(ns.problem, ns.samples, ns.seed, ns.dynamics_form)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, FloatingPointError) as exc:
        print(f"solve failure: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
