"""Outer loops: fixed mesh, progressive refinement with early termination, and
predictive refinement solved to an optimality threshold."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import Mesh, MeshedTrajectory, refine_intervals, transfer, with_quadrature
from .optimizer import DirectionState, OptimizerConfig, inner_solve, project
from .problem import DynamicFeasibilityProblem
from .transcription import (
    EvalCounter,
    TranscribedProblem,
    elevated,
    flat_bounds,
    objective,
    objective_per_interval,
    optimality_measure,
    transcribe,
)

log = logging.getLogger(__name__)

STRATEGIES = ("fixed", "progressive", "predictive")
EVENTS = ("optimize", "refine-h", "refine-q", "terminate")


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "progressive"
    eps_f: float = 1.15e-1
    eps_rho: float = 0.999
    eps_theta: float = 2e-4
    eps_q: float = 1e-1
    p_max: int = 4
    p: int | None = None
    max_outer_iterations: int = 100_000
    max_mesh_intervals: int = 2000

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.eps_f <= 0.0:
            raise ValueError("eps_f must be positive")
        if not 0.0 < self.eps_rho < 1.0:
            raise ValueError("eps_rho must lie in (0, 1)")
        if self.eps_theta <= 0.0:
            raise ValueError("eps_theta must be positive")
        if self.eps_q <= 0.0:
            raise ValueError("eps_q must be positive")
        if self.p_max < 2:
            raise ValueError("p_max must be >= 2")
        if self.p is not None and self.p < 1:
            raise ValueError("p must be >= 1")
        if self.max_outer_iterations < 1 or self.max_mesh_intervals < 1:
            raise ValueError("safety caps must be >= 1")


TRACE_COLUMNS = (
    "row",
    "block",
    "step",
    "event",
    "f_m",
    "theta",
    "rho",
    "alpha",
    "n_h",
    "n_q",
    "n",
    "jacobian_evals",
    "residual_evals",
    "overhead_residual_evals",
    "cumulative_jacobian_evals",
    "cumulative_residual_evals",
    "bound_violation",
)


@dataclass
class TraceRow:
    row: int
    block: int
    step: int
    event: str
    f_m: float
    theta: float
    rho: float
    alpha: float
    n_h: int
    n_q: int
    n: int
    jacobian_evals: int
    residual_evals: int
    overhead_residual_evals: int
    cumulative_jacobian_evals: int
    cumulative_residual_evals: int
    bound_violation: float

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, c) for c in TRACE_COLUMNS)


@dataclass
class RunTrace:
    strategy: str
    rows: list = field(default_factory=list)
    status: str = "running"
    wall_time: float = 0.0
    final_mesh: Mesh | None = None
    final_trajectory: MeshedTrajectory | None = None
    final_f: float = math.nan
    jacobian_evals: int = 0
    residual_evals: int = 0
    overhead_residual_evals: int = 0
    meshes: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == "converged"

    def events(self) -> list[str]:
        return [r.event for r in self.rows]

    def refinement_count(self) -> int:
        return sum(r.event in ("refine-h", "refine-q") for r in self.rows)

    def blocks(self) -> list[list[float]]:
        """f_M values of each inner block, each list starting at the block's entry value."""
        out, cur, entry = [], None, None
        for r in self.rows:
            if r.event == "optimize":
                if cur is None or r.block != cur[0]:
                    if cur is not None:
                        out.append(cur[1])
                    cur = (r.block, [entry] if entry is not None else [])
                cur[1].append(r.f_m)
                entry = r.f_m
            else:
                if cur is not None:
                    out.append(cur[1])
                    cur = None
                entry = r.f_m
        if cur is not None:
            out.append(cur[1])
        return out

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "status": self.status,
            "final_f_m": self.final_f,
            "total_jacobian_evals": self.jacobian_evals,
            "total_residual_evals": self.residual_evals,
            "overhead_residual_evals": self.overhead_residual_evals,
            "wall_time_s": self.wall_time,
            "outer_blocks": max((r.block for r in self.rows), default=0),
            "inner_iterations": sum(r.event == "optimize" for r in self.rows),
            "refinements": self.refinement_count(),
            "final_n_h": None if self.final_mesh is None else self.final_mesh.n_h,
            "final_n_q": None if self.final_mesh is None else self.final_mesh.n_q,
        }


def _violation(z, lower, upper) -> float:
    return float(max(np.max(lower - z, initial=0.0), np.max(z - upper, initial=0.0), 0.0))


class _Run:
    """Mutable state of one outer loop."""

    def __init__(self, problem, mesh0, z0, strategy, optimizer_config):
        self.problem = problem
        self.config = optimizer_config
        self.counter = EvalCounter()
        self.overhead = EvalCounter()
        self.trace = RunTrace(strategy=strategy)
        self.state = DirectionState()
        self.block = 0
        self._last = (0, 0, 0)
        self._t_start = time.perf_counter()
        self._set_mesh(mesh0, z0)

    def _set_mesh(self, mesh, z):
        self.tp: TranscribedProblem = transcribe(self.problem, mesh)
        self.z = project(np.asarray(z, dtype=float), self.tp.flat_lower, self.tp.flat_upper)
        self.f, self.g = self.tp.value_and_gradient(self.z, self.counter)
        self.state.reset()
        self.trace.meshes.append(mesh)

    @property
    def mesh(self) -> Mesh:
        return self.tp.mesh

    def theta(self) -> float:
        return optimality_measure(self.tp, self.z, self.g)

    def record(self, event, step=0, rho=math.nan, alpha=math.nan, theta=None):
        res, jac = self.counter.snapshot()
        ovh = self.overhead.residual_evals
        last_res, last_jac, last_ovh = self._last
        self._last = (res, jac, ovh)
        self.trace.rows.append(
            TraceRow(
                row=len(self.trace.rows),
                block=self.block,
                step=step,
                event=event,
                f_m=self.f,
                theta=self.theta() if theta is None else theta,
                rho=rho,
                alpha=alpha,
                n_h=self.mesh.n_h,
                n_q=self.mesh.n_q,
                n=self.tp.size,
                jacobian_evals=jac - last_jac,
                residual_evals=res - last_res,
                overhead_residual_evals=ovh - last_ovh,
                cumulative_jacobian_evals=jac,
                cumulative_residual_evals=res,
                bound_violation=_violation(self.z, self.tp.flat_lower, self.tp.flat_upper),
            )
        )

    def inner(self):
        self.block += 1
        steps = []

        def on_step(z, f, g, alpha):
            self.z, self.f, self.g = z, f, g
            steps.append(alpha)
            self.record("optimize", step=len(steps), alpha=alpha)

        f_entry = self.f
        result = inner_solve(
            self.tp, self.z, self.config, self.counter, self.state, self.f, self.g, on_step=on_step
        )
        self.z, self.f, self.g = result.z, result.f, result.grad
        rho = self.f / f_entry if f_entry > 0.0 else math.nan
        if steps:
            self.trace.rows[-1].rho = rho
        return result, rho

    def refine(self, scfg: StrategyConfig, pieces_for) -> bool:
        """Shared quadrature/partition branch; returns False if a cap is hit."""
        tp, z = self.tp, self.z
        f_plus = objective(elevated(tp), z, self.overhead)
        f_m = self.f
        e_q = abs(f_m - f_plus) / (1.0 + f_plus)
        if e_q > scfg.eps_q:
            new_mesh = with_quadrature(self.mesh, self.mesh.n_q + 1)
            event = "refine-q"
        else:
            e = objective_per_interval(tp, z, self.overhead) / self.mesh.interval_lengths
            pieces = pieces_for(e)
            if not pieces:
                pieces = {int(np.argmax(e)): 2}
            new_mesh = refine_intervals(self.mesh, pieces)
            event = "refine-h"
        if new_mesh.n_h > scfg.max_mesh_intervals:
            self.finish("max-mesh-intervals")
            return False
        lower, upper = flat_bounds(self.problem, new_mesh)
        new_traj = transfer(tp.trajectory(z), new_mesh, lower, upper)
        log.debug("%s: e_q=%.3g -> n_h=%d n_q=%d", event, e_q, new_mesh.n_h, new_mesh.n_q)
        self._set_mesh(new_mesh, new_traj.to_vector())
        self.record(event)
        return True

    def finish(self, status):
        self.trace.status = status
        self.record("terminate")
        tr = self.trace
        tr.wall_time = time.perf_counter() - self._t_start
        tr.final_mesh = self.mesh
        tr.final_trajectory = self.tp.trajectory(self.z)
        tr.final_f = self.f
        tr.residual_evals, tr.jacobian_evals = self.counter.snapshot()
        tr.overhead_residual_evals = self.overhead.residual_evals
        return tr.final_trajectory, tr

    def capped(self, scfg) -> bool:
        return self.block >= scfg.max_outer_iterations


def bisection_pieces(e: np.ndarray, eps_f: float) -> dict[int, int]:
    """Progressive rule: halve every interval whose error density reaches eps_f."""
    return {int(i): 2 for i in np.flatnonzero(e >= eps_f)}


def predictive_pieces(e: np.ndarray, eps_f: float, p: int, p_max: int) -> dict[int, int]:
    """Predictive rule: ``min(ceil((e_i / eps_f)^(1/(p+1))), p_max)`` pieces."""
    out = {}
    for i in np.flatnonzero(e >= eps_f):
        k = min(math.ceil((e[i] / eps_f) ** (1.0 / (p + 1))), p_max)
        if k >= 2:
            out[int(i)] = k
    return out


def refine_progressive(run: _Run, scfg: StrategyConfig) -> bool:
    return run.refine(scfg, lambda e: bisection_pieces(e, scfg.eps_f))


def refine_predictive(run: _Run, scfg: StrategyConfig) -> bool:
    p = scfg.p if scfg.p is not None else run.mesh.x_basis.degree
    return run.refine(scfg, lambda e: predictive_pieces(e, scfg.eps_f, p, scfg.p_max))


def _start(problem, mesh0, z0, scfg, ocfg, strategy):
    if z0 is None:
        z0 = initial_guess(problem, mesh0).to_vector()
    elif isinstance(z0, MeshedTrajectory):
        z0 = z0.to_vector()
    return _Run(problem, mesh0, z0, strategy, ocfg)


def solve_progressive(
    problem: DynamicFeasibilityProblem,
    mesh0: Mesh,
    z0=None,
    strategy_config: StrategyConfig | None = None,
    optimizer_config: OptimizerConfig | None = None,
):
    """Refinement with early termination.

    An inner block is cut short once its decrease ratio ``rho = f_new / f_old``
    reaches ``eps_rho`` (or the line search stalls); the mesh is then refined
    progressively (bisection or one extra quadrature point).
    """
    scfg = replace(strategy_config or StrategyConfig(), strategy="progressive")
    run = _start(problem, mesh0, z0, scfg, optimizer_config or OptimizerConfig(), "progressive")
    while True:
        if run.f <= scfg.eps_f:
            return run.finish("converged")
        if run.capped(scfg):
            return run.finish("max-outer-iterations")
        result, rho = run.inner()
        if run.f <= scfg.eps_f:
            return run.finish("converged")
        if result.stalled or rho >= scfg.eps_rho:
            if not refine_progressive(run, scfg):
                return run.trace.final_trajectory, run.trace


def solve_predictive(
    problem: DynamicFeasibilityProblem,
    mesh0: Mesh,
    z0=None,
    strategy_config: StrategyConfig | None = None,
    optimizer_config: OptimizerConfig | None = None,
):
    """Refinement without early termination.

    Each transcription is optimised until ``|theta| < eps_theta`` (or a stall),
    then intervals are split by the ``h^(p+1)`` error model.
    """
    scfg = replace(strategy_config or StrategyConfig(), strategy="predictive")
    run = _start(problem, mesh0, z0, scfg, optimizer_config or OptimizerConfig(), "predictive")
    while True:
        if run.f <= scfg.eps_f:
            return run.finish("converged")
        if run.capped(scfg):
            return run.finish("max-outer-iterations")
        result, _ = run.inner()
        if run.f <= scfg.eps_f:
            return run.finish("converged")
        if result.stalled or abs(run.theta()) < scfg.eps_theta:
            if not refine_predictive(run, scfg):
                return run.trace.final_trajectory, run.trace


def solve_fixed(
    problem: DynamicFeasibilityProblem,
    mesh: Mesh,
    z0=None,
    eps_f: float = 1.15e-1,
    optimizer_config: OptimizerConfig | None = None,
    max_outer_iterations: int = 100_000,
):
    scfg = StrategyConfig(strategy="fixed", eps_f=eps_f, max_outer_iterations=max_outer_iterations)
    run = _start(problem, mesh, z0, scfg, optimizer_config or OptimizerConfig(), "fixed")
    while True:
        if run.f <= scfg.eps_f:
            return run.finish("converged")
        if run.capped(scfg):
            return run.finish("max-outer-iterations")
        result, _ = run.inner()
        if run.f <= scfg.eps_f:
            return run.finish("converged")
        if result.stalled:
            return run.finish("stalled")


def solve(problem, mesh0, z0=None, strategy_config=None, optimizer_config=None):
    """Dispatch on ``strategy_config.strategy``."""
    scfg = strategy_config or StrategyConfig()
    if scfg.strategy == "fixed":
        return solve_fixed(
            problem, mesh0, z0, scfg.eps_f, optimizer_config, scfg.max_outer_iterations
        )
    if scfg.strategy == "predictive":
        return solve_predictive(problem, mesh0, z0, scfg, optimizer_config)
    return solve_progressive(problem, mesh0, z0, scfg, optimizer_config)


def initial_guess(problem: DynamicFeasibilityProblem, mesh: Mesh) -> MeshedTrajectory:
    """Straight line between the boundary sets' representative points, ``u = 0``.

    The representative point of an interval is its midpoint, or the finite end
    of a half-infinite interval, or 0 when both ends are infinite.
    """

    def rep(bset, fallback):
        lo, hi = bset.lower, bset.upper
        both = np.isfinite(lo) & np.isfinite(hi)
        mid = np.where(both, 0.5 * (np.where(both, lo, 0.0) + np.where(both, hi, 0.0)), np.nan)
        mid = np.where(np.isnan(mid) & np.isfinite(lo), lo, mid)
        mid = np.where(np.isnan(mid) & np.isfinite(hi), hi, mid)
        return np.where(np.isnan(mid), fallback, mid)

    a = rep(problem.initial, 0.0)
    b = rep(problem.terminal, a)
    traj = MeshedTrajectory.from_functions(
        mesh,
        lambda s: a + s * (b - a),
        lambda s: np.zeros(problem.n_u),
        problem.n_x,
        problem.n_u,
    )
    lower, upper = flat_bounds(problem, mesh)
    return MeshedTrajectory.from_vector(
        mesh, project(traj.to_vector(), lower, upper), problem.n_x, problem.n_u
    )
