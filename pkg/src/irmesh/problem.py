"""Continuous-time dynamic feasibility problems.

A problem asks for differential variables ``x(t)`` and algebraic variables
``u(t)`` on ``[t0, tf]`` such that ``r(xdot, x, u) = 0`` almost everywhere,
subject to box bounds and interval-valued boundary conditions on ``x``.

Residual callables are vectorised: the channel axis is last and any number of
leading batch axes is allowed.  ``eval`` maps arrays shaped ``(..., n_x)``,
``(..., n_x)``, ``(..., n_u)`` to ``(..., n_r)``; ``jacobian`` returns the three
partial-derivative blocks shaped ``(..., n_r, n_x)``, ``(..., n_r, n_x)`` and
``(..., n_r, n_u)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ResidualFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
JacobianFn = Callable[
    [np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]
]


def _frozen(values, n=None) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1 if n is None else n)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeDomain:
    t0: float
    tf: float

    @property
    def duration(self) -> float:
        return self.tf - self.t0


@dataclass(frozen=True)
class ResidualSystem:
    n_x: int
    n_u: int
    n_r: int
    eval: ResidualFn
    jacobian: JacobianFn
    name: str = "residual"


@dataclass(frozen=True)
class BoxBounds:
    """Componentwise bounds; entries may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", _frozen(self.lower))
        object.__setattr__(self, "upper", _frozen(self.upper))

    @classmethod
    def unbounded(cls, n: int) -> "BoxBounds":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @property
    def size(self) -> int:
        return self.lower.size

    def contains(self, other: "BoxBounds") -> bool:
        return bool(np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper))


class BoundarySet(BoxBounds):
    """Interval boundary condition on ``x``; equality is ``lower == upper``."""

    @classmethod
    def fixed(cls, values) -> "BoundarySet":
        values = np.asarray(values, dtype=float)
        return cls(values, values)

    @classmethod
    def free(cls, n: int) -> "BoundarySet":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))


@dataclass(frozen=True)
class DynamicFeasibilityProblem:
    domain: TimeDomain
    system: ResidualSystem
    x_bounds: BoxBounds
    u_bounds: BoxBounds
    initial: BoundarySet
    terminal: BoundarySet
    name: str = field(default="dfp")

    @property
    def n_x(self) -> int:
        return self.system.n_x

    @property
    def n_u(self) -> int:
        return self.system.n_u

    @property
    def n_r(self) -> int:
        return self.system.n_r


def validate(problem: DynamicFeasibilityProblem) -> list[str]:
    """Return a list of human-readable violations; empty when well formed."""
    issues = []
    dom = problem.domain
    if not (np.isfinite(dom.t0) and np.isfinite(dom.tf)):
        issues.append("non-finite time domain")
    elif dom.tf <= dom.t0:
        issues.append("degenerate time domain")

    sysm = problem.system
    if sysm.n_x < 1 or sysm.n_u < 0 or sysm.n_r < 1:
        issues.append("invalid system dimensions")
    for label, box, n in (
        ("x_bounds", problem.x_bounds, sysm.n_x),
        ("u_bounds", problem.u_bounds, sysm.n_u),
        ("initial", problem.initial, sysm.n_x),
        ("terminal", problem.terminal, sysm.n_x),
    ):
        if box.lower.size != n or box.upper.size != n:
            issues.append(f"dimension mismatch in {label}: expected {n}, got {box.lower.size}/{box.upper.size}")
            continue
        if np.any(np.isnan(box.lower)) or np.any(np.isnan(box.upper)):
            issues.append(f"NaN bound in {label}")
        elif np.any(box.lower > box.upper):
            issues.append(f"inverted bounds in {label}")

    for label, bset in (("initial", problem.initial), ("terminal", problem.terminal)):
        if bset.size == problem.x_bounds.size and not problem.x_bounds.contains(bset):
            issues.append(f"boundary set outside X ({label})")
    return issues


@dataclass(frozen=True)
class JacobianCheck:
    passed: bool
    max_rel_error: float


def _fd_jacobian(fun, xdot, x, u, step_scale):
    blocks = []
    for k, arg in enumerate((xdot, x, u)):
        cols = []
        for j in range(arg.size):
            h = step_scale * (1.0 + abs(arg[j]))
            args_p = [xdot.copy(), x.copy(), u.copy()]
            args_m = [xdot.copy(), x.copy(), u.copy()]
            args_p[k][j] += h
            args_m[k][j] -= h
            cols.append((fun(*args_p) - fun(*args_m)) / (2.0 * h))
        n_r = np.asarray(fun(xdot, x, u)).size
        blocks.append(np.array(cols).T if cols else np.zeros((n_r, 0)))
    return blocks


def check_jacobian(
    system: ResidualSystem,
    sample_points: Sequence[tuple],
    tolerance: float = 1e-6,
    step: float = 1e-6,
) -> JacobianCheck:
    """Compare ``system.jacobian`` against central finite differences.

    The error of an entry is ``|analytic - fd| / (1 + |fd|)``; the check
    passes when the largest one over all points is at most ``tolerance``.
    """
    worst = 0.0
    for xdot, x, u in sample_points:
        xdot = np.asarray(xdot, dtype=float).reshape(system.n_x)
        x = np.asarray(x, dtype=float).reshape(system.n_x)
        u = np.asarray(u, dtype=float).reshape(system.n_u)
        analytic = system.jacobian(xdot, x, u)
        numeric = _fd_jacobian(system.eval, xdot, x, u, step)
        for a, n in zip(analytic, numeric):
            a = np.asarray(a, dtype=float).reshape(n.shape)
            if a.size:
                worst = max(worst, float(np.max(np.abs(a - n) / (1.0 + np.abs(n)))))
    return JacobianCheck(passed=worst <= tolerance, max_rel_error=worst)
