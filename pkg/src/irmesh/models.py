"""Bundled problems: cart-pole swing-up and small problems with exact solutions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .problem import (
    BoundarySet,
    BoxBounds,
    DynamicFeasibilityProblem,
    ResidualSystem,
    TimeDomain,
)

DYNAMICS_FORMS = ("printed", "literature")


@dataclass(frozen=True)
class CartPoleParams:
    m1: float = 1.0
    m2: float = 0.3
    ell: float = 0.5
    g: float = 9.81
    t0: float = 0.0
    tf: float = 2.0
    target_position: float = 1.0
    target_angle: float = np.pi
    dynamics_form: str = "printed"

    def __post_init__(self):
        if min(self.m1, self.m2, self.ell) <= 0.0:
            raise ValueError("masses and pendulum length must be positive")
        if self.dynamics_form not in DYNAMICS_FORMS:
            raise ValueError(f"dynamics_form must be one of {DYNAMICS_FORMS}")


def cartpole_accelerations(params: CartPoleParams, x, u):
    """Right-hand sides ``(q1'', q2'')`` and their partials.

    ``x = (q1, q1', q2, q2')``.  Returns ``(f1, f2, df1, df2)`` where ``df*`` is a
    tuple of partials with respect to ``(q2, q2', u)``.

    ``dynamics_form="printed"`` (the default) uses::

        q1'' = (u + m2 l sin(q2) q2'^2 + m2 g cos(q2) sin(q2)) / (m1 + m2 sin^2(q2))
        q2'' = (u cos(q2) + m2 l cos(q2) sin(q2) q2'^2 + (m1 + m2) g sin(q2)) / (m1 + m2 sin^2(q2))

    ``"literature"`` is the common textbook variant: the angular numerator is
    negated and its denominator scaled by l.
    """
    m1, m2, ell, g = params.m1, params.m2, params.ell, params.g
    q2, w = x[..., 2], x[..., 3]
    u1 = u[..., 0]
    s, c = np.sin(q2), np.cos(q2)
    den = m1 + m2 * s * s
    if np.any(den < m1 * (1.0 - 1e-12)):
        raise FloatingPointError("cart-pole denominator below m1")
    dden = 2.0 * m2 * s * c

    n1 = u1 + m2 * ell * s * w * w + m2 * g * c * s
    dn1_q2 = m2 * ell * c * w * w + m2 * g * (c * c - s * s)
    f1 = n1 / den
    df1 = (
        (dn1_q2 * den - n1 * dden) / (den * den),
        2.0 * m2 * ell * s * w / den,
        1.0 / den,
    )

    n2 = u1 * c + m2 * ell * c * s * w * w + (m1 + m2) * g * s
    dn2_q2 = -u1 * s + m2 * ell * (c * c - s * s) * w * w + (m1 + m2) * g * c
    dn2_w = 2.0 * m2 * ell * c * s * w
    dn2_u = c
    if params.dynamics_form == "literature":
        n2, dn2_q2, dn2_w, dn2_u = -n2, -dn2_q2, -dn2_w, -dn2_u
        den2, dden2 = ell * den, ell * dden
    else:
        den2, dden2 = den, dden
    f2 = n2 / den2
    df2 = (
        (dn2_q2 * den2 - n2 * dden2) / (den2 * den2),
        dn2_w / den2,
        dn2_u / den2,
    )
    return f1, f2, df1, df2


def cartpole_system(params: CartPoleParams) -> ResidualSystem:
    def residual(xdot, x, u):
        f1, f2, _, _ = cartpole_accelerations(params, x, u)
        return np.stack(
            (
                xdot[..., 0] - x[..., 1],
                xdot[..., 1] - f1,
                xdot[..., 2] - x[..., 3],
                xdot[..., 3] - f2,
            ),
            axis=-1,
        )

    def jacobian(xdot, x, u):
        _, _, df1, df2 = cartpole_accelerations(params, x, u)
        batch = np.shape(x)[:-1]
        j_xdot = np.broadcast_to(np.eye(4), batch + (4, 4)).copy()
        j_x = np.zeros(batch + (4, 4))
        j_x[..., 0, 1] = -1.0
        j_x[..., 2, 3] = -1.0
        j_x[..., 1, 2] = -df1[0]
        j_x[..., 1, 3] = -df1[1]
        j_x[..., 3, 2] = -df2[0]
        j_x[..., 3, 3] = -df2[1]
        j_u = np.zeros(batch + (4, 1))
        j_u[..., 1, 0] = -df1[2]
        j_u[..., 3, 0] = -df2[2]
        return j_xdot, j_x, j_u

    return ResidualSystem(n_x=4, n_u=1, n_r=4, eval=residual, jacobian=jacobian, name="cartpole")


def cartpole_problem(
    params: CartPoleParams | None = None, control_bound: float | None = None
) -> DynamicFeasibilityProblem:
    params = params or CartPoleParams()
    ub = np.inf if control_bound is None else float(control_bound)
    return DynamicFeasibilityProblem(
        domain=TimeDomain(params.t0, params.tf),
        system=cartpole_system(params),
        x_bounds=BoxBounds.unbounded(4),
        u_bounds=BoxBounds([-ub], [ub]),
        initial=BoundarySet.fixed([0.0, 0.0, 0.0, 0.0]),
        terminal=BoundarySet.fixed([params.target_position, 0.0, params.target_angle, 0.0]),
        name="cartpole",
    )


@dataclass(frozen=True)
class KnownSolutionProblem:
    """A problem bundled with its exact solution as functions of time t."""

    problem: DynamicFeasibilityProblem
    x_exact: Callable[[float], np.ndarray]
    u_exact: Callable[[float], np.ndarray]

    def x_of_s(self, s):
        dom = self.problem.domain
        return self.x_exact(dom.t0 + s * dom.duration)

    def u_of_s(self, s):
        dom = self.problem.domain
        return self.u_exact(dom.t0 + s * dom.duration)


LINEAR_KINDS = ("constant-rate", "exponential", "polynomial")


def _linear_system(n_x: int, a: np.ndarray, b: np.ndarray, name: str, quad=None) -> ResidualSystem:
    # r = xdot - a x - b, optionally plus a quadratic term supplied by ``quad``.
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)

    def residual(xdot, x, u):
        r = xdot - np.einsum("kj,...j->...k", a, x) - b
        if quad is not None:
            r = r - quad[0](x)
        return r

    def jacobian(xdot, x, u):
        batch = np.shape(x)[:-1]
        j_x = np.broadcast_to(-a, batch + (n_x, n_x)).copy()
        if quad is not None:
            j_x = j_x - quad[1](x)
        return (
            np.broadcast_to(np.eye(n_x), batch + (n_x, n_x)).copy(),
            j_x,
            np.zeros(batch + (n_x, 0)),
        )

    return ResidualSystem(n_x=n_x, n_u=0, n_r=n_x, eval=residual, jacobian=jacobian, name=name)


def linear_test_problem(kind: str) -> KnownSolutionProblem:
    """Small problems on ``[0, 1]`` whose exact solution is known in closed form.

    ``constant-rate``: x' = 1, x(0) = 0, solution t.
    ``exponential``: x' = -x, x(0) = 1, solution exp(-t).
    ``polynomial``: x1' = 1, x2' = 3 x1^2 with zero initial state, solution (t, t^3).
    """
    domain = TimeDomain(0.0, 1.0)
    empty_u = BoxBounds(np.zeros(0), np.zeros(0))
    if kind == "constant-rate":
        system = _linear_system(1, [[0.0]], [1.0], kind)
        x0, xf = BoundarySet.fixed([0.0]), BoundarySet.free(1)
        x_exact = lambda t: np.array([t])
    elif kind == "exponential":
        system = _linear_system(1, [[-1.0]], [0.0], kind)
        x0, xf = BoundarySet.fixed([1.0]), BoundarySet.free(1)
        x_exact = lambda t: np.array([np.exp(-t)])
    elif kind == "polynomial":
        def q(x):
            return np.stack((np.zeros_like(x[..., 0]), 3.0 * x[..., 0] ** 2), axis=-1)

        def dq(x):
            out = np.zeros(np.shape(x)[:-1] + (2, 2))
            out[..., 1, 0] = 6.0 * x[..., 0]
            return out

        system = _linear_system(2, np.zeros((2, 2)), [1.0, 0.0], kind, quad=(q, dq))
        x0, xf = BoundarySet.fixed([0.0, 0.0]), BoundarySet.free(2)
        x_exact = lambda t: np.array([t, t**3])
    else:
        raise ValueError(f"unknown test problem {kind!r}; expected one of {LINEAR_KINDS}")
    problem = DynamicFeasibilityProblem(
        domain=domain,
        system=system,
        x_bounds=BoxBounds.unbounded(system.n_x),
        u_bounds=empty_u,
        initial=x0,
        terminal=xf,
        name=kind,
    )
    return KnownSolutionProblem(problem, x_exact, lambda t: np.zeros(0))


MODEL_NAMES = ("cartpole",) + LINEAR_KINDS

# Integrated-residual targets per bundled problem.  constant-rate is exactly
# representable; the others sit a little under their two-interval quadratic floor.
DEFAULT_EPS_F = {"cartpole": 1.15e-1, "constant-rate": 1e-10, "exponential": 1e-6, "polynomial": 1e-4}
# Stationarity thresholds for the predictive strategy; |theta| scales with f, so the
# cart-pole value would trigger refinement on every step of the small problems.
DEFAULT_EPS_THETA = {"cartpole": 2e-4, "constant-rate": 1e-12, "exponential": 1e-9, "polynomial": 1e-8}


def get_problem(name: str, **options) -> DynamicFeasibilityProblem:
    """Look a bundled problem up by CLI name."""
    if name == "cartpole":
        params = CartPoleParams(dynamics_form=options.get("dynamics_form", "printed"))
        return cartpole_problem(params, options.get("control_bound"))
    if name in LINEAR_KINDS:
        return linear_test_problem(name).problem
    raise KeyError(f"unknown problem {name!r}; expected one of {MODEL_NAMES}")
