"""Finite-dimensional box-constrained problem for one mesh.

The decision vector is ``[x_nodes.ravel(), u_coeffs.ravel()]`` (see
:class:`~irmesh.mesh.MeshedTrajectory`).  Continuity of ``x`` is built into the
layout, so the only constraints left are flat lower/upper bounds.

The objective is the normalised integrated squared residual::

    f(z) = sum_i h_i / (2 n_r) * sum_q w_q * |r(2 xdot_i(tau_q) / (h_i T), x_i(tau_q), u_i(tau_q))|^2
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisTensors, make_quadrature, make_tensors
from .mesh import Mesh, MeshedTrajectory, with_quadrature, x_node_count, x_node_index
from .problem import DynamicFeasibilityProblem, validate


class TranscriptionError(ValueError):
    """Raised when a mesh yields an empty feasible set."""


class ResidualEvaluationError(FloatingPointError):
    """Non-finite residual at a quadrature point."""

    def __init__(self, interval: int, node: int):
        super().__init__(f"non-finite residual in interval {interval} at quadrature node {node}")
        self.interval = interval
        self.node = node


@dataclass
class EvalCounter:
    """Point-wise residual and Jacobian evaluation counts.

    Increments are lock-protected so concurrent evaluations total exactly.
    """

    residual_evals: int = 0
    jacobian_evals: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, residual: int = 0, jacobian: int = 0) -> None:
        with self._lock:
            self.residual_evals += residual
            self.jacobian_evals += jacobian

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.residual_evals, self.jacobian_evals


@dataclass(frozen=True, eq=False)
class TranscribedProblem:
    problem: DynamicFeasibilityProblem
    mesh: Mesh
    x_tensors: BasisTensors
    u_tensors: BasisTensors
    quad_weights: np.ndarray
    x_index: np.ndarray
    flat_lower: np.ndarray
    flat_upper: np.ndarray
    metric: np.ndarray

    @property
    def size(self) -> int:
        return self.flat_lower.size

    @property
    def n_xz(self) -> int:
        return x_node_count(self.mesh) * self.problem.n_x

    def unpack(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Per-interval coefficient arrays ``(n_h, d_x+1, n_x)``, ``(n_h, d_u+1, n_u)``."""
        z = np.asarray(z, dtype=float)
        p, m = self.problem, self.mesh
        x_nodes = z[: self.n_xz].reshape(-1, p.n_x)
        u = z[self.n_xz :].reshape(m.n_h, m.u_basis.size, p.n_u)
        return x_nodes[self.x_index], u

    def trajectory(self, z) -> MeshedTrajectory:
        return MeshedTrajectory.from_vector(self.mesh, z, self.problem.n_x, self.problem.n_u)

    # Method forms so optimiser code can treat any objective duck-typed.
    def objective(self, z, counter: EvalCounter | None = None) -> float:
        return objective(self, z, counter)

    def gradient(self, z, counter: EvalCounter | None = None) -> np.ndarray:
        return gradient(self, z, counter)

    def value_and_gradient(self, z, counter: EvalCounter | None = None) -> tuple[float, np.ndarray]:
        return value_and_gradient(self, z, counter)


def _bounds(problem: DynamicFeasibilityProblem, mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    n_nodes = x_node_count(mesh)
    xl = np.tile(problem.x_bounds.lower, (n_nodes, 1))
    xu = np.tile(problem.x_bounds.upper, (n_nodes, 1))
    xl[0] = np.maximum(xl[0], problem.initial.lower)
    xu[0] = np.minimum(xu[0], problem.initial.upper)
    xl[-1] = np.maximum(xl[-1], problem.terminal.lower)
    xu[-1] = np.minimum(xu[-1], problem.terminal.upper)
    n_u_total = mesh.n_h * mesh.u_basis.size
    ul = np.tile(problem.u_bounds.lower, n_u_total)
    uu = np.tile(problem.u_bounds.upper, n_u_total)
    return np.concatenate((xl.ravel(), ul)), np.concatenate((xu.ravel(), uu))


def flat_bounds(problem: DynamicFeasibilityProblem, mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Flat decision-vector bounds with boundary sets intersected into X."""
    lower, upper = _bounds(problem, mesh)
    bad = np.flatnonzero(lower > upper)
    if bad.size:
        raise TranscriptionError(
            f"empty feasible set: {bad.size} decision variables have lower > upper (first at {bad[0]})"
        )
    return lower, upper


def mesh_metric(problem: DynamicFeasibilityProblem, mesh: Mesh) -> np.ndarray:
    """Diagonal metric ``h`` on x nodes and ``1/h`` on u nodes.

    Curvature of the objective grows like ``1/h`` in x (scaled derivative) and
    shrinks like ``h`` in u; this scaling makes it mesh independent.  Shared x
    nodes take the mean length of their two intervals.
    """
    h = mesh.interval_lengths
    d = mesh.x_basis.degree
    hx = np.empty(x_node_count(mesh))
    for i in range(mesh.n_h):
        hx[i * d : (i + 1) * d + 1] = h[i]
    hx[d:-1:d] = 0.5 * (h[:-1] + h[1:])
    hu = np.repeat(1.0 / h, mesh.u_basis.size)
    return np.concatenate((np.repeat(hx, problem.n_x), np.repeat(hu, problem.n_u)))


def transcribe(problem: DynamicFeasibilityProblem, mesh: Mesh) -> TranscribedProblem:
    issues = validate(problem)
    if issues:
        raise TranscriptionError("invalid problem: " + "; ".join(issues))
    rule = make_quadrature(mesh.n_q)
    if abs(rule.weights.sum() - 2.0) > 1e-12:
        raise TranscriptionError("quadrature weights must sum to 2 on [-1, 1]")
    lower, upper = flat_bounds(problem, mesh)
    metric = mesh_metric(problem, mesh)
    for arr in (lower, upper, metric):
        arr.setflags(write=False)
    return TranscribedProblem(
        problem=problem,
        mesh=mesh,
        x_tensors=make_tensors(mesh.x_basis, rule),
        u_tensors=make_tensors(mesh.u_basis, rule),
        quad_weights=rule.weights,
        x_index=x_node_index(mesh),
        flat_lower=lower,
        flat_upper=upper,
        metric=metric,
    )


def _states(tp: TranscribedProblem, z):
    xc, uc = tp.unpack(z)
    h = tp.mesh.interval_lengths
    scale = 2.0 / (h * tp.problem.domain.duration)
    L, D = tp.x_tensors.eval_matrix, tp.x_tensors.diff_matrix
    x_q = np.einsum("qp,ipj->iqj", L, xc)
    xdot_q = np.einsum("qp,ipj->iqj", D, xc) * scale[:, None, None]
    u_q = np.einsum("qp,ipj->iqj", tp.u_tensors.eval_matrix, uc)
    return xdot_q, x_q, u_q, scale


def _check_finite(r: np.ndarray) -> None:
    if not np.all(np.isfinite(r)):
        i, q = np.argwhere(~np.isfinite(r).all(axis=-1))[0]
        raise ResidualEvaluationError(int(i), int(q))


def _residuals(tp: TranscribedProblem, z):
    xdot_q, x_q, u_q, scale = _states(tp, z)
    r = np.asarray(tp.problem.system.eval(xdot_q, x_q, u_q), dtype=float)
    _check_finite(r)
    return r, (xdot_q, x_q, u_q, scale)


def _per_interval(tp: TranscribedProblem, r: np.ndarray) -> np.ndarray:
    h = tp.mesh.interval_lengths
    sq = np.einsum("iqk,iqk->iq", r, r)
    return h / (2.0 * tp.problem.n_r) * (sq @ tp.quad_weights)


def objective_per_interval(tp: TranscribedProblem, z, counter: EvalCounter | None = None) -> np.ndarray:
    """Contribution of each interval to the objective, shape ``(n_h,)``."""
    r, _ = _residuals(tp, z)
    if counter is not None:
        counter.add(residual=tp.mesh.n_h * tp.mesh.n_q)
    return _per_interval(tp, r)


def objective(tp: TranscribedProblem, z, counter: EvalCounter | None = None) -> float:
    return float(objective_per_interval(tp, z, counter).sum())


def value_and_gradient(
    tp: TranscribedProblem, z, counter: EvalCounter | None = None
) -> tuple[float, np.ndarray]:
    """Objective and its exact gradient with respect to the decision vector."""
    r, (xdot_q, x_q, u_q, scale) = _residuals(tp, z)
    j_xdot, j_x, j_u = tp.problem.system.jacobian(xdot_q, x_q, u_q)
    m, p = tp.mesh, tp.problem
    if counter is not None:
        counter.add(residual=m.n_h * m.n_q, jacobian=m.n_h * m.n_q)
    value = float(_per_interval(tp, r).sum())

    # d f / d r at each quadrature point
    rw = r * ((m.interval_lengths / p.n_r)[:, None] * tp.quad_weights[None, :])[:, :, None]
    g_xdot = np.einsum("iqk,iqkj->iqj", rw, j_xdot) * scale[:, None, None]
    g_x = np.einsum("iqk,iqkj->iqj", rw, j_x)
    g_u = np.einsum("iqk,iqkj->iqj", rw, j_u)
    L, D = tp.x_tensors.eval_matrix, tp.x_tensors.diff_matrix
    gx_local = np.einsum("qp,iqj->ipj", D, g_xdot) + np.einsum("qp,iqj->ipj", L, g_x)
    gu = np.einsum("qp,iqj->ipj", tp.u_tensors.eval_matrix, g_u)

    gx_nodes = np.zeros((x_node_count(m), p.n_x))
    np.add.at(gx_nodes, tp.x_index.ravel(), gx_local.reshape(-1, p.n_x))
    return value, np.concatenate((gx_nodes.ravel(), gu.ravel()))


def gradient(tp: TranscribedProblem, z, counter: EvalCounter | None = None) -> np.ndarray:
    return value_and_gradient(tp, z, counter)[1]


def elevated(tp: TranscribedProblem, extra: int = 2) -> TranscribedProblem:
    """The same problem on the mesh with ``n_q + extra`` quadrature points."""
    return transcribe(tp.problem, with_quadrature(tp.mesh, tp.mesh.n_q + extra))


def objective_elevated(tp: TranscribedProblem, z, counter: EvalCounter | None = None) -> float:
    """Objective with quadrature degree raised by two.

    Shares the decision layout of ``tp`` since only the quadrature changes.
    Pass a separate overhead counter to keep these evaluations out of the
    headline counts.
    """
    return objective(elevated(tp), z, counter)


def optimality_measure(tp_or_bounds, z, grad) -> float:
    """First-order optimality function ``min_{z'} <g, z' - z> + |z' - z|^2 / 2``.

    Always <= 0 and zero exactly at first-order stationary points.
    ``tp_or_bounds`` is a transcribed problem or a ``(lower, upper)`` pair.
    """
    if isinstance(tp_or_bounds, tuple):
        lower, upper = tp_or_bounds
    else:
        lower, upper = tp_or_bounds.flat_lower, tp_or_bounds.flat_upper
    z = np.asarray(z, dtype=float)
    g = np.asarray(grad, dtype=float)
    delta = np.clip(z - g, lower, upper) - z
    return min(float(np.sum(g * delta + 0.5 * delta * delta)), 0.0)
