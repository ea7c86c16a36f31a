"""Two-metric projected gradient / conjugate-gradient solver for box constraints.

The objective is anything exposing ``objective(z, counter)``,
``value_and_gradient(z, counter)``, ``flat_lower`` and ``flat_upper``; a
:class:`~irmesh.transcription.TranscribedProblem` qualifies.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

DIRECTIONS = ("projected-steepest-descent", "projected-conjugate-gradient")
SCALINGS = ("mesh", "none")


@dataclass(frozen=True)
class OptimizerConfig:
    eps_z: float = 1e-6
    armijo_sigma: float = 1e-4
    backtrack_factor: float = 0.5
    alpha_init: float = 1.0
    max_backtracks: int = 40
    max_inner_iterations: int = 10000
    direction: str = "projected-conjugate-gradient"
    scaling: str = "mesh"
    interpolate: bool = True
    forward_tracking: bool = True
    max_expansions: int = 30

    def __post_init__(self):
        if not 0.0 < self.armijo_sigma < 1.0:
            raise ValueError("armijo_sigma must lie in (0, 1)")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.alpha_init <= 0.0:
            raise ValueError("alpha_init must be positive")
        if self.eps_z < 0.0:
            raise ValueError("eps_z must be nonnegative")
        if self.max_backtracks < 1 or self.max_inner_iterations < 1 or self.max_expansions < 0:
            raise ValueError("iteration caps must be >= 1")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.scaling not in SCALINGS:
            raise ValueError(f"scaling must be one of {SCALINGS}")


def project(z, lower, upper) -> np.ndarray:
    return np.minimum(np.maximum(z, lower), upper)


@dataclass(frozen=True)
class BindingSet:
    indices: frozenset

    def __contains__(self, j):
        return j in self.indices

    def __len__(self):
        return len(self.indices)

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        if self.indices:
            m[list(self.indices)] = True
        return m


def binding_tolerance(z, grad, lower, upper, eps_z) -> float:
    return min(eps_z, float(np.linalg.norm(z - project(z - grad, lower, upper))))


def binding_mask(z, grad, lower, upper, eps_z) -> np.ndarray:
    eps = binding_tolerance(z, grad, lower, upper, eps_z)
    at_lower = (lower <= z) & (z <= lower + eps) & (grad > 0.0)
    at_upper = (upper - eps <= z) & (z <= upper) & (grad < 0.0)
    return at_lower | at_upper


def binding_set(z, grad, lower, upper, eps_z) -> BindingSet:
    """Indices held on their bound: near a bound with the gradient pushing outward."""
    mask = binding_mask(z, grad, lower, upper, eps_z)
    return BindingSet(frozenset(np.flatnonzero(mask).tolist()))


@dataclass
class DirectionState:
    """Conjugate-gradient memory; reset whenever the decision space changes."""

    prev_grad: np.ndarray | None = None
    prev_scaled: np.ndarray | None = None
    prev_dir: np.ndarray | None = None
    prev_binding: np.ndarray | None = None
    restarts: int = 0

    def reset(self) -> None:
        self.prev_grad = self.prev_scaled = self.prev_dir = self.prev_binding = None


def search_direction(
    state: DirectionState, grad, binding, config: OptimizerConfig, scale=None
) -> np.ndarray:
    """Descent direction: ``-g`` on binding indices, Polak-Ribiere+ CG on the rest.

    ``scale`` is an optional positive diagonal metric for the free coordinates
    (preconditioned CG); ``None`` means the identity.  The free part restarts
    to the scaled steepest-descent direction on the first call, when the
    binding set changed since the previous call, or when the CG update fails
    to descend.  ``binding`` is a :class:`BindingSet` or boolean mask.
    """
    g = np.asarray(grad, dtype=float)
    mask = binding.mask(g.size) if isinstance(binding, BindingSet) else np.asarray(binding, dtype=bool)
    free = ~mask
    y = g if scale is None else scale * g
    d = -g.copy()
    d[free] = -y[free]
    use_cg = (
        config.direction == "projected-conjugate-gradient"
        and state.prev_dir is not None
        and state.prev_binding is not None
        and state.prev_binding.shape == mask.shape
        and np.array_equal(state.prev_binding, mask)
    )
    if use_cg:
        gf, yf = g[free], y[free]
        gpf, ypf = state.prev_grad[free], state.prev_scaled[free]
        denom = float(ypf @ gpf)
        beta = max(0.0, float(yf @ (gf - gpf)) / denom) if denom > 0.0 else 0.0
        d_free = -yf + beta * state.prev_dir[free]
        if float(d_free @ gf) < 0.0:
            d[free] = d_free
        else:
            state.restarts += 1
    state.prev_grad = g.copy()
    state.prev_scaled = y.copy()
    state.prev_dir = d.copy()
    state.prev_binding = mask.copy()
    return d


class LineSearchStatus(enum.Enum):
    ACCEPTED = "accepted"
    ZERO_DIRECTION = "zero-direction"
    FAILED = "failed"


@dataclass(frozen=True)
class LineSearchResult:
    z: np.ndarray
    f: float
    alpha: float
    status: LineSearchStatus
    trials: int

    @property
    def accepted(self) -> bool:
        return self.status is LineSearchStatus.ACCEPTED


def arc_slope(z, d, grad, lower, upper) -> float:
    """Right derivative of ``f(P(z + alpha d))`` at ``alpha = 0``.

    Components sitting on a bound with ``d`` pointing outward do not move.
    """
    blocked = ((z <= lower) & (d < 0.0)) | ((z >= upper) & (d > 0.0))
    return float(grad[~blocked] @ d[~blocked])


def line_search(
    tp, z, d, f_z, grad, config: OptimizerConfig, counter=None, alpha0: float | None = None
) -> LineSearchResult:
    """Armijo search along the projection arc ``P(z + alpha d)``.

    A trial ``alpha`` is accepted when ``f(z) - f(z(alpha)) >= sigma * <g, z - z(alpha)>``
    and f does not increase.  Trials start at ``alpha0`` (default
    ``config.alpha_init``) and shrink by ``backtrack_factor``.

    ``config.interpolate`` replaces the fixed shrink by the minimiser of the
    quadratic through ``f(z)``, the arc slope and the rejected trial,
    safeguarded to ``[0.1, backtrack_factor]`` times the rejected step.
    ``config.forward_tracking`` grows an initial step that is accepted
    outright by ``1 / backtrack_factor`` while the test keeps holding and f
    keeps falling.  Both only spend objective values, never gradients.
    """
    lower, upper = tp.flat_lower, tp.flat_upper
    if not np.any(d):
        return LineSearchResult(z, f_z, 0.0, LineSearchStatus.ZERO_DIRECTION, 0)
    alpha = config.alpha_init if alpha0 is None else alpha0
    slope = arc_slope(z, d, grad, lower, upper) if config.interpolate else 0.0

    def trial(a):
        z_new = project(z + a * d, lower, upper)
        step = z - z_new
        if not np.any(step):
            return z_new, None, False
        f_new = tp.objective(z_new, counter)
        return z_new, f_new, f_new <= f_z and f_z - f_new >= config.armijo_sigma * float(grad @ step)

    trials = 0
    for k in range(config.max_backtracks):
        z_new, f_new, ok = trial(alpha)
        trials += 1
        if f_new is None:
            # Projection absorbed the whole step; shrinking cannot help.
            return LineSearchResult(z, f_z, 0.0, LineSearchStatus.ZERO_DIRECTION, trials)
        if ok:
            break
        shrink = config.backtrack_factor
        if config.interpolate and slope < 0.0 and np.isfinite(f_new):
            curvature = f_new - f_z - slope * alpha
            if curvature > 0.0:
                shrink = min(max(-slope * alpha / (2.0 * curvature), 0.1), config.backtrack_factor)
        alpha *= shrink
    else:
        return LineSearchResult(z, f_z, 0.0, LineSearchStatus.FAILED, trials)

    if config.forward_tracking and k == 0:
        for _ in range(config.max_expansions):
            a_next = alpha / config.backtrack_factor
            z_next, f_next, ok = trial(a_next)
            trials += 1
            if not ok or f_next >= f_new or np.array_equal(z_next, z_new):
                break
            alpha, z_new, f_new = a_next, z_next, f_next
    return LineSearchResult(z_new, f_new, alpha, LineSearchStatus.ACCEPTED, trials)


class InnerStatus(enum.Enum):
    BINDING_STABLE = "binding-stable"
    STATIONARY = "stationary"
    STALLED = "stalled"
    ITERATION_CAP = "iteration-cap"


@dataclass
class InnerResult:
    z: np.ndarray
    f: float
    grad: np.ndarray
    status: InnerStatus
    iterations: int
    f_history: list = field(default_factory=list)
    alphas: list = field(default_factory=list)

    @property
    def stalled(self) -> bool:
        return self.status in (InnerStatus.STALLED, InnerStatus.STATIONARY)


def inner_solve(
    tp,
    z0,
    config: OptimizerConfig,
    counter=None,
    state: DirectionState | None = None,
    f0: float | None = None,
    g0: np.ndarray | None = None,
    on_step=None,
) -> InnerResult:
    """One box-constrained iteration block.

    Steps ``z <- P(z + alpha d)`` until the binding set repeats between
    consecutive iterates (after at least one accepted step), the line search
    stalls, or ``max_inner_iterations`` is hit.  ``f0``/``g0`` let callers
    reuse the value and gradient they already hold at ``z0``.  ``on_step`` is
    called with ``(z, f, grad, alpha)`` after every accepted step.
    """
    state = state if state is not None else DirectionState()
    lower, upper = tp.flat_lower, tp.flat_upper
    z = project(np.asarray(z0, dtype=float), lower, upper)
    if f0 is None or g0 is None or not np.array_equal(z, z0):
        f, g = tp.value_and_gradient(z, counter)
    else:
        f, g = f0, np.asarray(g0, dtype=float)
    mask = binding_mask(z, g, lower, upper, config.eps_z)
    scale = getattr(tp, "metric", None) if config.scaling == "mesh" else None
    history, alphas = [f], []
    m = 0
    while True:
        if m >= config.max_inner_iterations:
            return InnerResult(z, f, g, InnerStatus.ITERATION_CAP, m, history, alphas)
        d = search_direction(state, g, mask, config, scale)
        ls = line_search(tp, z, d, f, g, config, counter)
        if not ls.accepted:
            status = (
                InnerStatus.STATIONARY
                if ls.status is LineSearchStatus.ZERO_DIRECTION
                else InnerStatus.STALLED
            )
            state.reset()
            return InnerResult(z, f, g, status, m, history, alphas)
        z, f = ls.z, ls.f
        _, g = tp.value_and_gradient(z, counter)
        m += 1
        history.append(f)
        alphas.append(ls.alpha)
        if on_step is not None:
            on_step(z, f, g, ls.alpha)
        new_mask = binding_mask(z, g, lower, upper, config.eps_z)
        if np.array_equal(new_mask, mask):
            return InnerResult(z, f, g, InnerStatus.BINDING_STABLE, m, history, alphas)
        mask = new_mask
