"""Lagrange bases in barycentric form and Gauss-Legendre quadrature on [-1, 1]."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

FAMILIES = ("chebyshev-lobatto", "legendre-lobatto", "uniform")

# |tau - node| below this counts as a node hit in barycentric evaluation.
NODE_HIT_TOL = 1e-14


def _readonly(arr) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class InterpolationBasis:
    degree: int
    family: str
    nodes: np.ndarray
    bary_weights: np.ndarray

    @property
    def size(self) -> int:
        return self.degree + 1

    def __eq__(self, other):
        return (
            isinstance(other, InterpolationBasis)
            and self.degree == other.degree
            and self.family == other.family
        )

    def __hash__(self):
        return hash((self.degree, self.family))


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    degree: int
    nodes: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True, eq=False)
class BasisTensors:
    """Basis values ``L`` and tau-derivatives ``D`` at the quadrature nodes.

    ``L[q, p]`` is the p-th Lagrange polynomial at quadrature node q.
    """

    eval_matrix: np.ndarray
    diff_matrix: np.ndarray


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    """Weights ``1 / prod_{k != p}(nodes[p] - nodes[k])`` scaled to max |w| = 1."""
    nodes = np.asarray(nodes, dtype=float)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    # Scaling each factor by 4/(b - a) = 2 keeps products in range for high degree.
    w = 1.0 / np.prod(2.0 * diff, axis=1)
    return w / np.max(np.abs(w))


def _lobatto_nodes(degree: int, family: str) -> np.ndarray:
    if family == "chebyshev-lobatto":
        p = np.arange(degree + 1)
        nodes = np.cos(np.pi * (degree - p) / degree)
        if degree % 2 == 0:
            nodes[degree // 2] = 0.0
        return nodes
    if family == "legendre-lobatto":
        # Interior nodes are the roots of P'_degree.
        coeffs = np.zeros(degree + 1)
        coeffs[-1] = 1.0
        interior = np.polynomial.legendre.Legendre(coeffs).deriv().roots().real
        return np.concatenate(([-1.0], np.sort(interior), [1.0]))
    if family == "uniform":
        return np.linspace(-1.0, 1.0, degree + 1)
    raise ValueError(f"unsupported node family {family!r}; expected one of {FAMILIES}")


@functools.lru_cache(maxsize=None)
def make_basis(degree: int, family: str = "chebyshev-lobatto") -> InterpolationBasis:
    if family not in FAMILIES:
        raise ValueError(f"unsupported node family {family!r}; expected one of {FAMILIES}")
    if degree < 1:
        raise ValueError(f"basis degree must be >= 1, got {degree}")
    nodes = _lobatto_nodes(degree, family)
    nodes[0], nodes[-1] = -1.0, 1.0
    return InterpolationBasis(
        degree=degree,
        family=family,
        nodes=_readonly(nodes),
        bary_weights=_readonly(barycentric_weights(nodes)),
    )


@functools.lru_cache(maxsize=None)
def make_quadrature(n_q: int) -> QuadratureRule:
    """Gauss-Legendre rule with ``n_q`` points (Golub-Welsch).

    Nodes are the eigenvalues of the symmetric tridiagonal Jacobi matrix of
    the Legendre recurrence; weights are ``2 * v0**2`` from the normalised
    eigenvectors.
    """
    if n_q < 1:
        raise ValueError(f"quadrature degree must be >= 1, got {n_q}")
    k = np.arange(1, n_q)
    beta = k / np.sqrt(4.0 * k * k - 1.0)
    jacobi = np.diag(beta, 1) + np.diag(beta, -1)
    nodes, vecs = np.linalg.eigh(jacobi)
    weights = 2.0 * vecs[0, :] ** 2
    # Symmetrise to remove eigen-solver asymmetry.
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if n_q % 2 == 1:
        nodes[n_q // 2] = 0.0
    return QuadratureRule(degree=n_q, nodes=_readonly(nodes), weights=_readonly(weights))


def interpolation_matrix(basis: InterpolationBasis, taus) -> np.ndarray:
    """Rows of Lagrange basis values at each tau, shape ``(len(taus), d + 1)``."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    diff = taus[:, None] - basis.nodes[None, :]
    hit = np.abs(diff) < NODE_HIT_TOL
    hit_rows = hit.any(axis=1)
    safe = np.where(hit, 1.0, diff)
    s = basis.bary_weights / safe
    mat = s / s.sum(axis=1, keepdims=True)
    mat[hit_rows] = hit[hit_rows].astype(float)
    return mat


def differentiation_matrix(basis: InterpolationBasis, taus) -> np.ndarray:
    """Rows of Lagrange basis tau-derivatives at each tau."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    nodes, w = basis.nodes, basis.bary_weights
    out = np.empty((taus.size, nodes.size))
    for row, tau in enumerate(taus):
        diff = tau - nodes
        hit = np.flatnonzero(np.abs(diff) < NODE_HIT_TOL)
        if hit.size:
            i = hit[0]
            dn = nodes[i] - nodes
            dn[i] = 1.0
            col = (w / w[i]) / dn
            col[i] = 0.0
            col[i] = -col.sum()
            out[row] = col
        else:
            s = w / diff
            big_s = s.sum()
            lag = s / big_s
            a = np.sum(s / diff) / big_s
            out[row] = lag * (a - 1.0 / diff)
    return out


def eval_interpolant(basis: InterpolationBasis, coeffs, tau):
    """Evaluate the interpolant with nodal values ``coeffs`` at ``tau``.

    ``coeffs`` may carry trailing channel axes; the first axis runs over nodes.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    scalar = np.ndim(tau) == 0
    mat = interpolation_matrix(basis, tau)
    val = np.tensordot(mat, coeffs, axes=(1, 0))
    return val[0] if scalar else val


def eval_interpolant_derivative(basis: InterpolationBasis, coeffs, tau):
    coeffs = np.asarray(coeffs, dtype=float)
    scalar = np.ndim(tau) == 0
    mat = differentiation_matrix(basis, tau)
    val = np.tensordot(mat, coeffs, axes=(1, 0))
    return val[0] if scalar else val


@functools.lru_cache(maxsize=None)
def _tensors(degree: int, family: str, n_q: int) -> BasisTensors:
    basis = make_basis(degree, family)
    rule = make_quadrature(n_q)
    return BasisTensors(
        eval_matrix=_readonly(interpolation_matrix(basis, rule.nodes)),
        diff_matrix=_readonly(differentiation_matrix(basis, rule.nodes)),
    )


def make_tensors(basis: InterpolationBasis, rule: QuadratureRule) -> BasisTensors:
    return _tensors(basis.degree, basis.family, rule.degree)
