"""Meshes ``(H, P, Q)``, h-refinement transforms and warm-start transfer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import InterpolationBasis, interpolation_matrix, make_basis

BOUNDARY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Mesh:
    interval_lengths: np.ndarray
    x_basis: InterpolationBasis
    u_basis: InterpolationBasis
    quadrature_degree: int

    def __post_init__(self):
        h = np.array(self.interval_lengths, dtype=float).reshape(-1)
        if h.size < 1:
            raise ValueError("a mesh needs at least one interval")
        if np.any(h <= 0.0):
            raise ValueError("interval lengths must be positive")
        if abs(h.sum() - 1.0) > 1e-12:
            raise ValueError(f"interval lengths must sum to 1, got {h.sum()!r}")
        if self.quadrature_degree < 1:
            raise ValueError("quadrature degree must be >= 1")
        h.setflags(write=False)
        object.__setattr__(self, "interval_lengths", h)

    @property
    def n_h(self) -> int:
        return self.interval_lengths.size

    @property
    def n_q(self) -> int:
        return self.quadrature_degree

    @property
    def boundaries(self) -> np.ndarray:
        """Normalised interval boundaries ``0 = s_0 < ... < s_nH = 1``."""
        s = np.concatenate(([0.0], np.cumsum(self.interval_lengths)))
        s[-1] = 1.0
        return s

    def __eq__(self, other):
        return (
            isinstance(other, Mesh)
            and self.quadrature_degree == other.quadrature_degree
            and self.x_basis == other.x_basis
            and self.u_basis == other.u_basis
            and np.array_equal(self.interval_lengths, other.interval_lengths)
        )

    __hash__ = None

    def describe(self) -> dict:
        return {
            "n_h": self.n_h,
            "n_q": self.n_q,
            "interval_lengths": [float(h) for h in self.interval_lengths],
            "boundaries": [float(s) for s in self.boundaries],
            "degree_x": self.x_basis.degree,
            "degree_u": self.u_basis.degree,
            "family_x": self.x_basis.family,
            "family_u": self.u_basis.family,
        }


def _renormalised(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return h / h.sum()


def uniform_mesh(
    n_h: int, degree_x: int, degree_u: int, n_q: int, family: str = "chebyshev-lobatto"
) -> Mesh:
    if min(n_h, degree_x, degree_u, n_q) < 1:
        raise ValueError("n_h, degrees and n_q must all be >= 1")
    return Mesh(
        interval_lengths=np.full(n_h, 1.0 / n_h),
        x_basis=make_basis(degree_x, family),
        u_basis=make_basis(degree_u, family),
        quadrature_degree=n_q,
    )


def partition(mesh: Mesh, interval_index: int, pieces: int) -> Mesh:
    """Split one interval into ``pieces`` equal sub-intervals."""
    if pieces < 2:
        raise ValueError(f"pieces must be >= 2, got {pieces}")
    if not 0 <= interval_index < mesh.n_h:
        raise IndexError(f"interval index {interval_index} out of range for n_h={mesh.n_h}")
    h = mesh.interval_lengths
    split = np.full(pieces, h[interval_index] / pieces)
    new_h = np.concatenate((h[:interval_index], split, h[interval_index + 1 :]))
    return Mesh(_renormalised(new_h), mesh.x_basis, mesh.u_basis, mesh.quadrature_degree)


def bisect(mesh: Mesh, interval_index: int) -> Mesh:
    return partition(mesh, interval_index, 2)


def refine_intervals(mesh: Mesh, pieces: dict[int, int]) -> Mesh:
    """Apply several partitions at once; ``pieces`` maps index -> piece count."""
    chunks = []
    for i, h in enumerate(mesh.interval_lengths):
        k = pieces.get(i, 1)
        if k < 1:
            raise ValueError("piece counts must be >= 1")
        chunks.append(np.full(k, h / k))
    return Mesh(_renormalised(np.concatenate(chunks)), mesh.x_basis, mesh.u_basis, mesh.quadrature_degree)


def with_quadrature(mesh: Mesh, n_q: int) -> Mesh:
    if n_q < 1:
        raise ValueError("quadrature degree must be >= 1")
    return Mesh(mesh.interval_lengths, mesh.x_basis, mesh.u_basis, n_q)


def x_node_count(mesh: Mesh) -> int:
    return mesh.n_h * mesh.x_basis.degree + 1


def x_node_index(mesh: Mesh) -> np.ndarray:
    """``idx[i, p]`` is the shared-storage row of node p of interval i."""
    d = mesh.x_basis.degree
    return np.arange(mesh.n_h)[:, None] * d + np.arange(d + 1)[None, :]


def node_times(mesh: Mesh, basis: InterpolationBasis) -> np.ndarray:
    """Normalised global time in [0, 1] of every node, shape ``(n_h, d + 1)``."""
    s = mesh.boundaries
    return s[:-1, None] + 0.5 * (basis.nodes[None, :] + 1.0) * mesh.interval_lengths[:, None]


@dataclass(frozen=True, eq=False)
class MeshedTrajectory:
    """Piecewise-polynomial ``(x, u)`` on a mesh.

    ``x_nodes`` holds the shared x storage, shape ``(n_h * d_x + 1, n_x)``, so
    the last node of interval i-1 and the first node of interval i are one row.
    ``u_coeffs`` has shape ``(n_h, d_u + 1, n_u)``.
    """

    mesh: Mesh
    x_nodes: np.ndarray
    u_coeffs: np.ndarray

    def __post_init__(self):
        xn = np.array(self.x_nodes, dtype=float)
        uc = np.array(self.u_coeffs, dtype=float)
        if xn.ndim != 2 or xn.shape[0] != x_node_count(self.mesh):
            raise ValueError(f"x_nodes has shape {xn.shape}, expected ({x_node_count(self.mesh)}, n_x)")
        if uc.ndim != 3 or uc.shape[:2] != (self.mesh.n_h, self.mesh.u_basis.size):
            raise ValueError(f"u_coeffs has shape {uc.shape}")
        xn.setflags(write=False)
        uc.setflags(write=False)
        object.__setattr__(self, "x_nodes", xn)
        object.__setattr__(self, "u_coeffs", uc)

    @property
    def n_x(self) -> int:
        return self.x_nodes.shape[1]

    @property
    def n_u(self) -> int:
        return self.u_coeffs.shape[2]

    @property
    def x_coeffs(self) -> np.ndarray:
        """Per-interval x coefficients, shape ``(n_h, d_x + 1, n_x)``."""
        return self.x_nodes[x_node_index(self.mesh)]

    def to_vector(self) -> np.ndarray:
        return np.concatenate((self.x_nodes.ravel(), self.u_coeffs.ravel()))

    @classmethod
    def from_vector(cls, mesh: Mesh, z, n_x: int, n_u: int) -> "MeshedTrajectory":
        z = np.asarray(z, dtype=float)
        n_xz = x_node_count(mesh) * n_x
        if z.size != n_xz + mesh.n_h * mesh.u_basis.size * n_u:
            raise ValueError(f"decision vector has length {z.size}, inconsistent with the mesh")
        return cls(
            mesh,
            z[:n_xz].reshape(-1, n_x),
            z[n_xz:].reshape(mesh.n_h, mesh.u_basis.size, n_u),
        )

    @classmethod
    def from_functions(cls, mesh: Mesh, x_fun, u_fun, n_x: int, n_u: int) -> "MeshedTrajectory":
        """Sample ``x_fun(s)``, ``u_fun(s)`` (normalised time s in [0, 1]) at the nodes."""
        tx = node_times(mesh, mesh.x_basis)
        s_x = np.concatenate((tx[:, :-1].ravel(), tx[-1:, -1]))
        xs = np.array([np.reshape(x_fun(s), n_x) for s in s_x], dtype=float).reshape(-1, n_x)
        tu = node_times(mesh, mesh.u_basis).ravel()
        us = np.array([np.reshape(u_fun(s), n_u) for s in tu], dtype=float)
        return cls(mesh, xs, us.reshape(mesh.n_h, mesh.u_basis.size, n_u))

    def locate(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Interval index and local tau for normalised times ``s``."""
        s = np.clip(np.atleast_1d(np.asarray(s, dtype=float)), 0.0, 1.0)
        b = self.mesh.boundaries
        idx = np.clip(np.searchsorted(b, s, side="right") - 1, 0, self.mesh.n_h - 1)
        tau = 2.0 * (s - b[idx]) / self.mesh.interval_lengths[idx] - 1.0
        return idx, np.clip(tau, -1.0, 1.0)

    def evaluate(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Values of ``x`` and ``u`` at normalised times ``s``."""
        idx, tau = self.locate(s)
        xc, uc = self.x_coeffs, self.u_coeffs
        xs = np.empty((idx.size, self.n_x))
        us = np.empty((idx.size, self.n_u))
        for i in np.unique(idx):
            sel = idx == i
            xs[sel] = interpolation_matrix(self.mesh.x_basis, tau[sel]) @ xc[i]
            us[sel] = interpolation_matrix(self.mesh.u_basis, tau[sel]) @ uc[i]
        return xs, us


def is_refinement(old: Mesh, new: Mesh, tol: float = BOUNDARY_TOL) -> bool:
    nb = new.boundaries
    pos = np.searchsorted(nb, old.boundaries)
    for s, j in zip(old.boundaries, pos):
        near = [abs(nb[k] - s) for k in (j - 1, j) if 0 <= k < nb.size]
        if not near or min(near) > tol:
            return False
    return True


def _evaluate_in(basis, coeffs, taus):
    return interpolation_matrix(basis, taus) @ coeffs


def transfer(
    traj: MeshedTrajectory,
    new_mesh: Mesh,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
) -> MeshedTrajectory:
    """Re-express ``traj`` on ``new_mesh`` by evaluating the old interpolants.

    ``new_mesh`` must be an h-refinement of (or share the partition with) the
    old mesh.  Each new interval lies in exactly one old interval and takes its
    values from that interval's polynomials, so ``u`` uses the polynomial of
    the old interval the new one belongs to.  If flat ``lower``/``upper``
    bounds for the new layout are given, the result is clamped into them.
    """
    old = traj.mesh
    if not is_refinement(old, new_mesh):
        raise ValueError("new mesh boundaries are not a refinement of the old mesh")
    ob = old.boundaries
    nb = new_mesh.boundaries
    mids = 0.5 * (nb[:-1] + nb[1:])
    owner = np.clip(np.searchsorted(ob, mids, side="right") - 1, 0, old.n_h - 1)

    xc_old, uc_old = traj.x_coeffs, traj.u_coeffs
    tx = node_times(new_mesh, new_mesh.x_basis)
    tu = node_times(new_mesh, new_mesh.u_basis)
    d_x = new_mesh.x_basis.degree
    x_new = np.empty((x_node_count(new_mesh), traj.n_x))
    u_new = np.empty((new_mesh.n_h, new_mesh.u_basis.size, traj.n_u))
    for j, i in enumerate(owner):
        h_old = old.interval_lengths[i]
        tau_x = np.clip(2.0 * (tx[j] - ob[i]) / h_old - 1.0, -1.0, 1.0)
        tau_u = np.clip(2.0 * (tu[j] - ob[i]) / h_old - 1.0, -1.0, 1.0)
        xs = _evaluate_in(old.x_basis, xc_old[i], tau_x)
        x_new[j * d_x : j * d_x + d_x] = xs[:-1]
        if j == new_mesh.n_h - 1:
            x_new[-1] = xs[-1]
        u_new[j] = _evaluate_in(old.u_basis, uc_old[i], tau_u)

    # Keep old boundary values bit-identical (interpolation at nodes is exact,
    # but the node-hit tolerance path may round).
    for k, s in enumerate(ob):
        row = np.argmin(np.abs(nb - s)) * d_x
        x_new[row] = traj.x_nodes[k * old.x_basis.degree]

    out = MeshedTrajectory(new_mesh, x_new, u_new)
    if lower is not None or upper is not None:
        z = out.to_vector()
        z = np.clip(
            z,
            -np.inf if lower is None else lower,
            np.inf if upper is None else upper,
        )
        out = MeshedTrajectory.from_vector(new_mesh, z, traj.n_x, traj.n_u)
    return out

