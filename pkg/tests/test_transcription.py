import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from irmesh.mesh import MeshedTrajectory, bisect, uniform_mesh, x_node_count
from irmesh.models import cartpole_problem, linear_test_problem
from irmesh.problem import BoundarySet, BoxBounds, DynamicFeasibilityProblem, ResidualSystem, TimeDomain
from irmesh.transcription import (
    EvalCounter,
    ResidualEvaluationError,
    TranscriptionError,
    elevated,
    flat_bounds,
    mesh_metric,
    objective,
    objective_elevated,
    objective_per_interval,
    optimality_measure,
    transcribe,
    value_and_gradient,
)


def richardson_gradient(tp, z, h=1e-4):
    def central(step):
        out = np.empty_like(z)
        for j in range(z.size):
            e = np.zeros_like(z)
            e[j] = step * (1.0 + abs(z[j]))
            out[j] = (tp.objective(z + e) - tp.objective(z - e)) / (2.0 * e[j])
        return out

    return (4.0 * central(h / 2) - central(h)) / 3.0


def random_feasible(tp, rng, scale=2.0):
    return np.clip(rng.uniform(-scale, scale, tp.size), tp.flat_lower, tp.flat_upper)


def test_cartpole_size_formula():
    tp = transcribe(cartpole_problem(), uniform_mesh(2, 3, 3, 4))
    assert tp.size == 4 * (2 * 3 + 1) + 1 * 2 * 4 == 36


def test_boundary_pins():
    p = cartpole_problem()
    tp = transcribe(p, uniform_mesh(3, 2, 2, 4))
    np.testing.assert_array_equal(tp.flat_lower[:4], [0, 0, 0, 0])
    np.testing.assert_array_equal(tp.flat_upper[:4], [0, 0, 0, 0])
    last = slice(tp.n_xz - 4, tp.n_xz)
    np.testing.assert_array_equal(tp.flat_lower[last], [1, 0, np.pi, 0])
    np.testing.assert_array_equal(tp.flat_upper[last], [1, 0, np.pi, 0])
    assert np.all(np.isinf(tp.flat_lower[4 : tp.n_xz - 4]))


def test_single_interval_has_no_shared_nodes():
    tp = transcribe(cartpole_problem(), uniform_mesh(1, 2, 2, 4))
    assert tp.size == 4 * 3 + 3


def test_disjoint_boundary_fails_fast():
    p = linear_test_problem("constant-rate").problem
    bad = DynamicFeasibilityProblem(
        p.domain, p.system, BoxBounds([0.0], [1.0]), p.u_bounds, BoundarySet([2.0], [3.0]), BoundarySet([0.0], [1.0])
    )
    with pytest.raises(TranscriptionError):
        transcribe(bad, uniform_mesh(1, 1, 1, 1))


def test_constant_rate_zero_trajectory_objective_is_one():
    p = linear_test_problem("constant-rate").problem
    for n_h, d in ((1, 1), (3, 2), (5, 4)):
        tp = transcribe(p, uniform_mesh(n_h, d, d, 3))
        assert objective(tp, np.zeros(tp.size)) == pytest.approx(1.0, rel=1e-14)
        assert objective_elevated(tp, np.zeros(tp.size)) == pytest.approx(1.0, rel=1e-14)


def test_exact_line_has_zero_objective():
    kp = linear_test_problem("constant-rate")
    for d in (1, 2, 5):
        m = uniform_mesh(3, d, d, 4)
        z = MeshedTrajectory.from_functions(m, kp.x_of_s, kp.u_of_s, 1, 0).to_vector()
        tp = transcribe(kp.problem, m)
        assert objective(tp, z) <= 1e-24
        np.testing.assert_allclose(tp.gradient(z), 0.0, atol=1e-12)
        np.testing.assert_allclose(objective_per_interval(tp, z), 0.0, atol=1e-24)


def test_per_interval_sum_and_symmetry():
    kp = linear_test_problem("exponential")
    m = uniform_mesh(4, 2, 2, 4)
    tp = transcribe(kp.problem, m)
    z = MeshedTrajectory.from_functions(m, lambda s: 1.0 - s, lambda s: np.zeros(0), 1, 0).to_vector()
    parts = objective_per_interval(tp, z)
    assert np.all(parts >= 0)
    assert parts.sum() == pytest.approx(objective(tp, z), rel=1e-12)
    p0 = linear_test_problem("constant-rate").problem
    tp0 = transcribe(p0, uniform_mesh(2, 2, 2, 4))
    halves = objective_per_interval(tp0, np.zeros(tp0.size))
    assert halves[0] == pytest.approx(halves[1], rel=1e-15)


@pytest.mark.parametrize("n_h", [1, 2, 5])
@pytest.mark.parametrize("degree", [1, 2, 3])
def test_gradient_matches_finite_differences(n_h, degree, rng):
    tp = transcribe(cartpole_problem(), uniform_mesh(n_h, degree, degree, 4))
    z = random_feasible(tp, rng)
    _, g = value_and_gradient(tp, z)
    fd = richardson_gradient(tp, z)
    big = np.abs(g) > 1e-8
    assert np.max(np.abs(g - fd)[big] / np.abs(g[big])) <= 1e-6
    assert np.all(np.abs(fd[~big]) < 1e-6)


@pytest.mark.parametrize("kind", ["exponential", "polynomial"])
def test_gradient_linear_problems(kind, rng):
    tp = transcribe(linear_test_problem(kind).problem, uniform_mesh(3, 2, 1, 5))
    z = random_feasible(tp, rng, 1.0)
    np.testing.assert_allclose(tp.gradient(z), richardson_gradient(tp, z), rtol=1e-6, atol=1e-9)


def test_shared_node_gradient_accumulates(rng):
    kp = linear_test_problem("exponential")
    m = uniform_mesh(2, 2, 2, 4)
    tp = transcribe(kp.problem, m)
    z = rng.standard_normal(tp.size)
    g = tp.gradient(z)
    # Contribution of each interval alone, computed by zeroing the other's weight.
    def single(i):
        parts = lambda zz: objective_per_interval(tp, zz)[i]
        e = np.zeros_like(z)
        e[2] = 1e-6
        return (parts(z + e) - parts(z - e)) / 2e-6

    assert g[2] == pytest.approx(single(0) + single(1), rel=1e-7)


def test_non_finite_residual_carries_location():
    def residual(xdot, x, u):
        r = xdot - x
        r = np.array(r, dtype=float)
        r[..., 0] = np.where(x[..., 0] > 5.0, np.nan, r[..., 0])
        return r

    def jac(xdot, x, u):
        b = np.shape(x)[:-1]
        return np.ones(b + (1, 1)), -np.ones(b + (1, 1)), np.zeros(b + (1, 0))

    sysm = ResidualSystem(1, 0, 1, residual, jac)
    p = DynamicFeasibilityProblem(
        TimeDomain(0, 1), sysm, BoxBounds.unbounded(1), BoxBounds(np.zeros(0), np.zeros(0)),
        BoundarySet.free(1), BoundarySet.free(1),
    )
    tp = transcribe(p, uniform_mesh(3, 1, 1, 2))
    z = np.zeros(tp.size)
    z[2:] = 10.0
    with pytest.raises(ResidualEvaluationError) as err:
        tp.objective(z)
    assert err.value.interval == 1 and err.value.node == 1


def test_counters():
    tp = transcribe(cartpole_problem(), uniform_mesh(3, 2, 2, 5))
    c = EvalCounter()
    z = np.zeros(tp.size)
    tp.objective(z, c)
    assert (c.residual_evals, c.jacobian_evals) == (15, 0)
    tp.value_and_gradient(z, c)
    assert (c.residual_evals, c.jacobian_evals) == (30, 15)
    overhead = EvalCounter()
    objective_elevated(tp, z, overhead)
    assert overhead.residual_evals == 3 * 7 and c.residual_evals == 30


def test_counter_concurrent_increments():
    c = EvalCounter()

    def work():
        for _ in range(1000):
            c.add(residual=2, jacobian=1)

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert c.snapshot() == (16000, 8000)


def test_elevated_matches_for_exact_integrands():
    # Residual of a linear x on the constant-rate problem is constant: exact at any n_Q.
    kp = linear_test_problem("constant-rate")
    m = uniform_mesh(2, 2, 2, 2)
    tp = transcribe(kp.problem, m)
    z = MeshedTrajectory.from_functions(m, lambda s: 0.3 * s, lambda s: np.zeros(0), 1, 0).to_vector()
    assert objective_elevated(tp, z) == pytest.approx(objective(tp, z), rel=1e-12)
    assert elevated(tp).mesh.n_q == 4


def test_refinement_consistency_for_smooth_integrand():
    kp = linear_test_problem("exponential")
    m = uniform_mesh(2, 2, 2, 6)
    fun = lambda s: 1.0 - s + 0.5 * s * s
    tp_a = transcribe(kp.problem, m)
    tp_b = transcribe(kp.problem, bisect(m, 0))
    za = MeshedTrajectory.from_functions(m, fun, lambda s: np.zeros(0), 1, 0).to_vector()
    zb = MeshedTrajectory.from_functions(bisect(m, 0), fun, lambda s: np.zeros(0), 1, 0).to_vector()
    # (x' + x)^2 is a degree-4 polynomial: both rules integrate it exactly.
    assert objective(tp_a, za) == pytest.approx(objective(tp_b, zb), abs=1e-10)


def test_mesh_metric_layout():
    m = uniform_mesh(2, 2, 1, 4)
    p = linear_test_problem("exponential").problem
    metric = mesh_metric(p, m)
    assert metric.size == x_node_count(m) + 0
    np.testing.assert_allclose(metric, [0.5] * 5)


def test_optimality_documented_cases():
    lo, hi = np.array([0.0]), np.array([1.0])
    assert optimality_measure((lo, hi), np.array([0.3]), np.array([0.0])) == 0.0
    assert optimality_measure((lo, hi), np.array([0.0]), np.array([1.0])) == 0.0
    assert optimality_measure((lo, hi), np.array([0.5]), np.array([0.2])) == pytest.approx(-0.02, abs=1e-15)


@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 3))
def test_optimality_matches_per_coordinate_grid(seed, n):
    r = np.random.default_rng(seed)
    lo = r.uniform(-1, 0, n).round(4)
    hi = lo + r.uniform(0.01, 1.0, n).round(4)
    z = r.uniform(lo, hi)
    g = r.normal(0, 0.5, n)
    theta = optimality_measure((lo, hi), z, g)
    best = 0.0
    for j in range(n):
        grid = np.linspace(lo[j], hi[j], int(round((hi[j] - lo[j]) / 1e-4)) + 1)
        best += np.min(g[j] * (grid - z[j]) + 0.5 * (grid - z[j]) ** 2)
    assert theta <= 0.0
    assert abs(theta - best) <= 1e-8


def test_optimality_handles_infinite_bounds():
    theta = optimality_measure((np.array([-np.inf]), np.array([np.inf])), np.array([2.0]), np.array([0.4]))
    assert theta == pytest.approx(-0.08)


@given(seed=st.integers(0, 2**31 - 1))
def test_objective_nonnegative(seed):
    r = np.random.default_rng(seed)
    tp = transcribe(cartpole_problem(), uniform_mesh(int(r.integers(1, 4)), 2, 2, 4))
    assert tp.objective(random_feasible(tp, r)) >= 0.0


def test_flat_bounds_reported_through_transcription():
    lower, upper = flat_bounds(cartpole_problem(), uniform_mesh(2, 2, 2, 4))
    assert np.all(lower <= upper)
