import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irgnm.fem import Field, build_mesh, interpolate, l2_norm
from irgnm.pde import PdeProblem, solve_forward, solve_linearized
from irgnm.subproblem import (
    InnerSolverError,
    QuadraticStep,
    box_qp,
    reduce_step,
    solve_ivanov_step,
    solve_tikhonov_step,
)

from oracles import box_enumeration, l1_enumeration, prox_gradient, random_instance


def misfit(step, s):
    """Unhalved misfit of the linearized model, evaluated directly."""
    p = step.problem
    m = p.mesh
    ds = Field(m, (s.values - step.current_source.values) * p.control_mask)
    v = solve_linearized(p, step.linearization_state, ds)
    r = (step.linearization_state + v - step.data).values * p.observation_mask
    return float(r @ (m.mass @ r))


@pytest.fixture(scope="module")
def smooth_step():
    m = build_mesh(8)
    p = PdeProblem(1.0, m)
    s_k = interpolate(m, lambda x, y: -3 + 2 * x * y)
    u, _ = solve_forward(p, s_k, rtol=1e-12)
    y_true, _ = solve_forward(p, interpolate(m, lambda x, y: -5 + 4 * np.exp(-8 * (x**2 + y**2))), rtol=1e-12)
    return QuadraticStep(p, u, s_k, y_true)


def test_zero_misfit_is_stationary():
    m = build_mesh(8)
    p = PdeProblem(1.0, m)
    s_k = interpolate(m, lambda x, y: 2 * x - y)
    u, _ = solve_forward(p, s_k)
    step = QuadraticStep(p, u, s_k, u)
    res = solve_ivanov_step(step, 5.0)
    np.testing.assert_allclose(res.s_next.values, s_k.values, atol=1e-10)
    assert np.max(np.abs(res.v.values)) < 1e-10


def test_zero_misfit_tikhonov_returns_zero():
    m = build_mesh(8)
    p = PdeProblem(1.0, m)
    zero = Field(m, np.zeros(m.n_nodes))
    u, _ = solve_forward(p, zero)
    res = solve_tikhonov_step(QuadraticStep(p, u, zero, u), 1e-3)
    assert np.all(res.s_next.values == 0.0)
    assert res.active_set_size == m.n_nodes


def _single_dof():
    m = build_mesh(2)
    mask = np.zeros(m.n_nodes, bool)
    mask[4] = True
    p = PdeProblem(0.0, m, control_mask=mask)
    u = Field(m, np.zeros(m.n_nodes))
    s_k = Field(m, np.zeros(m.n_nodes))
    y = Field(m, np.array([0, 0, 0, 0, 0.7, 0, 0, 0, 0.0]))
    # state per unit source on the single interior node
    e = np.zeros(m.n_nodes)
    e[4] = 1.0
    g = solve_linearized(p, u, Field(m, e)).values
    M = m.mass.toarray()
    x_ls = float(g @ M @ y.values) / float(g @ M @ g)
    return p, u, s_k, y, g, x_ls


def test_ivanov_inactive_box_is_least_squares():
    p, u, s_k, y, g, x_ls = _single_dof()
    res = solve_ivanov_step(QuadraticStep(p, u, s_k, y), 1e6)
    assert res.s_next.values[4] == pytest.approx(x_ls, rel=1e-10)
    assert res.active_set_size == 0


def test_tikhonov_small_alpha_limit():
    p, u, s_k, y, g, x_ls = _single_dof()
    M = p.mesh.mass.toarray()
    a = float(g @ M @ g)
    w = p.mesh.weights[4]
    for alpha in (1e-2, 1e-4, 1e-6):
        res = solve_tikhonov_step(QuadraticStep(p, u, s_k, y), alpha)
        # scalar soft threshold: x = sign(x_ls) (|x_ls| - alpha w / (2a))_+
        expect = np.sign(x_ls) * max(abs(x_ls) - alpha * w / (2 * a), 0.0)
        assert res.s_next.values[4] == pytest.approx(expect, rel=1e-9)
    assert res.s_next.values[4] == pytest.approx(x_ls, rel=1e-3)


def test_reduced_problem_matches_direct_misfit(smooth_step):
    red = reduce_step(smooth_step)
    rng = np.random.default_rng(0)
    m = smooth_step.problem.mesh
    for _ in range(3):
        x = rng.uniform(-5, 5, m.n_nodes)
        assert red.misfit(x) == pytest.approx(misfit(smooth_step, Field(m, x)), rel=1e-10)


def test_adjoint_gradient_matches_finite_differences(smooth_step):
    p = smooth_step.problem
    m = p.mesh
    rng = np.random.default_rng(1)
    s = Field(m, rng.uniform(-5, 5, m.n_nodes))
    ds = Field(m, rng.uniform(-1, 1, m.n_nodes))
    # gradient of the unhalved misfit is -M lam, lam from the adjoint equation
    from irgnm.pde import adjoint_state

    v = solve_linearized(p, smooth_step.linearization_state, s - smooth_step.current_source)
    lam = adjoint_state(p, smooth_step.linearization_state, v, smooth_step.data)
    grad = -(m.mass @ lam.values)
    t = 1e-4
    fd = (misfit(smooth_step, s + ds * t) - misfit(smooth_step, s - ds * t)) / (2 * t)
    assert grad @ ds.values == pytest.approx(fd, rel=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.5, 20.0), st.integers(0, 2**31 - 1))
def test_ivanov_feasible_and_certified(rho, seed):
    rng = np.random.default_rng(seed)
    m = build_mesh(4)
    p = PdeProblem(rng.uniform(0, 2), m)
    u = Field(m, rng.standard_normal(m.n_nodes) * ~m.boundary_mask)
    s_k = Field(m, np.clip(rng.standard_normal(m.n_nodes), -rho, rho))
    y = Field(m, rng.standard_normal(m.n_nodes))
    res = solve_ivanov_step(QuadraticStep(p, u, s_k, y), rho)
    assert np.max(np.abs(res.s_next.values)) <= rho + 1e-12
    assert res.kkt_residual <= 1e-8


@settings(max_examples=10, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(0, 2**31 - 1))
def test_tikhonov_subdifferential_certificate(alpha, seed):
    rng = np.random.default_rng(seed)
    m = build_mesh(4)
    p = PdeProblem(rng.uniform(0, 2), m)
    u = Field(m, rng.standard_normal(m.n_nodes) * ~m.boundary_mask)
    s_k = Field(m, rng.standard_normal(m.n_nodes))
    y = Field(m, rng.standard_normal(m.n_nodes))
    res = solve_tikhonov_step(QuadraticStep(p, u, s_k, y), alpha)
    w = m.weights
    g = -(m.mass @ res.lam.values)  # gradient of the smooth part
    s = res.s_next.values
    nz = s != 0
    # nodal form of the inclusion, relative to the multiplier scale alpha w
    assert np.all(np.abs(g[nz] + alpha * w[nz] * np.sign(s[nz])) <= 1e-6 * alpha * w[nz] + 1e-10)
    assert np.all(np.abs(g[~nz]) <= alpha * w[~nz] * (1 + 1e-6) + 1e-10)


def test_objective_convexity(smooth_step):
    m = smooth_step.problem.mesh
    rng = np.random.default_rng(2)
    alpha = 0.1
    w = m.weights
    J = lambda s: misfit(smooth_step, s) + alpha * float(w @ np.abs(s.values))
    for _ in range(5):
        a, b = (Field(m, rng.uniform(-10, 10, m.n_nodes)) for _ in range(2))
        assert J((a + b) * 0.5) <= 0.5 * (J(a) + J(b)) + 1e-10


def test_box_qp_iteration_cap():
    # a badly scaled instance that the active-set phase alone cannot finish
    rng = np.random.default_rng(3)
    A = rng.standard_normal((40, 40))
    Q = A @ A.T + 1e-8 * np.eye(40)
    b = rng.standard_normal(40) * 100
    w = np.ones(40)
    with pytest.raises(InnerSolverError) as err:
        box_qp(Q, b, -np.ones(40), np.ones(40), w, np.zeros(40), tol=1e-300, max_iter=2)
    assert err.value.iterations == 2


def test_rejects_bad_parameters(smooth_step):
    with pytest.raises(ValueError):
        solve_ivanov_step(smooth_step, 0.0)
    with pytest.raises(ValueError):
        solve_tikhonov_step(smooth_step, -1.0)


def test_step_fields_must_share_mesh(smooth_step):
    other = build_mesh(4)
    with pytest.raises(ValueError):
        QuadraticStep(smooth_step.problem, smooth_step.linearization_state,
                      Field(other, np.zeros(other.n_nodes)), smooth_step.data)


# --- oracle equivalence on random masked instances -------------------------------

N_INSTANCES = 100




def ivanov_oracle_independent(seed=0, n=N_INSTANCES):
    """Enumeration on the dense form assembled column by column (no use of
    the package's reduction)."""
    rng = np.random.default_rng(seed)
    worst_obj = worst_sol = 0.0
    for _ in range(n):
        p, u, s_k, y, Q, b, c = random_instance(rng, 6)
        rho = rng.uniform(0.3, 1.2) * np.max(np.abs(np.linalg.solve(Q, -b)))
        rho = max(rho, np.max(np.abs(s_k.values)))
        res = solve_ivanov_step(QuadraticStep(p, u, s_k, y), rho)
        x = res.s_next.values[p.control_dofs]
        # half misfit: x'Qx/2 + b'x + c/2
        x_ref, f_ref = box_enumeration(Q, b, rho)
        f = 0.5 * x @ Q @ x + b @ x
        worst_obj = max(worst_obj, abs(f - f_ref))
        worst_sol = max(worst_sol, np.max(np.abs(x - x_ref)))
        assert np.max(np.abs(x)) <= rho + 1e-12
    return worst_obj, worst_sol


def tikhonov_oracle_comparison(seed=1, n=N_INSTANCES):
    rng = np.random.default_rng(seed)
    cases, mine = [], []
    for _ in range(n):
        p, u, s_k, y, Q, b, c = random_instance(rng, 5)
        w = p.mesh.weights[p.control_dofs]
        alpha = rng.uniform(0.01, 0.8) * np.max(np.abs(2 * b) / w)
        res = solve_tikhonov_step(QuadraticStep(p, u, s_k, y), alpha)
        cases.append((Q, b, alpha, w))
        mine.append(res.s_next.values[p.control_dofs])
    Qs, bs, als, ws = (np.array(v) for v in zip(*cases))
    x_pg, f_pg = prox_gradient(Qs, bs, als, ws)
    worst_obj = worst_sol = worst_enum = 0.0
    for k, x in enumerate(mine):
        Q, b, alpha, w = cases[k]
        f = x @ Q @ x + 2 * b @ x + alpha * w @ np.abs(x)
        worst_obj = max(worst_obj, abs(f - f_pg[k]))
        worst_sol = max(worst_sol, np.max(np.abs(x - x_pg[k])))
        x_en, _ = l1_enumeration(Q, b, alpha, w)
        worst_enum = max(worst_enum, np.max(np.abs(x_en - x_pg[k])))
    return worst_obj, worst_sol, worst_enum


def test_ivanov_matches_enumeration():
    obj, sol = ivanov_oracle_independent()
    assert obj <= 1e-8 and sol <= 1e-6


def test_tikhonov_matches_prox_gradient():
    obj, sol, enum = tikhonov_oracle_comparison()
    assert obj <= 1e-8 and sol <= 1e-6
    # the two references agree with each other as well
    assert enum <= 1e-8
