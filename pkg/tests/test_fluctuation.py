import io
import math

import numpy as np
import pytest

from ipsim.engine import run_trajectory, sample_product_initial
from ipsim.errors import NotPSDError, UnsupportedError
from ipsim.fluctuation import (apply_drift_operator, build_diffusion_matrix, build_drift_matrix,
                               coefficients_from_limit, diffusion_matrix_at, drift_matrix_at,
                               extract_fluctuations, martingale_residual, multinomial_covariance,
                               percolation_covariance_rate, percolation_drift, psd_sqrt,
                               simulate_limit_sde, solve_clt_covariance,
                               solve_fluctuation_covariance, write_fluctuations_csv)
from ipsim.limit import DensityGrid, rk4_step, solve_limit_finite, solve_percolation_density
from ipsim.measure import AgentConfiguration, TestFunction, TypeSpace
from ipsim.models import (fleming_viot_model, info_percolation_model, otc_model, two_state_model,
                          zero_model)

from conftest import OPINION_NU0, OPINION_P, OPINION_Q

RNG = np.random.default_rng(2024)


def states(k, n=8):
    return list(RNG.dirichlet(np.ones(k), size=n))


def fv_setup(K=4):
    Q = np.zeros((K + 1, K + 1))
    Q[1:, :] = RNG.uniform(0.1, 1.0, (K, K + 1))
    np.fill_diagonal(Q, 0.0)
    m = fleming_viot_model(Q)
    return m, m.q


# ------------------------------------------------------------ fluctuations

def test_constant_fluctuation_is_exactly_zero(opinion):
    init = sample_product_initial(opinion.space, OPINION_NU0, 300, seed=1)
    tr = run_trajectory(opinion, init, 1.0, seed=1)
    lim = solve_limit_finite(opinion, OPINION_NU0, 1.0, 0.01)
    fam = [TestFunction.constant(1.0), TestFunction.indicator(["0"])]
    fs = extract_fluctuations(tr, lim, fam, np.linspace(0, 1, 11))
    assert np.all(fs.values[:, 0] == 0.0)
    assert np.any(fs.values[:, 1] != 0.0)


def test_constant_fluctuation_zero_on_density_limit():
    m = info_percolation_model(1.0)
    init = sample_product_initial(m.space, {"kind": "normal", "mean": 0.5, "sd": 1.0}, 200, seed=0)
    tr = run_trajectory(m, init, 0.5, seed=0)
    lim = solve_percolation_density(DensityGrid.gaussian(0.5, 1.0, -30, 60, 0.1, 1.0), 0.5, 0.05)
    fs = extract_fluctuations(tr, lim, [TestFunction.constant(1.0)], [0.0, 0.5])
    assert np.all(fs.values == 0.0)


def test_matching_measures_give_zero():
    m = zero_model(["a", "b"])
    init = AgentConfiguration(m.space, (0, 1, 1, 0))
    tr = run_trajectory(m, init, 1.0, seed=0)
    lim = solve_limit_finite(m, [0.5, 0.5], 1.0, 0.5)
    fs = extract_fluctuations(tr, lim, [TestFunction.indicator(["a"])], [0.0, 1.0])
    assert np.all(fs.values == 0.0)


def test_fluctuation_time_beyond_horizon():
    m = two_state_model(1, 1)
    tr = run_trajectory(m, AgentConfiguration(m.space, (0, 1)), 1.0, seed=0)
    lim = solve_limit_finite(m, [0.5, 0.5], 1.0, 0.5)
    with pytest.raises(ValueError):
        extract_fluctuations(tr, lim, [TestFunction.indicator(["1"])], [1.5])


def test_initial_fluctuation_binomial_variance():
    m = two_state_model(1, 1)
    p, N, R = 0.3, 50, 10_000
    lim = solve_limit_finite(m, [p, 1 - p], 0.0, 0.1)
    phi = [TestFunction.indicator(["1"])]
    vals = []
    for r in range(R):
        init = sample_product_initial(m.space, [p, 1 - p], N, seed=5, replica=r)
        tr = run_trajectory(m, init, 0.0, seed=5, replica=r)
        vals.append(extract_fluctuations(tr, lim, phi, [0.0]).values[0, 0])
    assert np.var(vals, ddof=1) == pytest.approx(p * (1 - p), rel=0.1)


def test_fluctuation_csv():
    from ipsim.fluctuation import FluctuationSample
    buf = io.StringIO()
    write_fluctuations_csv(buf, [FluctuationSample(np.array([0.0, 1.0]), np.zeros((2, 3)), 10, 4)])
    lines = buf.getvalue().splitlines()
    assert lines[1] == "replica,time,phi_index,value" and len(lines) == 8


# ---------------------------------------------------------- drift operator

def test_zero_kernels_give_zero_drift():
    kern = zero_model(["a", "b", "c"]).kernels
    for nu in states(3):
        assert np.all(apply_drift_operator(kern, nu, RNG.normal(size=3)) == 0)
        assert np.all(drift_matrix_at(kern, nu) == 0)
        assert np.all(diffusion_matrix_at(kern, nu) == 0)


@pytest.mark.parametrize("model", [otc_model(1.0, 0.5, 0.8, 0.0), two_state_model(1, 2)],
                         ids=["otc", "two_state"])
def test_constants_are_annihilated(model, opinion):
    for kern in (model.kernels, opinion.kernels, fv_setup()[0].kernels):
        for nu in states(kern.k):
            assert np.abs(apply_drift_operator(kern, nu, np.full(kern.k, 3.7))).max() <= 1e-12


def test_drift_matches_field_derivative(mixed):
    # the drift matrix is the Jacobian of the limit field (through the transpose)
    kern = mixed.kernels
    nu = np.array([0.3, 0.7])
    h = 1e-6
    J = np.column_stack([(kern.field(nu + h * e) - kern.field(nu - h * e)) / (2 * h)
                         for e in np.eye(2)])
    sigma = np.array([1.0, -1.0])
    assert np.abs(drift_matrix_at(kern, nu) @ sigma - J @ sigma).max() <= 1e-8


def test_opinion_drift_matches_closed_form(opinion):
    P, Q, a, b = OPINION_P, OPINION_Q, 1.0, 1.0
    for u in states(3):
        s = RNG.normal(size=3)
        F = np.array([2 * a * sum(P[j, i] * u[j] * s[j] for j in range(3)) - 2 * a * u[i] * s[i]
                      + b * sum((Q[j, i] - Q[i, j]) * (u[i] * s[j] + u[j] * s[i]) for j in range(3))
                      for i in range(3)])
        assert np.abs(drift_matrix_at(opinion.kernels, u) @ s - F).max() <= 1e-12


def test_opinion_diffusion_matches_closed_form(opinion):
    P, Q, a, b = OPINION_P, OPINION_Q, 1.0, 1.0
    for u in states(3):
        G = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                if i == j:
                    G[i, i] = (a * sum(P[k, i] * u[k] ** 2 for k in range(3) if k != i)
                               + a * u[i] ** 2
                               + b * sum((Q[k, i] + Q[i, k]) * u[i] * u[k] for k in range(3) if k != i))
                else:
                    G[i, j] = (-a * (P[j, i] * u[j] ** 2 + P[i, j] * u[i] ** 2)
                               - b * (Q[j, i] + Q[i, j]) * u[i] * u[j])
        assert np.abs(diffusion_matrix_at(opinion.kernels, u) - G).max() <= 1e-12


def test_fleming_viot_drift_on_zero_mass_vectors():
    m, q = fv_setup()
    qq, q0 = q[1:, 1:], q[1:, 0]
    for u in states(4):
        s = RNG.normal(size=4)
        s -= s.mean()
        expect = qq.T @ s + (q0 @ s) * u + (q0 @ u) * s
        assert np.abs(drift_matrix_at(m.kernels, u) @ s - expect).max() <= 1e-12


def test_fleming_viot_diffusion_table():
    m, q = fv_setup()
    qq, q0 = q[1:, 1:], q[1:, 0]
    K = 4
    for u in states(K):
        V = np.empty((K, K))
        for i in range(K):
            for j in range(K):
                if i == j:
                    # diagonal written so that rows sum to zero (q(i,i) includes exits to 0)
                    V[i, i] = (sum((qq[k, i] + q0[k] * u[i]) * u[k] for k in range(K) if k != i)
                               - qq[i, i] * u[i] - q0[i] * u[i] ** 2)
                else:
                    V[i, j] = -qq[i, j] * u[i] - qq[j, i] * u[j] - (q0[i] + q0[j]) * u[i] * u[j]
        assert np.abs(diffusion_matrix_at(m.kernels, u) - V).max() <= 1e-12


def test_matrix_invariants(opinion, mixed):
    for model in (opinion, mixed, fv_setup()[0]):
        lim = solve_limit_finite(model, np.full(model.k, 1.0 / model.k), 1.0, 0.05)
        A = build_drift_matrix(model, lim).A
        G = build_diffusion_matrix(model, lim).G
        assert np.abs(A.sum(axis=1)).max() <= 1e-10
        assert np.abs(G.sum(axis=2)).max() <= 1e-10
        assert np.abs(G - np.swapaxes(G, 1, 2)).max() <= 1e-12
        assert min(np.linalg.eigvalsh(g).min() for g in G) >= -1e-10


def test_matrices_need_linear_kernels():
    m = otc_model(1, 1, 1, 1)
    lim = solve_limit_finite(m, [0.25] * 4, 0.1, 0.05)
    with pytest.raises(UnsupportedError):
        build_drift_matrix(m, lim)


def test_percolation_operators_annihilate_constants():
    sp = TypeSpace.real(1e3)
    g0 = DensityGrid.gaussian(0.0, 1.0, -10, 10, 0.05, 1.0)
    one = TestFunction.constant(1.0)
    # the drift of a constant is constant, so it vanishes on zero-mass fluctuations
    d = percolation_drift(g0.x, g0.values, 1.0, one, sp)
    assert np.ptp(d) < 1e-10
    assert percolation_covariance_rate(g0.x, g0.values, 1.0, one, TestFunction.monomial(1), sp) == 0.0


def test_percolation_covariance_rate_linear_function():
    # for phi(x) = x each meeting adds x1 + x2 to the sum, so the rate is lam * E[(X1+X2)^2]
    sp = TypeSpace.real(1e3)
    g0 = DensityGrid.gaussian(0.5, 1.0, -12, 12, 0.05, 1.0)
    x = TestFunction.monomial(1)
    rate = percolation_covariance_rate(g0.x, g0.values, 2.0, x, x, sp)
    assert rate == pytest.approx(2.0 * (2 * 1.0 + 4 * 0.25), rel=1e-6)


# ----------------------------------------------------------- square roots

def test_psd_sqrt_examples():
    assert np.allclose(psd_sqrt(np.eye(3)), np.eye(3))
    assert np.allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    B = RNG.normal(size=(6, 6))
    G = B @ B.T
    S = psd_sqrt(G)
    assert np.linalg.norm(S @ S - G) / np.linalg.norm(G) <= 1e-10
    assert np.allclose(psd_sqrt(np.diag([1.0, -1e-9])), np.diag([1.0, 0.0]))
    with pytest.raises(NotPSDError):
        psd_sqrt(np.diag([1.0, -1e-3]))


# ------------------------------------------------------ covariance equation

def test_lyapunov_trivial_cases():
    S0 = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert np.allclose(solve_fluctuation_covariance(np.zeros((2, 2)), np.zeros((2, 2)), S0, 1.0, 0.1).final, S0)
    G = np.array([[1.0, -1.0], [-1.0, 1.0]])
    out = solve_fluctuation_covariance(np.zeros((2, 2)), G, S0, 2.0, 0.1).final
    assert np.abs(out - (S0 + 2.0 * G)).max() <= 1e-12


def test_lyapunov_scalar_closed_form():
    a, g, s0, T = -0.7, 0.4, 0.2, 1.5
    out = solve_fluctuation_covariance([[a]], [[g]], [[s0]], T, 0.01).final[0, 0]
    expect = s0 * math.exp(2 * a * T) + g / (2 * a) * (math.exp(2 * a * T) - 1)
    assert out == pytest.approx(expect, abs=1e-10)


def test_covariance_refinement_order(opinion):
    S0 = multinomial_covariance(OPINION_NU0)
    ends = [solve_clt_covariance(opinion, OPINION_NU0, S0, 1.0, dt).final for dt in (0.1, 0.05, 0.025)]
    slope = math.log2(np.abs(ends[0] - ends[1]).max() / np.abs(ends[1] - ends[2]).max())
    assert slope >= 3.5


def test_zero_kernel_covariance_constant():
    m = zero_model(["a", "b", "c"])
    S0 = multinomial_covariance([0.2, 0.3, 0.5])
    path = solve_clt_covariance(m, [0.2, 0.3, 0.5], S0, 1.0, 0.1)
    assert np.all(path.Sigma == S0)


# ------------------------------------------------------------------- SDE

def test_sde_trivial_path():
    p = simulate_limit_sde(np.zeros((2, 2)), np.zeros((2, 2)), [0.3, -0.3], 1.0, 0.1, seed=1)
    assert np.all(p.states == np.array([0.3, -0.3]))


def test_sde_component_sum_stays_zero(opinion):
    lim = solve_limit_finite(opinion, OPINION_NU0, 1.0, 0.01)
    A, G = coefficients_from_limit(opinion, lim)
    p = simulate_limit_sde(A, G, np.zeros(3), 1.0, 0.01, seed=3, paths=200)
    assert np.abs(p.states.sum(axis=2)).max() <= 1e-6


def test_sde_is_deterministic_given_seed():
    G = np.array([[1.0, -1.0], [-1.0, 1.0]])
    a = simulate_limit_sde(np.zeros((2, 2)), G, [0, 0], 1.0, 0.1, seed=4, paths=3)
    b = simulate_limit_sde(np.zeros((2, 2)), G, [0, 0], 1.0, 0.1, seed=4, paths=3)
    assert np.array_equal(a.states, b.states)


def test_sde_covariance_matches_lyapunov_large_sample(opinion):
    lim = solve_limit_finite(opinion, OPINION_NU0, 1.0, 1e-3)
    A, G = coefficients_from_limit(opinion, lim)
    S0 = multinomial_covariance(OPINION_NU0)
    pred = solve_clt_covariance(opinion, OPINION_NU0, S0, 1.0, 1e-3).final
    p = simulate_limit_sde(A, G, np.zeros(3), 1.0, 1e-3, seed=8, paths=100_000,
                           keep_path=False, init_cov=S0)
    emp = np.cov(p.final, rowvar=False)
    assert np.linalg.norm(emp - pred) / np.linalg.norm(pred) <= 0.03


def test_sde_mean_follows_linear_drift(opinion):
    # E[sigma] solves m' = A(t) m
    lim = solve_limit_finite(opinion, OPINION_NU0, 0.5, 1e-3)
    A, G = coefficients_from_limit(opinion, lim)
    m0 = np.array([1.0, -0.5, -0.5])
    p = simulate_limit_sde(A, G, m0, 0.5, 1e-3, seed=2, paths=20_000, keep_path=False)
    m = m0.copy()
    for s in range(500):
        m = m + 1e-3 * (A(s * 1e-3) @ m)
    se = p.final.std(axis=0, ddof=1) / math.sqrt(20_000)
    assert np.all(np.abs(p.final.mean(axis=0) - m) <= 4 * se)


# ------------------------------------------------------ martingale residual

def test_martingale_zero_rates():
    m = zero_model(["a", "b"])
    tr = run_trajectory(m, AgentConfiguration(m.space, (0, 1, 1)), 1.0, seed=0)
    res = martingale_residual(tr, m, TestFunction.indicator(["a"]))
    assert np.all(res.values == 0.0)
    assert res.realized_qv == 0.0 and res.predictable_qv == 0.0


def test_martingale_mean_and_quadratic_variation(mixed):
    N, R = 200, 300
    phi = TestFunction.indicator(["1"])
    finals, rqv, pqv = [], [], []
    for r in range(R):
        init = sample_product_initial(mixed.space, [0.5, 0.5], N, seed=21, replica=r)
        res = martingale_residual(run_trajectory(mixed, init, 1.0, seed=21, replica=r), mixed, phi)
        assert res.values[0] == 0.0
        finals.append(res.final)
        rqv.append(res.realized_qv)
        pqv.append(res.predictable_qv)
    finals = np.asarray(finals)
    assert abs(finals.mean()) <= 3 * finals.std(ddof=1) / math.sqrt(R)
    assert np.mean(rqv) == pytest.approx(np.mean(pqv), rel=0.1)
