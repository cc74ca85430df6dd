import numpy as np
import pytest

from ipsim.diagnostics import goodness_of_fit
from ipsim.errors import ConfigError, UnsupportedError
from ipsim.models import (HN, HO, LN, LO, build_model, custom_model, fleming_viot_model,
                          info_percolation_model, opinion_model, otc_model, require_kernels,
                          two_state_model)
from ipsim.rng import generator

from conftest import OPINION_P, OPINION_Q, mixed_two_state


def fv_rates(K=3, seed=0):
    rng = np.random.default_rng(seed)
    Q = np.zeros((K + 1, K + 1))
    Q[1:, :] = rng.uniform(0.1, 1.0, (K, K + 1))
    np.fill_diagonal(Q, 0.0)
    return Q


def random_states(k, n=10, seed=1):
    rng = np.random.default_rng(seed)
    return [np.full(k, 1.0 / k)] + list(rng.dirichlet(np.ones(k), size=n))


# ------------------------------------------------------------------ OTC

def test_otc_pair_rate_hand_value():
    m = otc_model(1.0, 2.0, 0.7, 1.5)
    nu = [0.25, 0.25, 0.25, 0.25]
    assert m.lam(HN, LO, nu) == pytest.approx(0.7 + 2 * 1.5)
    assert m.lam(LO, HN, nu) == pytest.approx(0.7 + 2 * 1.5)


def test_otc_rates_zero_off_trading_pairs():
    m = otc_model(1.0, 1.0, 1.0, 1.0)
    for nu in random_states(4):
        for a in range(4):
            for b in range(4):
                if {a, b} != {HN, LO}:
                    assert m.lam(a, b, nu) == 0.0


def test_otc_kernels():
    m = otc_model(1.0, 1.0, 1.0, 1.0)
    for u in (0.0, 0.3, 0.999):
        assert m.sample_b(HN, LO, None, u) == (HO, LN)
        assert m.sample_b(LO, HN, None, u) == (LN, HO)
    assert [m.sample_a(w, None, 0.5) for w in range(4)] == [LO, LN, HO, HN]
    assert m.gamma(HO, None) == 1.0


def test_otc_vanishing_masses_fall_back_to_contact_rate():
    m = otc_model(1.0, 1.0, 0.4, 2.0)
    assert m.lam(HN, LO, [0.5, 0.0, 0.5, 0.0]) == 0.4


def test_otc_negative_parameter():
    with pytest.raises(ConfigError, match="beta"):
        otc_model(1.0, 1.0, -1.0, 0.0)


def test_otc_channel_only_with_marketmakers():
    assert otc_model(1, 1, 1, 0).channels == ()
    ch = otc_model(1, 1, 1, 2.0).channels[0]
    assert ch.rate([0, 5, 3, 0]) == 6.0
    assert ch.bound(11) == 10.0
    with pytest.raises(UnsupportedError):
        require_kernels(otc_model(1, 1, 1, 2.0))


# --------------------------------------------------------- info percolation

def test_percolation_kernels():
    m = info_percolation_model(2.0)
    assert m.sample_b(1.5, -0.5, None, 0.3) == (1.0, 1.0)
    assert m.gamma(3.0, None) == 0.0
    assert m.lam(0.1, 9.0, None) == 2.0
    with pytest.raises(ConfigError):
        info_percolation_model(0.0)


# ------------------------------------------------------------------ opinion

def test_opinion_kernel_table():
    P = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], float)
    Q = np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], float)
    m = opinion_model(2.0, 3.0, P, Q, 1)
    G = m.kernels.gamma_table
    assert G[0, 0, 1] == 2.0  # crowding, environment = own type
    assert G[0, 2, 2] == 3.0  # popularity, environment = target type
    assert G[0, 1, 2] == 0.0  # environment outside {i, j}
    assert G[1, 0, 2] == 0.0


def test_opinion_rate_formula():
    m = opinion_model(1.5, 0.5, OPINION_P, OPINION_Q, 1)
    for nu in random_states(3):
        for i in range(3):
            expect = 1.5 * nu[i] * OPINION_P[i].sum() + 0.5 * OPINION_Q[i] @ nu
            assert m.gamma(i, nu.tolist()) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("bad", ["diag", "rows"])
def test_opinion_rejects_bad_matrices(bad):
    P = OPINION_P.copy()
    if bad == "diag":
        P[0, 0], P[0, 1] = 0.1, 0.6
    else:
        P[0, 1] = 0.9
    with pytest.raises(ConfigError):
        opinion_model(1, 1, P, OPINION_Q, 1)


def test_opinion_shape_checked():
    with pytest.raises(ConfigError):
        opinion_model(1, 1, OPINION_P, OPINION_Q, 2)


# ------------------------------------------------------------ Fleming-Viot

def test_fleming_viot_kernel_table():
    Q = fv_rates()
    m = fleming_viot_model(Q)
    G = m.kernels.gamma_table
    # labels 1..K map to indices 0..K-1
    assert G[0, 1, 1] == pytest.approx(Q[1, 2] + Q[1, 0])
    assert G[0, 2, 1] == pytest.approx(Q[1, 2])
    assert G[1, 1, 1] == 0.0


def test_fleming_viot_effective_rate():
    Q = fv_rates()
    m = fleming_viot_model(Q)
    for nu in random_states(3):
        Ga, _ = m.rate_tables(nu)
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert Ga[i, j] == pytest.approx(Q[i + 1, j + 1] + Q[i + 1, 0] * nu[j], abs=1e-12)


def test_fleming_viot_validation():
    Q = fv_rates()
    with pytest.raises(ConfigError):
        fleming_viot_model(Q, exit_cap=0.5)
    bad = Q.copy()
    bad[0, 1] = 1.0
    with pytest.raises(ConfigError, match="absorbing"):
        fleming_viot_model(bad)
    cons = Q.copy()
    np.fill_diagonal(cons, -Q.sum(axis=1))
    fleming_viot_model(cons)
    cons[1, 1] -= 0.5
    with pytest.raises(ConfigError, match="conservative"):
        fleming_viot_model(cons)


# --------------------------------------------------------------- generic

def builtins():
    return [otc_model(1.0, 0.5, 0.8, 0.0), opinion_model(1, 1, OPINION_P, OPINION_Q, 1),
            fleming_viot_model(fv_rates()), two_state_model(1.0, 0.5), mixed_two_state()]


@pytest.mark.parametrize("model", builtins(), ids=lambda m: m.name)
def test_kernel_tables_reproduce_rates(model):
    kern = require_kernels(model)
    k = kern.k
    for nu in random_states(k):
        nl = nu.tolist()
        Ga, Lb = kern.rate_tables(nu)
        for w in range(k):
            g = model.gamma(w, nl)
            a = np.asarray(model.a_probs(w, nl))
            assert np.abs(g * a / a.sum() - Ga[w]).max() <= 1e-10 if g > 0 else True
            assert g <= model.gamma_bar + 1e-12
            for w2 in range(k):
                lam = model.lam(w, w2, nl)
                assert lam <= model.lambda_bar + 1e-12
                if lam > 0:
                    b = np.asarray(model.b_probs(w, w2, nl)).reshape(k, k)
                    assert np.abs(lam * b / b.sum() - Lb[w, w2]).max() <= 1e-10


@pytest.mark.parametrize("model", builtins(), ids=lambda m: m.name)
def test_kernel_samplers_goodness_of_fit(model):
    gen = generator(11, 0, "check")
    k = model.k
    nu = np.random.default_rng(4).dirichlet(np.ones(k)).tolist()
    n = 100_000
    for w in range(k):
        p = np.asarray(model.a_probs(w, nu), float)
        if model.gamma(w, nu) == 0:
            continue
        p = p / p.sum()
        draws = [model.sample_a(w, nu, u) for u in gen.random(n).tolist()]
        assert goodness_of_fit(np.bincount(draws, minlength=k), p).p_value > 1e-3
    if model.lambda_bar > 0:
        w1, w2 = next((a, b) for a in range(k) for b in range(k) if model.lam(a, b, nu) > 0)
        p = np.asarray(model.b_probs(w1, w2, nu), float)
        p = p / p.sum()
        draws = [a * k + b for a, b in (model.sample_b(w1, w2, nu, u) for u in gen.random(n).tolist())]
        assert goodness_of_fit(np.bincount(draws, minlength=k * k), p).p_value > 1e-3


def test_custom_table_validation():
    with pytest.raises(ConfigError):
        custom_model(["a", "b"], np.zeros((2, 2, 3)))
    with pytest.raises(ConfigError):
        custom_model(["a", "b"], -np.ones((2, 2, 2)))


def test_build_model_by_name():
    m = build_model("otc", {"lambda_u": 1, "lambda_d": 1, "beta": 1, "rho": 1})
    assert m.name == "otc"
    with pytest.raises(ConfigError):
        build_model("nope", {})
