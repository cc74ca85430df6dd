import io
import math

import numpy as np
import pytest

from ipsim.errors import ConfigError, MassLeakageError, StepSizeError, UnsupportedError
from ipsim.limit import (DensityGrid, LimitTrajectory, interpolate_limit, solve_limit_finite,
                         solve_percolation_density)
from ipsim.models import (LinearKernelSpec, info_percolation_model, opinion_model, otc_model,
                          zero_model)

from conftest import OPINION_NU0, OPINION_P, OPINION_Q


def otc_equations(u, lu, ld, b, r):
    """The four OTC equations written out by hand."""
    x = 2 * b * u[1] * u[2] + r * min(u[1], u[2])
    return np.array([x + lu * u[2] - ld * u[0], -x + lu * u[3] - ld * u[1],
                     -x - lu * u[2] + ld * u[0], x - lu * u[3] + ld * u[1]])


def test_zero_rates_constant():
    lim = solve_limit_finite(zero_model(["a", "b", "c"]), [0.2, 0.3, 0.5], 1.0, 0.1)
    assert np.all(lim.states == np.array([0.2, 0.3, 0.5]))


@pytest.mark.parametrize("params", [(1.0, 1.0, 1.0, 1.0), (1.3, 0.7, 0.9, 1.1), (0.2, 2.0, 3.0, 0.0)])
def test_otc_field_matches_equations(params):
    m = otc_model(*params)
    rng = np.random.default_rng(3)
    for u in rng.dirichlet(np.ones(4), size=20):
        assert np.abs(m.field(u) - otc_equations(u, *params)).max() <= 1e-12


def test_otc_high_type_mass_closed_form():
    lu, ld = 1.0, 0.5
    m = otc_model(lu, ld, 0.0, 0.0)
    nu0 = np.array([0.1, 0.1, 0.4, 0.4])
    lim = solve_limit_finite(m, nu0, 3.0, 0.01)
    h0 = 0.2
    p = lu / (lu + ld)
    for t, s in zip(lim.times, lim.states):
        assert s[0] + s[1] == pytest.approx(p + (h0 - p) * math.exp(-(lu + ld) * t), abs=1e-9)


def test_mass_conservation_and_simplex(opinion):
    lim = solve_limit_finite(opinion, OPINION_NU0, 2.0, 0.01)
    assert np.abs(lim.masses() - 1.0).max() <= 1e-12 * 2.0 + 1e-15
    assert lim.states.min() >= 0


def test_rk4_order(opinion):
    ends = [solve_limit_finite(opinion, OPINION_NU0, 1.0, dt).final for dt in (0.1, 0.05, 0.025)]
    slope = math.log2(np.abs(ends[0] - ends[1]).max() / np.abs(ends[1] - ends[2]).max())
    assert slope >= 3.5


def test_stationary_point_stays_fixed():
    # two-state flips balance at up/(up+down)
    from ipsim.models import two_state_model
    m = two_state_model(1.0, 3.0)
    lim = solve_limit_finite(m, [0.75, 0.25], 2.0, 0.01)
    assert np.abs(lim.states - [0.75, 0.25]).max() <= 1e-12


def test_negative_entries_raise():
    G = np.zeros((2, 2, 2))
    G[0, :, 1] = 500.0
    spec = LinearKernelSpec(("a", "b"), G)
    with pytest.raises(StepSizeError):
        solve_limit_finite(spec, [0.5, 0.5], 1.0, 0.1)


def test_bad_inputs():
    with pytest.raises(ConfigError):
        solve_limit_finite(zero_model(["a"]), [1.0], 1.0, 0.3)
    with pytest.raises(ConfigError):
        solve_limit_finite(zero_model(["a", "b"]), [0.6, 0.6], 1.0, 0.1)
    with pytest.raises(UnsupportedError):
        solve_limit_finite(info_percolation_model(1.0), [1.0], 1.0, 0.1)


def test_otc_switching_noted():
    m = otc_model(1.0, 1.0, 1.0, 1.0)
    lim = solve_limit_finite(m, [0.5, 0.4, 0.05, 0.05], 3.0, 0.01)
    assert any("non-smooth" in n for n in lim.notes)


def test_interpolation():
    lim = LimitTrajectory(np.array([0.0, 1.0, 2.0]),
                          np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]]), 1.0)
    assert np.array_equal(interpolate_limit(lim, 1.0), [0.5, 0.5])
    assert np.array_equal(interpolate_limit(lim, 1.5), [0.5, 0.5])
    assert np.abs(interpolate_limit(lim, 0.5) - [0.75, 0.25]).max() <= 1e-15
    with pytest.raises(ValueError):
        interpolate_limit(lim, 2.5)


def test_limit_csv():
    lim = solve_limit_finite(zero_model(["a", "b"]), [0.5, 0.5], 0.2, 0.1)
    buf = io.StringIO()
    lim.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("#") and lines[1] == "time,type,mass"
    assert len(lines) == 2 + 3 * 2


# ---------------------------------------------------------- density equation

def test_density_zero_rate():
    g0 = DensityGrid.gaussian(0.0, 1.0, -10, 10, 0.1, 0.0)
    lim = solve_percolation_density(g0, 1.0, 0.1)
    assert np.array_equal(lim.final, g0.values)


def test_density_mean_growth():
    g0 = DensityGrid.gaussian(0.5, 1.0, -50.0, 150.0, 0.05, 1.0)
    lim = solve_percolation_density(g0, 1.0, 0.01)
    assert lim.means()[-1] == pytest.approx(0.5 * math.exp(2.0), rel=1e-2)
    assert lim.leakage < 1e-3


def test_density_narrow_gaussian_keeps_zero_mean():
    g0 = DensityGrid.gaussian(0.0, 0.2, -10.0, 10.0, 0.01, 1.0)
    lim = solve_percolation_density(g0, 0.5, 0.01)
    assert abs(lim.means()[-1]) < 1e-8


def test_density_fft_matches_direct():
    g0 = DensityGrid.gaussian(0.3, 1.0, -20.0, 40.0, 0.1, 1.0)
    a = solve_percolation_density(g0, 0.5, 0.05)
    b = solve_percolation_density(g0, 0.5, 0.05, method="fft")
    assert np.abs(a.final - b.final).max() < 1e-10


def test_density_leakage_error():
    g0 = DensityGrid.gaussian(0.5, 1.0, -5.0, 5.0, 0.05, 1.0)
    with pytest.raises(MassLeakageError):
        solve_percolation_density(g0, 1.0, 0.01)


def test_density_grid_validation():
    x = np.linspace(-1, 1, 21)
    with pytest.raises(ConfigError):
        DensityGrid(-1, 1, 21, np.ones(21), 1.0)
    g = DensityGrid.gaussian(0.0, 1.0, -9.95, 10.05, 0.1, 1.0)
    with pytest.raises(ConfigError, match="node"):
        solve_percolation_density(g, 0.1, 0.1)
