import numpy as np
import pytest

from hysteresis.dupire import (
    atom_derivatives,
    dupire_derivatives,
    functional_ito,
    horizontal_derivative,
    ito_reconstruction,
    richardson,
    vertical_derivative,
    vertical_extrapolated,
)
from hysteresis.functionals import (
    AtomFunctional,
    RunningIntegral,
    TerminalValue,
    TimeFunctional,
    climate,
    cumulative,
    kernel_average,
    state_dependent,
)
from hysteresis.timegrid import ConfigError, make_grid, sample_brownian


def test_vertical_cumulative_endpoint():
    g = make_grid(1.0, 200)
    h = cumulative()
    num = vertical_derivative(h, g.times, g.N, g, 1, analytic=False)
    assert abs(num - 0.5) <= 2 * g.dt
    assert num == pytest.approx(h.atom(g.N, g.times, g), abs=1e-9)


def test_vertical_extrapolated_removes_dt():
    g = make_grid(1.0, 100)
    raw, ext = vertical_extrapolated(cumulative(), lambda t: t, 1.0, g)
    assert abs(raw - 0.5) > 1e-3
    assert ext == pytest.approx(0.5, abs=1e-9)


def test_second_vertical_sin_at_zero():
    g = make_grid(1.0, 8)
    c = np.zeros(9)
    assert vertical_derivative(state_dependent("sin"), c, 4, g, 2, analytic=False) == pytest.approx(0, abs=1e-10)


def test_vertical_numeric_order():
    g = make_grid(1.0, 8)
    c = np.full(9, 0.4)
    h = state_dependent("sin")
    errs = []
    for e in (1e-2, 5e-3):
        errs.append(abs(vertical_derivative(h, c, 8, g, 1, eps=e, analytic=False) - np.cos(0.4)))
    assert np.log2(errs[0] / errs[1]) >= 1.8


@pytest.mark.parametrize("order,expected", [(1, np.cos(0.7)), (2, -np.sin(0.7)), (3, -np.cos(0.7))])
def test_numeric_matches_analytic(order, expected):
    g = make_grid(1.0, 8)
    c = np.full(9, 0.7)
    h = state_dependent("sin")
    num = vertical_derivative(h, c, 3, g, order, analytic=False)
    assert vertical_derivative(h, c, 3, g, order) == pytest.approx(expected, abs=1e-14)
    assert num == pytest.approx(expected, abs=max(1e-6, 5 * (1e-2 * 1.7) ** 2))


def test_vertical_rejects_order():
    g = make_grid(1.0, 4)
    with pytest.raises(ConfigError):
        vertical_derivative(TerminalValue(), np.zeros(5), 2, g, 4)


def test_horizontal_examples():
    g = make_grid(1.0, 100)
    c = np.full(101, 0.7)
    i = 40
    assert horizontal_derivative(RunningIntegral(), c, i, g, analytic=False) == pytest.approx(0.7)
    q = AtomFunctional(state_dependent("sin"))
    rng = np.random.default_rng(1)
    c = rng.standard_normal(101)
    assert horizontal_derivative(q, c, i, g, analytic=False) == 0.0
    assert horizontal_derivative(TimeFunctional(), c, i, g) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        horizontal_derivative(TimeFunctional(), c, 100, g)


def test_ito_classical():
    g = make_grid(1.0, 16)
    c = np.full(17, 0.3)
    co = functional_ito(state_dependent("sin"), c, 5, g, 0.0, 1.0)
    assert co.drift == pytest.approx(-0.5 * np.sin(0.3), abs=1e-15)
    assert co.diffusion == pytest.approx(np.cos(0.3), abs=1e-15)
    num = functional_ito(state_dependent("sin"), c, 5, g, 0.0, 1.0, analytic=False)
    assert num.drift == pytest.approx(-0.5 * np.sin(0.3), abs=1e-5)


def test_ito_noise_functional():
    # g_t(w) = sin(w_t) seen through climate's atom: drift 1/2 g'', diffusion g'
    g = make_grid(1.0, 16)
    w = np.full(17, 0.2)
    q = AtomFunctional(climate("sin", "zero"))
    co = functional_ito(q, np.zeros(17), 5, g, 0.0, 1.0, w=w, target="w", analytic=False)
    assert co.drift == pytest.approx(-0.5 * np.sin(0.2), abs=1e-5)
    assert co.diffusion == pytest.approx(np.cos(0.2), abs=1e-7)


def test_ito_running_integral():
    g = make_grid(1.0, 16)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(17)
    for analytic in (True, False):
        co = functional_ito(RunningIntegral(), x, 6, g, 0.0, 1.0, analytic=analytic)
        assert co.drift == pytest.approx(x[6])
        assert co.diffusion == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("h", [state_dependent("sin"), kernel_average("sinx_y", "exponential")])
def test_ito_reconstruction_order(h):
    rms = []
    Ns = (32, 64, 128)
    for N in Ns:
        g = make_grid(1.0, N)
        x = sample_brownian(g, 400, seed=5).paths
        rms.append(np.sqrt(np.mean(ito_reconstruction(h, x, g) ** 2)))
    order = np.polyfit(np.log(1.0 / np.array(Ns)), np.log(rms), 1)[0]
    assert order >= 0.45


def test_dupire_bundle_and_mixed():
    g = make_grid(1.0, 50)
    c = np.full(51, 0.5)
    d = dupire_derivatives(cumulative(), c, 20, g)
    # atom int c ds grows at rate c_t under a flat extension
    assert d.mixed == pytest.approx(0.5, rel=1e-6)
    assert d.vertical_2 == pytest.approx(0.0, abs=1e-12)
    assert np.isnan(dupire_derivatives(cumulative(), c, 50, g).horizontal)


def test_atom_derivatives_vectorized_vs_numeric():
    g = make_grid(1.0, 200)
    c = np.sin(3 * g.times) + g.times
    h = kernel_average("sinx_y", "exponential")
    a = atom_derivatives(h, c, g, target="c")
    b = atom_derivatives(h, c, g, target="c", analytic=False)
    np.testing.assert_allclose(a[1], b[1], atol=1e-6)
    # continuum rate against a one-step difference: O(dt) apart
    gap = np.abs(a["h"][:-1] - b["h"][:-1])
    assert np.all(gap <= 2 * g.dt * (1 + np.abs(a["h"][:-1])))


def test_richardson():
    assert richardson(1.2, 1.1) == pytest.approx(1.0)
