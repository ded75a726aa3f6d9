import numpy as np
import pytest

from hysteresis.condexp import PrefixConditioner, capped_hitting_quad, expected_capped_hitting
from hysteresis.dynamics import ConditionalProcess, _future_sum, foc_solve, total_derivative
from hysteresis.functionals import SeparableKernel, climate, kernel_average
from hysteresis.oracles import (
    capped_hitting_mc,
    oracle_cumulative,
    oracle_detemple_zapatero,
    oracle_jump,
    oracle_state_dependent,
    oracle_tipping,
    scenario_tree,
    tipping_nested_mc,
    tipping_policy_at,
    tree_optimize,
)
from hysteresis.timegrid import ConfigError, make_grid, sample_brownian


# scenario tree

def test_tree_moments():
    tree = scenario_tree(6)
    dw = np.diff(tree.leaves, axis=1)
    np.testing.assert_allclose(dw.mean(axis=0), 0, atol=1e-15)
    np.testing.assert_allclose((dw ** 2).mean(axis=0), tree.grid.dt)
    assert tree.leaves.shape == (64, 7)


def test_tree_depth_limits():
    with pytest.raises(ConfigError):
        scenario_tree(11)
    with pytest.raises(ConfigError):
        scenario_tree(0)


def test_tree_node_values():
    tree = scenario_tree(3)
    s = np.sqrt(tree.grid.dt)
    np.testing.assert_allclose(tree.node_values(1), [-s, s])
    np.testing.assert_allclose(tree.node_values(2), [-2 * s, 0, 0, 2 * s])


def test_tree_eps_zero():
    tree = scenario_tree(5)
    pol = tree_optimize(climate("sin", "exponential"), 0.0, tree)
    for i, v in enumerate(pol.values):
        np.testing.assert_allclose(v, tree.node_values(i), atol=1e-14)


def test_tree_constant_atom():
    tree = scenario_tree(5)
    pol = tree_optimize(climate("one", "zero"), 0.3, tree)
    for i, v in enumerate(pol.values):
        np.testing.assert_allclose(v, tree.node_values(i) - 0.3, atol=1e-13)


def test_tree_constant_kernel():
    tree = scenario_tree(6)
    g = tree.grid
    pol = tree_optimize(climate("zero", "one"), 0.2, tree)
    for i, v in enumerate(pol.values):
        np.testing.assert_allclose(v, tree.node_values(i) - 0.2 * (g.T - g.times[i]), atol=1e-13)


@pytest.mark.parametrize("g,k", [("identity", "exponential"), ("sin", "w"), ("cubic", "one")])
def test_tree_matches_foc(g, k):
    tree = scenario_tree(6)
    h = climate(g, k)
    ens = tree.ensemble()
    pol = foc_solve(h, 0.2, ens, PrefixConditioner(ens))
    opt = tree_optimize(h, 0.2, tree)
    np.testing.assert_allclose(opt.on_leaves()[:, :-1], pol.c[:, :-1], atol=1e-10)


def test_tree_rejects_nonlinear():
    from hysteresis.functionals import cumulative
    with pytest.raises(ConfigError):
        tree_optimize(cumulative(), 0.1, scenario_tree(3))


# closed forms

def test_oracle_cumulative_examples():
    g = make_grid(1.0, 16)
    w = sample_brownian(g, 3, seed=1).paths
    o = oracle_cumulative()
    C = o.C(w, g)
    np.testing.assert_allclose(C[:, -1], -w[:, :-1].sum(axis=1) * g.dt)
    assert np.all(C[:, 0] == 0)
    assert np.all(o.C(np.zeros((1, 17)), g) == 0)
    np.testing.assert_allclose(o.diffusion(w, g)[0], -(1 - g.times))
    assert np.all(o.drift(w, g) == 0)


@pytest.mark.parametrize("f,x,C,drift,diff", [
    ("sin", 0.0, -1.0, 0.5, 0.0),
    ("square", 0.7, -0.7, 0.0, -1.0),
    ("cubic", 1.0, -0.5, -0.5, -1.0),
])
def test_oracle_state_dependent(f, x, C, drift, diff):
    g = make_grid(1.0, 4)
    o = oracle_state_dependent(f)
    w = np.full(5, x)
    assert o.C(w, g)[2] == pytest.approx(C)
    assert o.drift(w, g)[2] == pytest.approx(drift, abs=1e-15)
    assert o.diffusion(w, g)[2] == pytest.approx(diff, abs=1e-15)


def test_oracle_jump_examples():
    g = make_grid(1.0, 8)
    c = oracle_jump(0.0, 0.1, g)
    np.testing.assert_allclose(c[:4], -0.2)
    np.testing.assert_allclose(c[5:], 0.0)
    theta = np.linspace(0, 1, 9)
    np.testing.assert_allclose(oracle_jump(theta, 0.0, g), theta)
    assert oracle_jump(theta, 0.1, g)[g.node(0.75)] == theta[6]


# martingale extraction

def _separable(gt, dgt, gg, dgg):
    return SeparableKernel(gg, gt, dgg, dgt)


def test_detemple_zapatero_constant():
    g = make_grid(1.0, 32)
    ens = sample_brownian(g, 1000, seed=3)
    one = lambda t: np.ones_like(np.asarray(t, float))
    zero = lambda t: np.zeros_like(np.asarray(t, float))
    h = kernel_average("y", _separable(one, zero, one, zero))
    o = oracle_detemple_zapatero(h, one, zero, one, ens)
    np.testing.assert_allclose(o.F, np.broadcast_to(g.T - g.times, o.F.shape), atol=1e-12)
    np.testing.assert_allclose(o.diffusion, 0.0, atol=1e-12)


def test_detemple_zapatero_constant_h2():
    g = make_grid(1.0, 32)
    ens = sample_brownian(g, 1000, seed=3)
    h = kernel_average("const", "exponential")
    o = oracle_detemple_zapatero(h, np.exp, np.exp, lambda s: np.exp(-s), ens)
    np.testing.assert_allclose(o.diffusion, 0.0, atol=1e-12)
    assert np.ptp(o.F, axis=0).max() < 1e-12


def test_detemple_zapatero_exponential():
    # a(t, s) = exp(-(t - s)), h2 = x y: F_t = w_t (1 - exp(t - T))
    g = make_grid(1.0, 64)
    ens = sample_brownian(g, 4000, seed=5)
    gt, g_ = np.exp, lambda s: np.exp(-s)
    h = kernel_average("xy", _separable(gt, np.exp, g_, lambda s: -np.exp(-s)))
    o = oracle_detemple_zapatero(h, gt, np.exp, g_, ens)
    t = g.times
    # diffusion is e^t times the integrand of M: sum_{i>j} e^{-t_i} dt
    target = np.exp(t[:-1]) * np.array([np.exp(-t[j + 1:-1]).sum() * g.dt for j in range(g.N)])
    np.testing.assert_allclose(o.diffusion[:, :-1], np.broadcast_to(target, (ens.M, g.N)), atol=1e-6)
    assert np.max(np.abs(target - (1 - np.exp(t[:-1] - 1)))) <= 2 * g.dt
    # same diffusion as the total derivative of xi_t = e^t int_t^T e^{-s} w_s ds
    xi = ConditionalProcess("separable", xi=lambda w, gr: np.exp(gr.times) * _future_sum(np.exp(-gr.times) * w, gr))
    co = total_derivative(xi, ens)
    assert np.max(np.abs(o.diffusion - co.diffusion)[:, 1:-1]) <= 2 * g.dt


# tipping

def test_oracle_tipping_at_max():
    g = make_grid(1.0, 8)
    w = np.array([0, 0.1, 0.2, 0.1, 0.3, 0.25, 0.2, 0.5, 0.45])
    c = oracle_tipping().policy(w, g)
    for i in (0, 1, 2, 4, 7):
        assert c[i] == w[i]
    zero = lambda x: 0.0 * np.asarray(x, float)
    np.testing.assert_allclose(oracle_tipping(zero).policy(w, g), w)


def test_oracle_tipping_fixed_prefix():
    # gap 1, horizon 1, lag 0.3
    g = make_grid(2.0, 20)
    w = np.zeros(21)
    w[1:10] = 0.5
    w[7] = 1.0          # max at t = 0.7, lag 0.3 at t = 1
    w[10] = 0.0
    i = 10
    G = capped_hitting_quad(1.0, 1.0)
    assert tipping_policy_at(i, w, g) == pytest.approx(w[i] - 0.3 * G, abs=1e-12)
    assert oracle_tipping().policy(w, g)[i] == pytest.approx(w[i] - 0.3 * G, abs=1e-12)
    m, se = capped_hitting_mc(1.0, 1.0, inner=20000, N=512, seed=4)
    assert abs(m - G) <= 3 * se
    m, se = tipping_nested_mc(i, w, g, inner=20000, seed=4)
    assert abs(m - 0.3 * G) <= 3 * se


def test_tipping_nested_matches_closed_form():
    g = make_grid(1.0, 64)
    ens = sample_brownian(g, 5, seed=11)
    zs = []
    for p in range(5):
        for i in (16, 40):
            m, se = tipping_nested_mc(i, ens.paths[p], g, inner=5000, seed=11, path_index=p)
            cf = ens.paths[p, i] - tipping_policy_at(i, ens.paths[p], g)
            if se > 0:
                zs.append((m - cf) / se)
            else:
                assert m == cf == 0
    assert np.max(np.abs(zs)) <= 3.5


def test_tipping_diffusion_is_sensitivity():
    g = make_grid(1.0, 32)
    w = sample_brownian(g, 4, seed=2).paths
    o = oracle_tipping()
    e = 1e-6
    i = 20
    up = w.copy()
    up[:, i] += e
    fd = (o.policy(up, g)[:, i] - o.policy(w, g)[:, i]) / e
    np.testing.assert_allclose(o.diffusion(w, g)[:, i], fd, atol=1e-5)


def test_expected_capped_hitting_limits():
    assert float(expected_capped_hitting(0.0, 1.0)) == 0.0
    # far barrier: the path never reaches it
    assert float(expected_capped_hitting(50.0, 1.0)) == pytest.approx(1.0)
