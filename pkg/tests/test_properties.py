import numpy as np
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from hysteresis.condexp import Conditioner, PrefixConditioner
from hysteresis.dynamics import elasticity
from hysteresis.functionals import make_functional
from hysteresis.oracles import scenario_tree, tree_optimize
from hysteresis.timegrid import (
    SamplePath,
    bump_path,
    make_grid,
    perturb_direction,
    sample_brownian,
)

FAST = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
floats = st.floats(-3, 3, allow_nan=False, width=64)
seeds = st.integers(0, 2 ** 31 - 1)


@FAST
@given(seed=seeds, N=st.integers(2, 40), M=st.integers(1, 30), threads=st.integers(2, 5))
def test_ensemble_is_pure_and_thread_free(seed, N, M, threads):
    g = make_grid(1.0, N)
    a = sample_brownian(g, M, seed)
    np.testing.assert_array_equal(a.paths, sample_brownian(g, M, seed).paths)
    np.testing.assert_array_equal(a.paths, sample_brownian(g, M, seed, threads).paths)


@FAST
@given(seed=seeds, M=st.integers(1, 20), extra=st.integers(1, 20))
def test_ensemble_prefix_independent_of_size(seed, M, extra):
    g = make_grid(1.0, 16)
    np.testing.assert_array_equal(sample_brownian(g, M, seed).paths,
                                  sample_brownian(g, M + extra, seed).paths[:M])


@FAST
@given(seed=seeds, i=st.integers(0, 16), eps=floats)
def test_bump_inverse(seed, i, eps):
    g = make_grid(1.0, 16)
    p = SamplePath(g, sample_brownian(g, 1, seed).paths[0])
    back = bump_path(bump_path(p, i, eps), i, -eps)
    # one rounding of the addition at most
    np.testing.assert_allclose(back.values, p.values, rtol=0, atol=4 * np.spacing(3.0 + abs(eps)))
    untouched = np.arange(17) != i
    np.testing.assert_array_equal(back.values[untouched], p.values[untouched])


@FAST
@given(seed=seeds, eps=floats, z=st.lists(floats, min_size=17, max_size=17))
def test_perturb_additive(seed, eps, z):
    g = make_grid(1.0, 16)
    p = SamplePath(g, sample_brownian(g, 1, seed).paths[0])
    twice = perturb_direction(perturb_direction(p, z, eps), z, eps)
    once = perturb_direction(p, z, 2 * eps)
    np.testing.assert_allclose(twice.values, once.values, rtol=0, atol=1e-13)


CATALOG = [
    ("cumulative", {}),
    ("state_dependent", {"f": "sin"}),
    ("kernel_average", {"h2": "xy", "kernel": "exponential"}),
    ("climate", {"g": "sin", "k": "w"}),
    ("tipping", {}),
    ("midpoint", {}),
    ("zero", {}),
]


@FAST
@given(entry=st.sampled_from(CATALOG), seed=seeds, i=st.integers(0, 20),
       noise=st.lists(floats, min_size=20, max_size=20))
def test_adapted_under_tail_scrambling(entry, seed, i, noise):
    h = make_functional(entry[0], **entry[1])
    g = make_grid(1.0, 20)
    w = sample_brownian(g, 2, seed).paths
    c = w[0] + 0.1 * w[1]
    c2, w2 = c.copy(), w[0].copy()
    tail = np.asarray(noise)[: 20 - i]
    c2[i + 1:] += tail
    w2[i + 1:] -= tail
    np.testing.assert_array_equal(h.value(i, c, g, w[0]), h.value(i, c2, g, w2))


@FAST
@given(seed=seeds, name=st.sampled_from(["state_dependent", "kernel_average", "tipping"]))
def test_frechet_order_nonlinear(seed, name):
    from hysteresis.functionals import frechet_check
    h = make_functional(name)
    g = make_grid(1.0, 32)
    rng = np.random.default_rng(seed)
    w = sample_brownian(g, 1, seed).paths[0]
    c = w + 0.3
    z = rng.standard_normal(33)
    ladder = (1e-2, 5e-3, 2.5e-3, 1.25e-3)
    if name == "state_dependent":
        # the order is asymptotic: the quadratic Taylor term |sin(c)| z^2 / 2
        # must dominate the cubic bound |z|^3 eps / 6 on the ladder
        assume(abs(np.sin(c[-1])) * z[-1] ** 2 / 2 >= 10 * ladder[0] * abs(z[-1]) ** 3 / 6)
    rep = frechet_check(h, c, z, g, eps_ladder=ladder, w=w)
    r = np.asarray(rep["residual"])
    if np.all(r > 1e-13):
        assert rep["order"] >= 1.9


@FAST
@given(seed=seeds, g_=st.sampled_from(["identity", "sin", "one", "zero"]), k=st.sampled_from(["one", "zero"]))
def test_frechet_linear_entries(seed, g_, k):
    from hysteresis.functionals import frechet_check
    h = make_functional("climate", g=g_, k=k)
    g = make_grid(1.0, 32)
    w = sample_brownian(g, 1, seed).paths[0]
    z = np.random.default_rng(seed).standard_normal(33)
    rep = frechet_check(h, w, z, g, w=w)
    assert np.max(rep["residual"]) <= 1e-12


@FAST
@given(depth=st.integers(1, 8))
def test_tree_increment_moments(depth):
    tree = scenario_tree(depth)
    dw = np.diff(tree.leaves, axis=1)
    np.testing.assert_allclose(dw.mean(axis=0), 0.0, atol=1e-14)
    np.testing.assert_allclose((dw ** 2).mean(axis=0), tree.grid.dt, rtol=1e-12)
    np.testing.assert_allclose((dw ** 3).mean(axis=0), 0.0, atol=1e-14)


@FAST
@given(depth=st.integers(2, 6), eps=st.floats(0, 1), g_=st.sampled_from(["identity", "sin", "cubic"]),
       k=st.sampled_from(["one", "w", "exponential"]))
def test_tree_equals_first_order_formula(depth, eps, g_, k):
    from hysteresis.dynamics import foc_solve
    h = make_functional("climate", g=g_, k=k)
    tree = scenario_tree(depth)
    ens = tree.ensemble()
    pol = foc_solve(h, eps, ens, PrefixConditioner(ens))
    np.testing.assert_allclose(tree_optimize(h, eps, tree).on_leaves()[:, :-1], pol.c[:, :-1], atol=1e-10)


@FAST
@given(depth=st.integers(2, 7), coef=st.lists(floats, min_size=3, max_size=3))
def test_tree_tower_and_martingale(depth, coef):
    # prefix conditioning on a tree is exact: adapted targets are returned as-is
    # and the conditioned terminal value has zero-mean increments per node
    tree = scenario_tree(depth)
    ens = tree.ensemble()
    cond = PrefixConditioner(ens)
    w = ens.paths
    X = coef[0] * w + coef[1] * w ** 2 + coef[2] * np.maximum.accumulate(w, axis=1)
    np.testing.assert_allclose(cond.project(X)[:, :-1], X[:, :-1], atol=1e-10)
    xi = np.sin(w[:, -1]) + w[:, -1] ** 2
    Z = cond.project(np.broadcast_to(xi[:, None], w.shape).copy())
    np.testing.assert_allclose(np.diff(Z[:, :-1], axis=1).mean(axis=0), 0.0, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(seed=seeds, name=st.sampled_from(["cumulative", "state_dependent", "kernel_average", "climate"]))
def test_decomposition_identity(seed, name):
    ens = sample_brownian(make_grid(1.0, 16), 400, seed)
    el = elasticity(make_functional(name), ens, Conditioner(ens, degree=2, folds=1))
    np.testing.assert_array_equal(el.C, -el.I - el.F)
