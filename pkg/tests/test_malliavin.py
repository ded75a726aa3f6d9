import numpy as np
import pytest

from hysteresis.condexp import Conditioner, FeatureSet
from hysteresis.malliavin import (
    clark_ocone_integrand,
    malliavin_cylindrical,
    malliavin_directional,
    pathwise_malliavin,
    ramp_direction,
    tangent_process,
)
from hysteresis.timegrid import ConfigError, exact_time_integral, make_grid, sample_brownian


@pytest.fixture(scope="module")
def g():
    return make_grid(1.0, 64)


@pytest.fixture(scope="module")
def path(g):
    return sample_brownian(g, 1, seed=4).paths[0]


def w_only(ens):
    return Conditioner(ens, features=FeatureSet(("w",)), degree=1, folds=1)


def test_cylindrical_identity(g, path):
    s = 0.5
    assert malliavin_cylindrical(lambda x: x, [s], path, 0.25, g) == pytest.approx(1.0)
    assert malliavin_cylindrical(lambda x: x, [s], path, s, g) == pytest.approx(1.0)
    assert malliavin_cylindrical(lambda x: x, [s], path, 0.75, g) == 0.0


def test_cylindrical_square_matches_directional(g, path):
    s = 0.75
    ws = path[g.node(s)]
    d = malliavin_cylindrical(lambda x: x * x, [s], path, 0.25, g)
    assert d == pytest.approx(2 * ws, abs=1e-8)
    dd = malliavin_directional(lambda v: v[..., g.node(s)] ** 2, path, 0.25, g)
    assert dd == pytest.approx(d, abs=1e-5)


def test_cylindrical_two_times(g, path):
    times = [0.25, 0.75]
    f = lambda a, b: a * b
    d = malliavin_cylindrical(f, times, path, 0.5, g, grads=lambda a, b: (b, a))
    assert d == pytest.approx(path[g.node(0.25)])


def test_directional_linear(g, path):
    for delta in (g.dt, 4 * g.dt, 0.25):
        assert malliavin_directional(lambda v: v[..., -1], path, 0.5, g, delta) == pytest.approx(1.0)
    assert malliavin_directional(lambda v: 3.0, path, 0.5, g) == 0.0


def test_directional_time_integral(g, path):
    F = lambda v: v[..., :-1].sum(axis=-1) * g.dt
    t, delta = 0.25, 8 * g.dt
    d = malliavin_directional(F, path, t, g, delta)
    assert d == pytest.approx(g.T - t - delta / 2, abs=2 * g.dt)


def test_directional_anticipativity(g, path):
    # F depends on nodes up to 0.25 only; a ramp starting later has no effect
    F = lambda v: np.sin(v[..., g.node(0.25)])
    assert malliavin_directional(F, path, 0.5, g) == 0.0


def test_ramp_leaves_grid(g):
    with pytest.raises(ConfigError):
        ramp_direction(g, 0.99, 0.1)


def test_pathwise_shapes_and_last_column(g):
    ens = sample_brownian(g, 10, seed=1)
    D = pathwise_malliavin(lambda p: p[:, -1] ** 2, ens.paths, g)
    assert D.shape == ens.paths.shape
    assert np.all(D[:, -1] == 0)
    np.testing.assert_allclose(D[:, :-1], np.broadcast_to(2 * ens.paths[:, -1:], (10, g.N)), atol=1e-5)


def test_clark_ocone_time_integral(g):
    ens = sample_brownian(g, 2000, seed=8)
    xi = lambda p: p[:, :-1].sum(axis=1) * g.dt
    co = clark_ocone_integrand(xi, ens, w_only(ens))
    t = g.times[:-1]
    assert np.max(np.abs(co.values[:, :-1] - (g.T - t))) <= 1.5 * g.dt


def test_clark_ocone_terminal(g):
    ens = sample_brownian(g, 500, seed=8)
    co = clark_ocone_integrand(lambda p: p[:, -1], ens, w_only(ens))
    np.testing.assert_allclose(co.values[:, :-1], 1.0, atol=1e-8)


def test_clark_ocone_square_slope(g):
    ens = sample_brownian(g, 4000, seed=9)
    co = clark_ocone_integrand(lambda p: p[:, -1] ** 2, ens, w_only(ens))
    for i in (16, 32, 48):
        x, y = ens.paths[:, i], co.values[:, i]
        slope = np.polyfit(x, y, 1)[0]
        assert slope == pytest.approx(2.0, abs=0.15)
        target = 2 * x
        r2 = 1 - np.sum((y - target) ** 2) / np.sum((target - target.mean()) ** 2)
        assert r2 >= 0.99


def test_clark_ocone_reconstruction_time_integral():
    rel = []
    for N in (128, 512):
        g = make_grid(1.0, N)
        ens = sample_brownian(g, 4000, seed=10)
        xi = exact_time_integral(ens)
        trap = lambda p: 0.5 * g.dt * (p[:, :-1] + p[:, 1:]).sum(axis=1)
        co = clark_ocone_integrand(trap, ens, w_only(ens))
        res = co.reconstruction_residual(xi, ens)
        rel.append(np.sqrt(np.mean(res ** 2)) / xi.std())
    assert rel[1] <= 0.05
    assert rel[1] < rel[0]


def test_clark_ocone_reconstruction_square():
    # the residual of w_T^2 is sum(dw^2) - T, of relative size sqrt(dt)
    rel = []
    for N in (128, 512):
        g = make_grid(1.0, N)
        ens = sample_brownian(g, 10_000, seed=10)
        xi = ens.paths[:, -1] ** 2
        D = np.broadcast_to(2 * ens.paths[:, -1:], ens.paths.shape)
        co = clark_ocone_integrand(None, ens, w_only(ens), malliavin=D)
        res = co.reconstruction_residual(xi, ens)
        rel.append(np.sqrt(np.mean(res ** 2)) / xi.std())
        assert rel[-1] == pytest.approx(np.sqrt(g.dt), rel=0.2)
    assert rel[1] < rel[0]


def test_tangent_brownian(g, path):
    tp = tangent_process(lambda w: 0 * w, lambda w: 1 + 0 * w, path, 20, g)
    assert np.all(np.isnan(tp.values[:20]))
    np.testing.assert_allclose(tp.values[20:], 1.0)


def test_tangent_deterministic_diffusion(g, path):
    tp = tangent_process(lambda w: 0 * w, lambda w: g.times + 0 * w, path, 20, g)
    np.testing.assert_allclose(tp.values[20:], g.times[20])


def test_tangent_running_integral(g, path):
    j = 20
    tp = tangent_process(lambda w: w, lambda w: 0 * w, path, j, g)
    s = g.times[j:]
    # s - t up to the one-step lag of the increment convention
    np.testing.assert_allclose(tp.values[j:], np.maximum(s - g.times[j] - g.dt, 0), atol=1e-8)
    # and it matches the increment sensitivity of c_s itself
    c = lambda p: np.stack([p[..., :k].sum(axis=-1) * g.dt for k in range(g.N + 1)], axis=-1)
    D = (c(path + 1e-6 * (np.arange(g.N + 1) > j)) - c(path)) / 1e-6
    np.testing.assert_allclose(tp.values[j:], D[j:], atol=1e-7)
