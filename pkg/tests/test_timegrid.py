import numpy as np
import pytest

from hysteresis.timegrid import (
    ConfigError,
    SamplePath,
    bump_path,
    deterministic_ensemble,
    exact_time_integral,
    flat_extend,
    flat_extend_values,
    load_ensemble_csv,
    make_grid,
    perturb_direction,
    sample_brownian,
    save_ensemble_csv,
)


def test_grid_nodes():
    g = make_grid(1, 4)
    np.testing.assert_array_equal(g.times, [0, 0.25, 0.5, 0.75, 1])
    assert make_grid(2, 2).dt == 1.0


@pytest.mark.parametrize("T,N", [(1, 1), (0, 4), (-1, 4), (1, 2.5)])
def test_grid_rejects(T, N):
    with pytest.raises(ConfigError):
        make_grid(T, N)


def test_node_lookup():
    g = make_grid(1.0, 4)
    assert g.node(0.5) == 2
    assert g.node(0.3) == 1
    assert g.node(1.0) == 4
    with pytest.raises(ConfigError):
        g.node(1.5)


def test_brownian_moments():
    g = make_grid(1.0, 256)
    ens = sample_brownian(g, 100_000, seed=7)
    wT = ens.paths[:, -1]
    assert abs(wT.mean()) < 3 * np.sqrt(1.0 / 100_000)
    assert abs(wT.var() - 1.0) < 0.05
    assert np.all(ens.paths[:, 0] == 0)


def test_brownian_increment_variance():
    g = make_grid(2.0, 8)
    dw = sample_brownian(g, 50_000, seed=3).increments
    np.testing.assert_allclose(dw.var(axis=0), g.dt, rtol=0.05)
    corr = np.corrcoef(dw[:, 0], dw[:, 1])[0, 1]
    assert abs(corr) < 0.02


def test_brownian_deterministic_and_parallel():
    g = make_grid(1.0, 32)
    a = sample_brownian(g, 500, seed=9)
    b = sample_brownian(g, 500, seed=9)
    c = sample_brownian(g, 500, seed=9, threads=4)
    np.testing.assert_array_equal(a.paths, b.paths)
    np.testing.assert_array_equal(a.paths, c.paths)
    assert not np.array_equal(a.paths, sample_brownian(g, 500, seed=10).paths)


def test_path_depends_only_on_index():
    g = make_grid(1.0, 16)
    small = sample_brownian(g, 10, seed=4)
    large = sample_brownian(g, 100, seed=4)
    np.testing.assert_array_equal(small.paths, large.paths[:10])


def test_sample_rejects_empty():
    with pytest.raises(ConfigError):
        sample_brownian(make_grid(1.0, 4), 0, seed=1)


def test_bump_path():
    g = make_grid(1.0, 2)
    p = SamplePath(g, [0, 0.5, 1.0])
    q = bump_path(p, 2, 0.1)
    np.testing.assert_allclose(q.values, [0, 0.5, 1.1])
    assert q.kind == "cadlag-bumped"
    np.testing.assert_array_equal(bump_path(p, 1, 0.0).values, p.values)
    with pytest.raises(ConfigError):
        bump_path(p, 3, 0.1)


def test_flat_extend():
    np.testing.assert_array_equal(flat_extend_values([0, 1], 2), [0, 1, 1, 1])
    np.testing.assert_array_equal(flat_extend_values([0, 1], 0), [0, 1])
    g = make_grid(1.0, 4)
    p = SamplePath(g, [0, 1, 2, 3, 4])
    np.testing.assert_array_equal(flat_extend(p, 1, 2).values[:4], [0, 1, 1, 1])
    with pytest.raises(ConfigError):
        flat_extend(p, 4, 1)
    with pytest.raises(ConfigError):
        flat_extend_values([0, 1, 2], 3, N=4)


def test_perturb_direction():
    g = make_grid(1.0, 2)
    p = SamplePath(g, np.zeros(3))
    np.testing.assert_allclose(perturb_direction(p, np.ones(3), 1.0).values, [0, 0.5, 1.0])
    np.testing.assert_array_equal(perturb_direction(p, np.ones(3), 0.0).values, p.values)
    np.testing.assert_array_equal(perturb_direction(p, np.zeros(3), 1.0).values, p.values)
    with pytest.raises(ConfigError):
        perturb_direction(p, SamplePath(make_grid(2.0, 2), np.ones(3)), 1.0)


def test_deterministic_ensemble():
    g = make_grid(1.0, 4)
    ens = deterministic_ensemble(g, 0.0)
    assert ens.M == 1 and ens.deterministic


def test_exact_time_integral_moments():
    # Var(int_0^1 w ds) = 1/3 for Brownian motion
    g = make_grid(1.0, 4)
    ens = sample_brownian(g, 200_000, seed=21)
    I = exact_time_integral(ens)
    assert abs(I.mean()) < 4 * np.sqrt(1 / 3 / 200_000)
    assert abs(I.var() - 1 / 3) < 0.01


def test_csv_roundtrip(tmp_path):
    g = make_grid(0.75, 6)
    ens = sample_brownian(g, 5, seed=2)
    f = tmp_path / "ens.csv"
    save_ensemble_csv(ens, f)
    back = load_ensemble_csv(f)
    assert back.grid == g
    np.testing.assert_array_equal(back.paths, ens.paths)
