"""Independent ground truth: an exact scenario-tree solver and closed forms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .condexp import (
    expected_capped_hitting,
    expected_capped_hitting_da,
    bounded_se,
    graded_times,
    survival_on_times,
    survival_time_integral,
    tipping_closed_form,
    tipping_state,
)
from .functionals import Climate, Tipping, scalar_function, tipping
from .timegrid import BrownianEnsemble, ConfigError, TimeGrid, make_grid, ramp

MAX_DEPTH = 10


# ---------------------------------------------------------------------------
# scenario tree


@dataclass
class ScenarioTree:
    """Binomial tree with ``+-sqrt(dt)`` moves, each branch with probability 1/2.

    Leaf ``L`` takes step ``r`` upwards when bit ``depth - 1 - r`` of ``L`` is
    set, so the depth-``i`` ancestor of leaf ``L`` is ``L >> (depth - i)``.
    """

    depth: int
    grid: TimeGrid

    @property
    def leaves(self):
        n = self.depth
        L = np.arange(2 ** n)[:, None]
        bits = (L >> (n - 1 - np.arange(n))[None, :]) & 1
        steps = np.where(bits == 1, 1.0, -1.0) * np.sqrt(self.grid.dt)
        paths = np.zeros((2 ** n, n + 1))
        paths[:, 1:] = np.cumsum(steps, axis=1)
        return paths

    def ensemble(self) -> BrownianEnsemble:
        return BrownianEnsemble(self.grid, self.leaves, None, meta={"tree": True})

    def node_values(self, i):
        """``w`` at the ``2^i`` nodes of depth ``i``."""
        return self.leaves[:: 2 ** (self.depth - i), i]

    def probability(self, i):
        return 0.5 ** i

    def ancestor(self, leaf, i):
        return np.asarray(leaf) >> (self.depth - i)

    def offsets(self):
        """Position of the first node of each depth in a flat node vector."""
        return np.concatenate([[0], np.cumsum(2 ** np.arange(self.depth + 1))])


def scenario_tree(depth, T=1.0) -> ScenarioTree:
    if not 1 <= depth <= MAX_DEPTH:
        raise ConfigError(f"tree depth must lie in 1..{MAX_DEPTH}, got {depth}")
    return ScenarioTree(int(depth), make_grid(T, depth) if depth >= 2 else TimeGrid(float(T), 1))


@dataclass
class TreePolicy:
    """Optimal decision at every decision node (depths ``0 .. depth-1``)."""

    tree: ScenarioTree
    values: list

    def on_leaves(self):
        """Policy laid out like the leaf paths; the terminal column is NaN."""
        n = self.tree.depth
        out = np.full((2 ** n, n + 1), np.nan)
        L = np.arange(2 ** n)
        for i, v in enumerate(self.values):
            out[:, i] = v[self.tree.ancestor(L, i)]
        return out


def tree_optimize(h: Climate, eps, tree: ScenarioTree) -> TreePolicy:
    """Exact maximizer of the tree objective for a policy-linear damage.

    The objective is ``sum_v pi_v dt [-(c_v - w_v)^2 / 2 - eps h_v]`` over the
    decision nodes ``v`` (depths ``0 .. n-1``), with
    ``h_v = g_v c_v + sum_{u ancestor-or-self of v} k(t_u, t_v) Y_v c_u dt``.
    The stationarity system is assembled over all decision nodes and solved
    densely.
    """
    if not isinstance(h, Climate):
        raise ConfigError("tree oracle needs a policy-linear (climate) functional")
    n, grid = tree.depth, tree.grid
    dt = grid.dt
    K = h.kernel_matrix(grid)
    off = tree.offsets()
    nvar = int(off[n])
    H = np.zeros((nvar, nvar))
    rhs = np.zeros(nvar)
    leaves = tree.leaves
    for i in range(n):
        w_i = tree.node_values(i)
        prefix = leaves[:: 2 ** (n - i)]
        g_i = np.asarray(h.g.value(i, prefix, grid), float)
        Y_i = h.k.path_factor(w_i)
        p = tree.probability(i) * dt
        for v in range(2 ** i):
            row = off[i] + v
            # quadratic tracking term
            H[row, row] -= p
            rhs[row] -= p * w_i[v]
            # linear damage of node v on itself and its ancestors
            rhs[row] += eps * p * g_i[v]
            for r in range(i + 1):
                u = off[r] + (v >> (i - r))
                rhs[u] += eps * p * K[i, r] * Y_i[v] * dt
    # H c = rhs collects d J / d c = H c - rhs = 0
    c = np.linalg.solve(H, rhs)
    values = [c[off[i]:off[i + 1]] for i in range(n)]
    return TreePolicy(tree, values)


# ---------------------------------------------------------------------------
# closed forms


@dataclass
class ClosedFormOracle:
    """Exact evaluators; each maps ``(w, grid)`` to per-node arrays or is None."""

    name: str
    C: object = None
    drift: object = None
    diffusion: object = None
    policy: object = None


def oracle_cumulative() -> ClosedFormOracle:
    """``C = -int_0^t w ds - (T - t) w_t``, drift 0, diffusion ``-(T - t)``."""
    return ClosedFormOracle(
        "cumulative",
        C=lambda w, g: -ramp(g.dt, w) - (g.T - g.times) * np.asarray(w, float),
        drift=lambda w, g: np.zeros(np.shape(w)),
        diffusion=lambda w, g: -(g.T - g.times) * np.ones(np.shape(w)),
    )


def oracle_state_dependent(f) -> ClosedFormOracle:
    """``C = -f'(w)``, drift ``-f'''(w)/2``, diffusion ``-f''(w)``."""
    if isinstance(f, str):
        f = scalar_function(f)
    return ClosedFormOracle(
        f"state_dependent({f.name})",
        C=lambda w, g: -f.deriv(np.asarray(w, float), 1),
        drift=lambda w, g: -0.5 * f.deriv(np.asarray(w, float), 3),
        diffusion=lambda w, g: -f.deriv(np.asarray(w, float), 2),
    )


@dataclass
class SeparableFuture:
    """Future part ``F`` of a separable-kernel average and its dynamics."""

    F: np.ndarray
    martingale: np.ndarray
    integrand: np.ndarray
    drift: np.ndarray
    diffusion: np.ndarray


def oracle_detemple_zapatero(h, gtilde, dgtilde, g, ensemble: BrownianEnsemble, conditioner=None):
    """Extract a martingale from a separable kernel ``a(s, t) = g(s) gtilde(t)``.

    ``h`` is a kernel average whose kernel equals ``g(later) gtilde(earlier)``.
    With ``Y_s`` the density factor, ``F_t = gtilde(t) (M_t - Q_t)`` where
    ``Q_t = int_0^t g Y ds`` and ``M_t = E[int_0^T g Y ds | F_t]``.  ``M`` is
    rebuilt from its Clark-Ocone integrand, so the diffusion of ``F`` is
    ``gtilde(t)`` times that integrand and the drift follows from the product
    rule.
    """
    from .condexp import make_conditioner
    from .malliavin import ClarkOconeIntegrand

    grid, w = ensemble.grid, ensemble.paths
    N, dt = grid.N, grid.dt
    t = grid.times
    Y = h.factor(w, grid)
    gY = g(t) * Y
    Q = ramp(dt, gY)
    total = Q[:, -1]
    # pathwise D_j of int_0^T g Y ds: sum_{i>j} g_i D_j Y_i dt
    D = np.zeros(w.shape)
    for P, Qm in h.factor_malliavin_terms(w, grid):
        W = np.tril(Qm.T, k=-1)[:N] * (g(t)[:N, None]) * dt
        D = D + P[:, :N] @ W
    cond = make_conditioner(ensemble) if conditioner is None else conditioner
    fitted = cond.project(D)
    co = ClarkOconeIntegrand(fitted, D, np.full(N + 1, np.nan), grid)
    mart = np.zeros(w.shape)
    mart[:, 1:] = np.cumsum(co.values[:, :-1] * ensemble.increments, axis=1)
    mart += total.mean()
    gt = gtilde(t)
    F = gt * (mart - Q)
    drift = dgtilde(t) * (mart - Q) - gt * gY
    diffusion = gt * co.values
    return SeparableFuture(F, mart, co.values, drift, diffusion)


def oracle_jump(theta, eps, grid: TimeGrid):
    """Optimal policy for ``h_t = c_{t/2}`` along a deterministic ``theta``.

    ``theta - 2 eps`` before ``T/2`` and ``theta`` after; the node nearest
    ``T/2`` takes the left value.
    """
    theta = np.broadcast_to(np.asarray(theta, float), (grid.N + 1,))
    mid = grid.node(grid.T / 2)
    left = np.arange(grid.N + 1) <= mid
    return np.where(left, theta - 2 * eps, theta)


def _weight(f):
    if isinstance(f, Tipping):
        return f.f
    if f is None or isinstance(f, str):
        return tipping(f).f
    return f


def oracle_tipping(f=None, eps=1.0) -> ClosedFormOracle:
    """``c_t = w_t - eps f(t - theta_t) int_t^T (2 Phi((M_t - w_t)/sqrt(s - t)) - 1) ds``.

    The diffusion is the ``w_t``-sensitivity of this expression,
    ``1 + eps f(t - theta_t) dG/da``.
    """
    fw = _weight(f)

    def policy(w, g):
        M, theta = tipping_state(w, g)
        return np.asarray(w, float) - eps * fw(g.times - theta) * expected_capped_hitting(M - w, g.T - g.times)

    def diffusion(w, g):
        M, theta = tipping_state(w, g)
        return 1.0 + eps * fw(g.times - theta) * expected_capped_hitting_da(M - w, g.T - g.times)

    return ClosedFormOracle("tipping", policy=policy, diffusion=diffusion)


def tipping_policy_at(i, path, grid, f=None, eps=1.0):
    """Oracle policy at one node by adaptive quadrature."""
    fw = _weight(f)
    path = np.asarray(path, float)
    return path[..., i] - eps * tipping_closed_form(i, path, grid, fw)


def tipping_future(i, f=None):
    """``int_t^T f(t - theta_s) ds`` on continuation paths from node ``i``.

    After the running maximum is exceeded the weight vanishes, so the value
    is ``f(t - theta_t)`` times the time spent below the current maximum,
    computed with the Brownian-bridge survival probability between nodes.
    """
    fw = _weight(f)

    def future(paths, grid):
        M, theta = tipping_state(paths[:, :i + 1], grid)
        weight = fw(grid.times[i] - theta[:, i])
        return weight * survival_time_integral(paths, M[:, i], i, grid)

    return future


def tipping_nested_mc(i, prefix, grid, f=None, inner=20000, seed=0, path_index=0, steps=256):
    """Nested Monte Carlo of ``E[int_t^T f(t - theta_s) ds | F_t]`` for one prefix.

    Fresh continuations from ``w_t`` are simulated on times clustered near
    ``t``, where survival below the running maximum changes fastest when the
    path sits close to it.  Returns ``(mean, standard_error)``.
    """
    fw = _weight(f)
    prefix = np.asarray(prefix, float)
    M, theta = tipping_state(prefix[None, :i + 1], grid)
    weight = float(fw(grid.times[i] - theta[0, i]))
    tau = grid.T - grid.times[i]
    if tau <= 0:
        return 0.0, 0.0
    times = graded_times(tau, steps)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(path_index), int(i)])))
    x = np.empty((int(inner), times.size))
    x[:, 0] = prefix[i]
    x[:, 1:] = prefix[i] + np.cumsum(rng.standard_normal((int(inner), steps)) * np.sqrt(np.diff(times)), axis=1)
    vals = weight * survival_on_times(x, np.full(int(inner), M[0, i]), times)
    return float(vals.mean()), bounded_se(vals, 0.0, abs(weight) * tau)


def capped_hitting_mc(a, tau, inner=20000, N=512, seed=0):
    """Monte Carlo of ``int_0^tau P(max_[0,s] w < a) ds`` with bridge survival."""
    grid = make_grid(tau, N)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 1])))
    paths = np.zeros((int(inner), N + 1))
    paths[:, 1:] = np.cumsum(rng.standard_normal((int(inner), N)) * np.sqrt(grid.dt), axis=1)
    vals = survival_time_integral(paths, np.full(int(inner), float(a)), 0, grid)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))

