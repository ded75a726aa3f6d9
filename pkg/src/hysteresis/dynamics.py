"""Semimartingale dynamics of conditional-expectation processes and policies.

Pipelines here take a Brownian ensemble and a conditioner (regression,
prefix-exact or identity) and return per-path, per-node arrays.  Every
predicted coefficient has an empirical counterpart from
``empirical_coefficients`` so formulas can be checked against simulation.

Discrete conventions follow ``functionals``: future sums start at the
current node, the time-derivative term is a forward difference in the
first density index and Malliavin derivatives are increment sensitivities.
With these choices the predicted coefficients reproduce the one-step
increments of the simulated processes without an O(dt) bias.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .condexp import Conditioner, group_labels, make_conditioner
from .dupire import ItoCoefficients, atom_derivatives
from .functionals import Climate, ClassAFunctional, Midpoint, climate, shift_after
from .malliavin import pathwise_malliavin
from .timegrid import BrownianEnsemble, ConfigError, TimeGrid, ramp

#: z-tests treat estimates within this absolute distance as exact
ATOL = 1e-10


class ConvergenceError(RuntimeError):
    """Fixed-point iteration failed; ``trace`` holds the update norms."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def default_batches(M):
    """Independent regression blocks used for standard errors."""
    return int(max(1, min(20, M // 1000)))


def _conditioner(ensemble, conditioner):
    if conditioner is not None:
        return conditioner
    if ensemble.deterministic:
        return make_conditioner(ensemble)
    return Conditioner(ensemble, batches=default_batches(ensemble.M))


# ---------------------------------------------------------------------------
# conditional processes and the total derivative


@dataclass
class ConditionalProcess:
    """Absolutely continuous, possibly anticipative family ``xi_t``.

    ``xi``, ``dxi_dt`` and ``malliavin`` map the path array to ``(M, N+1)``
    arrays.  ``dxi_dt`` defaults to the forward difference in ``t`` and
    ``malliavin`` to the increment-shift estimator.  ``dxi_dt_malliavin``
    is ``D_t`` of the time derivative, needed for the one-step correction
    in ``total_derivative`` (shift estimator by default).  ``projection``
    is an optional exact ``E[xi_t | F_t]``.
    """

    name: str
    xi: object
    dxi_dt: object = None
    malliavin: object = None
    projection: object = None
    dxi_dt_malliavin: object = None

    def values(self, w, grid):
        return np.asarray(self.xi(w, grid), float)

    def time_derivative(self, w, grid):
        if self.dxi_dt is not None:
            return np.asarray(self.dxi_dt(w, grid), float)
        x = self.values(w, grid)
        out = np.zeros(x.shape)
        out[..., :-1] = np.diff(x, axis=-1) / grid.dt
        return out

    def malliavin_diagonal(self, w, grid, eps=1e-6):
        """``D_t xi_t`` at every node."""
        if self.malliavin is not None:
            return np.asarray(self.malliavin(w, grid), float)
        w = np.asarray(w, float)
        base = self.values(w, grid)
        out = np.zeros(w.shape)
        for j in range(grid.N):
            out[..., j] = (self.values(shift_after(w, j, eps), grid)[..., j] - base[..., j]) / eps
        return out

    def time_derivative_malliavin(self, w, grid, eps=1e-6):
        """``D_t`` of the time derivative at every node."""
        if self.dxi_dt_malliavin is not None:
            return np.asarray(self.dxi_dt_malliavin(w, grid), float) * np.ones(np.shape(w))
        w = np.asarray(w, float)
        base = self.time_derivative(w, grid)
        out = np.zeros(w.shape)
        for j in range(grid.N):
            out[..., j] = (self.time_derivative(shift_after(w, j, eps), grid)[..., j] - base[..., j]) / eps
        return out

    def project(self, ensemble, conditioner=None):
        cond = _conditioner(ensemble, conditioner)
        return cond.project(self.values(ensemble.paths, ensemble.grid))


def _future_sum(x, grid):
    """``sum_{i=j}^{N-1} x_i dt`` for every ``j``."""
    x = np.asarray(x, float)
    out = np.zeros(x.shape)
    out[..., :-1] = np.cumsum(x[..., :-1][..., ::-1], axis=-1)[..., ::-1] * grid.dt
    return out


def integral_to_horizon() -> ConditionalProcess:
    """``xi_t = int_t^T w ds``: drift ``-w_t``, diffusion ``T - t``."""
    return ConditionalProcess(
        "integral_to_horizon",
        xi=_future_sum,
        dxi_dt=lambda w, g: -np.asarray(w, float) * (np.arange(g.N + 1) < g.N),
        malliavin=lambda w, g: np.broadcast_to(np.maximum(g.T - g.times - g.dt, 0.0), np.shape(w)),
        projection=lambda w, g: (g.T - g.times) * np.asarray(w, float),
        dxi_dt_malliavin=lambda w, g: 0.0,
    )


def time_weighted_terminal() -> ConditionalProcess:
    """``xi_t = t * w_T``: drift ``w_t``, diffusion ``t``."""
    return ConditionalProcess(
        "time_weighted_terminal",
        xi=lambda w, g: g.times * np.asarray(w, float)[..., -1:],
        dxi_dt=lambda w, g: np.broadcast_to(np.asarray(w, float)[..., -1:], np.shape(w)),
        malliavin=lambda w, g: np.broadcast_to(g.times * (np.arange(g.N + 1) < g.N), np.shape(w)),
        projection=lambda w, g: g.times * np.asarray(w, float),
        dxi_dt_malliavin=lambda w, g: (np.arange(g.N + 1) < g.N).astype(float),
    )


def constant_process(F, name="constant", malliavin=None) -> ConditionalProcess:
    """``xi_t = F(w)`` for all ``t``; its projection is a martingale.

    ``malliavin`` (optional) returns the full increment-sensitivity array of
    ``F``; otherwise it is estimated by shifting.
    """
    def xi(w, g):
        return np.broadcast_to(np.asarray(F(w), float)[..., None], np.shape(w))

    def mall(w, g):
        if malliavin is not None:
            return np.asarray(malliavin(w, g), float)
        return pathwise_malliavin(F, w, g)

    return ConditionalProcess(name, xi, dxi_dt=lambda w, g: np.zeros(np.shape(w)), malliavin=mall,
                              dxi_dt_malliavin=lambda w, g: 0.0)


def total_derivative(xi: ConditionalProcess, ensemble: BrownianEnsemble, conditioner=None,
                     nodes=None) -> ItoCoefficients:
    """``dE[xi_t|F_t] = E[d_t xi_t|F_t] dt + E[D_t xi_t|F_t] dw``.

    On the grid the time-derivative term of a step is conditioned on the
    end of the step, which adds ``dt E[D_t d_t xi_t | F_t]`` to the
    diffusion; it vanishes as ``dt -> 0``.
    """
    cond = _conditioner(ensemble, conditioner)
    w, grid = ensemble.paths, ensemble.grid
    diff = xi.malliavin_diagonal(w, grid) + grid.dt * xi.time_derivative_malliavin(w, grid)
    stacked = np.stack([xi.time_derivative(w, grid), diff])
    fitted = cond.project(stacked, nodes)
    return ItoCoefficients(fitted[0], fitted[1])


def ito_to_projection(alpha, beta, ensemble=None, eta0=0.0) -> ConditionalProcess:
    """Anticipative ``xi_t = eta_0 + int_0^t alpha ds + int_0^T beta dw`` projecting to ``eta``.

    ``alpha`` and ``beta`` map path arrays to adapted coefficient arrays.
    """
    def xi(w, g):
        a = np.asarray(alpha(w, g), float) * np.ones(np.shape(w))
        b = np.asarray(beta(w, g), float) * np.ones(np.shape(w))
        mart = (b[..., :-1] * np.diff(w, axis=-1)).sum(axis=-1)
        return eta0 + ramp(g.dt, a) + mart[..., None]

    def proj(w, g):
        b = np.asarray(beta(w, g), float) * np.ones(np.shape(w))
        a = np.asarray(alpha(w, g), float) * np.ones(np.shape(w))
        inc = np.zeros(np.shape(w))
        inc[..., 1:] = np.cumsum(b[..., :-1] * np.diff(w, axis=-1), axis=-1)
        return eta0 + ramp(g.dt, a) + inc

    return ConditionalProcess(
        "ito_projection", xi,
        dxi_dt=lambda w, g: np.asarray(alpha(w, g), float) * np.ones(np.shape(w)),
        projection=proj,
        dxi_dt_malliavin=lambda w, g: 0.0,
    )


# ---------------------------------------------------------------------------
# empirical coefficients


def window_bounds(j, N, K):
    """Steps ``[lo, lo + K)`` centred on node ``j`` and kept inside the grid."""
    K = min(int(K), N)
    lo = max(0, min(j - K // 2, N - K))
    return lo, lo + K


def _grouped_se(u, groups):
    """Standard error of ``sum(u)`` from group sums.

    The larger of the group-level and the per-item value is returned: groups
    capture error shared within a block, and with few groups the per-item
    value keeps the estimate from collapsing by chance.
    """
    G = groups.max() + 1
    g = np.bincount(groups, weights=u, minlength=G)
    grouped = np.sqrt(G / max(G - 1, 1) * np.sum(g * g))
    n = u.size
    single = np.sqrt(n / max(n - 1, 1) * np.sum(u * u))
    return max(grouped, single)


def _grouped_ratio(num, den, groups):
    """Ratio of sums with a grouped linearization standard error."""
    total = den.sum()
    est = num.sum() / total
    return est, _grouped_se(num - est * den, groups) / total


def empirical_coefficients(X, ensemble: BrownianEnsemble, window=16, nodes=None, batches=None,
                           increments=None) -> ItoCoefficients:
    """Local drift and diffusion of ``X`` from its increments.

    At node ``j`` the window of ``K`` steps around ``j`` gives
    ``beta = sum dX dw / sum dw^2`` and ``alpha = mean(dX - beta dw) / dt``.
    Standard errors treat each of ``batches`` contiguous path blocks as one
    observation (each path when ``batches`` is 1), which keeps regression
    error that is shared within a block in the error bar; the per-path
    value is a floor.

    ``increments`` replaces ``diff(X)`` when given (used for compensated
    residuals).
    """
    grid = ensemble.grid
    N, dt = grid.N, grid.dt
    M = ensemble.M
    dX = np.diff(np.asarray(X, float), axis=-1) if increments is None else np.asarray(increments, float)
    dw = ensemble.increments
    batches = default_batches(M) if batches is None else int(batches)
    groups = group_labels(M, batches)[0] if batches > 1 else np.arange(M)
    nodes = range(N + 1) if nodes is None else nodes
    shape = (N + 1,)
    drift, diff, dse, bse = (np.full(shape, np.nan) for _ in range(4))
    for j in nodes:
        lo, hi = window_bounds(j, N, window)
        x, z = dX[:, lo:hi], dw[:, lo:hi]
        b, b_se = _grouped_ratio((x * z).sum(axis=1), (z * z).sum(axis=1), groups)
        res = (x - b * z).sum(axis=1) / ((hi - lo) * dt)
        a = res.mean()
        a_se = _grouped_se(res - a, groups) / M
        drift[j], diff[j], dse[j], bse[j] = a, b, a_se, b_se
    return ItoCoefficients(drift, diff, dse, bse)


def residual_coefficients(X, predicted: ItoCoefficients, ensemble, window=16, nodes=None,
                          batches=None) -> ItoCoefficients:
    """Empirical coefficients of ``X - int alpha dt - int beta dw``.

    Predicted coefficients are per path and node; only the window steps of
    the requested nodes need to be finite.  Both outputs should vanish.
    """
    grid = ensemble.grid
    dX = np.diff(np.asarray(X, float), axis=-1)
    a = np.broadcast_to(predicted.drift, ensemble.paths.shape)[:, :-1]
    b = np.broadcast_to(predicted.diffusion, ensemble.paths.shape)[:, :-1]
    with np.errstate(invalid="ignore"):
        inc = dX - a * grid.dt - b * ensemble.increments
    return empirical_coefficients(None, ensemble, window, nodes, batches, increments=inc)


def z_score(estimate, se, target=0.0, atol=ATOL):
    """``(estimate - target) / se``; 0 when the gap is below ``atol``."""
    gap = np.asarray(estimate, float) - target
    se = np.asarray(se, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(np.abs(gap) <= atol, 0.0, gap / se)
    return z


def window_diffusion(beta, ensemble: BrownianEnsemble, nodes, window=16):
    """Per-path diffusion averaged the way ``empirical_coefficients`` weighs it.

    Returns, per node, ``sum beta dw^2 / sum dw^2`` over the window steps.
    """
    dw2 = ensemble.increments ** 2
    b = np.broadcast_to(np.asarray(beta, float), ensemble.paths.shape)[:, :-1]
    out = np.full(ensemble.grid.N + 1, np.nan)
    for j in nodes:
        lo, hi = window_bounds(j, ensemble.grid.N, window)
        out[j] = (b[:, lo:hi] * dw2[:, lo:hi]).sum() / dw2[:, lo:hi].sum()
    return out


def window_nodes(nodes, N, window=16):
    """All nodes whose step starts a window of one of ``nodes``."""
    out = set()
    for j in nodes:
        lo, hi = window_bounds(j, N, window)
        out.update(range(lo, hi))
    return sorted(out)


# ---------------------------------------------------------------------------
# elasticity


@dataclass
class ElasticityResult:
    """``C = -I - F`` along the unperturbed policy ``c = w``."""

    C: np.ndarray
    I: np.ndarray
    F: np.ndarray
    future: np.ndarray
    grid: TimeGrid
    predicted: ItoCoefficients | None = None
    empirical: ItoCoefficients | None = None


def elasticity(h: ClassAFunctional, ensemble: BrownianEnsemble, conditioner=None) -> ElasticityResult:
    """Present part ``I`` (atom) and conditioned future part ``F``."""
    grid, w = ensemble.grid, ensemble.paths
    cond = _conditioner(ensemble, conditioner)
    I = np.asarray(h.atoms(w, grid), float) * np.ones(w.shape)
    future = np.asarray(h.future_density(w, grid), float) * np.ones(w.shape)
    F = cond.project(future)
    return ElasticityResult(-I - F, I, F, future, grid)


def elasticity_dynamics(h: ClassAFunctional, ensemble: BrownianEnsemble, conditioner=None,
                        scheme="discrete", nodes=None) -> ItoCoefficients:
    """Predicted drift and diffusion of ``C``.

    drift = -(horizontal q + 1/2 d2 q - delta_tt + E[int d_t delta ds | F_t]),
    diffusion = -(d q + E[int D_t delta ds | F_t]), with ``q`` the atom and
    vertical derivatives moving the policy and the noise together.
    """
    grid, w = ensemble.grid, ensemble.paths
    cond = _conditioner(ensemble, conditioner)
    d = atom_derivatives(h, w, grid, None, target="both")
    fdt = np.asarray(h.future_density_dt(w, grid, None, scheme), float) * np.ones(w.shape)
    fml = np.asarray(h.future_density_malliavin(w, grid, None), float) * np.ones(w.shape)
    P = cond.project(np.stack([fdt, fml]), nodes)
    diag = np.asarray(h.density_diag(w, grid), float) * np.ones(w.shape)
    drift = -(d["h"] + 0.5 * d[2] - diag + P[0])
    diffusion = -(d[1] + P[1])
    return ItoCoefficients(drift, diffusion)


def deterministic_elasticity(h: ClassAFunctional, b, grid: TimeGrid, theta0=0.0, scheme="discrete"):
    """``C_t`` and ``dC_t/dt`` along the deterministic path ``d theta = b(theta) dt``.

    Returns ``(theta, C, dC_dt)``.
    """
    theta = np.empty(grid.N + 1)
    theta[0] = theta0
    for i in range(grid.N):
        theta[i + 1] = theta[i] + np.asarray(b(theta[i]), float) * grid.dt
    d = atom_derivatives(h, theta, grid, None, target="both")
    C = -(np.asarray(h.atoms(theta, grid), float) + np.asarray(h.future_density(theta, grid), float))
    rate = np.array([b(x) for x in theta], dtype=float)
    dC = -(d["h"] + d[1] * rate - h.density_diag(theta, grid)
           + np.asarray(h.future_density_dt(theta, grid, None, scheme), float))
    return theta, C * np.ones(grid.N + 1), dC * np.ones(grid.N + 1)


# ---------------------------------------------------------------------------
# optimal policy


@dataclass
class PolicyProcess:
    """Solution of the perturbed first-order condition on an ensemble."""

    c: np.ndarray
    w: np.ndarray
    eps: float
    grid: TimeGrid
    conditioner: object
    iterations: int
    trace: list = field(default_factory=list)
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None


def foc_solve(h, eps, ensemble: BrownianEnsemble, conditioner=None, damping=None, tol=1e-12,
              max_iter=200, init=None) -> PolicyProcess:
    """Damped fixed point ``c <- c + lam (w - eps * grad(c) - c)``.

    ``grad(c) = atom + E[future density | F_t]`` (or the dual weight of an
    interior atom).  When the gradient does not depend on the policy the map
    is affine and a full step (``lam = 1``) lands on the solution, so that is
    the default there; otherwise ``lam = 0.5``.  Convergence is declared when
    the largest per-node RMS update drops below ``tol``.
    """
    grid, w = ensemble.grid, ensemble.paths
    cond = _conditioner(ensemble, conditioner)
    free = getattr(h, "gradient_policy_free", False)
    lam = (1.0 if free else 0.5) if damping is None else float(damping)
    if not 0 < lam <= 1:
        raise ConfigError(f"damping must lie in (0, 1], got {lam}")
    c = np.array(w if init is None else init, float, copy=True)
    if eps == 0:
        return PolicyProcess(w.copy(), w, 0.0, grid, cond, 1, [0.0])
    trace = []
    scale = 1.0 + np.max(np.abs(w))
    for it in range(1, max_iter + 1):
        target = w - eps * h.foc_gradient(c, grid, w, cond)
        step = lam * (target - c)
        c = c + step
        upd = float(np.max(np.sqrt(np.mean(step * step, axis=0))))
        trace.append(upd)
        # with a policy-free gradient a full step already solves the condition
        if upd <= tol * scale or (free and lam == 1.0):
            return PolicyProcess(c, w, eps, grid, cond, it, trace)
        if it >= 5 and trace[-1] > trace[-2] > trace[-3]:
            raise ConvergenceError(f"first-order iteration diverges (eps={eps})", trace)
    raise ConvergenceError(f"no convergence after {max_iter} iterations (eps={eps})", trace)


def _atom_partials(h, c, grid, w):
    """Vertical derivatives of the atom in the policy, the noise and both."""
    out = {}
    for tgt in ("c", "w", "both"):
        d = atom_derivatives(h, c, grid, w, target=tgt)
        out[tgt] = d
    q_cw = 0.5 * (out["both"][2] - out["c"][2] - out["w"][2])
    return out["c"][1], out["c"][2], out["w"][1], out["w"][2], q_cw, out["c"]["h"]


def _tangent_malliavin(h, policy: PolicyProcess, ensemble, nodes, e=1e-5, tol=1e-13):
    """Pathwise ``D_j`` of the future row when densities depend on the policy.

    The noise is shifted after ``j`` and the first-order condition re-solved
    on the shifted ensemble with the same estimator settings, so the policy
    moves along its own tangent.
    """
    grid, w, c = policy.grid, policy.w, policy.c
    cond = policy.conditioner
    out = np.full(w.shape, np.nan)
    base = h.future_density(c, grid, w)
    for j in nodes:
        if j >= grid.N:
            out[:, j] = 0.0
            continue
        ws = shift_after(w, j, e)
        ens = BrownianEnsemble(grid, ws, ensemble.master_seed, ensemble.deterministic)
        if isinstance(cond, Conditioner):
            cs_cond = Conditioner(ens, cond.features, cond.degree, cond.folds, cond.batches)
        else:
            cs_cond = _conditioner(ens, None)
        sol = foc_solve(h, policy.eps, ens, cs_cond, tol=tol, init=shift_after(c, j, e))
        out[:, j] = (h.future_density(sol.c, grid, ws)[:, j] - base[:, j]) / e
    return out


def policy_coefficients(h, policy: PolicyProcess, ensemble, nodes=None, scheme="discrete",
                        tangent_eps=1e-5) -> ItoCoefficients:
    """Predicted ``alpha`` and ``beta`` of the solved policy.

    With ``q`` the atom and ``G = E[int D_t delta ds | F_t]``::

        beta  = (1 - eps (q_w + G)) / (1 + eps q_c)
        alpha = -eps (horizontal q + q_cc beta^2 / 2 + q_cw beta + q_ww / 2
                      + E[int d_t delta ds | F_t] - delta_tt) / (1 + eps q_c)

    ``beta`` is formed first because it enters ``alpha``.  ``nodes``
    restricts the conditioned terms (all nodes by default); the policy
    tangent for policy-dependent densities is only affordable on a few.
    """
    if isinstance(h, Midpoint):
        raise ConfigError("interior atoms have no Ito coefficients")
    grid, c, w, eps = policy.grid, policy.c, policy.w, policy.eps
    cond = policy.conditioner
    if nodes is None:
        nodes = list(range(grid.N + 1))
    q_c, q_cc, q_w, q_ww, q_cw, q_h = _atom_partials(h, c, grid, w)
    denom = 1.0 + eps * q_c
    if np.any(np.abs(denom) < 1e-6):
        raise ConfigError("near-singular policy denominator 1 + eps * q_c")
    fdt = np.asarray(h.future_density_dt(c, grid, w, scheme), float) * np.ones(c.shape)
    if getattr(h, "policy_free_density", False):
        fml = np.asarray(h.future_density_malliavin(c, grid, w), float) * np.ones(c.shape)
    else:
        fml = _tangent_malliavin(h, policy, ensemble, nodes, tangent_eps)
        fml = np.nan_to_num(fml)
    P = cond.project(np.stack([fdt, fml]), nodes)
    diag = np.asarray(h.density_diag(c, grid, w), float) * np.ones(c.shape)
    beta = (1.0 - eps * (q_w + P[1])) / denom
    alpha = -eps * (q_h + 0.5 * q_cc * beta ** 2 + q_cw * beta + 0.5 * q_ww + P[0] - diag) / denom
    mask = np.zeros(grid.N + 1, bool)
    mask[list(nodes)] = True
    alpha[:, ~mask] = np.nan
    beta[:, ~mask] = np.nan
    return ItoCoefficients(alpha, beta)


# ---------------------------------------------------------------------------
# climate application


@dataclass
class TaxResult:
    """Marginal damage ``Lambda`` and the optimal policy ``c = w - eps Lambda``."""

    tax: np.ndarray
    c: np.ndarray
    eps: float
    tax_coefficients: ItoCoefficients
    policy_coefficients: ItoCoefficients
    grid: TimeGrid


def pigouvian_tax(g, k, eps, ensemble: BrownianEnsemble, conditioner=None, scheme="discrete",
                  **kparams) -> TaxResult:
    """``Lambda_t = g_t + E[int_t^T k ds | F_t]`` and its predicted dynamics.

    drift = horizontal g + 1/2 d2 g + E[int d_t k ds | F_t] - k_tt,
    diffusion = d g + E[int D_t k ds | F_t].
    """
    h = g if isinstance(g, Climate) else climate(g, k, **kparams)
    grid, w = ensemble.grid, ensemble.paths
    cond = _conditioner(ensemble, conditioner)
    d = atom_derivatives(h, w, grid, w, target="w")
    fut = np.asarray(h.future_density(w, grid, w), float) * np.ones(w.shape)
    fdt = np.asarray(h.future_density_dt(w, grid, w, scheme), float) * np.ones(w.shape)
    fml = np.asarray(h.future_density_malliavin(w, grid, w), float) * np.ones(w.shape)
    P = cond.project(np.stack([fut, fdt, fml]))
    atom = np.asarray(h.atoms(w, grid, w), float) * np.ones(w.shape)
    tax = atom + P[0]
    diag = np.asarray(h.density_diag(w, grid, w), float) * np.ones(w.shape)
    drift = d["h"] + 0.5 * d[2] + P[1] - diag
    diffusion = d[1] + P[2]
    tc = ItoCoefficients(drift, diffusion)
    pc = ItoCoefficients(-eps * drift, 1.0 - eps * diffusion)
    return TaxResult(tax, w - eps * tax, eps, tc, pc, grid)


# ---------------------------------------------------------------------------
# asymptotics


def small_eps_check(h, eps_ladder, ensemble: BrownianEnsemble, conditioner=None, tol=1e-13):
    """Distance of ``c^eps`` from ``w + eps C`` along an eps ladder.

    Returns a dict with ``eps``, ``error`` (largest per-node RMS) and the
    log-log slope ``order``.
    """
    cond = _conditioner(ensemble, conditioner)
    C = elasticity(h, ensemble, cond).C
    w = ensemble.paths
    errs = []
    for e in eps_ladder:
        pol = foc_solve(h, e, ensemble, cond, tol=tol)
        gap = pol.c - (w + e * C)
        errs.append(float(np.max(np.sqrt(np.mean(gap * gap, axis=0)))))
    eps = np.asarray(eps_ladder, float)
    errs = np.asarray(errs)
    if np.all(errs > 1e-14):
        order = float(np.polyfit(np.log(eps), np.log(errs), 1)[0])
    else:
        order = float("nan")
    return {"eps": eps, "error": errs, "order": order}


# ---------------------------------------------------------------------------
# export


def _fmt(x):
    return format(float(x), ".17g")


def write_array_csv(filename, array, grid: TimeGrid, summary=False):
    """One row per path, one column per node; ``summary`` writes mean/std/quantiles."""
    a = np.atleast_2d(np.asarray(array, float))
    with open(filename, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        if summary:
            wr.writerow(["statistic"] + [_fmt(t) for t in grid.times])
            stats = {
                "mean": np.mean(a, axis=0),
                "std": np.std(a, axis=0),
                "q05": np.quantile(a, 0.05, axis=0),
                "median": np.median(a, axis=0),
                "q95": np.quantile(a, 0.95, axis=0),
            }
            for name, row in stats.items():
                wr.writerow([name] + [_fmt(x) for x in row])
        else:
            wr.writerow([_fmt(t) for t in grid.times])
            for row in a:
                wr.writerow([_fmt(x) for x in row])


def export_results(directory, arrays: dict, grid: TimeGrid, summary=False):
    """Write ``name.csv`` for each entry of ``arrays``; returns the file names."""
    os.makedirs(directory, exist_ok=True)
    names = []
    for name, arr in arrays.items():
        fn = os.path.join(directory, f"{name}.csv")
        write_array_csv(fn, arr, grid, summary)
        names.append(fn)
    return names

