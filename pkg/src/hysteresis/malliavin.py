"""Malliavin derivatives, Clark-Ocone integrands and tangent processes.

Two discrete conventions coexist here.  ``malliavin_cylindrical`` and
``malliavin_directional`` follow the continuous-time definition (a ramp in
the Cameron-Martin direction).  Pathwise arrays used by the pipelines are
sensitivities to the increment ``w_{j+1} - w_j``, i.e. a unit shift of every
node after ``j`` (see ``functionals.shift_after``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .condexp import make_conditioner
from .functionals import shift_after
from .timegrid import BrownianEnsemble, ConfigError, SamplePath, perturb_direction


#: values per block in ``pathwise_malliavin``
PATH_BLOCK = 1 << 18


def _values(path):
    return path.values if isinstance(path, SamplePath) else np.asarray(path, float)


def malliavin_cylindrical(g, times, path, t, grid, grads=None, h=1e-5):
    """``D_t g(w_{t_1}, .., w_{t_k}) = sum_i d_i g * 1{t <= t_i}``.

    ``times`` are observation times; ``grads`` (optional) returns the partial
    derivatives as a sequence, otherwise central differences are used.
    """
    v = _values(path)
    idx = [grid.node(s) for s in times]
    x = np.array([v[..., i] for i in idx], dtype=float)
    if grads is not None:
        parts = np.asarray(grads(*x), float)
    else:
        parts = []
        for k in range(len(idx)):
            up, dn = x.copy(), x.copy()
            up[k] += h
            dn[k] -= h
            parts.append((g(*up) - g(*dn)) / (2 * h))
        parts = np.asarray(parts, float)
    ind = np.array([t <= grid.times[i] + 1e-12 for i in idx], dtype=float)
    return np.tensordot(ind, parts, axes=(0, 0))


def ramp_direction(grid, t, delta):
    """Direction ``z = 1{[t, t + delta)} / delta`` on the grid nodes."""
    if delta <= 0 or t + delta > grid.T + 1e-12:
        raise ConfigError(f"ramp [{t}, {t + delta}] leaves [0, {grid.T}]")
    tt = grid.times
    return np.where((tt >= t - 1e-12) & (tt < t + delta - 1e-12), 1.0 / delta, 0.0)


def malliavin_directional(F, path, t, grid, delta=None, eps=1e-6):
    """Forward difference of ``F`` along a short Cameron-Martin ramp at ``t``.

    Estimates the average of ``D_r F`` over ``r in [t, t + delta]``.  The base
    path is reused, so the difference carries no sampling noise.
    """
    delta = 4 * grid.dt if delta is None else delta
    z = ramp_direction(grid, t, delta)
    base = path if isinstance(path, SamplePath) else SamplePath(grid, path)
    moved = perturb_direction(base, z, eps)
    return (np.asarray(F(moved.values), float) - np.asarray(F(base.values), float)) / eps


def pathwise_malliavin(F, paths, grid, eps=1e-6, nodes=None):
    """Sensitivity of ``F(paths)`` to each increment, shape ``(M, N+1)``.

    Column ``j`` shifts every node after ``j``; the last column is zero.
    """
    paths = np.asarray(paths, float)
    nodes = [j for j in (range(grid.N) if nodes is None else nodes) if j < grid.N]
    out = np.zeros(paths.shape)
    if paths.ndim < 2:
        base = np.asarray(F(paths), float)
        for j in nodes:
            out[..., j] = (np.asarray(F(shift_after(paths, j, eps)), float) - base) / eps
        return out
    # blocks of paths keep the shifted copies small
    rows = max(1, PATH_BLOCK // paths.shape[-1])
    for lo in range(0, paths.shape[0], rows):
        block = paths[lo:lo + rows]
        base = np.asarray(F(block), float)
        work = np.empty_like(block)
        for j in nodes:
            np.copyto(work, block)
            work[..., j + 1:] += eps
            out[lo:lo + rows, j] = (np.asarray(F(work), float) - base) / eps
    return out


@dataclass
class ClarkOconeIntegrand:
    """Fitted ``E[D_t xi | F_t]`` per path and node.

    ``pathwise`` keeps the unconditioned derivative estimates and ``r2`` the
    per-node regression diagnostics (NaN for exact conditioning).
    """

    values: np.ndarray
    pathwise: np.ndarray
    r2: np.ndarray
    grid: object

    @property
    def diagonal(self):
        return self.values

    def stochastic_integral(self, ensemble):
        return (self.values[:, :-1] * ensemble.increments).sum(axis=1)

    def reconstruction_residual(self, xi_values, ensemble):
        """``xi - E[xi] - sum_i g_i dw_i`` per path.

        ``E[xi]`` is the mean of ``xi - sum_i g_i dw_i`` (the stochastic
        integral as a control variate), so the sampling error of a plain
        mean of ``xi`` does not enter the residual.
        """
        xi = np.asarray(xi_values, float)
        rest = xi - self.stochastic_integral(ensemble)
        return rest - rest.mean()


def clark_ocone_integrand(xi, ensemble: BrownianEnsemble, conditioner=None, malliavin=None,
                          eps=1e-6) -> ClarkOconeIntegrand:
    """Regress pathwise Malliavin derivatives of ``xi`` on adapted features.

    ``xi`` maps the path array to one value per path.  ``malliavin`` may be a
    precomputed ``(M, N+1)`` array or a callable of the paths; otherwise the
    increment-shift estimator is used.
    """
    grid = ensemble.grid
    if malliavin is None:
        D = pathwise_malliavin(xi, ensemble.paths, grid, eps)
    elif callable(malliavin):
        D = np.asarray(malliavin(ensemble.paths), float)
    else:
        D = np.asarray(malliavin, float)
    cond = make_conditioner(ensemble) if conditioner is None else conditioner
    fitted = cond.project(D)
    est = getattr(cond, "last_estimator", None)
    r2 = est.r2 if est is not None else np.full(grid.N + 1, np.nan)
    return ClarkOconeIntegrand(fitted, D, r2, grid)


@dataclass
class TangentProcess:
    """``D_t c_s`` for ``s >= t`` (NaN before ``t``)."""

    start: int
    values: np.ndarray


def tangent_process(alpha, beta, path, t_index, grid, d_alpha=None, d_beta=None, eps=1e-6):
    """Euler recursion ``Y_{s+1} = Y_s + D_t alpha_s ds + D_t beta_s dw_s``, ``Y_t = beta_t``.

    ``alpha`` and ``beta`` map path arrays to coefficient arrays on all
    nodes.  Their Malliavin derivatives come from ``d_alpha`` / ``d_beta``
    (callables of the paths returning arrays over ``s``) or, by default,
    from shifting the path after ``t_index``.
    """
    w = np.asarray(_values(path), float)
    j = int(t_index)
    if not 0 <= j <= grid.N:
        raise ConfigError(f"node {j} outside grid")
    a0, b0 = np.asarray(alpha(w), float), np.asarray(beta(w), float)
    shifted = shift_after(w, j, eps)
    da = d_alpha(w) if d_alpha is not None else (np.asarray(alpha(shifted), float) - a0) / eps
    db = d_beta(w) if d_beta is not None else (np.asarray(beta(shifted), float) - b0) / eps
    dw = np.diff(w, axis=-1)
    out = np.full(w.shape, np.nan)
    y = b0[..., j]
    out[..., j] = y
    for s in range(j, grid.N):
        y = y + da[..., s] * grid.dt + db[..., s] * dw[..., s]
        out[..., s + 1] = y
    return TangentProcess(j, out)
