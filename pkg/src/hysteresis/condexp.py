"""Conditional expectations given the path up to a node.

Three routes are provided: cross-sectional least squares on adapted path
features (the workhorse), nested Monte Carlo continuation of a fixed prefix
(an independent check) and closed forms for the catalog cases.

Regression fits can be split two ways.  ``batches`` partitions the ensemble
into independent blocks that never share a fit, so batch means carry the
full Monte Carlo error including regression error.  ``folds`` cross-fits
inside each batch: every path is predicted from coefficients fitted on the
other fold, which removes look-ahead bias.
"""
from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .functionals import running_argmax
from .timegrid import BrownianEnsemble, ConfigError, TimeGrid, ramp

COND_WARN = 1e10
#: relative eigenvalue cutoff of the Gram matrix (singular values below ~3e-7)
RCOND = 1e-13


# ---------------------------------------------------------------------------
# features and basis


def _feature_builders():
    return {
        "w": lambda w, g: w,
        "t": lambda w, g: np.broadcast_to(g.times, w.shape),
        "integral": lambda w, g: ramp(g.dt, w),
        "max": lambda w, g: np.maximum.accumulate(w, axis=-1),
        "argmax": lambda w, g: g.times[running_argmax(w)],
        "max_gap": lambda w, g: np.maximum.accumulate(w, axis=-1) - w,
    }


class FeatureSet:
    """Named adapted features; ``extra`` maps names to ``f(paths, grid)``."""

    def __init__(self, names=("w", "integral", "max"), extra=None):
        builders = _feature_builders()
        self.extra = dict(extra or {})
        for n in names:
            if n not in builders and n not in self.extra:
                raise ConfigError(f"unknown feature {n!r}")
        self.names = tuple(names)
        self._builders = {**builders, **self.extra}

    def arrays(self, paths, grid):
        return {n: np.asarray(self._builders[n](paths, grid), float) for n in self.names}

    def __repr__(self):
        return f"FeatureSet({', '.join(self.names)})"


def exponents(k, degree):
    """Exponent tuples of all monomials of total degree <= ``degree`` in ``k`` variables."""
    out = []
    for d in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(k), d):
            e = [0] * k
            for v in combo:
                e[v] += 1
            out.append(tuple(e))
    return out


def monomials(Z, exps):
    """Design matrix of the monomials ``exps``; each column reuses a lower-degree one."""
    n = Z.shape[0]
    out = np.empty((n, len(exps)), order="F")
    col = {}
    for c, e in enumerate(exps):
        col[e] = c
        if not any(e):
            out[:, c] = 1.0
            continue
        v = next(k for k, p in enumerate(e) if p)
        parent = list(e)
        parent[v] -= 1
        np.multiply(out[:, col[tuple(parent)]], Z[:, v], out=out[:, c])
    return out


def term_names(names, exps):
    out = []
    for e in exps:
        parts = [n if p == 1 else f"{n}^{p}" for n, p in zip(names, e) if p]
        out.append("*".join(parts) or "1")
    return out


def group_labels(M, batches=1, folds=1):
    """Batch and fold label of each path index."""
    idx = np.arange(M)
    return idx * batches // M, idx % folds


# ---------------------------------------------------------------------------
# regression


@dataclass
class NodeFit:
    kept: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    coefs: dict
    r2: float
    cond: float


@dataclass
class RegressionEstimator:
    """Per-node least-squares coefficients over a polynomial basis.

    ``coefs[(batch, fold)]`` at each node maps eval-group to a coefficient
    matrix (basis terms x targets).  ``predict`` reapplies them to any paths
    with the same row layout, which freezes the conditioning map.
    """

    feature_set: FeatureSet
    degree: int
    batches: int
    folds: int
    grid: TimeGrid
    nodes: list
    fits: dict = field(default_factory=dict)

    @property
    def r2(self):
        return np.array([self.fits[i].r2 for i in self.nodes])

    @property
    def cond(self):
        return np.array([self.fits[i].cond for i in self.nodes])

    def design(self, paths, i):
        fit = self.fits[i]
        feats = self.feature_set.arrays(paths[..., :i + 1], self.grid)
        Z = np.column_stack([feats[n][..., i] for n in self.feature_set.names])
        Z = (Z[:, fit.kept] - fit.mean) / fit.std
        return monomials(Z, exponents(int(fit.kept.sum()), self.degree))

    def predict(self, paths, nodes=None):
        paths = np.asarray(paths, float)
        M = paths.shape[0]
        nodes = self.nodes if nodes is None else nodes
        b, f = group_labels(M, self.batches, self.folds)
        ntarget = next(iter(self.fits[nodes[0]].coefs.values())).shape[1]
        out = np.full((ntarget, M, self.grid.N + 1), np.nan)
        for i in nodes:
            X = self.design(paths, i)
            for (bb, ff), coef in self.fits[i].coefs.items():
                rows = (b == bb) & (f == ff)
                out[:, rows, i] = (X[rows] @ coef).T
        return out[0] if ntarget == 1 else out

    def to_csv(self, filename):
        with open(filename, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["node", "batch", "fold", "term", "target", "coefficient"])
            for i in self.nodes:
                fit = self.fits[i]
                kept = [n for n, k in zip(self.feature_set.names, fit.kept) if k]
                names = term_names(kept, exponents(len(kept), self.degree))
                for (bb, ff), coef in sorted(fit.coefs.items()):
                    for r, name in enumerate(names):
                        for k in range(coef.shape[1]):
                            wr.writerow([i, bb, ff, name, k, format(coef[r, k], ".17g")])


class Conditioner:
    """Regression estimate of ``E[Y_i | F_i]`` on an ensemble.

    Parameters
    ----------
    ensemble : BrownianEnsemble
    features : FeatureSet, optional
        Defaults to ``(w, integral, max)``.
    degree : int
        Total polynomial degree of the basis.
    folds : int
        1 for in-sample fits, 2 for cross-fitting (default).
    batches : int
        Independent blocks; see the module docstring.
    """

    def __init__(self, ensemble: BrownianEnsemble, features=None, degree=3, folds=2, batches=1,
                 cache=None):
        self.ensemble = ensemble
        self.grid = ensemble.grid
        self.features = features or FeatureSet()
        self.degree, self.folds, self.batches = int(degree), int(folds), int(batches)
        if self.folds < 1 or self.batches < 1:
            raise ConfigError("folds and batches must be positive")
        self.batch, self.fold = group_labels(ensemble.M, self.batches, self.folds)
        part = self.batch * self.folds + self.fold
        # rows are permuted once so that every part is a contiguous slice
        self._perm = np.argsort(part, kind="stable")
        edges = np.searchsorted(part[self._perm], np.arange(self.batches * self.folds + 1))
        self._parts = [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]
        self._feats = None
        M, n = ensemble.M, ensemble.grid.N + 1
        if cache is None:
            cache = M * n * len(exponents(len(self.features.names), degree)) * 8 < 2e8
        self.cache = cache
        self._ops = {}
        self.last_estimator = None

    @property
    def feature_arrays(self):
        if self._feats is None:
            feats = self.features.arrays(self.ensemble.paths[self._perm], self.grid)
            # column-major so each node's cross-section is contiguous
            self._feats = {k: np.asfortranarray(v) for k, v in feats.items()}
        return self._feats

    def _fit_parts(self, b, f):
        """Parts whose rows fit the coefficients used on part ``(b, f)``."""
        if self.folds == 1:
            return [b]
        return [b * self.folds + g for g in range(self.folds) if g != f]

    def _node_design(self, i):
        feats = self.feature_arrays
        Z = np.empty((self.ensemble.M, len(self.features.names)), order="F")
        for k, n in enumerate(self.features.names):
            Z[:, k] = feats[n][:, i]
        mean = Z.mean(axis=0)
        std = Z.std(axis=0)
        kept = std > 1e-12 * (1.0 + np.abs(mean))
        Z = (Z[:, kept] - mean[kept]) / std[kept]
        X = monomials(Z, exponents(int(kept.sum()), self.degree))
        return X, kept, mean[kept], std[kept]

    def _operators(self, i):
        """Design matrix and pseudo-inverse Gram matrix of every fit set."""
        if i in self._ops:
            return self._ops[i]
        X, kept, mean, std = self._node_design(i)
        grams = [X[r].T @ X[r] for r in self._parts]
        inverses = {}
        conds = []
        for b in range(self.batches):
            for f in range(self.folds):
                fp = self._fit_parts(b, f)
                nfit = sum(self._parts[k].stop - self._parts[k].start for k in fp)
                if nfit < 10 * X.shape[1] and X.shape[1] > 1:
                    warnings.warn(f"node {i}: only {nfit} paths for {X.shape[1]} basis terms")
                G = sum(grams[k] for k in fp)
                lam, V = np.linalg.eigh(G)
                # exact polynomial identities (e.g. at early nodes) make the basis
                # rank deficient; those directions are dropped and the condition
                # number refers to the retained subspace
                keep = lam > RCOND * max(lam[-1], 0.0)
                if not np.any(keep):
                    keep = lam >= lam[-1]
                conds.append(np.sqrt(lam[-1] / lam[keep][0]) if lam[keep][0] > 0 else np.inf)
                Vk = V[:, keep]
                inverses[(b, f)] = (Vk / lam[keep]) @ Vk.T
        cond = float(np.max(conds))
        if cond > COND_WARN:
            warnings.warn(f"node {i}: ill-conditioned basis (condition number {cond:.3g})")
        entry = (X, inverses, kept, mean, std, cond)
        if self.cache:
            self._ops[i] = entry
        return entry

    def fit(self, Y, nodes=None) -> RegressionEstimator:
        """Fit ``E[Y_i | F_i]`` at ``nodes``; ``Y`` is ``(M, N+1)`` or ``(k, M, N+1)``."""
        Y = np.asarray(Y, float)
        stacked = Y.reshape((-1,) + Y.shape[-2:])
        nodes = list(range(self.grid.N + 1)) if nodes is None else list(nodes)
        est = RegressionEstimator(self.features, self.degree, self.batches, self.folds, self.grid, nodes)
        fitted = np.full(stacked.shape, np.nan)
        for i in nodes:
            X, inverses, kept, mean, std, cond = self._operators(i)
            T = stacked[:, self._perm, i].T
            moments = [X[r].T @ T[r] for r in self._parts]
            counts = [r.stop - r.start for r in self._parts]
            sums = [T[r].sum(axis=0) for r in self._parts]
            lo = [T[r].min(axis=0) for r in self._parts]
            hi = [T[r].max(axis=0) for r in self._parts]
            coefs = {}
            ss_res = ss_tot = 0.0
            for (b, f), Ginv in inverses.items():
                fp = self._fit_parts(b, f)
                coef = Ginv @ sum(moments[k] for k in fp)
                mu = sum(sums[k] for k in fp) / sum(counts[k] for k in fp)
                spread = np.max([hi[k] for k in fp], axis=0) - np.min([lo[k] for k in fp], axis=0)
                flat = spread <= 1e-13 * (1.0 + np.abs(mu))
                if np.any(flat):
                    coef[:, flat] = 0.0
                    coef[0, flat] = mu[flat]
                coefs[(b, f)] = coef
                ev = self._parts[b * self.folds + f]
                pred = (X[ev] @ coef).T
                for k in np.flatnonzero(flat):
                    pred[k] = mu[k]
                fitted[:, self._perm[ev], i] = pred
                # out-of-sample R^2 of the first target on the evaluation rows
                ye = T[ev, 0]
                ss_res += float(np.sum((ye - pred[0]) ** 2))
                ss_tot += float(np.sum((ye - ye.mean()) ** 2))
            r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
            est.fits[i] = NodeFit(kept, mean, std, coefs, r2, cond)
        self.last_estimator = est
        self._last_fitted = fitted
        return est

    def project(self, Y, nodes=None):
        """Fitted values of ``E[Y_i | F_i]``; nodes not requested are NaN."""
        Y = np.asarray(Y, float)
        if self.ensemble.deterministic:
            out = Y.copy()
            if nodes is not None:
                mask = np.ones(Y.shape[-1], bool)
                mask[list(nodes)] = False
                out[..., mask] = np.nan
            return out
        self.fit(Y, nodes)
        return self._last_fitted.reshape(Y.shape)


class PrefixConditioner:
    """Exact conditional expectations on an equiprobable finite scenario set.

    Paths sharing nodes ``0..i`` form one atom of the information at ``i``;
    the conditional expectation is the group mean.
    """

    def __init__(self, ensemble: BrownianEnsemble):
        self.ensemble = ensemble
        self.grid = ensemble.grid
        self._labels = {}

    def labels(self, i):
        if i not in self._labels:
            key = np.round(self.ensemble.paths[:, :i + 1], 12)
            _, inv = np.unique(key, axis=0, return_inverse=True)
            self._labels[i] = inv.ravel()
        return self._labels[i]

    def project(self, Y, nodes=None):
        Y = np.asarray(Y, float)
        out = np.full(Y.shape, np.nan)
        nodes = range(self.grid.N + 1) if nodes is None else nodes
        for i in nodes:
            lab = self.labels(i)
            cnt = np.bincount(lab)
            flat = Y[..., i].reshape(-1, Y.shape[-2])
            for k in range(flat.shape[0]):
                means = np.bincount(lab, weights=flat[k]) / cnt
                out.reshape(-1, *Y.shape[-2:])[k, :, i] = means[lab]
        return out


class IdentityConditioner:
    """Conditioning on a degenerate (deterministic) ensemble."""

    def __init__(self, ensemble=None):
        self.ensemble = ensemble

    def project(self, Y, nodes=None):
        return np.array(Y, float, copy=True)


def make_conditioner(ensemble, **kw):
    if ensemble.deterministic:
        return IdentityConditioner(ensemble)
    return Conditioner(ensemble, **kw)


# ---------------------------------------------------------------------------
# nested Monte Carlo


def continuation_paths(prefix, i, grid, inner, seed=0, path_index=0):
    """``inner`` paths equal to ``prefix`` up to node ``i`` then fresh Brownian steps."""
    prefix = np.asarray(prefix, float)
    ss = np.random.SeedSequence([int(seed), int(path_index), int(i)])
    rng = np.random.Generator(np.random.Philox(ss))
    paths = np.empty((int(inner), grid.N + 1))
    paths[:, :i + 1] = prefix[:i + 1]
    if i < grid.N:
        dw = rng.standard_normal((int(inner), grid.N - i)) * np.sqrt(grid.dt)
        paths[:, i + 1:] = prefix[i] + np.cumsum(dw, axis=1)
    return paths


def nested_mc(future, i, prefix, grid, inner=20000, seed=0, path_index=0):
    """Average of ``future(paths, grid)`` over continuations of a prefix.

    Returns ``(mean, standard_error)``.
    """
    paths = continuation_paths(prefix, i, grid, inner, seed, path_index)
    vals = np.asarray(future(paths, grid), float)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))


def bridge_survival(paths, level, start, grid):
    """Probability that the continuous path stays below ``level`` on ``[t_start, t_k]``.

    Conditional on the node values each step is a Brownian bridge, which
    crosses ``level`` with probability ``exp(-2 (level-a)(level-b) / dt)``.
    Returns shape ``(M, N+1-start)`` with survival at each later node.
    """
    x = np.asarray(paths, float)[:, start:]
    lv = np.asarray(level, float).reshape(-1, 1)
    gap = lv - x
    below = gap > 0
    g0, g1 = gap[:, :-1], gap[:, 1:]
    ok = below[:, :-1] & below[:, 1:]
    step = np.where(ok, -np.expm1(-2.0 * np.clip(g0, 0, None) * np.clip(g1, 0, None) / grid.dt), 0.0)
    surv = np.ones(x.shape)
    surv[:, 1:] = np.cumprod(step, axis=1)
    return surv


def survival_time_integral(paths, level, start, grid):
    """``int_{t_start}^T P(max_[t_start, s] w < level | nodes) ds`` by the trapezoid rule."""
    surv = bridge_survival(paths, level, start, grid)
    return grid.dt * (surv[:, :-1] + surv[:, 1:]).sum(axis=1) * 0.5


def graded_times(tau, n, power=2.0):
    """``n + 1`` times on ``[0, tau]`` clustered near 0, ``tau (k/n)^power``."""
    return float(tau) * (np.arange(int(n) + 1) / int(n)) ** power


def survival_on_times(x, level, times):
    """Time spent below ``level`` by paths ``x`` observed at ``times``.

    Bridge survival between observations, trapezoid rule in time; works on
    non-uniform ``times``.
    """
    x = np.asarray(x, float)
    h = np.diff(np.asarray(times, float))
    gap = np.asarray(level, float).reshape(-1, 1) - x
    g0, g1 = np.clip(gap[:, :-1], 0, None), np.clip(gap[:, 1:], 0, None)
    with np.errstate(divide="ignore"):
        step = np.where((g0 > 0) & (g1 > 0), -np.expm1(-2.0 * g0 * g1 / h), 0.0)
    surv = np.ones(x.shape)
    surv[:, 1:] = np.cumprod(step, axis=1)
    return ((surv[:, :-1] + surv[:, 1:]) * 0.5 * h).sum(axis=1)


def bounded_se(vals, lo, hi):
    """Standard error of a mean of values in ``[lo, hi]``.

    When every draw sits at one end the sample variance is zero although
    rare draws elsewhere are possible; the floor uses the add-two estimate
    ``1 / (n + 2)`` of the unseen probability.
    """
    vals = np.asarray(vals, float)
    n = vals.size
    se = vals.std(ddof=1) / np.sqrt(n)
    p = 1.0 / (n + 2)
    return float(max(se, (hi - lo) * np.sqrt(p * (1 - p) / n)))


# ---------------------------------------------------------------------------
# closed forms


def expected_capped_hitting(a, tau):
    """``G(a, tau) = int_0^tau (2 Phi(a / sqrt(u)) - 1) du`` in closed form."""
    a = np.asarray(a, float)
    tau = np.asarray(tau, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = a / np.sqrt(2.0 * tau)
        out = (a * a + tau) * special.erf(z) - a * a + a * np.sqrt(2.0 * tau / np.pi) * np.exp(-z * z)
    return np.where(tau > 0, out, 0.0)


def expected_capped_hitting_da(a, tau):
    """Derivative of ``G`` in its first argument."""
    a = np.asarray(a, float)
    tau = np.asarray(tau, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = a / np.sqrt(2.0 * tau)
        out = -2.0 * a * special.erfc(z) + 2.0 * np.sqrt(2.0 * tau / np.pi) * np.exp(-z * z)
    return np.where(tau > 0, out, 0.0)


def capped_hitting_quad(a, tau):
    """Same integral by adaptive quadrature after ``u = sqrt(s - t)``."""
    if tau <= 0 or a <= 0:
        return 0.0
    fn = lambda v: (2.0 * special.ndtr(a / v) - 1.0) * 2.0 * v if v > 0 else 2.0 * v
    val, _ = integrate.quad(fn, 0.0, np.sqrt(tau), epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(val)


def tipping_state(w, grid):
    """Running maximum and first argmax time of each path at every node."""
    w = np.asarray(w, float)
    return np.maximum.accumulate(w, axis=-1), grid.times[running_argmax(w)]


def tipping_closed_form(i, w, grid, f, T=None, method="quad"):
    """``f(t - theta_t) * int_t^T (2 Phi((M_t - w_t) / sqrt(s - t)) - 1) ds`` at node ``i``."""
    T = grid.T if T is None else T
    w = np.asarray(w, float)
    M, theta = tipping_state(w[..., :i + 1], grid)
    t = grid.times[i]
    gap = M[..., i] - w[..., i]
    weight = f(t - theta[..., i])
    if method == "closed":
        return weight * expected_capped_hitting(gap, T - t)
    integral = np.vectorize(lambda a: capped_hitting_quad(a, T - t))(gap)
    return weight * integral


def tipping_projection(w, grid, f):
    """Closed-form ``E[int_t^T f(t - theta_s) ds | F_t]`` at every node."""
    M, theta = tipping_state(w, grid)
    t = grid.times
    return f(t - theta) * expected_capped_hitting(M - w, grid.T - t)


def tipping_sensitivity(w, grid, f):
    """Derivative of ``tipping_projection`` in the current value ``w_t``."""
    M, theta = tipping_state(w, grid)
    t = grid.times
    return -f(t - theta) * expected_capped_hitting_da(M - w, grid.T - t)


CLOSED_FORMS = {
    "martingale": lambda w, g: np.asarray(w, float),
    "integral_to_horizon": lambda w, g: (g.T - g.times) * np.asarray(w, float),
    "time_weighted_terminal": lambda w, g: g.times * np.asarray(w, float),
}
