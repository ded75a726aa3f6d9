"""Acceptance suite shared by ``hysteresis verify`` and the test-suite.

Each criterion runs a fixed, seeded experiment and returns a list of
checks.  A check passes when its statistic is at most its bound (``kind
"max"``) or at least its bound (``kind "min"``).  The summary line of a
criterion reports the check with the smallest margin.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .condexp import Conditioner, PrefixConditioner
from .dupire import ItoCoefficients
from .dynamics import (
    constant_process,
    elasticity,
    elasticity_dynamics,
    empirical_coefficients,
    foc_solve,
    integral_to_horizon,
    pigouvian_tax,
    policy_coefficients,
    residual_coefficients,
    small_eps_check,
    time_weighted_terminal,
    total_derivative,
    window_diffusion,
    window_nodes,
    z_score,
)
from .functionals import climate, cumulative, kernel_average, midpoint, state_dependent
from .malliavin import clark_ocone_integrand
from .oracles import (
    oracle_jump,
    oracle_tipping,
    scenario_tree,
    tipping_nested_mc,
    tipping_policy_at,
    tree_optimize,
)
from .timegrid import ConfigError, deterministic_ensemble, exact_time_integral, make_grid, sample_brownian


@dataclass
class Check:
    label: str
    statistic: float
    bound: float
    kind: str = "max"

    @property
    def passed(self):
        s = self.statistic
        if not np.isfinite(s):
            return False
        return s <= self.bound if self.kind == "max" else s >= self.bound

    @property
    def margin(self):
        """Statistic over bound (bound over statistic for lower bounds); 1 is the edge."""
        s, b = abs(self.statistic), abs(self.bound)
        if not np.isfinite(s):
            return np.inf
        if self.kind == "max":
            return s / b if b > 0 else (0.0 if s == 0 else np.inf)
        return b / s if s > 0 else np.inf


@dataclass
class CriterionResult:
    """Checks of one criterion; ``time_limit`` bounds the wall time when set."""

    number: int
    name: str
    checks: list = field(default_factory=list)
    seconds: float = 0.0
    time_limit: float | None = None

    @property
    def in_time(self):
        return self.time_limit is None or self.seconds <= self.time_limit

    @property
    def passed(self):
        return self.in_time and all(c.passed for c in self.checks)

    @property
    def binding(self) -> Check:
        return max(self.checks, key=lambda c: c.margin)

    def line(self):
        b = self.binding
        op = "<=" if b.kind == "max" else ">="
        verdict = "PASS" if self.passed else "FAIL"
        timing = f"  [{self.seconds:.1f} s" + (f" <= {self.time_limit:g} s]" if self.time_limit else "]")
        return (f"{self.number:2d} {self.name:<18s} {b.label} = {b.statistic:.6g} "
                f"{op} {b.bound:.6g}  {verdict}{timing}")


def _abs_max(x):
    x = np.abs(np.asarray(x, float))
    return float(np.max(x)) if x.size else 0.0


def _order(h, err):
    """Slope of log error against log step."""
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


# ---------------------------------------------------------------------------
# criteria


def cumulative_hysteresis(seed=2024, M=50_000, N=512, threads=1):
    """Elasticity of the cumulative functional: diffusion -(T-t), drift 0."""
    grid = make_grid(1.0, N)
    ens = sample_brownian(grid, M, seed, threads)
    cond = Conditioner(ens, batches=20)
    C = elasticity(cumulative(), ens, cond).C
    nodes = [grid.node(t) for t in (0.25, 0.5, 0.75)]
    emp = empirical_coefficients(C, ens, nodes=nodes)
    target = -(grid.T - grid.times[nodes])
    zb = z_score(emp.diffusion[nodes], emp.diffusion_se[nodes], target)
    za = z_score(emp.drift[nodes], emp.drift_se[nodes], 0.0)
    rel = np.abs(emp.diffusion[nodes] - target) / np.abs(target)
    return [
        Check("max|z| diffusion", _abs_max(zb), 3.0),
        Check("max rel err diffusion", _abs_max(rel), 0.02),
        Check("max|z| drift", _abs_max(za), 3.0),
    ]


def no_hysteresis(seed=3, M=2000, N=256):
    """Sine state dependence: analytic coefficients and Euler reconstruction."""
    h = state_dependent("sin")
    grid = make_grid(1.0, N)
    ens = sample_brownian(grid, M, seed)
    pred = elasticity_dynamics(h, ens)
    w = ens.paths
    drift_err = _abs_max(pred.drift - 0.5 * np.cos(w))
    diff_err = _abs_max(pred.diffusion - np.sin(w))
    fine = sample_brownian(make_grid(1.0, 1024), M, seed)
    steps, rms = [], []
    for sub in (4, 2, 1):
        g = make_grid(1.0, 1024 // sub)
        e = type(fine)(g, fine.paths[:, ::sub].copy(), fine.master_seed)
        co = elasticity_dynamics(h, e)
        inc = (co.drift[:, :-1] * g.dt + co.diffusion[:, :-1] * e.increments).sum(axis=1)
        CT = -np.cos(e.paths[:, 0]) + inc
        gap = CT - (-np.cos(e.paths[:, -1]))
        steps.append(g.dt)
        rms.append(float(np.sqrt(np.mean(gap * gap))))
    return [
        Check("max drift error", drift_err, 1e-6),
        Check("max diffusion error", diff_err, 1e-6),
        Check("reconstruction order", _order(steps, rms), 0.45, "min"),
    ]


def total_derivative_formula(seed=5, M=20_000, N=256):
    """Projected anticipative processes and the constant-process reduction."""
    grid = make_grid(1.0, N)
    ens = sample_brownian(grid, M, seed)
    cond = Conditioner(ens, batches=20)
    nodes = [N * k // 6 for k in range(1, 6)]
    wn = window_nodes(nodes, N)
    checks = []
    t, dt = grid.times, grid.dt
    last = np.arange(N + 1) < N
    # one-step coefficients of the exact projections on the grid
    targets = {
        "integral_to_horizon": (-ens.paths, np.maximum(grid.T - t - dt, 0.0)),
        "time_weighted_terminal": (ens.paths, (t + dt) * last),
    }
    for xi in (integral_to_horizon(), time_weighted_terminal()):
        X = xi.project(ens, cond)
        a, b = targets[xi.name]
        b = np.broadcast_to(b, ens.paths.shape)
        exact = ItoCoefficients(a, b)
        pred = total_derivative(xi, ens, cond, nodes=wn)
        for label, co in (("exact", exact), ("predicted", pred)):
            r = residual_coefficients(X, co, ens, nodes=nodes)
            checks.append(Check(f"{xi.name} {label} max|z| drift",
                                _abs_max(z_score(r.drift[nodes], r.drift_se[nodes])), 3.0))
            checks.append(Check(f"{xi.name} {label} max|z| diffusion",
                                _abs_max(z_score(r.diffusion[nodes], r.diffusion_se[nodes])), 3.0))
        checks.append(Check(f"{xi.name} predicted diffusion gap", _abs_max(pred.diffusion[:, nodes] - b[:, nodes]),
                            1e-8))

    def left_sum(w):
        return np.asarray(w, float)[..., :-1].sum(axis=-1) * grid.dt

    td = total_derivative(constant_process(left_sum), ens, cond)
    co = clark_ocone_integrand(left_sum, ens, cond)
    checks.append(Check("constant process vs Clark-Ocone", _abs_max(td.diffusion - co.values), 1e-10))
    checks.append(Check("constant process drift", _abs_max(td.drift), 1e-10))
    return checks


def tree_oracle(depth=6, eps=0.2):
    """Exact tree optimum against the first-order fixed point."""
    tree = scenario_tree(depth)
    h = climate("identity", "exponential")
    opt = tree_optimize(h, eps, tree)
    ens = tree.ensemble()
    pol = foc_solve(h, eps, ens, PrefixConditioner(ens))
    gap = _abs_max(opt.on_leaves()[:, :depth] - pol.c[:, :depth])
    return [Check("max node gap", gap, 1e-10)]


def jump_example(N=256, eps=0.1):
    """Midpoint functional along a frozen zero path."""
    grid = make_grid(1.0, N)
    ens = deterministic_ensemble(grid, 0.0)
    pol = foc_solve(midpoint(), eps, ens, tol=1e-12)
    expected = oracle_jump(0.0, eps, grid)
    keep = np.arange(N + 1) != grid.node(grid.T / 2)
    return [Check("max error off midpoint", _abs_max(pol.c[0, keep] - expected[keep]), 1e-12)]


def tipping_point(seed=11, prefixes=20, inner=20_000, N=512, M=50_000, diffusion_seed=2024):
    """Closed-form tipping policy against nested simulation and its diffusion."""
    grid = make_grid(1.0, N)
    pre = sample_brownian(grid, prefixes, seed)
    nodes = [grid.node(t) for t in (0.25, 0.5, 0.75)]
    zs = []
    for i in nodes:
        for p in range(prefixes):
            w = pre.paths[p]
            m, se = tipping_nested_mc(i, w, grid, inner=inner, seed=seed, path_index=p)
            cf = w[i] - tipping_policy_at(i, w, grid)
            zs.append(float(z_score(m, se, cf)))
    ens = sample_brownian(grid, M, diffusion_seed)
    orc = oracle_tipping()
    c = orc.policy(ens.paths, grid)
    beta = orc.diffusion(ens.paths, grid)
    emp = empirical_coefficients(c, ens, nodes=nodes)
    target = window_diffusion(beta, ens, nodes)
    zd = z_score(emp.diffusion[nodes], emp.diffusion_se[nodes], target[nodes])
    return [
        Check("max|z| nested MC", _abs_max(zs), 3.0),
        Check("max|z| diffusion", _abs_max(zd), 3.0),
    ]


def clark_ocone_reconstruction(seed=7, M=5000, Ns=(128, 256, 512)):
    """Martingale representation of the time integral of the path."""
    steps, rel = [], []
    for N in Ns:
        grid = make_grid(1.0, N)
        ens = sample_brownian(grid, M, seed)
        xi = exact_time_integral(ens)

        def trapezoid(w, dt=grid.dt):
            w = np.asarray(w, float)
            return 0.5 * dt * (w[..., :-1] + w[..., 1:]).sum(axis=-1)

        co = clark_ocone_integrand(trapezoid, ens, Conditioner(ens))
        res = co.reconstruction_residual(xi, ens)
        steps.append(grid.dt)
        rel.append(float(np.sqrt(np.mean(res ** 2)) / np.std(xi)))
    return [
        Check("relative RMS residual", rel[-1], 0.05),
        Check("halving order", _order(steps, rel), 0.45, "min"),
    ]


def small_eps(seed=13, M=4000, N=64, ladder=(0.1, 0.05, 0.025)):
    """Distance of the perturbed policy from its first-order expansion."""
    grid = make_grid(1.0, N)
    ens = sample_brownian(grid, M, seed)
    h = kernel_average("xy", "exponential")
    out = small_eps_check(h, ladder, ens, Conditioner(ens))
    e = out["error"]
    ratio = float(e[1] / e[2])
    return [
        Check("observed order", out["order"], 1.9, "min"),
        Check("e(0.05)/e(0.025) low", ratio, 3.5, "min"),
        Check("e(0.05)/e(0.025) high", ratio, 4.5),
    ]


def policy_residuals(seed=17, M=20_000, N=128, eps=0.2):
    """Predicted policy drift and diffusion against the solved policy."""
    grid = make_grid(1.0, N)
    ens = sample_brownian(grid, M, seed)
    cond = Conditioner(ens, batches=20)
    h = climate("identity", "exponential")
    pol = foc_solve(h, eps, ens, cond)
    nodes = [N * k // 6 for k in range(1, 6)]
    pred = policy_coefficients(h, pol, ens, nodes=window_nodes(nodes, N))
    r = residual_coefficients(pol.c, pred, ens, nodes=nodes)
    return [
        Check("max|z| drift residual", _abs_max(z_score(r.drift[nodes], r.drift_se[nodes])), 3.0),
        Check("max|z| diffusion residual", _abs_max(z_score(r.diffusion[nodes], r.diffusion_se[nodes])), 3.0),
    ]


def non_martingale(seed=19, M=10_000, N=128):
    """Constant damage weight: the tax is T - t and drifts at -1."""
    grid = make_grid(1.0, N)
    ens = sample_brownian(grid, M, seed)
    res = pigouvian_tax("zero", "one", 0.1, ens)
    gap = _abs_max(res.tax - (grid.T - grid.times))
    nodes = [N * k // 6 for k in range(1, 6)]
    emp = empirical_coefficients(res.tax, ens, nodes=nodes)
    z = z_score(emp.drift[nodes], emp.drift_se[nodes], -1.0)
    return [Check("max |tax - (T - t)|", gap, 1e-12), Check("max|z| drift vs -1", _abs_max(z), 3.0)]


CRITERIA = {
    "cumulative": (1, cumulative_hysteresis, 60.0),
    "no_hysteresis": (2, no_hysteresis, None),
    "total_derivative": (3, total_derivative_formula, None),
    "tree": (4, tree_oracle, 5.0),
    "jump": (5, jump_example, None),
    "tipping": (6, tipping_point, None),
    "clark_ocone": (7, clark_ocone_reconstruction, None),
    "small_eps": (8, small_eps, None),
    "policy_residuals": (9, policy_residuals, None),
    "non_martingale": (10, non_martingale, None),
}


def run_criterion(name, threads=1) -> CriterionResult:
    if name not in CRITERIA:
        raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(CRITERIA)} or all")
    number, fn, limit = CRITERIA[name]
    start = time.perf_counter()
    checks = fn(threads=threads) if name == "cumulative" else fn()
    return CriterionResult(number, name, checks, time.perf_counter() - start, limit)


def run_suite(suite="all", threads=1):
    names = list(CRITERIA) if suite == "all" else [suite]
    return [run_criterion(n, threads) for n in names]
