"""Batch experiment runner.

Every command reads an optional TOML config, fills in defaults, writes the
resolved config and the tool version next to its outputs and exits with 0
(pass), 1 (usage or config error) or 2 (validation failure).
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .acceptance import CRITERIA, run_suite
from .condexp import Conditioner, FeatureSet, PrefixConditioner
from .dynamics import (
    ConvergenceError,
    elasticity,
    elasticity_dynamics,
    empirical_coefficients,
    foc_solve,
    pigouvian_tax,
    residual_coefficients,
    small_eps_check,
    window_bounds,
    window_diffusion,
    window_nodes,
    write_array_csv,
    z_score,
)
from .functionals import Climate, ClassAFunctional, Tipping, make_functional
from .oracles import scenario_tree, tipping_nested_mc, tipping_policy_at, tree_optimize
from .timegrid import BrownianEnsemble, ConfigError, make_grid, sample_brownian

EXIT_OK, EXIT_CONFIG, EXIT_FAIL = 0, 1, 2
Z_BOUND = 3.0

#: accepted tables and keys with their defaults
DEFAULTS = {
    "grid": {"T": 1.0, "N": 256},
    "ensemble": {"M": 20000, "seed": 2024},
    "functional": {
        "name": "cumulative", "f": "default", "scale": 1.0, "h2": "xy", "kernel": "exponential",
        "rate": 1.0, "g": "identity", "k": "exponential", "g_scale": 1.0,
    },
    "estimator": {
        "basis": ["w", "integral", "max"], "degree": 3, "folds": 2, "batches": 20, "window": 16,
        "inner": 20000,
    },
    "run": {"eps": 0.1, "times": [0.25, 0.5, 0.75], "out": "out"},
    "convergence": {"ladder": "eps", "values": [0.1, 0.05, 0.025], "min_order": -np.inf},
    "tree": {"depth": 6, "eps": 0.2, "tol": 1e-10},
    "tipping": {"prefixes": 20, "seed": 11, "eps": 1.0},
}

_COMMAND_DEFAULTS = {
    "climate": {"functional": {"name": "climate"}},
    "tree-oracle": {"functional": {"name": "climate"}},
    "tipping": {"grid": {"N": 512}, "functional": {"name": "tipping"}},
}


def _typed(table, key, value, default):
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{table}] {key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{table}] {key} must be an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{table}] {key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"[{table}] {key} must be a list, got {value!r}")
        return value
    return value


def resolve_config(raw: dict, command: str) -> dict:
    """Merge ``raw`` into the defaults, rejecting unknown tables and keys."""
    cfg = {t: dict(v) for t, v in DEFAULTS.items()}
    for t, v in _COMMAND_DEFAULTS.get(command, {}).items():
        cfg[t].update(v)
    for table, body in raw.items():
        if table not in cfg:
            raise ConfigError(f"unknown config table [{table}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{table}] must be a table")
        for key, value in body.items():
            if key not in cfg[table]:
                raise ConfigError(f"unknown key {key!r} in [{table}]")
            cfg[table][key] = _typed(table, key, value, DEFAULTS[table][key])
    return cfg


def load_config(path, command) -> dict:
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    return resolve_config(raw, command)


def write_provenance(out, cfg, command):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved.toml"), "wb") as fh:
        fh.write(f"# command: {command}\n".encode())
        tomli_w.dump(cfg, fh)
    with open(os.path.join(out, "VERSION"), "w") as fh:
        fh.write(f"hysteresis {__version__}\n")


# ---------------------------------------------------------------------------
# shared setup


def _grid(cfg):
    return make_grid(cfg["grid"]["T"], cfg["grid"]["N"])


def _ensemble(cfg, threads, grid=None):
    grid = _grid(cfg) if grid is None else grid
    return sample_brownian(grid, cfg["ensemble"]["M"], cfg["ensemble"]["seed"], threads)


def _conditioner(cfg, ens, batches=None):
    est = cfg["estimator"]
    if batches is None:
        batches = min(est["batches"], max(1, ens.M // 1000))
    return Conditioner(ens, FeatureSet(tuple(est["basis"])), est["degree"], est["folds"], batches)


def _functional(cfg):
    f = cfg["functional"]
    # "default" leaves the catalog's own choice in place
    params = {k: v for k, v in f.items() if k != "name" and v != "default"}
    return make_functional(f["name"], **params)


def _nodes(cfg, grid):
    nodes = sorted({grid.node(t) for t in cfg["run"]["times"]})
    if not nodes:
        raise ConfigError("[run] times must not be empty")
    return nodes


def _f(x):
    return format(float(x), ".17g")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([v if isinstance(v, str) else _f(v) for v in r])


def _coefficient_rows(X, pred, ens, nodes, window, batches):
    """Empirical against predicted coefficients with residual z-scores."""
    emp = empirical_coefficients(X, ens, window, nodes, batches)
    res = residual_coefficients(X, pred, ens, window, nodes, batches)
    pd = window_diffusion(pred.diffusion, ens, nodes, window)
    rows, worst = [], 0.0
    t = ens.grid.times
    for j in nodes:
        lo, hi = window_bounds(j, ens.grid.N, window)
        pa = float(np.mean(np.asarray(pred.drift)[:, lo:hi]))
        za = float(z_score(res.drift[j], res.drift_se[j]))
        zb = float(z_score(res.diffusion[j], res.diffusion_se[j]))
        worst = max(worst, abs(za), abs(zb))
        rows.append([t[j], emp.drift[j], emp.drift_se[j], pa, za,
                     emp.diffusion[j], emp.diffusion_se[j], pd[j], zb])
    return rows, worst


_COEF_HEADER = ["t", "drift_empirical", "drift_se", "drift_predicted", "z_drift",
                "diffusion_empirical", "diffusion_se", "diffusion_predicted", "z_diffusion"]


def _report(path, title, cfg, rows, worst, extra=()):
    lines = [title, ""]
    lines += list(extra)
    lines.append("node-wise coefficients (window means) and compensated residual z-scores:")
    lines.append("  " + "  ".join(f"{h:>20s}" for h in _COEF_HEADER))
    for r in rows:
        lines.append("  " + "  ".join(f"{float(v):20.10g}" for v in r))
    verdict = "PASS" if worst <= Z_BOUND else "FAIL"
    lines.append("")
    lines.append(f"max |z| = {worst:.4f} (bound {Z_BOUND})  {verdict}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return verdict == "PASS"


# ---------------------------------------------------------------------------
# commands


def cmd_elasticity(cfg, out, threads=1, summary=False):
    h = _functional(cfg)
    if not isinstance(h, ClassAFunctional):
        raise ConfigError(f"elasticity needs a class A functional, got {cfg['functional']['name']!r}")
    ens = _ensemble(cfg, threads)
    grid = ens.grid
    cond = _conditioner(cfg, ens)
    window = cfg["estimator"]["window"]
    nodes = _nodes(cfg, grid)
    el = elasticity(h, ens, cond)
    pred = elasticity_dynamics(h, ens, cond, nodes=window_nodes(nodes, grid.N, window))
    write_array_csv(os.path.join(out, "C.csv"), el.C, grid, summary)
    _write_rows(os.path.join(out, "decomposition.csv"),
                ["t", "C_mean", "I_mean", "F_mean", "C_std", "I_std", "F_std"],
                [[grid.times[j], el.C[:, j].mean(), el.I[:, j].mean(), el.F[:, j].mean(),
                  el.C[:, j].std(), el.I[:, j].std(), el.F[:, j].std()] for j in range(grid.N + 1)])
    rows, worst = _coefficient_rows(el.C, pred, ens, nodes, window, cond.batches)
    _write_rows(os.path.join(out, "empirical_vs_predicted.csv"), _COEF_HEADER, rows)
    ok = _report(os.path.join(out, "report.txt"), f"elasticity of {h.name}", cfg, rows, worst)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_climate(cfg, out, threads=1, summary=False):
    h = _functional(cfg)
    if not isinstance(h, Climate):
        raise ConfigError("climate needs [functional] name = \"climate\"")
    ens = _ensemble(cfg, threads)
    grid = ens.grid
    cond = _conditioner(cfg, ens)
    window = cfg["estimator"]["window"]
    nodes = _nodes(cfg, grid)
    eps = cfg["run"]["eps"]
    res = pigouvian_tax(h, None, eps, ens, cond)
    write_array_csv(os.path.join(out, "tax.csv"), res.tax, grid, summary)
    write_array_csv(os.path.join(out, "policy.csv"), res.c, grid, summary)
    rows, worst = _coefficient_rows(res.tax, res.tax_coefficients, ens, nodes, window, cond.batches)
    prow, pworst = _coefficient_rows(res.c, res.policy_coefficients, ens, nodes, window, cond.batches)
    _write_rows(os.path.join(out, "dynamics.csv"), ["process"] + _COEF_HEADER,
                [["tax"] + r for r in rows] + [["policy"] + r for r in prow])
    extra = [f"eps = {eps}", f"policy max |z| = {pworst:.4f}", "tax:"]
    ok = _report(os.path.join(out, "report.txt"), f"marginal damage of {h.name}", cfg, rows,
                 max(worst, pworst), extra)
    return EXIT_OK if ok else EXIT_FAIL


def _reconstruction_error(h, cfg, grid, fine: BrownianEnsemble, sub):
    ens = BrownianEnsemble(grid, fine.paths[:, ::sub].copy(), fine.master_seed)
    cond = _conditioner(cfg, ens)
    C = elasticity(h, ens, cond).C
    co = elasticity_dynamics(h, ens, cond)
    inc = (co.drift[:, :-1] * grid.dt + co.diffusion[:, :-1] * ens.increments).sum(axis=1)
    gap = C[:, 0] + inc - C[:, -1]
    return float(np.sqrt(np.mean(gap * gap)))


def cmd_convergence(cfg, out, threads=1, summary=False):
    conv = cfg["convergence"]
    values = list(conv["values"])
    if len(values) < 3:
        raise ConfigError(f"convergence ladder needs at least 3 values, got {len(values)}")
    h = _functional(cfg)
    kind = conv["ladder"]
    errors = []
    if kind == "eps":
        ens = _ensemble(cfg, threads)
        r = small_eps_check(h, [float(v) for v in values], ens, _conditioner(cfg, ens))
        errors = list(r["error"])
        xs = [float(v) for v in values]
    elif kind == "N":
        Ns = [int(v) for v in values]
        finest = max(Ns)
        if any(finest % n for n in Ns):
            raise ConfigError("N ladder values must divide the finest grid")
        fine = sample_brownian(make_grid(cfg["grid"]["T"], finest), cfg["ensemble"]["M"],
                               cfg["ensemble"]["seed"], threads)
        for n in Ns:
            errors.append(_reconstruction_error(h, cfg, make_grid(cfg["grid"]["T"], n), fine, finest // n))
        xs = [cfg["grid"]["T"] / n for n in Ns]
    elif kind == "M":
        grid = _grid(cfg)
        j = grid.node(grid.T / 2)
        xs = [float(v) for v in values]
        # one block count for the whole ladder keeps the error bars comparable
        batches = min(cfg["estimator"]["batches"], max(1, int(min(values)) // 1000))
        for m in values:
            ens = sample_brownian(grid, int(m), cfg["ensemble"]["seed"], threads)
            C = elasticity(h, ens, _conditioner(cfg, ens, batches)).C
            emp = empirical_coefficients(C, ens, cfg["estimator"]["window"], [j], batches)
            errors.append(float(emp.diffusion_se[j]))
    else:
        raise ConfigError(f"unknown ladder {kind!r}; choose eps, N or M")
    errors = np.asarray(errors, float)
    if np.all(errors > 0):
        order = float(np.polyfit(np.log(xs), np.log(errors), 1)[0])
    else:
        order = float("nan")
    _write_rows(os.path.join(out, "rates.csv"), ["ladder", "value", "error", "observed_order"],
                [[kind, x, e, order] for x, e in zip(xs, errors)])
    print(f"{kind} ladder observed order {order:.4f}")
    return EXIT_OK if order >= conv["min_order"] else EXIT_FAIL


def cmd_tree_oracle(cfg, out, threads=1, summary=False):
    h = _functional(cfg)
    if not isinstance(h, Climate):
        raise ConfigError("tree-oracle needs [functional] name = \"climate\"")
    tc = cfg["tree"]
    tree = scenario_tree(tc["depth"], cfg["grid"]["T"])
    opt = tree_optimize(h, tc["eps"], tree)
    ens = tree.ensemble()
    pol = foc_solve(h, tc["eps"], ens, PrefixConditioner(ens))
    rows, worst = [], 0.0
    leaves = tree.leaves
    for i in range(tree.depth):
        stride = 2 ** (tree.depth - i)
        for v, c in enumerate(opt.values[i]):
            f = pol.c[v * stride, i]
            worst = max(worst, abs(f - c))
            rows.append([str(i), str(v), tree.grid.times[i], leaves[v * stride, i], c, f, f - c])
    _write_rows(os.path.join(out, "tree_policy.csv"),
                ["depth", "node", "t", "w", "tree_optimum", "first_order", "gap"], rows)
    ok = worst <= tc["tol"]
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(f"tree oracle for {h.name}, depth {tree.depth}, eps {tc['eps']}\n"
                 f"max node gap = {worst:.3e} (bound {tc['tol']:g})  {'PASS' if ok else 'FAIL'}\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_tipping(cfg, out, threads=1, summary=False):
    h = _functional(cfg)
    if not isinstance(h, Tipping):
        raise ConfigError("tipping needs [functional] name = \"tipping\"")
    grid = _grid(cfg)
    tc = cfg["tipping"]
    pre = sample_brownian(grid, tc["prefixes"], tc["seed"], threads)
    nodes = _nodes(cfg, grid)
    eps = tc["eps"]
    rows, worst = [], 0.0
    for i in nodes:
        for p in range(tc["prefixes"]):
            w = pre.paths[p]
            m, se = tipping_nested_mc(i, w, grid, h, cfg["estimator"]["inner"], tc["seed"], p)
            cf = tipping_policy_at(i, w, grid, h, eps)
            z = float(z_score(w[i] - eps * m, eps * se, cf))
            worst = max(worst, abs(z))
            rows.append([grid.times[i], str(p), w[i], cf, w[i] - eps * m, eps * se, z])
    _write_rows(os.path.join(out, "tipping.csv"),
                ["t", "prefix", "w", "policy_closed_form", "policy_nested_mc", "se", "z"], rows)
    ok = worst <= Z_BOUND
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(f"tipping policy for {h.name}, eps {eps}, {tc['prefixes']} prefixes\n"
                 f"max |z| closed form vs nested MC = {worst:.4f} (bound {Z_BOUND})  "
                 f"{'PASS' if ok else 'FAIL'}\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(suite, out=None, threads=1):
    if suite != "all" and suite not in CRITERIA:
        raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(CRITERIA)} or all")
    results = run_suite(suite, threads)
    for r in results:
        print(r.line(), flush=True)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        _write_rows(os.path.join(out, "verify.csv"),
                    ["criterion", "name", "check", "statistic", "bound", "kind", "pass"],
                    [[str(r.number), r.name, c.label, c.statistic, c.bound, c.kind, str(c.passed)]
                     for r in results for c in r.checks])
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {
    "elasticity": cmd_elasticity,
    "climate": cmd_climate,
    "convergence": cmd_convergence,
    "tree-oracle": cmd_tree_oracle,
    "tipping": cmd_tipping,
}


def build_parser():
    p = argparse.ArgumentParser(prog="hysteresis", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hysteresis {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["verify"]:
        s = sub.add_parser(name)
        if name == "verify":
            s.add_argument("suite", nargs="?", default="all", help="criterion name or 'all'")
        s.add_argument("--config", help="TOML experiment config")
        s.add_argument("--out", help="output directory (overrides [run] out)")
        s.add_argument("--threads", type=int, default=1, help="worker threads for path simulation")
        s.add_argument("--summary", action="store_true", help="write path statistics instead of every path")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.command == "verify":
            out = args.out
            if args.config is not None or out is not None:
                cfg = load_config(args.config, "verify")
                if out is not None:
                    write_provenance(out, cfg, "verify")
            return cmd_verify(args.suite, out, args.threads)
        cfg = load_config(args.config, args.command)
        out = args.out or cfg["run"]["out"]
        cfg["run"]["out"] = out
        write_provenance(out, cfg, args.command)
        return COMMANDS[args.command](cfg, out, args.threads, args.summary)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
