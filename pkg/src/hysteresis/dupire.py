"""Horizontal and vertical (Dupire) derivatives and the functional Ito formula."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functionals import AtomFunctional, ClassAFunctional, PathFunctional
from .timegrid import ConfigError

#: default vertical bump, relative to ``1 + |path|_inf``, per derivative order
EPS_BASE = {1: 1e-4, 2: 1e-3, 3: 1e-2}


@dataclass
class ItoCoefficients:
    """Drift and diffusion of a process, sampled per path and node.

    Arrays share the layout of the path arrays (time on the last axis).
    ``drift_se`` and ``diffusion_se`` are per-node standard errors when the
    coefficients are statistical estimates.
    """

    drift: np.ndarray
    diffusion: np.ndarray
    drift_se: np.ndarray | None = None
    diffusion_se: np.ndarray | None = None


@dataclass
class DupireDerivatives:
    vertical_1: np.ndarray
    vertical_2: np.ndarray
    vertical_3: np.ndarray
    horizontal: np.ndarray
    mixed: np.ndarray


def default_eps(path, order=1):
    scale = 1.0 + np.max(np.abs(np.asarray(path, float)), axis=-1)
    return EPS_BASE[order] * scale


def _bumped(c, w, i, e, target):
    """Return the ``(c, w)`` pair with node ``i`` moved by ``e``."""
    c = np.asarray(c, float)
    e = np.asarray(e, float)
    if target == "both":
        cb = c.copy()
        cb[..., i] += e
        if w is None:
            return cb, None
        wb = np.array(w, float, copy=True)
        wb[..., i] += e
        return cb, wb
    wref = c if w is None else np.asarray(w, float)
    if target == "c":
        cb = c.copy()
        cb[..., i] += e
        return cb, wref
    if target == "w":
        wb = wref.copy()
        wb[..., i] += e
        return c, wb
    raise ConfigError(f"unknown bump target {target!r}")


def vertical_derivative(q: PathFunctional, c, i, grid, order=1, w=None, eps=None,
                        target="c", analytic=True):
    """Vertical derivative of order 1-3 at node ``i``.

    Central stencils: order 1 uses ``+-eps``, order 2 uses ``+-eps, 0`` and
    order 3 uses ``+-2eps, +-eps``.  Analytic values take precedence when the
    functional supplies them and ``analytic`` is true.
    """
    if order not in (1, 2, 3):
        raise ConfigError(f"vertical order must be 1, 2 or 3, got {order}")
    if not 0 <= i <= grid.N:
        raise ConfigError(f"node {i} outside grid")
    if analytic:
        v = q.analytic_vertical(i, c, grid, order, w, target)
        if v is not None:
            return v
    if eps is None:
        eps = default_eps(c, order)

    def at(m):
        cb, wb = _bumped(c, w, i, m * eps, target)
        return q.value(i, cb, grid, wb)

    if order == 1:
        return (at(1) - at(-1)) / (2 * eps)
    if order == 2:
        return (at(1) - 2 * at(0) + at(-1)) / eps ** 2
    return (at(2) - 2 * at(1) + 2 * at(-1) - at(-2)) / (2 * eps ** 3)


class VerticalFunctional(PathFunctional):
    """``i -> vertical_derivative(q, ., i, order)`` as a functional."""

    def __init__(self, q, order=1, target="c", analytic=True, eps=None):
        self.q, self.order, self.target, self.analytic, self.eps = q, order, target, analytic, eps
        self.name = f"d{order}[{q.name}]"
        self.uses_noise = q.uses_noise

    def value(self, i, c, grid, w=None):
        return vertical_derivative(self.q, c, i, grid, self.order, w, self.eps, self.target, self.analytic)


def horizontal_derivative(q: PathFunctional, c, i, grid, k=1, w=None, analytic=True):
    """``[q_{i+k}(frozen path) - q_i(path)] / (k dt)``; noise is frozen too."""
    if k < 1 or i + k > grid.N or i < 0:
        raise ConfigError(f"cannot extend node {i} by {k} steps on N={grid.N}")
    if analytic:
        v = q.analytic_horizontal(i, c, grid, w)
        if v is not None:
            return v
    cf = np.array(c, float, copy=True)
    cf[..., i + 1:] = cf[..., i:i + 1]
    wf = None
    if w is not None:
        wf = np.array(w, float, copy=True)
        wf[..., i + 1:] = wf[..., i:i + 1]
    return (q.value(i + k, cf, grid, wf) - q.value(i, c, grid, w)) / (k * grid.dt)


def dupire_derivatives(h: PathFunctional, c, i, grid, w=None, target="c", analytic=True, k=1):
    """All Dupire data of ``h`` at node ``i``; mixed = horizontal of the vertical."""
    v = [vertical_derivative(h, c, i, grid, o, w, target=target, analytic=analytic) for o in (1, 2, 3)]
    hz = horizontal_derivative(h, c, i, grid, k, w, analytic) if i + k <= grid.N else np.nan
    if i + k <= grid.N:
        mixed = horizontal_derivative(VerticalFunctional(h, 1, target, analytic), c, i, grid, k, w, analytic=False)
    else:
        mixed = np.nan
    return DupireDerivatives(v[0], v[1], v[2], hz, mixed)


def richardson(coarse, fine, order=1):
    """Two-grid extrapolation for an error expansion ``a + b dt^order``."""
    r = 2.0 ** order
    return (r * np.asarray(fine) - np.asarray(coarse)) / (r - 1.0)


def vertical_extrapolated(h: PathFunctional, path_fn, t, grid, order=1, analytic=False):
    """Vertical derivative at time ``t`` on ``grid`` and its refinement.

    ``path_fn`` maps node times to path values.  Returns ``(raw, extrapolated)``
    where the second value removes the O(dt) endpoint-weight discrepancy.
    """
    from .timegrid import make_grid

    fine = make_grid(grid.T, 2 * grid.N)
    vals = []
    for g in (grid, fine):
        c = np.asarray(path_fn(g.times), float)
        vals.append(vertical_derivative(h, c, g.node(t), g, order, analytic=analytic))
    return vals[0], richardson(vals[0], vals[1])


def functional_ito(q: PathFunctional, c, i, grid, drift_x, diff_x, w=None, analytic=True, k=1,
                   target="c"):
    """Coefficients of ``q_t(x)`` when ``dx = b dt + sigma dw`` at node ``i``.

    drift = horizontal + d1 b + 1/2 d2 sigma^2 ; diffusion = d1 sigma.
    """
    d1 = vertical_derivative(q, c, i, grid, 1, w, target=target, analytic=analytic)
    d2 = vertical_derivative(q, c, i, grid, 2, w, target=target, analytic=analytic)
    hz = horizontal_derivative(q, c, i, grid, k, w, analytic)
    return ItoCoefficients(hz + d1 * drift_x + 0.5 * d2 * np.square(diff_x), d1 * diff_x)


def ito_reconstruction(q: PathFunctional, x, grid, drift_x=0.0, diff_x=1.0, analytic=True):
    """Pathwise gap ``q_N - q_0 - sum(drift dt + diffusion dw)``.

    ``x`` is simulated with constant ``drift_x`` and ``diff_x``; the Brownian
    increments are recovered from it.
    """
    x = np.asarray(x, float)
    dx = np.diff(x, axis=-1)
    dw = (dx - drift_x * grid.dt) / diff_x
    total = np.zeros(x.shape[:-1])
    for i in range(grid.N):
        co = functional_ito(q, x, i, grid, drift_x, diff_x, analytic=analytic)
        total = total + co.drift * grid.dt + co.diffusion * dw[..., i]
    return q.value(grid.N, x, grid) - q.value(0, x, grid) - total


def atom_derivatives(h: ClassAFunctional, c, grid, w=None, target="both", analytic=True, k=1):
    """Dupire data of the atom at every node.

    Returns a dict with first and second vertical derivatives (``1``, ``2``)
    and the horizontal derivative ``"h"`` (zero at the last node).  Vectorized
    analytic versions are used when the functional provides them.
    """
    q = AtomFunctional(h)
    c = np.asarray(c, float)
    n = grid.N + 1
    out = {}
    for order in (1, 2):
        arr = None
        if analytic and hasattr(h, "atom_vertical_all"):
            arr = h.atom_vertical_all(c, grid, order, w, target)
        if arr is None:
            arr = np.stack([vertical_derivative(q, c, i, grid, order, w, target=target, analytic=analytic)
                            for i in range(n)], axis=-1)
        out[order] = np.broadcast_to(arr, c.shape).copy()
    hz = None
    if analytic and hasattr(h, "atom_horizontal_all"):
        hz = h.atom_horizontal_all(c, grid, w)
    if hz is None:
        cols = [horizontal_derivative(q, c, i, grid, k, w, analytic) for i in range(grid.N + 1 - k)]
        cols += [np.zeros(c.shape[:-1])] * k
        hz = np.stack(cols, axis=-1)
    out["h"] = np.broadcast_to(hz, c.shape).copy()
    return out
