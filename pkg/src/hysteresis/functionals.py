"""Non-anticipative path functionals and their first-order (class A) structure.

Conventions used throughout the package:

* ``c`` and ``w`` are node-value arrays with time on the last axis.  ``w=None``
  means the functional is evaluated along the diagonal ``c = w``.
* Inner integrals ``int_0^t x ds`` are left-endpoint sums ``sum_{r<i} x_r dt``,
  so node ``i`` never feeds its own integral.
* Future sums ``int_t^T delta_t h_s ds`` are ``sum_{i=j}^{N-1} delta_{j,i} dt``.
* A discrete Malliavin derivative at node ``j`` is the sensitivity to the
  increment ``w_{j+1} - w_j``; it shifts every node after ``j`` by one.
"""
from __future__ import annotations

import numpy as np

from .timegrid import ConfigError, TimeGrid, ramp


def _diag(c, w):
    return c if w is None else w


def shift_after(x, j, eps):
    """Add ``eps`` to every node strictly after ``j``."""
    out = np.array(x, dtype=float, copy=True)
    out[..., j + 1:] += eps
    return out


# ---------------------------------------------------------------------------
# scalar and bivariate building blocks


class ScalarFunction:
    """Smooth scalar map with derivatives up to third order."""

    def __init__(self, f, d1, d2, d3, name="f"):
        self.f, self.d1, self.d2, self.d3 = f, d1, d2, d3
        self.name = name

    def __call__(self, x):
        return self.f(x)

    def deriv(self, x, order):
        return (self.f, self.d1, self.d2, self.d3)[order](x)

    def __repr__(self):
        return f"ScalarFunction({self.name})"


def _const(v):
    return lambda x: np.full(np.shape(x), float(v))


SCALAR_FUNCTIONS = {
    "zero": lambda: ScalarFunction(_const(0), _const(0), _const(0), _const(0), "zero"),
    "one": lambda: ScalarFunction(_const(1), _const(0), _const(0), _const(0), "one"),
    "identity": lambda: ScalarFunction(lambda x: np.asarray(x, float), _const(1), _const(0),
                                       _const(0), "identity"),
    "square": lambda: ScalarFunction(lambda x: 0.5 * np.square(x), lambda x: np.asarray(x, float),
                                     _const(1), _const(0), "square"),
    "cubic": lambda: ScalarFunction(lambda x: np.power(x, 3) / 6.0, lambda x: 0.5 * np.square(x),
                                    lambda x: np.asarray(x, float), _const(1), "cubic"),
    "sin": lambda: ScalarFunction(np.sin, np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x), "sin"),
}


def scalar_function(name, scale=1.0) -> ScalarFunction:
    """Catalog scalar function multiplied by ``scale``."""
    try:
        base = SCALAR_FUNCTIONS[name]()
    except KeyError:
        raise ConfigError(f"unknown scalar function {name!r}") from None
    if scale == 1.0:
        return base
    d = [_scaled(k, scale) for k in (base.f, base.d1, base.d2, base.d3)]
    return ScalarFunction(*d, name=f"{scale:g}*{name}")


def _scaled(fn, s):
    return lambda x: s * fn(x)


class Bivariate:
    """``h2(x, y)`` with the partial derivatives the engine needs.

    ``parts`` maps ``"f", "x", "y", "xx", "xy", "yy", "xxx"`` to callables
    of ``(x, y)``.
    """

    KEYS = ("f", "x", "y", "xx", "xy", "yy", "xxx")

    def __init__(self, name="h2", **parts):
        missing = [k for k in self.KEYS if k not in parts]
        if missing:
            raise ConfigError(f"bivariate function missing partials {missing}")
        self.parts = parts
        self.name = name

    def __call__(self, key, x, y):
        return np.broadcast_to(self.parts[key](x, y), np.broadcast_shapes(np.shape(x), np.shape(y)))


def _z(x, y):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y)))


def _o(x, y):
    return np.ones(np.broadcast_shapes(np.shape(x), np.shape(y)))


BIVARIATES = {
    "y": lambda: Bivariate("y", f=lambda x, y: y + 0 * x, x=_z, y=_o, xx=_z, xy=_z, yy=_z, xxx=_z),
    "xy": lambda: Bivariate("xy", f=lambda x, y: x * y, x=lambda x, y: y + 0 * x,
                            y=lambda x, y: x + 0 * y, xx=_z, xy=_o, yy=_z, xxx=_z),
    "sinx_y": lambda: Bivariate("sinx_y", f=lambda x, y: np.sin(x) * y,
                                x=lambda x, y: np.cos(x) * y, y=lambda x, y: np.sin(x) + 0 * y,
                                xx=lambda x, y: -np.sin(x) * y, xy=lambda x, y: np.cos(x) + 0 * y,
                                yy=_z, xxx=lambda x, y: -np.cos(x) * y),
    "x_y2": lambda: Bivariate("x_y2", f=lambda x, y: x + 0.5 * y * y, x=_o,
                              y=lambda x, y: y + 0 * x, xx=_z, xy=_z, yy=_o, xxx=_z),
    "const": lambda: Bivariate("const", f=_o, x=_z, y=_z, xx=_z, xy=_z, yy=_z, xxx=_z),
}


def bivariate(name) -> Bivariate:
    try:
        return BIVARIATES[name]()
    except KeyError:
        raise ConfigError(f"unknown bivariate function {name!r}") from None


class Kernel:
    """Deterministic weight ``a(t, s)`` for ``s <= t`` (``t`` later, ``s`` earlier)."""

    name = "kernel"

    def __call__(self, t, s):
        raise NotImplementedError

    def d_later(self, t, s):
        return None

    def d_earlier(self, t, s):
        return None

    def matrix(self, grid: TimeGrid) -> np.ndarray:
        """``K[i, j] = a(t_i, t_j)`` on the full node square."""
        t = grid.times
        return np.asarray(self(t[:, None], t[None, :]), dtype=float) * np.ones((t.size, t.size))

    def _dmatrix(self, grid, fn):
        t = grid.times
        out = fn(t[:, None], t[None, :])
        return None if out is None else np.asarray(out, float) * np.ones((t.size, t.size))


class ConstantKernel(Kernel):
    def __init__(self, value=1.0):
        self.value = float(value)
        self.name = f"constant({self.value})"

    def __call__(self, t, s):
        return self.value + 0 * (t - s)

    def d_later(self, t, s):
        return 0 * (t - s)

    def d_earlier(self, t, s):
        return 0 * (t - s)


class ExponentialKernel(Kernel):
    """``a(t, s) = exp(-rate (t - s))``."""

    def __init__(self, rate=1.0):
        self.rate = float(rate)
        self.name = f"exponential({self.rate})"

    def __call__(self, t, s):
        return np.exp(-self.rate * (t - s))

    def d_later(self, t, s):
        return -self.rate * np.exp(-self.rate * (t - s))

    def d_earlier(self, t, s):
        return self.rate * np.exp(-self.rate * (t - s))


class SeparableKernel(Kernel):
    """``a(t, s) = g(t) * gtilde(s)`` with supplied derivatives."""

    def __init__(self, g, gtilde, dg, dgtilde, name="separable"):
        self.g, self.gtilde, self.dg, self.dgtilde = g, gtilde, dg, dgtilde
        self.name = name

    def __call__(self, t, s):
        return self.g(t) * self.gtilde(s)

    def d_later(self, t, s):
        return self.dg(t) * self.gtilde(s)

    def d_earlier(self, t, s):
        return self.g(t) * self.dgtilde(s)


def make_kernel(name="constant", **params) -> Kernel:
    if name == "constant":
        return ConstantKernel(params.get("value", 1.0))
    if name == "exponential":
        return ExponentialKernel(params.get("rate", 1.0))
    raise ConfigError(f"unknown kernel {name!r}")


# ---------------------------------------------------------------------------
# functional base classes


class PathFunctional:
    """Non-anticipative functional ``h_i(c)``, possibly also reading noise ``w``.

    Subclasses implement ``value``; analytic Dupire data is optional and
    signalled by returning ``None`` when unavailable.  ``target`` selects which
    path a vertical bump moves: ``"c"``, ``"w"`` or ``"both"``.
    """

    name = "functional"
    class_a = False
    uses_noise = False

    def value(self, i, c, grid, w=None):
        raise NotImplementedError

    def values(self, c, grid, w=None):
        return np.stack([self.value(i, c, grid, w) for i in range(grid.N + 1)], axis=-1)

    def analytic_vertical(self, i, c, grid, order, w=None, target="c"):
        return None

    def analytic_horizontal(self, i, c, grid, w=None):
        return None

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class ClassAFunctional(PathFunctional):
    """Functional whose first variation is an atom at ``t`` plus a density.

    ``h_i(c + z) - h_i(c) ~ atom_i z_i + sum_{j<i} density(j, i) z_j dt``.
    """

    class_a = True
    #: densities do not depend on ``c`` (only on the noise)
    policy_free_density = False
    #: atom and densities do not depend on ``c``; the FOC map is affine
    gradient_policy_free = False

    def atom(self, i, c, grid, w=None):
        raise NotImplementedError

    def density(self, j, i, c, grid, w=None):
        raise NotImplementedError

    def density_dt(self, j, i, c, grid, w=None):
        """Analytic time derivative of ``density`` in its first argument."""
        return None

    # all-node helpers; catalog entries override them with vectorized versions

    def atoms(self, c, grid, w=None):
        return np.stack([self.atom(i, c, grid, w) for i in range(grid.N + 1)], axis=-1)

    def atom_vertical(self, i, c, grid, order, w=None, target="c"):
        return None

    def atom_horizontal(self, i, c, grid, w=None):
        return None

    def atom_functional(self) -> PathFunctional:
        return AtomFunctional(self)

    def density_diag(self, c, grid, w=None):
        return np.stack([self.density(j, j, c, grid, w) for j in range(grid.N + 1)], axis=-1)

    def future_row(self, j, c, grid, w=None):
        """``sum_{i=j}^{N-1} density(j, i) dt`` for a single ``j``."""
        acc = np.zeros(np.shape(c)[:-1])
        for i in range(j, grid.N):
            acc = acc + self.density(j, i, c, grid, w)
        return acc * grid.dt

    def future_density(self, c, grid, w=None):
        return np.stack([self.future_row(j, c, grid, w) for j in range(grid.N + 1)], axis=-1)

    def future_density_dt(self, c, grid, w=None, scheme="discrete"):
        """Time-derivative term ``int_t^T d/dt delta_t h_s ds`` per node.

        ``"discrete"`` uses the forward difference in the first index, which
        makes ``F_{j+1} - F_j`` telescope exactly against the diagonal term.
        """
        N = grid.N
        out = np.zeros(np.shape(c)[:-1] + (N + 1,))
        for j in range(N - 1):
            acc = 0.0
            if scheme == "analytic":
                for i in range(j, N):
                    d = self.density_dt(j, i, c, grid, w)
                    if d is None:
                        raise ConfigError(f"{self.name} has no analytic density time derivative")
                    acc = acc + d * grid.dt
            else:
                for i in range(j + 1, N):
                    acc = acc + self.density(j + 1, i, c, grid, w) - self.density(j, i, c, grid, w)
            out[..., j] = acc
        return out

    def future_density_malliavin(self, c, grid, w=None, tangent=None, eps=1e-6):
        """Pathwise ``int_t^T D_t delta_t h_s ds`` by directional differencing.

        The noise is shifted after node ``j``.  The policy moves along
        ``tangent(j)`` when given, along the noise when ``w`` is ``None``
        (diagonal evaluation) and stays frozen otherwise.
        """
        out = np.zeros(np.shape(c)[:-1] + (grid.N + 1,))
        for j in range(grid.N):
            if w is None:
                cp, wp = shift_after(c, j, eps), None
            else:
                wp = shift_after(w, j, eps)
                if tangent is not None:
                    cp = c + eps * tangent(j)
                elif self.policy_free_density:
                    cp = c
                else:
                    raise ConfigError("a tangent direction is needed off the diagonal")
            out[..., j] = (self.future_row(j, cp, grid, wp) - self.future_row(j, c, grid, w)) / eps
        return out

    def foc_gradient(self, c, grid, w, conditioner):
        """``atom + E[future density | F_t]``: the bracket of the first-order condition."""
        return self.atoms(c, grid, w) + conditioner.project(self.future_density(c, grid, w))


class AtomFunctional(PathFunctional):
    """The atom ``q_t = d h_t / d c_t`` seen as a functional in its own right."""

    def __init__(self, h: ClassAFunctional):
        self.h = h
        self.name = f"atom[{h.name}]"
        self.uses_noise = h.uses_noise

    def value(self, i, c, grid, w=None):
        return self.h.atom(i, c, grid, w)

    def values(self, c, grid, w=None):
        return self.h.atoms(c, grid, w)

    def analytic_vertical(self, i, c, grid, order, w=None, target="c"):
        return self.h.atom_vertical(i, c, grid, order, w, target)

    def analytic_horizontal(self, i, c, grid, w=None):
        return self.h.atom_horizontal(i, c, grid, w)


class SeparableDensity(ClassAFunctional):
    """Densities of the form ``delta_{j,i} = K[i, j] * Y_i``.

    ``K`` is deterministic and ``Y`` a per-node path factor.  Future sums
    then reduce to matrix products, which keeps large ensembles cheap.
    Subclasses provide ``kernel_matrix``, ``factor`` and
    ``factor_malliavin_terms``; the latter returns pairs ``(P, Q)`` with
    ``D_j Y_i = sum P_i Q[j, i]`` for ``i > j``.
    """

    kernel: Kernel

    def kernel_matrix(self, grid):
        cache = self.__dict__.setdefault("_kcache", {})
        if grid not in cache:
            cache[grid] = self.kernel.matrix(grid)
        return cache[grid]

    def factor(self, c, grid, w=None):
        raise NotImplementedError

    def factor_malliavin_terms(self, c, grid, w=None):
        raise NotImplementedError

    def density(self, j, i, c, grid, w=None):
        if j > i:
            raise ConfigError("density needs s <= t")
        K = self.kernel_matrix(grid)
        return K[i, j] * self.factor_at(i, c, grid, w)

    def factor_at(self, i, c, grid, w=None):
        return self.factor(c, grid, w)[..., i]

    def density_dt(self, j, i, c, grid, w=None):
        d = self.kernel.d_earlier(grid.times[i], grid.times[j])
        return None if d is None else d * self.factor_at(i, c, grid, w)

    def density_diag(self, c, grid, w=None):
        return np.diagonal(self.kernel_matrix(grid)) * self.factor(c, grid, w)

    def _future_weights(self, grid):
        N = grid.N
        K = self.kernel_matrix(grid)
        L = np.tril(K)[:N] * grid.dt
        return L

    def future_density(self, c, grid, w=None):
        Y = self.factor(c, grid, w)
        return Y[..., :grid.N] @ self._future_weights(grid)

    def future_row(self, j, c, grid, w=None):
        return self.future_density(c, grid, w)[..., j]

    def future_density_dt(self, c, grid, w=None, scheme="discrete"):
        N = grid.N
        Y = self.factor(c, grid, w)
        if scheme == "analytic":
            D = self.kernel._dmatrix(grid, self.kernel.d_earlier)
            if D is None:
                raise ConfigError(f"{self.kernel.name} has no analytic derivative")
            W = np.tril(D)[:N] * grid.dt
        else:
            K = self.kernel_matrix(grid)
            W = np.zeros((N, N + 1))
            W[:, :N] = K[:N, 1:] - K[:N, :N]
            # keep only i >= j + 1
            W = np.tril(W, k=-1)
        return Y[..., :N] @ W

    def future_density_malliavin(self, c, grid, w=None, tangent=None, eps=1e-6):
        if tangent is not None or not (w is None or self.policy_free_density):
            return super().future_density_malliavin(c, grid, w, tangent, eps)
        N = grid.N
        K = self.kernel_matrix(grid)
        out = np.zeros(np.shape(c)[:-1] + (N + 1,))
        for P, Q in self.factor_malliavin_terms(c, grid, w):
            W = np.tril(K * Q.T, k=-1)[:N] * grid.dt
            out = out + P[..., :N] @ W
        return out


# ---------------------------------------------------------------------------
# catalog


class ZeroFunctional(ClassAFunctional):
    name = "zero"
    policy_free_density = True
    gradient_policy_free = True

    def value(self, i, c, grid, w=None):
        return np.zeros(np.shape(c)[:-1])

    def values(self, c, grid, w=None):
        return np.zeros(np.shape(c))

    def atom(self, i, c, grid, w=None):
        return np.zeros(np.shape(c)[:-1])

    def atoms(self, c, grid, w=None):
        return np.zeros(np.shape(c))

    def density(self, j, i, c, grid, w=None):
        return np.zeros(np.shape(c)[:-1])

    def density_dt(self, j, i, c, grid, w=None):
        return np.zeros(np.shape(c)[:-1])

    def density_diag(self, c, grid, w=None):
        return np.zeros(np.shape(c))

    def future_density(self, c, grid, w=None):
        return np.zeros(np.shape(c))

    def future_density_dt(self, c, grid, w=None, scheme="discrete"):
        return np.zeros(np.shape(c))

    def future_density_malliavin(self, c, grid, w=None, tangent=None, eps=1e-6):
        return np.zeros(np.shape(c))

    def analytic_vertical(self, i, c, grid, order, w=None, target="c"):
        return np.zeros(np.shape(c)[:-1])

    def analytic_horizontal(self, i, c, grid, w=None):
        return np.zeros(np.shape(c)[:-1])

    def atom_vertical(self, i, c, grid, order, w=None, target="c"):
        return np.zeros(np.shape(c)[:-1])

    def atom_horizontal(self, i, c, grid, w=None):
        return np.zeros(np.shape(c)[:-1])

    def atom_vertical_all(self, c, grid, order, w=None, target="c"):
        return np.zeros(np.shape(c))

    def atom_horizontal_all(self, c, grid, w=None):
        return np.zeros(np.shape(c))


class StateDependent(ZeroFunctional):
    """``h_t(c) = f(c_t)``: no memory, the atom is ``f'(c_t)``."""

    gradient_policy_free = False

    def __init__(self, f: ScalarFunction):
        self.f = f
        self.name = f"state_dependent({f.name})"

    def value(self, i, c, grid, w=None):
        return self.f(np.asarray(c, float)[..., i])

    def values(self, c, grid, w=None):
        return self.f(np.asarray(c, float))

    def atom(self, i, c, grid, w=None):
        return self.f.d1(np.asarray(c, float)[..., i])

    def atoms(self, c, grid, w=None):
        return self.f.d1(np.asarray(c, float))

    def analytic_vertical(self, i, c, grid, order, w=None, target="c"):
        if target == "w":
            return np.zeros(np.shape(c)[:-1])
        return self.f.deriv(np.asarray(c, float)[..., i], order)

    def atom_vertical(self, i, c, grid, order, w=None, target="c"):
        if target == "w":
            return np.zeros(np.shape(c)[:-1])
        if order > 2:
            return None
        return self.f.deriv(np.asarray(c, float)[..., i], order + 1)

    def atom_vertical_all(self, c, grid, order, w=None, target="c"):
        if target == "w":
            return np.zeros(np.shape(c))
        return self.f.deriv(np.asarray(c, float), order + 1)


class KernelAverage(SeparableDensity):
    """``h_t(c) = h2(c_t, int_0^t a(t, s) c_s ds)``."""

    def __init__(self, h2: Bivariate, kernel: Kernel):
        self.h2, self.kernel = h2, kernel
        self.name = f"kernel_average({h2.name}, {kernel.name})"

    def _avg_weights(self, grid):
        cache = self.__dict__.setdefault("_acache", {})
        if grid not in cache:
            K = self.kernel_matrix(grid)
            cache[grid] = np.tril(K, k=-1).T * grid.dt
        return cache[grid]

    def average(self, c, grid):
        """``A_i = sum_{r<i} a(t_i, t_r) c_r dt`` at every node."""
        return np.asarray(c, float) @ self._avg_weights(grid)

    def average_at(self, i, c, grid):
        K = self.kernel_matrix(grid)
        return np.asarray(c, float)[..., :i] @ K[i, :i] * grid.dt

    def value(self, i, c, grid, w=None):
        return self.h2("f", np.asarray(c, float)[..., i], self.average_at(i, c, grid))

    def values(self, c, grid, w=None):
        return self.h2("f", np.asarray(c, float), self.average(c, grid))

    def atom(self, i, c, grid, w=None):
        return self.h2("x", np.asarray(c, float)[..., i], self.average_at(i, c, grid))

    def atoms(self, c, grid, w=None):
        return self.h2("x", np.asarray(c, float), self.average(c, grid))

    def factor(self, c, grid, w=None):
        return self.h2("y", np.asarray(c, float), self.average(c, grid))

    def factor_at(self, i, c, grid, w=None):
        return self.h2("y", np.asarray(c, float)[..., i], self.average_at(i, c, grid))

    def _inner_tails(self, grid):
        """``B[j, i] = sum_{j<q<i} a(t_i, t_q) dt``."""
        cache = self.__dict__.setdefault("_bcache", {})
        if grid not in cache:
            K = self.kernel_matrix(grid)
            R = np.tril(K, k=-1) * grid.dt
            tail = np.cumsum(R[:, ::-1], axis=1)[:, ::-1]
            n = grid.N + 1
            B = np.zeros((n, n))
            B[:-1, :] = tail[:, 1:].T
            B = B * (np.arange(n)[None, :] > np.arange(n)[:, None] + 1)
            cache[grid] = B
        return cache[grid]

    def factor_malliavin_terms(self, c, grid, w=None):
        x = np.asarray(c, float)
        A = self.average(x, grid)
        n = grid.N + 1
        return [(self.h2("xy", x, A), np.ones((n, n))),
                (self.h2("yy", x, A), self._inner_tails(grid))]

    def analytic_vertical(self, i, c, grid, order, w=None, target="c"):
        if target == "w":
            return np.zeros(np.shape(c)[:-1])
        key = ("x", "xx", "xxx")[order - 1]
        return self.h2(key, np.asarray(c, float)[..., i], self.average_at(i, c, grid))

    def atom_vertical(self, i, c, grid, order, w=None, target="c"):
        if target == "w":
            return np.zeros(np.shape(c)[:-1])
        if order > 2:
            return None
        key = ("xx", "xxx")[order - 1]
        return self.h2(key, np.asarray(c, float)[..., i], self.average_at(i, c, grid))

    def average_rate(self, i, c, grid):
        """Continuum time derivative of the running average at node ``i``."""
        x = np.asarray(c, float)
        t = grid.times
        D = self.kernel.d_later(t[i], t[:i])
        if D is None:
            return None
        a_ii = self.kernel(t[i], t[i])
        return a_ii * x[..., i] + x[..., :i] @ (np.ones(i) * D) * grid.dt

    def atom_horizontal(self, i, c, grid, w=None):
        rate = self.average_rate(i, c, grid)
        if rate is None:
            return None
        x = np.asarray(c, float)
        return self.h2("xy", x[..., i], self.average_at(i, c, grid)) * rate

    def atom_vertical_all(self, c, grid, order, w=None, target="c"):
        x = np.asarray(c, float)
        if target == "w":
            return np.zeros(x.shape)
        return self.h2(("xx", "xxx")[order - 1], x, self.average(x, grid))

    def atom_horizontal_all(self, c, grid, w=None):
        """Vectorized ``atom_horizontal`` over all nodes."""
        x = np.asarray(c, float)
        t = grid.times
        D = self.kernel._dmatrix(grid, self.kernel.d_later)
        if D is None:
            return None
        rate = np.diagonal(self.kernel_matrix(grid)) * x + x @ (np.tril(D, k=-1).T * grid.dt)
        return self.h2("xy", x, self.average(x, grid)) * rate


def cumulative() -> KernelAverage:
    """``h_t(c) = c_t int_0^t c_s ds``."""
    h = KernelAverage(bivariate("xy"), ConstantKernel(1.0))
    h.name = "cumulative"
    return h


def kernel_average(h2, kernel) -> KernelAverage:
    if isinstance(h2, str):
        h2 = bivariate(h2)
    if isinstance(kernel, str):
        kernel = make_kernel(kernel)
    return KernelAverage(h2, kernel)


def state_dependent(f) -> StateDependent:
    if isinstance(f, str):
        f = scalar_function(f)
    return StateDependent(f)


class ClimateKernel:
    """Damage weight ``k_{s,t}(w^t) = K(t, s) * Y_t(w)`` (emission at ``s``, damage at ``t``)."""

    def __init__(self, kernel: Kernel, factor="one"):
        if factor not in ("one", "w"):
            raise ConfigError(f"unknown damage factor {factor!r}")
        self.kernel, self.factor = kernel, factor
        self.name = kernel.name if factor == "one" else f"{kernel.name}*w"

    def path_factor(self, w):
        w = np.asarray(w, float)
        return np.ones(w.shape) if self.factor == "one" else w


def climate_kernel(name="zero", **params) -> ClimateKernel:
    if name == "zero":
        return ClimateKernel(ConstantKernel(0.0))
    if name == "one":
        return ClimateKernel(ConstantKernel(1.0))
    if name == "w":
        return ClimateKernel(ConstantKernel(1.0), "w")
    if name == "exponential":
        return ClimateKernel(ExponentialKernel(params.get("rate", 1.0)))
    raise ConfigError(f"unknown climate kernel {name!r}")


class Climate(SeparableDensity):
    """``h_t = g_t(w) c_t + int_0^t k_{s,t}(w) c_s ds``: linear in the policy."""

    uses_noise = True
    policy_free_density = True
    gradient_policy_free = True

    def __init__(self, g: PathFunctional, k: ClimateKernel):
        self.g, self.k = g, k
        self.kernel = k.kernel
        self.name = f"climate({g.name}, {k.name})"

    def value(self, i, c, grid, w=None):
        w = _diag(c, w)
        c = np.asarray(c, float)
        K = self.kernel_matrix(grid)
        Y = self.k.path_factor(np.asarray(w, float)[..., i])
        return self.g.value(i, w, grid) * c[..., i] + Y * (c[..., :i] @ K[i, :i]) * grid.dt

    def values(self, c, grid, w=None):
        w = _diag(c, w)
        c = np.asarray(c, float)
        K = self.kernel_matrix(grid)
        Y = self.k.path_factor(w)
        return self.g.values(w, grid) * c + Y * (c @ (np.tril(K, k=-1).T * grid.dt))

    def atom(self, i, c, grid, w=None):
        return self.g.value(i, _diag(c, w), grid)

    def atoms(self, c, grid, w=None):
        return self.g.values(_diag(c, w), grid)

    def factor(self, c, grid, w=None):
        return self.k.path_factor(_diag(c, w))

    def factor_malliavin_terms(self, c, grid, w=None):
        n = grid.N + 1
        if self.k.factor == "one":
            return []
        return [(np.ones(np.shape(c)), np.ones((n, n)))]

    def analytic_vertical(self, i, c, grid, order, w=None, target="c"):
        w = _diag(c, w)
        c = np.asarray(c, float)
        if target == "c":
            return self.g.value(i, w, grid) if order == 1 else np.zeros(c.shape[:-1])
        gk = [self.g.value(i, w, grid)]
        gk += [self.g.analytic_vertical(i, w, grid, o) for o in range(1, order + 1)]
        if any(v is None for v in gk):
            return None
        out = gk[order] * c[..., i]
        if self.k.factor == "w" and order == 1:
            out = out + c[..., :i] @ self.kernel_matrix(grid)[i, :i] * grid.dt
        if target == "both":
            out = out + order * gk[order - 1]
        return out

    def atom_vertical(self, i, c, grid, order, w=None, target="c"):
        if target == "c":
            return np.zeros(np.shape(c)[:-1])
        return self.g.analytic_vertical(i, _diag(c, w), grid, order)

    def atom_horizontal(self, i, c, grid, w=None):
        return self.g.analytic_horizontal(i, _diag(c, w), grid)

    def atom_vertical_all(self, c, grid, order, w=None, target="c"):
        if target == "c":
            return np.zeros(np.shape(c))
        if isinstance(self.g, StateDependent):
            return self.g.f.deriv(np.asarray(_diag(c, w), float), order)
        return None

    def atom_horizontal_all(self, c, grid, w=None):
        if isinstance(self.g, StateDependent):
            return np.zeros(np.shape(c))
        return None


def climate(g="zero", k="zero", g_scale=1.0, **kparams) -> Climate:
    if isinstance(g, str):
        g = StateDependent(scalar_function(g, g_scale))
    elif isinstance(g, ScalarFunction):
        g = StateDependent(g)
    if isinstance(k, str):
        k = climate_kernel(k, **kparams)
    return Climate(g, k)


def running_argmax(w):
    """First node attaining the running maximum, per node."""
    w = np.asarray(w, float)
    runmax = np.maximum.accumulate(w, axis=-1)
    n = w.shape[-1]
    # records only where a new strict maximum appears (ties keep the earliest)
    prev = np.concatenate([np.full(w.shape[:-1] + (1,), -np.inf), runmax[..., :-1]], axis=-1)
    idx = np.where(w > prev, np.arange(n), 0)
    return np.maximum.accumulate(idx, axis=-1)


def next_record(w):
    """Index of the first node after ``j`` whose value exceeds ``max_{r<=j} w_r``.

    Returns ``N + 1`` when no later node does.
    """
    w = np.asarray(w, float)
    n = w.shape[-1]
    runmax = np.maximum.accumulate(w, axis=-1)
    is_record = np.zeros(w.shape, dtype=bool)
    is_record[..., 1:] = w[..., 1:] > runmax[..., :-1]
    out = np.empty(w.shape, dtype=np.int64)
    nxt = np.full(w.shape[:-1], n, dtype=np.int64)
    for j in range(n - 1, -1, -1):
        out[..., j] = nxt
        nxt = np.where(is_record[..., j], j, nxt)
    return out


class Tipping(ClassAFunctional):
    """``h_t(c) = int_0^t f(s - theta_t) c_s ds`` with ``theta_t`` the argmax of ``w``."""

    uses_noise = True
    policy_free_density = True
    gradient_policy_free = True

    def __init__(self, f, fprime, name="f"):
        self.f, self.fprime = f, fprime
        self.name = f"tipping({name})"

    def theta(self, w, grid):
        return grid.times[running_argmax(w)]

    def value(self, i, c, grid, w=None):
        w = _diag(c, w)
        th = self.theta(np.asarray(w, float)[..., :i + 1], grid)[..., i]
        s = grid.times[:i]
        return (self.f(s - th[..., None]) * np.asarray(c, float)[..., :i]).sum(axis=-1) * grid.dt

    def atom(self, i, c, grid, w=None):
        return np.zeros(np.shape(c)[:-1])

    def atoms(self, c, grid, w=None):
        return np.zeros(np.shape(c))

    def atom_vertical(self, i, c, grid, order, w=None, target="c"):
        return np.zeros(np.shape(c)[:-1])

    def atom_horizontal(self, i, c, grid, w=None):
        return np.zeros(np.shape(c)[:-1])

    def atom_vertical_all(self, c, grid, order, w=None, target="c"):
        return np.zeros(np.shape(c))

    def atom_horizontal_all(self, c, grid, w=None):
        return np.zeros(np.shape(c))

    def density(self, j, i, c, grid, w=None):
        w = np.asarray(_diag(c, w), float)
        th = self.theta(w[..., :i + 1], grid)[..., i]
        return self.f(grid.times[j] - th)

    def density_dt(self, j, i, c, grid, w=None):
        w = np.asarray(_diag(c, w), float)
        th = self.theta(w[..., :i + 1], grid)[..., i]
        return self.fprime(grid.times[j] - th)

    def density_diag(self, c, grid, w=None):
        w = np.asarray(_diag(c, w), float)
        return self.f(grid.times - self.theta(w, grid))

    def future_density(self, c, grid, w=None):
        w = np.asarray(_diag(c, w), float)
        N = grid.N
        lag = grid.times - self.theta(w, grid)
        count = np.minimum(next_record(w), N) - np.arange(N + 1)
        return self.f(lag) * np.maximum(count, 0) * grid.dt

    def future_row(self, j, c, grid, w=None):
        return self.future_density(c, grid, w)[..., j]

    def future_density_malliavin(self, c, grid, w=None, tangent=None, eps=1e-6):
        # the argmax indicator is locally constant in the noise
        return np.zeros(np.shape(c))


def positive_part(scale=1.0):
    return (lambda x: scale * np.maximum(x, 0.0),
            lambda x: scale * (np.asarray(x) > 0).astype(float))


def tipping(f=None, fprime=None, scale=1.0) -> Tipping:
    if f is None or f == "positive_part":
        f, fprime = positive_part(scale)
        return Tipping(f, fprime, f"{scale}*x+")
    if f == "zero":
        return Tipping(lambda x: 0.0 * np.asarray(x, float), lambda x: 0.0 * np.asarray(x, float), "zero")
    if fprime is None:
        raise ConfigError("tipping weight needs its derivative")
    return Tipping(f, fprime)


class Midpoint(PathFunctional):
    """``h_t(c) = c_{t/2}``; its variation is an interior atom, so not class A.

    The first-order condition uses the discrete dual weight
    ``#{i < N : i // 2 = j}`` instead of atom and density.
    """

    name = "midpoint"
    gradient_policy_free = True

    @staticmethod
    def source(i):
        return i // 2

    def value(self, i, c, grid, w=None):
        return np.asarray(c, float)[..., self.source(i)]

    def values(self, c, grid, w=None):
        return np.asarray(c, float)[..., np.arange(grid.N + 1) // 2]

    def dual_weight(self, grid):
        return np.bincount(np.arange(grid.N) // 2, minlength=grid.N + 1).astype(float)

    def foc_gradient(self, c, grid, w, conditioner):
        return np.broadcast_to(self.dual_weight(grid), np.shape(c)).copy()


def midpoint() -> Midpoint:
    return Midpoint()


class NumericClassA(ClassAFunctional):
    """Class A data of an arbitrary functional by single-node bumps.

    ``density(j, i)`` is the node-``j`` sensitivity divided by ``dt``; the atom
    is the node-``i`` sensitivity, which carries any own-node integral weight.
    """

    def __init__(self, g: PathFunctional, bump=1e-6):
        self.g, self.bump = g, bump
        self.name = f"numeric[{g.name}]"
        self.uses_noise = g.uses_noise

    def value(self, i, c, grid, w=None):
        return self.g.value(i, c, grid, w)

    def _sens(self, j, i, c, grid, w):
        e = self.bump * (1.0 + np.max(np.abs(c)))
        up = np.array(c, float, copy=True)
        dn = np.array(c, float, copy=True)
        up[..., j] += e
        dn[..., j] -= e
        return (self.g.value(i, up, grid, w) - self.g.value(i, dn, grid, w)) / (2 * e)

    def atom(self, i, c, grid, w=None):
        return self._sens(i, i, c, grid, w)

    def density(self, j, i, c, grid, w=None):
        return self._sens(j, i, c, grid, w) / grid.dt


def smooth_path(c, grid, n, end=None):
    """Exponential smoother ``R^(n)`` of the prefix ending at node ``end``.

    Solves ``dR/dt = -n (c - R)`` backwards from ``R_end = c_end`` exactly
    for the piecewise-linear interpolant of the node values.
    """
    x = np.asarray(c, float)
    end = grid.N if end is None else end
    out = np.array(x, copy=True)
    h = n * grid.dt
    decay = np.exp(-h)
    w0 = 1.0 - decay
    w1 = (1.0 - decay * (1.0 + h)) / h if h > 0 else 0.0
    r = x[..., end]
    for i in range(end - 1, -1, -1):
        r = decay * r + w0 * x[..., i] + w1 * (x[..., i + 1] - x[..., i])
        out[..., i] = r
    return out


class Smoothed(NumericClassA):
    """``g`` composed with the smoother applied to the path observed so far."""

    def __init__(self, g: PathFunctional, n: float):
        super().__init__(_SmoothedEval(g, n))
        self.inner, self.rate = g, float(n)
        self.name = f"smoothed({g.name}, n={n})"


class _SmoothedEval(PathFunctional):
    def __init__(self, g, n):
        self.g, self.n = g, n
        self.name = g.name

    def value(self, i, c, grid, w=None):
        return self.g.value(i, smooth_path(c, grid, self.n, end=i), grid, w)


def smooth_approximation(g: PathFunctional, n: float) -> Smoothed:
    return Smoothed(g, n)


class RunningIntegral(PathFunctional):
    """``q_t(c) = int_0^t c ds`` (left endpoint)."""

    name = "running_integral"

    def value(self, i, c, grid, w=None):
        return np.asarray(c, float)[..., :i].sum(axis=-1) * grid.dt

    def values(self, c, grid, w=None):
        return ramp(grid.dt, c)

    def analytic_vertical(self, i, c, grid, order, w=None, target="c"):
        return np.zeros(np.shape(c)[:-1])

    def analytic_horizontal(self, i, c, grid, w=None):
        return np.asarray(c, float)[..., i]


class TerminalValue(PathFunctional):
    """``q(c) = c_i``, the current value."""

    name = "current_value"

    def value(self, i, c, grid, w=None):
        return np.asarray(c, float)[..., i]

    def values(self, c, grid, w=None):
        return np.asarray(c, float)

    def analytic_vertical(self, i, c, grid, order, w=None, target="c"):
        return np.full(np.shape(c)[:-1], 1.0 if order == 1 else 0.0)

    def analytic_horizontal(self, i, c, grid, w=None):
        return np.zeros(np.shape(c)[:-1])


class TimeFunctional(PathFunctional):
    """``q_t = t``."""

    name = "time"

    def value(self, i, c, grid, w=None):
        return np.full(np.shape(c)[:-1], grid.times[i])


def frechet_check(h: ClassAFunctional, c, z, grid, eps_ladder=(1e-1, 5e-2, 2.5e-2, 1.25e-2), i=None, w=None):
    """Remainder of the first-order class A expansion along ``c + eps z``.

    Returns a dict with the residuals per eps and the observed order from a
    log-log fit (``nan`` when the residual is at round-off level).
    """
    i = grid.N if i is None else i
    c = np.asarray(c, float)
    z = np.asarray(z, float)
    lin = h.atom(i, c, grid, w) * z[..., i]
    for j in range(i):
        lin = lin + h.density(j, i, c, grid, w) * z[..., j] * grid.dt
    base = h.value(i, c, grid, w)
    eps = np.asarray(eps_ladder, float)
    res = np.array([np.max(np.abs(h.value(i, c + e * z, grid, w) - base - e * lin)) for e in eps])
    scale = 1.0 + np.max(np.abs(base))
    if np.all(res > 1e-13 * scale):
        order = float(np.polyfit(np.log(eps), np.log(res), 1)[0])
    else:
        order = float("nan")
    return {"eps": eps, "residual": res, "order": order}


def make_functional(name, **params):
    """Build a catalog entry by name (used by the CLI)."""
    if name == "zero":
        return ZeroFunctional()
    if name == "state_dependent":
        return StateDependent(scalar_function(params.get("f", "sin"), params.get("scale", 1.0)))
    if name == "cumulative":
        return cumulative()
    if name == "kernel_average":
        return kernel_average(bivariate(params.get("h2", "xy")),
                              make_kernel(params.get("kernel", "exponential"), rate=params.get("rate", 1.0)))
    if name == "climate":
        return climate(params.get("g", "zero"), params.get("k", "zero"), params.get("g_scale", 1.0),
                       rate=params.get("rate", 1.0))
    if name == "tipping":
        return tipping(params.get("f", "positive_part"), scale=params.get("scale", 1.0))
    if name == "midpoint":
        return midpoint()
    raise ConfigError(f"unknown functional {name!r}")
