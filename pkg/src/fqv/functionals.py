"""Non-anticipative functionals with exact vertical and horizontal derivatives.

A functional is a small immutable expression tree.  Leaves are either
cylindrical, ``f(t, omega(t))``, or running integrals
``int_0^t g(omega(s)) ds`` computed by left-endpoint sums on the master grid.
Internal nodes are sums, products and scalar compositions ``phi(F)``.

Evaluation at time index ``k`` sees two things: the *current value*
``omega(t_k)``, used by cylindrical leaves, and the *history* strictly before
``k``, used by running integrals.  A vertical bump of the path on ``[t, T]``
therefore only moves the current value, which is why every vertical derivative
is the ordinary derivative in the current value and running integrals have
zero vertical gradient on the grid.

Everything is vectorised over a batch of evaluation indices, so a whole
partition level costs a handful of numpy calls.
"""

from __future__ import annotations

import difflib
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .paths import ParameterError, SampledPath, make_rng

FD_REL_STEP = 1e-5
FD_HORIZONTAL_STEP = 1e-7


class CapabilityError(RuntimeError):
    """A derivative order was requested that some leaf does not provide."""


class HorizonWarning(UserWarning):
    """Right derivative in time requested at t = T; the left value is returned."""


class StepSizeWarning(UserWarning):
    """Finite-difference step too small relative to machine precision."""


# -- scalar building blocks ---------------------------------------------------


@dataclass(frozen=True)
class LeafFn:
    """Scalar map ``f(t, y)`` with partials in ``y`` up to ``order`` and ``df/dt``.

    ``derivs`` holds callables ``(t, y) -> array`` for f, f_y, f_yy, f_yyy;
    ``dt`` is the time partial.
    """

    name: str
    derivs: Tuple[Callable, ...]
    dt: Callable
    time_dependent: bool = False
    coeffs: Optional[Tuple[float, ...]] = None

    @property
    def order(self) -> int:
        return len(self.derivs) - 1


def _zero(t, y):
    return np.zeros_like(y)


def _one(t, y):
    return np.ones_like(y)


def _poly_leaf(coeffs) -> LeafFn:
    c = np.asarray(coeffs, dtype=float)
    P = np.polynomial.Polynomial(c)
    polys = [P, P.deriv(1), P.deriv(2), P.deriv(3)]
    derivs = tuple((lambda p: (lambda t, y: p(y) + np.zeros_like(y)))(p) for p in polys)
    return LeafFn("poly", derivs, _zero, coeffs=tuple(float(v) for v in c))


LEAVES: Dict[str, LeafFn] = {
    "x": LeafFn("x", (lambda t, y: y, _one, _zero, _zero), _zero),
    "x2": LeafFn("x2", (lambda t, y: y * y, lambda t, y: 2 * y, lambda t, y: 2 + 0 * y, _zero), _zero),
    "x3": LeafFn("x3", (lambda t, y: y ** 3, lambda t, y: 3 * y * y, lambda t, y: 6 * y, lambda t, y: 6 + 0 * y), _zero),
    "tx": LeafFn("tx", (lambda t, y: t * y, lambda t, y: t + 0 * y, _zero, _zero), lambda t, y: y, time_dependent=True),
    "sin_x": LeafFn("sin_x", (lambda t, y: np.sin(y), lambda t, y: np.cos(y), lambda t, y: -np.sin(y),
                              lambda t, y: -np.cos(y)), _zero),
}


# phi, phi', phi'', phi'''
OUTER: Dict[str, Tuple[Callable, ...]] = {
    "sin": (np.sin, np.cos, lambda u: -np.sin(u), lambda u: -np.cos(u)),
    "cos": (np.cos, lambda u: -np.sin(u), lambda u: -np.cos(u), np.sin),
    "exp": (np.exp, np.exp, np.exp, np.exp),
    "square": (lambda u: u * u, lambda u: 2 * u, lambda u: 2 + 0 * u, lambda u: 0 * u),
    "cube": (lambda u: u ** 3, lambda u: 3 * u * u, lambda u: 6 * u, lambda u: 6 + 0 * u),
    "tanh": (np.tanh,
             lambda u: 1 - np.tanh(u) ** 2,
             lambda u: -2 * np.tanh(u) * (1 - np.tanh(u) ** 2),
             lambda u: (1 - np.tanh(u) ** 2) * (6 * np.tanh(u) ** 2 - 2)),
}


# -- jets ---------------------------------------------------------------------


@dataclass
class Jet:
    """Value and derivatives of a functional over a batch of N evaluation points.

    Shapes: value (N,), grad (N, d), hess (N, d, d), third (N, d, d, d),
    horiz (N,).  Entries above the requested order are ``None``.
    """

    value: np.ndarray
    grad: Optional[np.ndarray] = None
    hess: Optional[np.ndarray] = None
    third: Optional[np.ndarray] = None
    horiz: Optional[np.ndarray] = None


class _Context:
    def __init__(self, hist, dt, k, t, x, ext, order, horizontal):
        self.hist = hist
        self.dt = dt
        self.k = k
        self.t = t
        self.x = x
        self.ext = ext
        self.order = order
        self.horizontal = horizontal
        self.N, self.d = x.shape
        self._cum = {}

    def running(self, fn: LeafFn, coord: int) -> np.ndarray:
        key = (fn, coord)
        if key not in self._cum:
            g = fn.derivs[0](0.0, self.hist[:-1, coord]) * self.dt
            cum = np.empty(self.hist.shape[0])
            cum[0] = 0.0
            np.cumsum(g, out=cum[1:])
            self._cum[key] = cum
        return self._cum[key][self.k]

    def zeros(self, rank: int) -> np.ndarray:
        return np.zeros((self.N,) + (self.d,) * rank)


def _sym3(a, H):
    """a_i H_jk + a_j H_ik + a_k H_ij for batched a (N,d) and H (N,d,d)."""
    return (np.einsum("ni,njk->nijk", a, H) + np.einsum("nj,nik->nijk", a, H)
            + np.einsum("nk,nij->nijk", a, H))


# -- expression tree ----------------------------------------------------------


class Functional:
    """Base class; subclasses implement ``_jet`` and ``to_spec``."""

    max_order: int = 3

    def _jet(self, ctx: _Context) -> Jet:
        raise NotImplementedError

    def to_spec(self):
        raise NotImplementedError

    def __add__(self, other):
        return Sum((self, other))

    def __mul__(self, other):
        return Prod((self, other))

    def __repr__(self):
        return f"Functional({json.dumps(self.to_spec())})"


@dataclass(frozen=True, repr=False)
class Cylindrical(Functional):
    fn: LeafFn
    coord: int = 0

    @property
    def max_order(self):
        return self.fn.order

    def _jet(self, ctx):
        y = ctx.x[:, self.coord]
        tt = ctx.t + ctx.ext
        jet = Jet(self.fn.derivs[0](tt, y))
        c = self.coord
        if ctx.order >= 1:
            jet.grad = ctx.zeros(1)
            jet.grad[:, c] = self.fn.derivs[1](tt, y)
        if ctx.order >= 2:
            jet.hess = ctx.zeros(2)
            jet.hess[:, c, c] = self.fn.derivs[2](tt, y)
        if ctx.order >= 3:
            jet.third = ctx.zeros(3)
            jet.third[:, c, c, c] = self.fn.derivs[3](tt, y)
        if ctx.horizontal:
            jet.horiz = self.fn.dt(tt, y) + np.zeros(ctx.N)
        return jet

    def to_spec(self):
        spec = {"cyl": list(self.fn.coeffs) if self.fn.coeffs is not None else self.fn.name}
        if self.coord:
            spec["coord"] = self.coord
        return spec


@dataclass(frozen=True, repr=False)
class SquaredNorm(Functional):
    """|omega(t)|^2 over all coordinates."""

    def _jet(self, ctx):
        x = ctx.x
        jet = Jet(np.sum(x * x, axis=1))
        if ctx.order >= 1:
            jet.grad = 2 * x
        if ctx.order >= 2:
            jet.hess = 2 * np.broadcast_to(np.eye(ctx.d), (ctx.N, ctx.d, ctx.d)).copy()
        if ctx.order >= 3:
            jet.third = ctx.zeros(3)
        if ctx.horizontal:
            jet.horiz = np.zeros(ctx.N)
        return jet

    def to_spec(self):
        return {"cyl": "norm2"}


@dataclass(frozen=True, repr=False)
class RunningIntegral(Functional):
    g: LeafFn
    coord: int = 0

    def __post_init__(self):
        if self.g.time_dependent:
            raise ParameterError(f"running-integral integrand must not depend on t: {self.g.name}")

    def _jet(self, ctx):
        val = ctx.running(self.g, self.coord)
        gx = self.g.derivs[0](0.0, ctx.x[:, self.coord])
        jet = Jet(val + ctx.ext * gx)
        for r, name in ((1, "grad"), (2, "hess"), (3, "third")):
            if ctx.order >= r:
                setattr(jet, name, ctx.zeros(r))
        if ctx.horizontal:
            jet.horiz = gx + np.zeros(ctx.N)
        return jet

    def to_spec(self):
        spec = {"runint": list(self.g.coeffs) if self.g.coeffs is not None else self.g.name}
        if self.coord:
            spec["coord"] = self.coord
        return spec


@dataclass(frozen=True, repr=False)
class Sum(Functional):
    terms: Tuple[Functional, ...]

    @property
    def max_order(self):
        return min(t.max_order for t in self.terms)

    def _jet(self, ctx):
        jets = [t._jet(ctx) for t in self.terms]
        out = Jet(sum(j.value for j in jets))
        for name in ("grad", "hess", "third", "horiz"):
            if getattr(jets[0], name) is not None:
                setattr(out, name, sum(getattr(j, name) for j in jets))
        return out

    def to_spec(self):
        return {"sum": [t.to_spec() for t in self.terms]}


def _product(a: Jet, b: Jet, ctx) -> Jet:
    out = Jet(a.value * b.value)
    av, bv = a.value[:, None], b.value[:, None]
    if ctx.order >= 1:
        out.grad = av * b.grad + bv * a.grad
    if ctx.order >= 2:
        out.hess = (av[:, :, None] * b.hess + bv[:, :, None] * a.hess
                    + np.einsum("ni,nj->nij", a.grad, b.grad)
                    + np.einsum("ni,nj->nij", b.grad, a.grad))
    if ctx.order >= 3:
        out.third = (av[:, :, None, None] * b.third + bv[:, :, None, None] * a.third
                     + _sym3(a.grad, b.hess) + _sym3(b.grad, a.hess))
    if ctx.horizontal:
        out.horiz = a.horiz * b.value + a.value * b.horiz
    return out


@dataclass(frozen=True, repr=False)
class Prod(Functional):
    factors: Tuple[Functional, ...]

    @property
    def max_order(self):
        return min(f.max_order for f in self.factors)

    def _jet(self, ctx):
        acc = self.factors[0]._jet(ctx)
        for f in self.factors[1:]:
            acc = _product(acc, f._jet(ctx), ctx)
        return acc

    def to_spec(self):
        return {"prod": [f.to_spec() for f in self.factors]}


@dataclass(frozen=True, repr=False)
class Compose(Functional):
    phi: str
    child: Functional

    def __post_init__(self):
        if self.phi not in OUTER:
            raise ParameterError(f"unknown outer function {self.phi!r}; choose from {sorted(OUTER)}")

    @property
    def max_order(self):
        return self.child.max_order

    def _jet(self, ctx):
        c = self.child._jet(ctx)
        p = [f(c.value) for f in OUTER[self.phi][: ctx.order + 1 if ctx.order else 2]]
        out = Jet(p[0])
        if ctx.order >= 1:
            out.grad = p[1][:, None] * c.grad
        if ctx.order >= 2:
            out.hess = (p[2][:, None, None] * np.einsum("ni,nj->nij", c.grad, c.grad)
                        + p[1][:, None, None] * c.hess)
        if ctx.order >= 3:
            out.third = (p[3][:, None, None, None] * np.einsum("ni,nj,nk->nijk", c.grad, c.grad, c.grad)
                         + p[2][:, None, None, None] * _sym3(c.grad, c.hess)
                         + p[1][:, None, None, None] * c.third)
        if ctx.horizontal:
            d1 = p[1] if len(p) > 1 else OUTER[self.phi][1](c.value)
            out.horiz = d1 * c.horiz
        return out

    def to_spec(self):
        return {"compose": self.phi, "child": self.child.to_spec()}


# -- JSON grammar ---------------------------------------------------------------


def _leaf(name) -> LeafFn:
    if isinstance(name, list):
        return _poly_leaf(name)
    try:
        return LEAVES[name]
    except KeyError:
        raise ParameterError(f"unknown leaf {name!r}; choose from {sorted(LEAVES)} or a coefficient list") from None


def from_spec(spec) -> Functional:
    """Build a functional from the JSON expression grammar.

    Leaves ``{"cyl": name}`` / ``{"runint": name}`` (name in x, x2, x3, tx,
    sin_x, norm2 for cyl only, or a list of polynomial coefficients), nodes
    ``{"sum": [...]}``, ``{"prod": [...]}`` and
    ``{"compose": phi, "child": ...}``.  A bare string is looked up in
    :data:`BUILTINS`.
    """
    if isinstance(spec, str):
        if spec in BUILTINS:
            return BUILTINS[spec]
        try:
            spec = json.loads(spec)
        except json.JSONDecodeError:
            near = difflib.get_close_matches(spec, list(BUILTINS), n=1)
            hint = f"; did you mean {near[0]!r}?" if near else ""
            raise ParameterError(f"unknown functional {spec!r}{hint}") from None
        return from_spec(spec)
    if not isinstance(spec, dict):
        raise ParameterError(f"functional spec must be an object, got {type(spec).__name__}")
    coord = int(spec.get("coord", 0))
    if "cyl" in spec:
        if spec["cyl"] == "norm2":
            return SquaredNorm()
        return Cylindrical(_leaf(spec["cyl"]), coord)
    if "runint" in spec:
        return RunningIntegral(_leaf(spec["runint"]), coord)
    if "sum" in spec:
        return Sum(tuple(from_spec(s) for s in spec["sum"]))
    if "prod" in spec:
        return Prod(tuple(from_spec(s) for s in spec["prod"]))
    if "compose" in spec:
        if "child" not in spec:
            raise ParameterError("compose node needs a 'child'")
        return Compose(spec["compose"], from_spec(spec["child"]))
    raise ParameterError(f"unrecognised functional node with keys {sorted(spec)}")


X = Cylindrical(LEAVES["x"])
BUILTINS: Dict[str, Functional] = {
    "identity": X,
    "square": Cylindrical(LEAVES["x2"]),
    "cube": Cylindrical(LEAVES["x3"]),
    "tx": Cylindrical(LEAVES["tx"]),
    "sin": Cylindrical(LEAVES["sin_x"]),
    "constant": Cylindrical(_poly_leaf([1.0])),
    "runint": RunningIntegral(LEAVES["x"]),
    "x_runint": Prod((X, RunningIntegral(LEAVES["x"]))),
    "sin_runint": Compose("sin", Sum((RunningIntegral(LEAVES["sin_x"]), X))),
    "exp_tx": Compose("exp", Prod((Cylindrical(_poly_leaf([0.0, 0.5])), Cylindrical(LEAVES["tx"])))),
    "runint_x2": Prod((RunningIntegral(LEAVES["x"]), RunningIntegral(LEAVES["x2"]), Cylindrical(LEAVES["x"]))),
}


# -- evaluation -----------------------------------------------------------------


def _require(F: Functional, order: int) -> None:
    if order > F.max_order:
        raise CapabilityError(f"{F!r} provides vertical derivatives up to order {F.max_order}, "
                              f"order {order} requested")


def jet(F: Functional, path: SampledPath, k, order: int = 0, horizontal: bool = False,
        history: Optional[np.ndarray] = None, current: Optional[np.ndarray] = None,
        ext=0.0) -> Jet:
    """Batched jet of ``F`` at grid indices ``k``.

    ``history`` replaces the path values seen by running integrals (e.g. a
    step approximation); ``current`` replaces ``omega(t_k)`` seen by
    cylindrical leaves; ``ext`` evaluates at time ``t_k + ext`` along the path
    frozen at ``t_k``.
    """
    _require(F, order)
    k = np.atleast_1d(np.asarray(k, dtype=np.int64))
    hist = path.values if history is None else history
    x = path.values[k] if current is None else np.atleast_2d(current)
    t = k * path.dt
    ext = np.broadcast_to(np.asarray(ext, dtype=float), k.shape)
    return F._jet(_Context(hist, path.dt, k, t, x, ext, order, horizontal))


def values_at(F: Functional, path: SampledPath, k, **kw) -> np.ndarray:
    return jet(F, path, k, 0, **kw).value


def evaluate(F: Functional, t: float, path: SampledPath) -> float:
    """F(t, omega_t); ``t`` is snapped to the grid."""
    return float(values_at(F, path, path.index_of(t))[0])


def vertical_grad(F: Functional, t: float, path: SampledPath) -> np.ndarray:
    return jet(F, path, path.index_of(t), 1).grad[0]


def vertical_hess(F: Functional, t: float, path: SampledPath) -> np.ndarray:
    return jet(F, path, path.index_of(t), 2).hess[0]


def vertical_third(F: Functional, t: float, path: SampledPath) -> np.ndarray:
    return jet(F, path, path.index_of(t), 3).third[0]


def horizontal_deriv(F: Functional, t: float, path: SampledPath) -> float:
    k = path.index_of(t)
    if k == path.M:
        warnings.warn("horizontal derivative at t = T is one-sided; returning the left value",
                      HorizonWarning, stacklevel=2)
    return float(jet(F, path, k, 0, horizontal=True).horiz[0])


def _check_step(h: float, scale: float) -> None:
    if h < 1e3 * np.finfo(float).eps * max(scale, 1.0):
        warnings.warn(f"finite-difference step {h:g} is close to machine precision", StepSizeWarning,
                      stacklevel=3)


def fd_vertical(F: Functional, t: float, path: SampledPath, h: Optional[float] = None) -> np.ndarray:
    """Central difference of F(t, .) under the bump ``+-h e_i 1_[t, T]`` of the path."""
    k = path.index_of(t)
    x = path.values[k]
    if h is None:
        h = FD_REL_STEP * (1 + float(np.max(np.abs(x))))
    _check_step(h, float(np.max(np.abs(x))))
    out = np.empty(path.dim)
    for i in range(path.dim):
        vals = []
        for sign in (1.0, -1.0):
            bumped = np.array(path.values[: k + 1])
            bumped[k:, i] += sign * h
            short = SampledPath(bumped, k * path.dt if k else path.dt) if k else None
            if short is None:
                vals.append(float(values_at(F, path, 0, current=bumped[0:1])[0]))
            else:
                vals.append(float(values_at(F, short, k)[0]))
        out[i] = (vals[0] - vals[1]) / (2 * h)
    return out


def fd_horizontal(F: Functional, t: float, path: SampledPath, h: Optional[float] = None) -> float:
    """Forward difference (F(t + h, omega_t) - F(t, omega_t)) / h along the frozen path."""
    k = path.index_of(t)
    if h is None:
        h = FD_HORIZONTAL_STEP * max(path.horizon, 1.0)
    _check_step(h, path.horizon)
    v0 = values_at(F, path, k)[0]
    v1 = values_at(F, path, k, ext=h)[0]
    return float((v1 - v0) / h)


# -- assumption checkers --------------------------------------------------------


@dataclass
class AssumptionReport:
    """Sampled evidence for the regularity assumptions; never a proof."""

    lipschitz_K_hat: float
    foscill_max: Dict[int, float] = field(default_factory=dict)
    horiz_lipschitz_C_hat: float = 0.0
    samples_used: int = 0


def _bump_field(rng, length: int, dim: int, constant: bool) -> np.ndarray:
    if constant:
        return np.broadcast_to(rng.uniform(-1, 1, dim), (length, dim)).copy()
    walk = np.cumsum(rng.standard_normal((length, dim)), axis=0)
    sup = np.max(np.abs(walk))
    return walk / sup * rng.uniform(0, 1) if sup > 0 else walk


def foscill(F: Functional, path: SampledPath, part) -> float:
    """max_i |F(t_{i+1}, omega_{t_{i+1}}) - F(t_i, omega_{t_i})| along a partition."""
    v = values_at(F, path, part.indices)
    return float(np.max(np.abs(np.diff(v))))


def check_assumptions(F: Functional, path: SampledPath, seq, pairs: int = 256, seed: int = 0,
                      eta: float = 1e-3) -> AssumptionReport:
    """Estimate the Lipschitz constant K, the functional oscillation per level
    and the horizontal Lipschitz constant C from seeded random samples.

    Half of the Lipschitz pairs use constant bumps, half random-walk bumps
    with sup norm at most 1.  Horizontal pairs perturb the path by at most
    ``eta`` and step forward by ``h`` in ``{2^-6, ..., 2^-12} * T``.
    """
    rng = make_rng(seed)
    M = path.M
    K = 0.0
    for j in range(pairs):
        k = int(rng.integers(1, M + 1))
        base = path.values[: k + 1]
        moved = base + _bump_field(rng, k + 1, path.dim, constant=(j % 2 == 0))
        delta = moved - base
        dist = float(np.max(np.sqrt(np.sum(delta * delta, axis=1))))
        if dist == 0:
            continue
        a = SampledPath(base, k * path.dt)
        b = SampledPath(moved, k * path.dt)
        diff = abs(values_at(F, a, k)[0] - values_at(F, b, k)[0])
        K = max(K, diff / dist)

    C = 0.0
    steps = [path.horizon * 2.0 ** -j for j in range(6, 13)]
    for j in range(pairs):
        k = int(rng.integers(0, M))
        h = steps[j % len(steps)]
        if k * path.dt + h > path.horizon:
            continue
        base = path.values[: k + 1] + eta * _bump_field(rng, k + 1, path.dim, constant=False)
        p = SampledPath(base, max(k, 1) * path.dt) if k else None
        if p is None:
            cur = base[0:1]
            v0 = values_at(F, path, 0, current=cur)[0]
            v1 = values_at(F, path, 0, current=cur, ext=h)[0]
        else:
            v0 = values_at(F, p, k)[0]
            v1 = values_at(F, p, k, ext=h)[0]
        C = max(C, abs(v1 - v0) / h)

    fo = {n: foscill(F, path, part) for n, part in seq}
    return AssumptionReport(float(K), fo, float(C), 2 * pairs)
