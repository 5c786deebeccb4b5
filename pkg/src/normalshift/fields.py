"""Force data in its two presentations and the defining PDE residuals.

A force field of the admitted class can be given either by a pair of
scalar functions (h, W) — W of position and speed, h of one variable —
or by a scalar a and a covector field b, all depending on position and
speed only.  The two are linked pointwise by

    b_i = -(dW/dx^i) / (dW/dv),        a = h(W) / (dW/dv),

and the covariant force components are

    F_k = a*N_k + v * sum_i b_i * (2 N^i N_k - delta^i_k),

with N the g-unit vector along the velocity and v the g-speed.  The class
is closed under these conversions exactly when the closedness equations
(antisymmetrized derivative of b along itself) and the normalizing
equations (coupling a to b) hold; both are exposed here as pointwise
residuals so that sweeps can audit user-declared data.

Everything evaluates on batches: position arrays (..., n) and speed or
velocity arrays broadcast along the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FrameError, VanishingDerivativeError, ZeroSpeedError
from .expr import FieldExpr, parse as _parse, taylor_eval
from .geometry import MetricSpec, coordinate_names, metric_at

_ONE = _parse("1")

__all__ = [
    "HWPair", "ABFields", "DerivedAB", "ForceField",
    "b_from_W", "a_from_hW",
    "force_hw", "force_ab", "force_from_one_form",
    "closedness_residual", "normalizing_residual", "collinearity_defect",
]

SPEED_EPS = 1e-12   # structural: unit velocity direction must exist
WV_EPS = 1e-10      # structural: dW/dv sits in denominators


def _env(n, x, v=None):
    x = np.asarray(x, dtype=float)
    env = {name: x[..., i] for i, name in enumerate(coordinate_names(n))}
    if v is not None:
        env["v"] = np.asarray(v, dtype=float)
    return env


# --- the (h, W) presentation ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class HWPair:
    """Scalar pair (h, W): W over x1..xn and v, h over w."""

    W: FieldExpr
    h: FieldExpr
    dimension: int

    def __post_init__(self):
        allowed = set(coordinate_names(self.dimension)) | {"v"}
        extra = set(self.W.free_vars) - allowed
        if extra:
            raise FrameError(f"W uses unknown variables {sorted(extra)}")
        extra = set(self.h.free_vars) - {"w"}
        if extra:
            raise FrameError(f"h must be a function of w only, found "
                             f"{sorted(extra)}")

    def w_jet1(self, x, v):
        """(W, dW/dx (..., n), dW/dv), with the dW/dv != 0 guard."""
        names = coordinate_names(self.dimension) + ("v",)
        val, grad, _ = taylor_eval(self.W, _env(self.dimension, x, v),
                                   names, order=1)
        shape = np.broadcast_shapes(np.shape(val),
                                    np.asarray(x, dtype=float).shape[:-1])
        val = np.broadcast_to(val, shape)
        grad = np.broadcast_to(grad, shape + (self.dimension + 1,))
        wx = grad[..., :-1]
        wv = grad[..., -1]
        _guard_wv(wv, x, v)
        return val, wx, wv

    def w_jet2(self, x, v):
        """Adds the second derivatives: (W, Wx, Wv, Wxx, Wxv, Wvv)."""
        n = self.dimension
        names = coordinate_names(n) + ("v",)
        val, grad, hess = taylor_eval(self.W, _env(n, x, v), names, order=2)
        shape = np.broadcast_shapes(np.shape(val),
                                    np.asarray(x, dtype=float).shape[:-1])
        val = np.broadcast_to(val, shape)
        grad = np.broadcast_to(grad, shape + (n + 1,))
        hess = np.broadcast_to(hess, shape + (n + 1, n + 1))
        wx, wv = grad[..., :-1], grad[..., -1]
        _guard_wv(wv, x, v)
        return (val, wx, wv,
                hess[..., :-1, :-1], hess[..., :-1, -1], hess[..., -1, -1])

    def h_val(self, w):
        return taylor_eval(self.h, {"w": np.asarray(w, dtype=float)},
                           (), order=0)[0]

    def h_jet1(self, w):
        val, grad, _ = taylor_eval(self.h, {"w": np.asarray(w, dtype=float)},
                                   ("w",), order=1)
        return val, grad[..., 0]


def _guard_wv(wv, x, v):
    if np.any(np.abs(wv) <= WV_EPS):
        bad = int(np.argmax(np.abs(np.atleast_1d(wv)).ravel() <= WV_EPS))
        pt = np.asarray(x, dtype=float).reshape(-1, np.asarray(x).shape[-1])
        pt = pt[min(bad, pt.shape[0] - 1)]
        vv = np.ravel(np.broadcast_to(v, np.atleast_1d(wv).shape))[bad]
        raise VanishingDerivativeError(
            f"dW/dv vanished (|dW/dv| <= {WV_EPS}) at "
            f"x={tuple(float(c) for c in pt)}, v={float(vv)}")


# --- the (a, b) presentation ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ABFields:
    """Scalar a and covector components b1..bn, functions of x1..xn, v.

    Velocity enters only through the speed variable v, which is what makes
    the data fiberwise spherically symmetric by construction.
    """

    a: FieldExpr
    b: tuple
    dimension: int = 0

    def __post_init__(self):
        n = self.dimension or len(self.b)
        object.__setattr__(self, "dimension", n)
        if len(self.b) != n:
            raise FrameError(f"need {n} covector components, got {len(self.b)}")
        allowed = set(coordinate_names(n)) | {"v"}
        for label, e in [("a", self.a)] + [
                (f"b{i + 1}", c) for i, c in enumerate(self.b)]:
            extra = set(e.free_vars) - allowed
            if extra:
                raise FrameError(
                    f"{label} uses unknown variables {sorted(extra)}")

    def a_values(self, x, v):
        n = self.dimension
        shape = np.broadcast_shapes(np.asarray(x, dtype=float).shape[:-1],
                                    np.shape(v))
        val = taylor_eval(self.a, _env(n, x, v), (), order=0)[0]
        return np.broadcast_to(val, shape)

    def a_jet(self, x, v):
        """(a, da/dx (..., n), da/dv)."""
        n = self.dimension
        names = coordinate_names(n) + ("v",)
        shape = np.broadcast_shapes(np.asarray(x, dtype=float).shape[:-1],
                                    np.shape(v))
        val, grad, _ = taylor_eval(self.a, _env(n, x, v), names, order=1)
        val = np.broadcast_to(val, shape)
        grad = np.broadcast_to(grad, shape + (n + 1,))
        return val, grad[..., :-1], grad[..., -1]

    def b_values(self, x, v):
        # value-only path: the continuation inner loop lives here
        n = self.dimension
        env = _env(n, x, v)
        shape = np.broadcast_shapes(np.asarray(x, dtype=float).shape[:-1],
                                    np.shape(v))
        vals = np.empty(shape + (n,))
        for i, comp in enumerate(self.b):
            vals[..., i] = np.broadcast_to(
                taylor_eval(comp, env, (), order=0)[0], shape)
        return vals

    def b_jet(self, x, v):
        """(b (..., n), db/dx (..., n, n) [i, j] = d b_i / d x^j,
        db/dv (..., n))."""
        n = self.dimension
        names = coordinate_names(n) + ("v",)
        env = _env(n, x, v)
        shape = np.broadcast_shapes(np.asarray(x, dtype=float).shape[:-1],
                                    np.shape(v))
        vals = np.empty(shape + (n,))
        dx = np.empty(shape + (n, n))
        dv = np.empty(shape + (n,))
        for i, comp in enumerate(self.b):
            val, grad, _ = taylor_eval(comp, env, names, order=1)
            vals[..., i] = np.broadcast_to(val, shape)
            grad = np.broadcast_to(grad, shape + (n + 1,))
            dx[..., i, :] = grad[..., :-1]
            dv[..., i] = grad[..., -1]
        return vals, dx, dv


class DerivedAB:
    """(a, b) data computed exactly from an (h, W) pair via the quotient
    rules, including the first derivatives needed by the PDE residuals and
    the continuation machinery.  Quacks like `ABFields`."""

    def __init__(self, hw: HWPair):
        self.hw = hw
        self.dimension = hw.dimension

    def a_values(self, x, v):
        return self.a_jet(x, v)[0]

    def a_jet(self, x, v):
        W, wx, wv, wxx, wxv, wvv = self.hw.w_jet2(x, v)
        h, hp = self.hw.h_jet1(W)
        a = h / wv
        ax = (hp[..., None] * wx * wv[..., None] - h[..., None] * wxv) \
            / wv[..., None] ** 2
        av = hp - h * wvv / wv ** 2
        return a, ax, av

    def b_values(self, x, v):
        W, wx, wv = self.hw.w_jet1(x, v)
        return -wx / wv[..., None]

    def b_jet(self, x, v):
        W, wx, wv, wxx, wxv, wvv = self.hw.w_jet2(x, v)
        b = -wx / wv[..., None]
        # d b_i / d x^j and d b_i / d v by the quotient rule
        dx = -(wxx * wv[..., None, None]
               - wx[..., :, None] * wxv[..., None, :]) / wv[..., None, None] ** 2
        dv = -(wxv * wv[..., None] - wx * wvv[..., None]) / wv[..., None] ** 2
        return b, dx, dv


def b_from_W(hw: HWPair, x, v) -> np.ndarray:
    """Covector b_i = -(dW/dx^i)/(dW/dv) at (x, v)."""
    _, wx, wv = hw.w_jet1(x, v)
    return -wx / wv[..., None]


def a_from_hW(hw: HWPair, x, v):
    """Scalar a = h(W(x,v)) / (dW/dv)(x,v)."""
    W, _, wv = hw.w_jet1(x, v)
    return hw.h_val(W) / wv


# --- velocity frame and forces ----------------------------------------------------

def _velocity_frame(m: MetricSpec, x, xdot):
    """g-speed, unit direction (contravariant and covariant), metric pair."""
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    g = metric_at(m, x)
    xdot_low = np.einsum("...ij,...j->...i", g, xdot)
    v2 = np.einsum("...i,...i->...", xdot, xdot_low)
    v = np.sqrt(v2)
    if np.any(v <= SPEED_EPS):
        bad = int(np.argmax(np.atleast_1d(v).ravel() <= SPEED_EPS))
        pt = x.reshape(-1, x.shape[-1])[min(bad, x.reshape(-1, x.shape[-1]).shape[0] - 1)]
        raise ZeroSpeedError(
            f"velocity modulus <= {SPEED_EPS} at x={tuple(float(c) for c in pt)}")
    n_up = xdot / v[..., None]
    n_low = xdot_low / v[..., None]
    return v, n_up, n_low, g


def _raise_force(m, x, f_low, g):
    if m.is_euclidean:
        return f_low
    return np.einsum("...ij,...j->...i", np.linalg.inv(g), f_low)


def force_hw(hw, m: MetricSpec, x, xdot) -> np.ndarray:
    """Contravariant force from an (h, W) pair:

        F_k = h(W) N_k / W_v - v * sum_i (W_i / W_v) (2 N^i N_k - d^i_k)

    raised with the inverse metric.  `hw` may be any object exposing
    w_jet1 and h_val (e.g. a gauge-transformed pair)."""
    v, n_up, n_low, g = _velocity_frame(m, x, xdot)
    W, wx, wv = hw.w_jet1(x, v)
    h = hw.h_val(W)
    quot = wx / wv[..., None]
    # sum_i quot_i * (2 N^i N_k - delta^i_k)
    corr = (2.0 * np.einsum("...i,...i->...", quot, n_up)[..., None] * n_low
            - quot)
    f_low = h[..., None] * n_low / wv[..., None] - v[..., None] * corr
    return _raise_force(m, x, f_low, g)


def force_ab(ab, m: MetricSpec, x, xdot) -> np.ndarray:
    """Contravariant force from (a, b) data:

        F_k = a N_k + v * sum_i b_i (2 N^i N_k - d^i_k)
    """
    v, n_up, n_low, g = _velocity_frame(m, x, xdot)
    a = ab.a_values(x, v)
    b = ab.b_values(x, v)
    corr = (2.0 * np.einsum("...i,...i->...", b, n_up)[..., None] * n_low
            - b)
    f_low = a[..., None] * n_low + v[..., None] * corr
    return _raise_force(m, x, f_low, g)


def force_from_one_form(w_expr: FieldExpr, m: MetricSpec, x, xdot,
                        dimension=None) -> np.ndarray:
    """Force written directly through the components of the exact one-form
    omega = dW (the unit-h case):

        F_k = N_k / omega_{n+1} - v * sum_i (omega_i / omega_{n+1})
                                          * (2 N^i N_k - d^i_k)

    Independent arithmetic route from `force_hw`, kept for cross-checks."""
    n = dimension or (np.asarray(x).shape[-1])
    v, n_up, n_low, g = _velocity_frame(m, x, xdot)
    names = coordinate_names(n) + ("v",)
    _, omega, _ = taylor_eval(w_expr, _env(n, x, v), names, order=1)
    omega = np.broadcast_to(omega, v.shape + (n + 1,))
    last = omega[..., -1]
    if np.any(np.abs(last) <= WV_EPS):
        raise VanishingDerivativeError(
            "speed component of the one-form vanished")
    quot = omega[..., :-1] / last[..., None]
    corr = (2.0 * np.einsum("...i,...i->...", quot, n_up)[..., None] * n_low
            - quot)
    f_low = n_low / last[..., None] - v[..., None] * corr
    return _raise_force(m, x, f_low, g)


def custom_force(exprs, m: MetricSpec, x, xdot) -> np.ndarray:
    """Contravariant force components given directly as expressions of
    x1..xn, xdot1..xdotn and the g-speed v (zero speed allowed unless an
    expression references v)."""
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    n = x.shape[-1]
    env = _env(n, x)
    for i in range(n):
        env[f"xdot{i + 1}"] = xdot[..., i]
    if any("v" in e.free_vars for e in exprs):
        g = metric_at(m, x)
        env["v"] = np.sqrt(np.einsum("...i,...ij,...j->...", xdot, g, xdot))
    shape = np.broadcast_shapes(x.shape[:-1], xdot.shape[:-1])
    out = np.empty(shape + (n,))
    for i, e in enumerate(exprs):
        out[..., i] = np.broadcast_to(taylor_eval(e, env, (), order=0)[0],
                                      shape)
    return out


@dataclass(frozen=True, eq=False)
class ForceField:
    """A force source bound to a metric; callable on (x, xdot) batches."""

    source: object  # HWPair-like | ABFields-like | tuple of FieldExprs
    metric: MetricSpec
    kind: str = ""   # "hw" | "ab" | "custom" (inferred when empty)

    def __post_init__(self):
        kind = self.kind
        if not kind:
            if hasattr(self.source, "w_jet1"):
                kind = "hw"
            elif hasattr(self.source, "b_values"):
                kind = "ab"
            else:
                kind = "custom"
            object.__setattr__(self, "kind", kind)

    @property
    def needs_positive_speed(self):
        return self.kind in ("hw", "ab")

    def __call__(self, x, xdot):
        if self.kind == "hw":
            return force_hw(self.source, self.metric, x, xdot)
        if self.kind == "ab":
            return force_ab(self.source, self.metric, x, xdot)
        return custom_force(self.source, self.metric, x, xdot)


# --- PDE residuals -----------------------------------------------------------------

def closedness_residual(ab, x, v) -> np.ndarray:
    """Antisymmetric matrix R_ij = (d_j + b_j d_v) b_i - (d_i + b_i d_v) b_j.

    Vanishes exactly when the covector data is closed, i.e. when the
    continuation of the speed parameter is path-independent."""
    b, dx, dv = ab.b_jet(x, v)
    full = dx + b[..., None, :] * dv[..., :, None]  # [i, j] = (d_j + b_j d_v) b_i
    return full - np.swapaxes(full, -1, -2)


def normalizing_residual(ab, x, v) -> np.ndarray:
    """Vector r_i = (d_i + b_i d_v) a - (d b_i / d v) * a; zero when the
    scalar a normalizes the covector data."""
    a, ax, av = ab.a_jet(x, v)
    b, _, bv = ab.b_jet(x, v)
    return ax + b * av[..., None] - bv * a[..., None]


def collinearity_defect(ab, w_expr: FieldExpr, x, v):
    """Relative non-collinearity of d(a * W_v) with dW in the (n+1)
    coordinate-gradient sense; 0 when the two one-forms are parallel.

    A zero gradient of the product counts as collinear.  Requires a
    nonzero dW."""
    n = ab.dimension
    hw = HWPair(w_expr, _ONE, n)
    W, wx, wv, wxx, wxv, wvv = hw.w_jet2(x, v)
    a, ax, av = ab.a_jet(x, v)
    dW = np.concatenate([wx, wv[..., None]], axis=-1)
    prod_x = ax * wv[..., None] + a[..., None] * wxv
    prod_v = av * wv + a * wvv
    dprod = np.concatenate([prod_x, prod_v[..., None]], axis=-1)
    norm_w = np.linalg.norm(dW, axis=-1)
    if np.any(norm_w <= 1e-12):
        raise VanishingDerivativeError("dW vanished where the collinearity "
                                       "defect was requested")
    norm_p = np.linalg.norm(dprod, axis=-1)
    unit = dW / norm_w[..., None]
    ortho = dprod - np.einsum("...i,...i->...", dprod, unit)[..., None] * unit
    safe = np.where(norm_p > 0.0, norm_p, 1.0)
    return np.where(norm_p > 0.0,
                    np.linalg.norm(ortho, axis=-1) / safe,
                    np.zeros_like(norm_p))
