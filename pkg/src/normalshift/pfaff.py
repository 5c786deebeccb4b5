"""Global integration machinery: continuation of the speed parameter along
paths, its derivative with respect to the initial datum, inversion,
f-norm estimation, monodromy maps induced by deck translations, gauge
transformations of (h, W) pairs, and extraction of the one-variable
factor h.

The central object is the first-order system

    dV/dt = sum_i b_i(x(t), V) dx^i/dt,        V(t0) = w > 0,

integrated along chart paths by fixed-step RK4.  Its derivative with
respect to the initial datum,

    V_w(t) = exp( integral of sum_i (db_i/dv)(x, V) dx^i/dt ),

is integrated jointly (in log form), which keeps it positive by
construction.  Solving V(x, w) = v for w realizes the global scalar
W(x, v) with the normalization W(p0, v) = v.

Step counts scale with the chart length of each path segment, so `dt`
means "step per unit chart length" for polylines and "step in the curve
parameter" for parametric paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import (
    BracketingError,
    CompatibilityError,
    ContinuationError,
    DeckInvarianceError,
    NormalShiftError,
    PathError,
    PositivityError,
    TableError,
)
from .expr import FieldExpr, taylor_eval
from .fields import closedness_residual, normalizing_residual
from .geometry import (
    CoveringManifold,
    MetricSpec,
    deck_apply,
    inverse_metric_at,
)

__all__ = [
    "PathSpec", "ContinuationTrace", "AdmissibleF", "MonodromyMap",
    "ClosedFormRho", "TransformedHW", "FNormEstimate", "ExtractedH",
    "continue_V", "Vw_along_path", "path_independence_defect",
    "invert_V", "straight_path_factory", "f_norm_estimate",
    "monodromy", "gauge_transform", "extract_h",
]

INVERT_BRACKET = (1e-8, 1e8)
INVERT_BISECTIONS = 80
INVERT_NEWTON = 5


# --- paths -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathSpec:
    """Chart path: a polyline through given points, or a parametric curve.

    Polylines with a single point are allowed and denote the degenerate
    path (useful at the continuation base point).  Parametric curves are
    sanity-sampled at construction: components and tangents must stay
    finite over the parameter interval.
    """

    kind: str  # "polyline" | "parametric"
    points: tuple = ()
    exprs: tuple = ()
    t0: float = 0.0
    t1: float = 1.0
    samples: int = 64

    @staticmethod
    def polyline(points) -> "PathSpec":
        pts = tuple(tuple(float(c) for c in p) for p in points)
        if not pts:
            raise PathError("polyline needs at least one point")
        for a, b in zip(pts, pts[1:]):
            if max(abs(p - q) for p, q in zip(a, b)) == 0.0:
                raise PathError(f"consecutive polyline points coincide: {a}")
        return PathSpec("polyline", points=pts)

    @staticmethod
    def parametric(exprs, t0, t1, samples=64) -> "PathSpec":
        exprs = tuple(exprs)
        for e in exprs:
            extra = set(e.free_vars) - {"t"}
            if extra:
                raise PathError(
                    f"parametric component uses unknown variables {sorted(extra)}")
        if not t1 > t0:
            raise PathError(f"need t1 > t0, got [{t0}, {t1}]")
        path = PathSpec("parametric", exprs=exprs, t0=float(t0),
                        t1=float(t1), samples=int(samples))
        ts = np.linspace(t0, t1, max(2, samples))
        with np.errstate(over="ignore", invalid="ignore"):
            x, xd = path._parametric_eval(ts)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xd))):
            raise PathError("parametric path has unbounded components or "
                            "tangent on the interval")
        return path

    @property
    def dimension(self):
        if self.kind == "polyline":
            return len(self.points[0])
        return len(self.exprs)

    def start(self):
        if self.kind == "polyline":
            return np.asarray(self.points[0], dtype=float)
        return self._parametric_eval(np.asarray(self.t0))[0]

    def end(self):
        if self.kind == "polyline":
            return np.asarray(self.points[-1], dtype=float)
        return self._parametric_eval(np.asarray(self.t1))[0]

    def reversed(self) -> "PathSpec":
        if self.kind != "polyline":
            raise PathError("only polylines can be reversed")
        return PathSpec("polyline", points=tuple(reversed(self.points)))

    def _parametric_eval(self, ts):
        xs, xds = [], []
        for e in self.exprs:
            val, grad, _ = taylor_eval(e, {"t": ts}, ("t",), order=1)
            xs.append(np.broadcast_to(np.asarray(val, dtype=float),
                                      np.shape(ts)))
            xds.append(np.broadcast_to(grad[..., 0], np.shape(ts)))
        return np.stack(xs, axis=-1), np.stack(xds, axis=-1)


def straight_path_factory(p0):
    """Canonical paths from the base point: straight chart segments."""
    base = np.asarray(p0, dtype=float)

    def factory(x):
        x = np.asarray(x, dtype=float)
        if np.max(np.abs(x - base)) == 0.0:
            return PathSpec("polyline", points=(tuple(base),))
        return PathSpec.polyline([tuple(base), tuple(x)])

    return factory


# --- continuation core -------------------------------------------------------------

@dataclass(eq=False)
class ContinuationTrace:
    """Samples of the continued parameter along a path."""

    t: np.ndarray          # (L,) cumulative chart-length / curve parameter
    x: np.ndarray          # (L, n)
    V: np.ndarray          # (L,) + lane shape
    Vw: np.ndarray | None  # same shape as V, or None

    @property
    def end_V(self):
        return self.V[-1]

    @property
    def end_Vw(self):
        return None if self.Vw is None else self.Vw[-1]


def _stage_rate(ab, env_x, V, delta, want_vw, t, x_now):
    """dV/dt and (optionally) d(log V_w)/dt at one RK4 stage."""
    try:
        if want_vw:
            b, _, bv = ab.b_jet(env_x, V)
        else:
            b = ab.b_values(env_x, V)
            bv = None
    except NormalShiftError as err:
        raise ContinuationError(f"field evaluation failed: {err}",
                                t=t, point=np.atleast_2d(x_now)[0]) from err
    rate = np.einsum("...i,...i->...", b, delta)
    if want_vw:
        return rate, np.einsum("...i,...i->...", bv, delta)
    return rate, None


def _guard_positive(V, t, x_now):
    if np.any(~np.isfinite(V)) or np.any(V <= 0.0):
        raise ContinuationError(
            "continued parameter left the positive axis",
            t=t, point=np.atleast_2d(x_now)[0])


def _continue_polyline(ab, points, w0, dt, want_vw, store):
    """RK4 continuation along one polyline (points (K+1, n)) or a batch of
    polylines (points (P, K+1, n), w0 lanes (P, ...))."""
    pts = np.asarray(points, dtype=float)
    multi = pts.ndim == 3
    V = np.array(w0, dtype=float)
    logZ = np.zeros_like(V) if want_vw else None
    nseg = pts.shape[-2] - 1
    t_accum = 0.0
    ts, xs, Vs, Zs = [0.0], [pts[..., 0, :]], [V.copy()], \
        [np.ones_like(V) if want_vw else None]
    # in multi-path mode with extra value lanes, x stages get a lane axis
    expand = multi and V.ndim > pts.ndim - 2

    def env_of(x_stage):
        return x_stage[..., None, :] if expand else x_stage

    for seg in range(nseg):
        p = pts[..., seg, :]
        q = pts[..., seg + 1, :]
        delta = q - p
        length = float(np.max(np.linalg.norm(
            np.atleast_2d(delta), axis=-1)))
        nsub = max(1, int(round(length / dt)))
        h = 1.0 / nsub
        dl = length / nsub
        for j in range(nsub):
            s = j * h
            x1 = p + s * delta
            x2 = p + (s + 0.5 * h) * delta
            x3 = p + (s + h) * delta
            d = delta[..., None, :] if expand else delta
            e1, e2, e3 = env_of(x1), env_of(x2), env_of(x3)
            k1, g1 = _stage_rate(ab, e1, V, d, want_vw, t_accum, x1)
            k2, g2 = _stage_rate(ab, e2, V + 0.5 * h * k1, d, want_vw,
                                 t_accum, x2)
            k3, g3 = _stage_rate(ab, e2, V + 0.5 * h * k2, d, want_vw,
                                 t_accum, x2)
            k4, g4 = _stage_rate(ab, e3, V + h * k3, d, want_vw, t_accum, x3)
            V = V + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t_accum += dl
            _guard_positive(V, t_accum, x3)
            if want_vw:
                logZ = logZ + (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
            if store:
                ts.append(t_accum)
                xs.append(x3)
                Vs.append(V.copy())
                Zs.append(np.exp(logZ) if want_vw else None)
    if not store:
        ts, xs = [0.0, t_accum], [pts[..., 0, :], pts[..., -1, :]]
        Vs = [Vs[0], V]
        Zs = [Zs[0], np.exp(logZ) if want_vw else None]
    return ContinuationTrace(
        np.asarray(ts), np.asarray(xs), np.asarray(Vs),
        np.asarray(Zs) if want_vw else None)


def _continue_parametric(ab, path, w0, dt, want_vw, store):
    V = np.array(w0, dtype=float)
    logZ = np.zeros_like(V) if want_vw else None
    span = path.t1 - path.t0
    nsteps = max(1, int(round(span / dt)))
    h = span / nsteps
    ts = [path.t0]
    x0 = path._parametric_eval(np.asarray(path.t0))[0]
    xs, Vs, Zs = [x0], [V.copy()], [np.ones_like(V) if want_vw else None]
    for j in range(nsteps):
        t = path.t0 + j * h
        stage_t = np.array([t, t + 0.5 * h, t + h])
        x_st, xd_st = path._parametric_eval(stage_t)

        def rate(idx, Vcur):
            return _stage_rate(ab, x_st[idx], Vcur, xd_st[idx], want_vw,
                               t, x_st[idx])

        k1, g1 = rate(0, V)
        k2, g2 = rate(1, V + 0.5 * h * k1)
        k3, g3 = rate(1, V + 0.5 * h * k2)
        k4, g4 = rate(2, V + h * k3)
        V = V + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _guard_positive(V, t + h, x_st[2])
        if want_vw:
            logZ = logZ + (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        if store:
            ts.append(t + h)
            xs.append(x_st[2])
            Vs.append(V.copy())
            Zs.append(np.exp(logZ) if want_vw else None)
    if not store:
        ts = [path.t0, path.t1]
        xs = [x0, xs[0] if nsteps == 0 else x_st[2]]
        Vs = [Vs[0], V]
        Zs = [Zs[0], np.exp(logZ) if want_vw else None]
    return ContinuationTrace(
        np.asarray(ts), np.asarray(xs), np.asarray(Vs),
        np.asarray(Zs) if want_vw else None)


def _continue(ab, path, w0, dt, want_vw, store):
    if np.any(np.asarray(w0, dtype=float) <= 0.0):
        raise PositivityError(f"initial datum must be positive, got {w0}")
    if isinstance(path, PathSpec) and path.kind == "parametric":
        return _continue_parametric(ab, path, w0, dt, want_vw, store)
    pts = path.points if isinstance(path, PathSpec) else path
    return _continue_polyline(ab, pts, w0, dt, want_vw, store)


def continue_V(ab, path: PathSpec, w0, dt=1e-3) -> ContinuationTrace:
    """Continue the positive parameter V from V(start) = w0 along the path.

    Returns the sampled trace including the endpoint value; V_w samples are
    included (they come from the same joint integration)."""
    return _continue(ab, path, w0, dt, want_vw=True, store=True)


def Vw_along_path(ab, path: PathSpec, w0, dt=1e-3) -> ContinuationTrace:
    """Continuation with emphasis on the derivative V_w of the endpoint
    value with respect to the initial datum; always positive."""
    return _continue(ab, path, w0, dt, want_vw=True, store=True)


def path_independence_defect(ab, path1: PathSpec, path2: PathSpec, w0,
                             dt=1e-3):
    """|V_path1(end) - V_path2(end)| for two paths sharing both endpoints."""
    if (np.max(np.abs(path1.start() - path2.start())) > 1e-12
            or np.max(np.abs(path1.end() - path2.end())) > 1e-12):
        raise PathError("paths do not share start and end points")
    v1 = _continue(ab, path1, w0, dt, want_vw=False, store=False).end_V
    v2 = _continue(ab, path2, w0, dt, want_vw=False, store=False).end_V
    return float(np.max(np.abs(v1 - v2)))


# --- inversion: w = W(x, v) ----------------------------------------------------------

def _invert_on_path(ab, path_points, v_targets, dt):
    """Solve V(path end, w) = v for each target: log-bisection on the fixed
    bracket, then Newton polish using the exact V_w.  Fully batched."""
    v = np.asarray(v_targets, dtype=float)
    lo = np.full(v.shape, INVERT_BRACKET[0])
    hi = np.full(v.shape, INVERT_BRACKET[1])

    def ends(w, want_vw=False):
        tr = _continue(ab, path_points, w, dt, want_vw=want_vw, store=False)
        return (tr.end_V, tr.end_Vw) if want_vw else (tr.end_V, None)

    v_lo, _ = ends(lo)
    v_hi, _ = ends(hi)
    if np.any(v < v_lo) or np.any(v > v_hi):
        bad = np.argwhere((np.atleast_1d(v) < np.atleast_1d(v_lo))
                          | (np.atleast_1d(v) > np.atleast_1d(v_hi)))
        raise BracketingError(
            f"target speed outside the reachable range "
            f"[{float(np.min(v_lo)):.3e}, {float(np.max(v_hi)):.3e}] for "
            f"bracket w in {INVERT_BRACKET} (first bad target index "
            f"{tuple(bad[0])})")
    for _ in range(INVERT_BISECTIONS):
        mid = np.sqrt(lo * hi)
        v_mid, _ = ends(mid)
        below = v_mid < v
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    w = np.sqrt(lo * hi)
    vw_end = None
    for _ in range(INVERT_NEWTON):
        v_cur, vw_end = ends(w, want_vw=True)
        if np.max(np.abs(v_cur - v)) <= 1e-13 * max(1.0, float(np.max(v))):
            break
        step = (v_cur - v) / vw_end
        w_new = w - step
        w = np.where(w_new > 0.0, w_new, w)
    return w, vw_end


def invert_V(ab, path_factory, x, v, dt=1e-3):
    """w with |V(x, w) - v| below solver tolerance, along the canonical
    path from the base point to x.  This is the global scalar W(x, v)
    under the normalization W(base, v) = v."""
    if np.any(np.asarray(v, dtype=float) <= 0.0):
        raise PositivityError(f"target speed must be positive, got {v}")
    path = path_factory(np.asarray(x, dtype=float))
    w, _ = _invert_on_path(ab, path, v, dt)
    if np.ndim(v) == 0:
        return float(w)
    return w


# --- f-norm ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdmissibleF:
    """Positive weight f(v) with user-declared divergence of the
    antiderivative of 1/f at both ends of the positive axis.  Positivity
    is spot-checked on a log grid; the divergence claims are analytic
    declarations that cannot be verified numerically."""

    f: FieldExpr
    diverges_at_zero: bool = True
    diverges_at_infinity: bool = True

    def __post_init__(self):
        extra = set(self.f.free_vars) - {"v"}
        if extra:
            raise PositivityError(
                f"f must be a function of v only, found {sorted(extra)}")
        v = np.logspace(-6, 6, 25)
        vals = taylor_eval(self.f, {"v": v}, (), order=0)[0]
        vals = np.broadcast_to(vals, v.shape)
        if np.any(~np.isfinite(vals)) or np.any(vals <= 0.0):
            bad = int(np.argmax(~((vals > 0.0) & np.isfinite(vals))))
            raise PositivityError(
                f"f is not positive at v={v[bad]:.3e}")

    def values(self, v):
        return np.broadcast_to(
            taylor_eval(self.f, {"v": np.asarray(v, dtype=float)},
                        (), order=0)[0], np.shape(v))


@dataclass(frozen=True)
class FNormEstimate:
    value: float
    argmax_x: tuple
    argmax_v: float
    boundary_suspicion: bool


def f_norm_estimate(ab, f: AdmissibleF, m: MetricSpec, x_grid, v_grid) \
        -> FNormEstimate:
    """Grid maximum of |b|_g / f(v): an explicit lower bound for the
    supremum over all states.  When the maximizer sits at a v-grid edge
    and strictly dominates the interior, the estimate is flagged as a
    divergence suspicion."""
    x = np.asarray(x_grid, dtype=float)
    v = np.asarray(v_grid, dtype=float)
    if x.size == 0 or v.size == 0:
        raise PositivityError("f-norm estimation needs nonempty grids")
    b = ab.b_values(x[:, None, :], v[None, :])          # (M, K, n)
    ginv = inverse_metric_at(m, x)                       # (M, n, n)
    norm_b = np.sqrt(np.einsum("mki,mij,mkj->mk", b, ginv, b))
    ratio = norm_b / f.values(v)[None, :]
    flat = int(np.argmax(ratio))
    mi, ki = np.unravel_index(flat, ratio.shape)
    value = float(ratio[mi, ki])
    suspicion = False
    if len(v) >= 3 and ki in (0, len(v) - 1):
        interior = float(np.max(ratio[:, 1:-1]))
        suspicion = value > interior * (1.0 + 1e-9)
    return FNormEstimate(value, tuple(float(c) for c in x[mi]),
                         float(v[ki]), suspicion)


# --- finite-difference weights on arbitrary nodes --------------------------------------

def fd_weights(z, nodes, order=1):
    """Weights for the `order`-th derivative at z from the given nodes
    (Fornberg recursion); exact on polynomials up to len(nodes)-1."""
    x = np.asarray(nodes, dtype=float)
    n = len(x)
    c = np.zeros((n, order + 1))
    c1 = 1.0
    c4 = x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def _table_derivatives(w, rho):
    """Derivative of the table at each node: fourth-order stencils (five
    points, centered where possible, one-sided at the edges)."""
    n = len(w)
    width = min(5, n)
    out = np.empty(n)
    for i in range(n):
        lo = min(max(i - width // 2, 0), n - width)
        weights = fd_weights(w[i], w[lo:lo + width])
        out[i] = float(weights @ rho[lo:lo + width])
    return out


# --- monodromy maps ----------------------------------------------------------------------

@dataclass(eq=False)
class MonodromyMap:
    """Sampled map of the continuation parameter induced by a deck word,
    with a monotone interpolant.  Strictly increasing and positive."""

    word: str
    w: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if np.any(self.rho <= 0.0):
            raise TableError("monodromy values must be positive")
        if np.any(np.diff(self.w) <= 0.0) or np.any(np.diff(self.rho) <= 0.0):
            raise TableError("monodromy table must be strictly increasing")
        self._interp = PchipInterpolator(self.w, self.rho, extrapolate=False)
        self._dtable = _table_derivatives(self.w, self.rho)
        self._dinterp = PchipInterpolator(self.w, self._dtable,
                                          extrapolate=False)

    def _check_range(self, w):
        w = np.asarray(w, dtype=float)
        if np.any(w < self.w[0] * (1 - 1e-12)) \
                or np.any(w > self.w[-1] * (1 + 1e-12)):
            raise TableError(
                f"argument outside the sampled range "
                f"[{self.w[0]:.6g}, {self.w[-1]:.6g}]")
        return np.clip(w, self.w[0], self.w[-1])

    def __call__(self, w):
        out = self._interp(self._check_range(w))
        return float(out) if np.ndim(w) == 0 else out

    def derivative(self, w):
        out = self._dinterp(self._check_range(w))
        return float(out) if np.ndim(w) == 0 else out

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y < self.rho[0] * (1 - 1e-12)) \
                or np.any(y > self.rho[-1] * (1 + 1e-12)):
            raise TableError(
                f"value outside the sampled image "
                f"[{self.rho[0]:.6g}, {self.rho[-1]:.6g}]")
        y = np.clip(y, self.rho[0], self.rho[-1])
        lo = np.full(y.shape, self.w[0])
        hi = np.full(y.shape, self.w[-1])
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self._interp(mid) < y
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        w = 0.5 * (lo + hi)
        for _ in range(3):
            w = np.clip(w - (self._interp(w) - y) / self._dinterp(w),
                        self.w[0], self.w[-1])
        return float(w) if np.ndim(y) == 0 else w


def monodromy(ab, manifold: CoveringManifold, word, p0, w_grid,
              dt=1e-3) -> MonodromyMap:
    """Map rho with W(g(p), v) = rho(W(p, v)) for the deck word g.

    Realized through the global scalar: rho(w) = W(g(p0), w), computed by
    inverting the continuation from p0 along the straight cover path.
    The covector data must be invariant under the deck word (spot-checked
    to 1e-12)."""
    p0 = np.asarray(p0, dtype=float)
    w_grid = np.asarray(w_grid, dtype=float)
    if np.any(np.diff(w_grid) <= 0.0) or np.any(w_grid <= 0.0):
        raise TableError("w grid must be positive and increasing")
    target = deck_apply(manifold, word, p0)
    _check_deck_invariance(ab, manifold, word, p0)
    factory = straight_path_factory(p0)
    word_str = word if isinstance(word, str) else str(word)
    rho = invert_V(ab, factory, target, w_grid, dt=dt)
    return MonodromyMap(word_str, w_grid, np.atleast_1d(rho))


def _check_deck_invariance(ab, manifold, word, p0, tol=1e-12):
    n = manifold.metric.dimension
    offsets = np.concatenate([np.zeros((1, n)), np.eye(n) * 0.37,
                              np.full((1, n), -0.51)])
    pts = p0[None, :] + offsets
    moved = deck_apply(manifold, word, pts)
    for v in (0.5, 1.0, 2.3):
        b0 = ab.b_values(pts, v)
        b1 = ab.b_values(moved, v)
        err = float(np.max(np.abs(b1 - b0)))
        if err > tol:
            raise DeckInvarianceError(
                f"covector data is not invariant under deck word "
                f"'{word}' (max deviation {err:.3e} at v={v})")


# --- gauge transformations ------------------------------------------------------------

class ClosedFormRho:
    """Reparametrization of the positive axis given in closed form; exact
    derivatives via the expression jets, inverse by bracketed bisection
    plus Newton."""

    def __init__(self, expr: FieldExpr):
        extra = set(expr.free_vars) - {"w"}
        if extra:
            raise TableError(
                f"rho must be a function of w only, found {sorted(extra)}")
        self.expr = expr

    def __call__(self, w):
        val = taylor_eval(self.expr, {"w": np.asarray(w, dtype=float)},
                          (), order=0)[0]
        out = np.broadcast_to(val, np.shape(w))
        return float(out) if np.ndim(w) == 0 else out.copy()

    def derivative(self, w):
        val, grad, _ = taylor_eval(self.expr,
                                   {"w": np.asarray(w, dtype=float)},
                                   ("w",), order=1)
        out = np.broadcast_to(grad[..., 0], np.shape(w))
        return float(out) if np.ndim(w) == 0 else out.copy()

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        lo = np.full(y.shape, INVERT_BRACKET[0])
        hi = np.full(y.shape, INVERT_BRACKET[1])
        y_lo, y_hi = self(lo), self(hi)
        if np.any(y < y_lo) or np.any(y > y_hi):
            raise TableError("value outside the invertible range of rho")
        for _ in range(INVERT_BISECTIONS):
            mid = np.sqrt(lo * hi)
            below = np.asarray(self(mid)) < y
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        w = np.sqrt(lo * hi)
        for _ in range(INVERT_NEWTON):
            resid = np.asarray(self(w)) - y
            if np.max(np.abs(resid)) <= 1e-14 * max(1.0, float(np.max(np.abs(y)))):
                break
            w_new = w - resid / np.asarray(self.derivative(w))
            w = np.where(w_new > 0.0, w_new, w)
        return float(w) if np.ndim(y) == 0 else w


@dataclass(eq=False)
class TransformedHW:
    """Gauge-transformed pair: W' = rho(W), h'(w) = h(rho^-1(w)) *
    rho'(rho^-1(w)).  Exposes the same evaluation surface as `HWPair`,
    so forces evaluate through it unchanged."""

    base: object  # HWPair-like
    rho: object   # MonodromyMap | ClosedFormRho

    @property
    def dimension(self):
        return self.base.dimension

    def w_jet1(self, x, v):
        W, wx, wv = self.base.w_jet1(x, v)
        r = np.asarray(self.rho(W))
        rp = np.asarray(self.rho.derivative(W))
        return r, rp[..., None] * wx, rp * wv

    def h_val(self, w):
        y = self.rho.inverse(w)
        return np.asarray(self.base.h_val(y)) * np.asarray(
            self.rho.derivative(y))


def gauge_transform(hw, rho) -> TransformedHW:
    """Transformed (h', W') evaluators for a monodromy map or closed-form
    reparametrization; leaves the force field unchanged."""
    if isinstance(rho, FieldExpr):
        rho = ClosedFormRho(rho)
    if not (hasattr(rho, "derivative") and hasattr(rho, "inverse")):
        raise TableError("rho must provide value, derivative and inverse")
    return TransformedHW(hw, rho)


# --- extraction of h ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExtractedH:
    v: np.ndarray
    h: np.ndarray
    consistency_defect: float
    check_points: tuple


def extract_h(ab, p0, v_grid, dt=1e-2, check_points=None,
              residual_tol=1e-6):
    """One-variable factor h sampled on v_grid, under the normalization
    W(p0, v) = v (which makes h(v) the value of a at the base point).

    Requires (a, b) to satisfy the closedness and normalizing equations
    (spot-checked).  Consistency of the extraction away from the base
    point - the product a * W_v must equal h(W) everywhere - is verified
    at a handful of chart points through the continuation machinery, and
    the maximal defect is reported."""
    p0 = np.asarray(p0, dtype=float)
    v_grid = np.asarray(v_grid, dtype=float)
    n = ab.dimension

    spots = p0[None, :] + np.concatenate(
        [np.zeros((1, n)), 0.4 * np.eye(n), -0.3 * np.eye(n)])
    v_spots = np.array([0.7, 1.0, 1.9])
    closed = closedness_residual(ab, spots[:, None, :], v_spots[None, :])
    normal = normalizing_residual(ab, spots[:, None, :], v_spots[None, :])
    worst = max(float(np.max(np.abs(closed))), float(np.max(np.abs(normal))))
    if worst > residual_tol:
        raise CompatibilityError(
            f"(a, b) violates the defining equations (residual {worst:.3e} "
            f"> {residual_tol:.1e}); the factor h is ill-defined")

    h_vals = np.broadcast_to(ab.a_values(p0, v_grid), v_grid.shape).copy()

    if check_points is None:
        check_points = [tuple(p0 + 0.5 * np.eye(n)[i]) for i in range(n)]
        check_points.append(tuple(p0 + np.array(
            [1.0, 0.5, 0.25, 0.125][:n])))
    v_sub = v_grid[:: max(1, len(v_grid) // 4)]
    paths = np.stack([np.stack([p0, np.asarray(p, dtype=float)])
                      for p in check_points])          # (P, 2, n)
    targets = np.broadcast_to(v_sub, (len(check_points), len(v_sub))).copy()
    w, vw_end = _invert_on_path(ab, paths, targets, dt)
    a_there = ab.a_values(paths[:, 1, :][:, None, :], targets)
    product = a_there / vw_end                        # a * W_v with W_v = 1/V_w
    h_at_w = ab.a_values(p0, w)
    defect = float(np.max(np.abs(product - h_at_w)))
    return ExtractedH(v_grid, h_vals, defect, tuple(check_points))
