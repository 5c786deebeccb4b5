"""Normal-shift construction on hypersurfaces: solve for the launch-speed
function nu on the surface grid, fire one trajectory per node with initial
velocity nu * (unit normal), and measure how perpendicular the shifted
surfaces stay to the trajectories.

nu is continued from the base node along axis-ordered staircase paths in
the parameter domain (RK4 per grid cell); the same solve with the axis
order reversed audits the compatibility of the continuation, and the
maximal discrepancy is reported on the result.

Orthogonality of a shifted layer is measured against tangents estimated
by finite differences on the node grid, since shifted surfaces have no
closed-form parametrization.  Sixth-order stencils (periodic on closed
axes, skewed at open-axis edges) keep the estimation error well below the
quantity being measured; the t = 0 layer uses the exact parametric
tangents, which do exist there.  A Gram-determinant check monitors grid
collapse instead of assuming the layers stay immersed.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CompatibilityError,
    FrameError,
    IntegrationAborted,
    PathError,
    PositivityError,
)
from .dynamics import integrate_batch
from .fields import ForceField
from .geometry import (
    Hypersurface,
    MetricSpec,
    base_node_index,
    embed_with_tangents,
    grid_axes,
    grid_spacings,
    metric_at,
    surface_grid,
)
from .pfaff import PathSpec, _continue, fd_weights

__all__ = ["NuField", "ShiftFamily", "solve_nu", "normal_shift",
           "orthogonality_defect", "loop_closure_defect",
           "write_shift_family_csv"]


# --- launch-speed field -----------------------------------------------------------

@dataclass(eq=False)
class NuField:
    """Positive launch speeds over the surface node grid, normalized to
    nu0 at the base node; carries the mixed-path compatibility defect."""

    surface: Hypersurface
    values: np.ndarray
    base_index: tuple
    nu0: float
    mixed_path_defect: float

    def __post_init__(self):
        if np.any(self.values <= 0.0):
            raise PositivityError("nu must be positive on the whole grid")


def _nu_sweep_axis(ab, s: Hypersurface, u_fixed, axis, s_values, nu_start,
                   du):
    """Continue nu along one parameter axis through the given node values.

    u_fixed: (..., k) parameter coordinates of the sweeping lanes (the
    axis-coordinate entry is overwritten); s_values: 1-d increasing or
    decreasing node coordinates starting at the current position;
    nu_start: (...,) starting values.  Returns nu at each node of
    s_values[1:], stacked along a new first axis.
    """
    nu = np.array(nu_start, dtype=float)
    u = np.array(u_fixed, dtype=float)
    out = []
    for s0, s1 in zip(s_values[:-1], s_values[1:]):
        span = s1 - s0
        nsub = max(1, int(round(abs(span) / du)))
        h = span / nsub
        for j in range(nsub):
            a = s0 + j * h

            def rate(s_val, nu_cur):
                u[..., axis] = s_val
                x, tau = embed_with_tangents(s, u)
                b = ab.b_values(x, nu_cur)
                return np.einsum("...i,...i->...", b, tau[..., axis, :])

            k1 = rate(a, nu)
            k2 = rate(a + 0.5 * h, nu + 0.5 * h * k1)
            k3 = rate(a + 0.5 * h, nu + 0.5 * h * k2)
            k4 = rate(a + h, nu + h * k3)
            nu = nu + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if np.any(~np.isfinite(nu)) or np.any(nu <= 0.0):
                raise PositivityError(
                    f"nu left the positive axis while sweeping parameter "
                    f"axis {axis + 1} near u_{axis + 1}={a + h:.6g}")
        out.append(nu.copy())
    return out


def _solve_nu_grid(s: Hypersurface, ab, nu0, du, axis_order):
    """Fill the nu grid by sweeping the axes in the given order."""
    axes = grid_axes(s)
    base = base_node_index(s)
    shape = tuple(len(a) for a in axes)
    k = len(shape)
    nu = np.full(shape, np.nan)
    nu[base] = nu0

    filled = [slice(b, b + 1) for b in base]  # region already computed
    for axis in axis_order:
        coords = axes[axis]
        b = base[axis]
        prefix = tuple(filled)
        lane_shape = nu[prefix].shape
        # lanes: every filled node; sweep this axis in both directions
        mesh = np.meshgrid(*[axes[d][fl] for d, fl in enumerate(prefix)],
                           indexing="ij")
        u_lanes = np.stack([m for m in mesh], axis=-1)  # lane_shape + (k,)
        for direction in (+1, -1):
            node_path = coords[b:] if direction > 0 else coords[b::-1]
            if len(node_path) < 2:
                continue
            start = nu[prefix].reshape(lane_shape)
            values = _nu_sweep_axis(ab, s, u_lanes.reshape(lane_shape + (k,)),
                                    axis, node_path, start, du)
            for step, vals in enumerate(values):
                idx = list(prefix)
                idx[axis] = b + direction * (step + 1)
                nu[tuple(idx)] = vals.reshape(nu[tuple(idx)].shape)
        filled[axis] = slice(None)
    return nu


def solve_nu(s: Hypersurface, ab, m: MetricSpec, nu0, du=1e-2,
             compat_tol=1e-6) -> NuField:
    """Launch-speed function on the surface: continue

        d nu / d u^k = sum_i b_i(x(u), nu) * dx^i/du^k

    from nu(base) = nu0 to every grid node along axis-ordered staircase
    paths.  A full re-solve with the axis order reversed audits the
    compatibility; its maximal discrepancy must stay below compat_tol
    (closed covector data and trivial surface loops give ~0)."""
    if nu0 <= 0.0:
        raise PositivityError(f"nu0 must be positive, got {nu0}")
    k = s.n_params
    nu = _solve_nu_grid(s, ab, nu0, du, list(range(k)))
    if k > 1:
        nu_rev = _solve_nu_grid(s, ab, nu0, du, list(range(k))[::-1])
        defect = float(np.max(np.abs(nu - nu_rev)))
    else:
        defect = 0.0
    if defect > compat_tol:
        raise CompatibilityError(
            f"mixed-path continuation defect {defect:.3e} exceeds "
            f"{compat_tol:.1e}: covector data is not closed on the surface, "
            f"or the surface loop carries a nontrivial twist")
    return NuField(s, nu, base_node_index(s), float(nu0), defect)


# --- shift families ------------------------------------------------------------------

@dataclass(eq=False)
class ShiftFamily:
    """Per-node trajectories launched normally from the surface, stored at
    a uniform subgrid of time steps (layer 0 is the initial surface)."""

    surface: Hypersurface
    metric: MetricSpec
    force: ForceField
    nu: NuField
    times: np.ndarray        # (L,)
    x: np.ndarray            # (L,) + grid + (n,)
    xdot: np.ndarray         # (L,) + grid + (n,)
    tangents0: np.ndarray    # grid + (n-1, n): exact tangents of layer 0
    node_defects: np.ndarray | None = field(default=None)

    @property
    def grid_shape(self):
        return self.x.shape[1:-1]


def _worker_count(max_workers=None):
    if max_workers is not None:
        return max(1, int(max_workers))
    env = os.environ.get("NORMALSHIFT_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def normal_shift(s: Hypersurface, nu: NuField, force: ForceField,
                 m: MetricSpec, t_max, dt, store_every=1,
                 max_workers=None) -> ShiftFamily:
    """Launch one trajectory per grid node with initial state
    (x(u), nu(u) * unit normal) and collect the stored layers.

    Node batches are independent; NORMALSHIFT_THREADS (or max_workers)
    splits them across worker threads without changing any arithmetic,
    and layers are assembled in grid order either way."""
    sg = surface_grid(s, m)
    grid_shape = sg.points.shape[:-1]
    n = s.dimension
    x0 = sg.points.reshape(-1, n)
    xd0 = (nu.values[..., None] * sg.normals).reshape(-1, n)
    workers = _worker_count(max_workers)
    try:
        if workers == 1 or x0.shape[0] < 2 * workers:
            times, xs, xds = integrate_batch(force, m, x0, xd0, t_max, dt,
                                             store_every=store_every)
        else:
            chunks = np.array_split(np.arange(x0.shape[0]), workers)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(integrate_batch, force, m,
                                       x0[c], xd0[c], t_max, dt, store_every)
                           for c in chunks]
                results = [f.result() for f in futures]
            times = results[0][0]
            xs = np.concatenate([r[1] for r in results], axis=1)
            xds = np.concatenate([r[2] for r in results], axis=1)
    except IntegrationAborted as err:
        raise IntegrationAborted(
            f"shift family is partial: {err}", partial=err.partial,
            step=err.step, time=err.time) from err
    layers = xs.shape[0]
    return ShiftFamily(
        s, m, force, nu, times,
        xs.reshape((layers,) + grid_shape + (n,)),
        xds.reshape((layers,) + grid_shape + (n,)),
        sg.tangents,
    )


# --- orthogonality measurement ---------------------------------------------------------

_CENTRAL_7 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0


def _derivative_matrix(m_nodes, spacing):
    """Dense one-axis differentiation matrix on a uniform open grid:
    seven-point interior stencils, skewed near the edges."""
    width = min(7, m_nodes)
    d = np.zeros((m_nodes, m_nodes))
    idx = np.arange(m_nodes, dtype=float)
    for i in range(m_nodes):
        lo = min(max(i - width // 2, 0), m_nodes - width)
        d[i, lo:lo + width] = fd_weights(idx[i], idx[lo:lo + width])
    return d / spacing


def _axis_tangents(layer_x, axis, closed, spacing):
    if closed:
        if layer_x.shape[axis] >= 7:
            shifts, weights = range(-3, 4), _CENTRAL_7
        else:  # coarse closed axis: second-order periodic fallback
            shifts, weights = (-1, 0, 1), np.array([-0.5, 0.0, 0.5])
        total = np.zeros_like(layer_x)
        for shift, wgt in zip(shifts, weights):
            if wgt != 0.0:
                total += wgt * np.roll(layer_x, -shift, axis=axis)
        return total / spacing
    dmat = _derivative_matrix(layer_x.shape[axis], spacing)
    moved = np.moveaxis(layer_x, axis, 0)
    return np.moveaxis(np.tensordot(dmat, moved, axes=(1, 0)), 0, axis)


def orthogonality_defect(fam: ShiftFamily) -> np.ndarray:
    """Per-layer maximum of |g(xdot, tau)| / (|xdot|_g |tau|_g) over nodes
    and tangent directions: the figure of merit for normality.

    Caches the per-(node, layer) defect field on the family for CSV
    output, and raises on grid collapse (degenerate Gram determinant)."""
    s = fam.surface
    k = s.n_params
    spacings = grid_spacings(s)
    per_layer = np.zeros(len(fam.times))
    fields = np.zeros((len(fam.times),) + fam.grid_shape)
    for li in range(len(fam.times)):
        xl = fam.x[li]
        xdl = fam.xdot[li]
        g = metric_at(fam.metric, xl)
        xd_low = np.einsum("...ij,...j->...i", g, xdl)
        speed = np.sqrt(np.einsum("...i,...i->...", xdl, xd_low))
        taus = []
        for axis in range(k):
            if li == 0:
                tau = fam.tangents0[..., axis, :]
            else:
                tau = _axis_tangents(xl, axis, s.closed[axis],
                                     spacings[axis])
            taus.append(tau)
            norm_tau = np.sqrt(np.einsum("...i,...ij,...j->...", tau, g, tau))
            defect = np.abs(np.einsum("...i,...i->...", xd_low, tau)) \
                / (speed * norm_tau)
            fields[li] = np.maximum(fields[li], defect)
        tau_stack = np.stack(taus, axis=-2)
        gram = np.einsum("...ki,...ij,...lj->...kl", tau_stack, g, tau_stack)
        det = np.linalg.det(gram)
        if np.any(det <= 1e-10):
            bad = np.unravel_index(int(np.argmax(det <= 1e-10)), det.shape)
            raise FrameError(
                f"shifted layer {li} (t={fam.times[li]:.6g}) degenerates at "
                f"node {bad}: Gram determinant {float(det[bad]):.3e}")
        per_layer[li] = float(np.max(fields[li]))
    fam.node_defects = fields
    return per_layer


# --- closure around loops ----------------------------------------------------------------

def loop_closure_defect(loop: PathSpec, ab, nu0, dt=1e-3, manifold=None):
    """|nu_end - nu0| after continuing the launch-speed equation once
    around a loop (closed in the chart, or closed up to a deck translation
    when a covering manifold is supplied)."""
    if nu0 <= 0.0:
        raise PositivityError(f"nu0 must be positive, got {nu0}")
    if manifold is not None:
        gap = loop.end() - loop.start()
        gens = np.asarray(manifold.deck_generators, dtype=float)
        if len(gens):
            coeff, *_ = np.linalg.lstsq(gens.T, gap, rcond=None)
            resid = gap - gens.T @ np.round(coeff)
            if np.max(np.abs(resid)) > 1e-9:
                raise PathError(
                    "loop endpoints do not differ by a deck translation")
        elif np.max(np.abs(gap)) > 1e-9:
            raise PathError("loop is not closed in the chart")
    end = _continue(ab, loop, nu0, dt, want_vw=False, store=False).end_V
    return float(np.abs(end - nu0))


# --- output ---------------------------------------------------------------------------------

def write_shift_family_csv(path, fam: ShiftFamily):
    """One row per (node, stored time): node indices, t, position,
    velocity, nu, and the node's orthogonality defect."""
    if fam.node_defects is None:
        orthogonality_defect(fam)
    k = fam.surface.n_params
    n = fam.surface.dimension
    header = ([f"i{j + 1}" for j in range(k)] + ["t"]
              + [f"x{i + 1}" for i in range(n)]
              + [f"xdot{i + 1}" for i in range(n)] + ["nu", "defect"])
    grid_shape = fam.grid_shape
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for li, t in enumerate(fam.times):
            for flat in range(int(np.prod(grid_shape))):
                node = np.unravel_index(flat, grid_shape)
                row = ([float(i) for i in node] + [float(t)]
                       + list(fam.x[(li,) + node])
                       + list(fam.xdot[(li,) + node])
                       + [float(fam.nu.values[node]),
                          float(fam.node_defects[(li,) + node])])
                fh.write(",".join(
                    f"{int(val)}" if j < k else f"{val:.17g}"
                    for j, val in enumerate(row)) + "\n")
