"""Continuation, inversion, f-norms, monodromy, gauge maps, h extraction."""

import math

import numpy as np
import pytest

from normalshift.errors import (
    BracketingError,
    CompatibilityError,
    ContinuationError,
    DeckInvarianceError,
    PathError,
    PositivityError,
    TableError,
)
from normalshift.expr import parse
from normalshift.fields import ABFields, DerivedAB, HWPair, force_hw
from normalshift.geometry import CoveringManifold, MetricSpec
from normalshift.pfaff import (
    AdmissibleF,
    ClosedFormRho,
    MonodromyMap,
    PathSpec,
    Vw_along_path,
    continue_V,
    extract_h,
    f_norm_estimate,
    fd_weights,
    gauge_transform,
    invert_V,
    monodromy,
    path_independence_defect,
    straight_path_factory,
)

EUC2 = MetricSpec(2)


def ab(a, b):
    return ABFields(parse(a), tuple(parse(c) for c in b))


def hw(W, h="1", n=2):
    return HWPair(parse(W), parse(h), n)


DECAY = ab("1", ("-0.5*v", "0"))            # db/dx closed, linear in v
ZERO_B = ab("1", ("0", "0"))
CURL = ab("1", ("x2", "0"))                  # not closed

UNIT_SEG = PathSpec.polyline([(0.0, 0.0), (1.0, 0.0)])


# --- continuation ------------------------------------------------------------------

def test_continue_trivial_for_zero_b():
    tr = continue_V(ZERO_B, UNIT_SEG, 2.5, dt=1e-2)
    assert np.max(np.abs(tr.V - 2.5)) == 0.0


def test_continue_closed_form_decay():
    # dV/ds = -V/2 along x1 from 0 to 1:  V(1) = w0 exp(-1/2)
    tr = continue_V(DECAY, UNIT_SEG, 2.0, dt=1e-3)
    assert tr.end_V == pytest.approx(2.0 * math.exp(-0.5), rel=1e-10)


def test_continue_reversal_returns_datum():
    there = continue_V(DECAY, UNIT_SEG, 1.3, dt=1e-3).end_V
    back = continue_V(DECAY, UNIT_SEG.reversed(), there, dt=1e-3).end_V
    assert back == pytest.approx(1.3, abs=1e-10)


def test_continue_rk4_order():
    exact = 1.0 * math.exp(-0.5)
    errs = []
    for dt in (0.25, 0.125, 0.0625):
        errs.append(abs(continue_V(DECAY, UNIT_SEG, 1.0, dt=dt).end_V - exact))
    order1 = math.log2(errs[0] / errs[1])
    order2 = math.log2(errs[1] / errs[2])
    assert 3.7 <= order1 <= 4.3
    assert 3.7 <= order2 <= 4.3


def test_continue_batch_of_data():
    w0 = np.array([0.5, 1.0, 2.0, 4.0])
    tr = continue_V(DECAY, UNIT_SEG, w0, dt=1e-3)
    assert tr.end_V == pytest.approx(w0 * math.exp(-0.5), rel=1e-9)


def test_continue_parametric_path():
    # quarter circle from (1,0) to (0,1): integral of b.dx = -0.5 * dx1
    path = PathSpec.parametric([parse("cos(t)"), parse("sin(t)")],
                               0.0, math.pi / 2, samples=32)
    tr = continue_V(DECAY, path, 1.0, dt=1e-3)
    assert tr.end_V == pytest.approx(math.exp(0.5), rel=1e-8)


def test_continuation_leaves_domain():
    # dV/ds = -1/(2V): V^2 = w0^2 - s hits zero before s = 1 for w0 = 0.8
    sink = ab("1", ("-0.5/v", "0"))
    with pytest.raises(ContinuationError):
        continue_V(sink, UNIT_SEG, 0.8, dt=1e-3)


def test_degenerate_point_path():
    factory = straight_path_factory((0.0, 0.0))
    tr = continue_V(DECAY, factory(np.zeros(2)), 1.7, dt=1e-3)
    assert tr.end_V == 1.7


def test_path_validation():
    with pytest.raises(PathError):
        PathSpec.polyline([(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)])
    with pytest.raises(PathError):
        # overflows to inf within the sampled interval
        PathSpec.parametric([parse("exp(1000*t)"), parse("0")], 0.0, 1.0)
    with pytest.raises(PathError):
        PathSpec.parametric([parse("t"), parse("0")], 1.0, 0.0)


# --- the datum derivative -----------------------------------------------------------

def test_vw_trivial_and_closed_form():
    tr0 = Vw_along_path(ZERO_B, UNIT_SEG, 1.0, dt=1e-2)
    assert np.max(np.abs(tr0.Vw - 1.0)) == 0.0
    tr = Vw_along_path(DECAY, UNIT_SEG, 1.0, dt=1e-3)
    assert tr.end_Vw == pytest.approx(math.exp(-0.5), rel=1e-10)
    assert np.all(tr.Vw > 0.0)


def test_vw_matches_finite_differences():
    eps = 1e-5
    w0 = 1.2
    pair = hw("v*exp(0.4*x1-0.3*x2)")
    derived = DerivedAB(pair)
    path = PathSpec.polyline([(0.0, 0.0), (0.8, 0.5)])
    tr = Vw_along_path(derived, path, w0, dt=2e-3)
    up = continue_V(derived, path, w0 + eps, dt=2e-3).end_V
    dn = continue_V(derived, path, w0 - eps, dt=2e-3).end_V
    fd = (up - dn) / (2 * eps)
    assert tr.end_Vw == pytest.approx(fd, rel=1e-5)


# --- path independence ----------------------------------------------------------------

def test_path_independence_closed_b():
    derived = DerivedAB(hw("v*exp(0.5*x1)"))
    l1 = PathSpec.polyline([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)])
    l2 = PathSpec.polyline([(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)])
    assert path_independence_defect(derived, l1, l2, 1.0, dt=1e-3) < 1e-8


def test_path_dependence_of_curl():
    direct = PathSpec.polyline([(0.0, 0.0), (1.0, 1.0)])
    detour = PathSpec.polyline([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)])
    # direct integrates x2 dx1 = 1/2; the detour gives 0
    d = path_independence_defect(CURL, direct, detour, 1.0, dt=1e-3)
    assert d == pytest.approx(0.5, abs=1e-10)
    assert d > 1e-3


def test_path_independence_requires_shared_endpoints():
    p1 = PathSpec.polyline([(0.0, 0.0), (1.0, 0.0)])
    p2 = PathSpec.polyline([(0.0, 0.0), (0.0, 1.0)])
    with pytest.raises(PathError):
        path_independence_defect(ZERO_B, p1, p2, 1.0)


# --- inversion --------------------------------------------------------------------------

def test_invert_at_base_point_is_identity():
    factory = straight_path_factory((0.0, 0.0))
    for v in (0.3, 1.0, 7.5):
        assert invert_V(DECAY, factory, (0.0, 0.0), v) == pytest.approx(
            v, abs=1e-10)


def test_invert_closed_form():
    # W(x, v) = v e^{x1/2}; at x = (1, 0), v = 1: w = e^{1/2}
    derived = DerivedAB(hw("v*exp(0.5*x1)"))
    factory = straight_path_factory((0.0, 0.0))
    w = invert_V(derived, factory, (1.0, 0.0), 1.0, dt=2e-3)
    assert w == pytest.approx(math.exp(0.5), rel=1e-9)


def test_invert_round_trip():
    derived = DerivedAB(hw("v*exp(0.5*x1)"))
    factory = straight_path_factory((0.0, 0.0))
    x = (0.7, -0.3)
    v_reached = continue_V(derived, factory(np.asarray(x)), 1.4,
                           dt=2e-3).end_V
    w = invert_V(derived, factory, x, float(v_reached), dt=2e-3)
    assert w == pytest.approx(1.4, abs=1e-9)


def test_invert_bracket_failure():
    factory = straight_path_factory((0.0, 0.0))
    with pytest.raises(BracketingError):
        invert_V(ZERO_B, factory, (1.0, 0.0), 1e12)


def test_foliation_monotone_in_datum():
    derived = DerivedAB(hw("v*exp(0.5*x1-0.2*x2)"))
    path = PathSpec.polyline([(0.0, 0.0), (0.9, 0.7)])
    w = np.array([0.5, 0.8, 1.0, 1.5, 3.0])
    ends = continue_V(derived, path, w, dt=1e-3).end_V
    assert np.all(np.diff(ends) > 0.0)


# --- f-norm ----------------------------------------------------------------------------

def test_fnorm_zero_field():
    est = f_norm_estimate(ZERO_B, AdmissibleF(parse("v")), EUC2,
                          [(0.0, 0.0), (1.0, 1.0)], [0.5, 1.0, 2.0])
    assert est.value == 0.0


def test_fnorm_constant_ratio_exact():
    grid_x = [(x1, x2) for x1 in (-1.0, 0.0, 1.0) for x2 in (-1.0, 1.0)]
    est = f_norm_estimate(DECAY, AdmissibleF(parse("v")), EUC2,
                          grid_x, np.linspace(0.5, 3.0, 7))
    assert est.value == 0.5
    assert not est.boundary_suspicion


def test_fnorm_boundary_suspicion():
    est = f_norm_estimate(DECAY, AdmissibleF(parse("v*v")), EUC2,
                          [(0.0, 0.0)], np.linspace(0.1, 2.0, 9))
    assert est.value == pytest.approx(0.5 / 0.1)
    assert est.argmax_v == pytest.approx(0.1)
    assert est.boundary_suspicion


def test_admissible_f_requires_positive():
    with pytest.raises(PositivityError):
        AdmissibleF(parse("v-1"))


# --- monodromy ---------------------------------------------------------------------------

CYL = CoveringManifold(EUC2, ((2 * math.pi, 0.0),))
W_GRID = np.logspace(-1, 1, 10)


@pytest.fixture(scope="module")
def rho_g1():
    return monodromy(DECAY, CYL, "g1", (0.0, 0.0), W_GRID, dt=1e-2)


def test_monodromy_identity_for_zero_b():
    rho = monodromy(ZERO_B, CYL, "g1", (0.0, 0.0), W_GRID, dt=1e-2)
    assert np.max(np.abs(rho.rho - W_GRID)) < 1e-10


def test_monodromy_cylinder_closed_form(rho_g1):
    # W(x, v) = v e^{x1/2}; the deck shift by 2*pi multiplies w by e^{pi}
    assert rho_g1.rho / W_GRID == pytest.approx(
        np.full(10, math.exp(math.pi)), rel=1e-6)


def test_monodromy_forward_route_agrees(rho_g1):
    # independent route: continue the datum from p0 to the inverse-shifted
    # point; uniqueness of the continuation gives the same map
    path = PathSpec.polyline([(0.0, 0.0), (-2 * math.pi, 0.0)])
    forward = continue_V(DECAY, path, W_GRID, dt=1e-3).end_V
    assert rho_g1.rho == pytest.approx(forward, rel=1e-7)


def test_monodromy_word_composition(rho_g1):
    rho2 = monodromy(DECAY, CYL, "g1 g1", (0.0, 0.0), W_GRID, dt=1e-2)
    # compose the sampled map with itself where the image stays in range
    inside = W_GRID[rho_g1.rho <= W_GRID[-1]]
    assert len(inside) >= 3
    composed = rho_g1(rho_g1(inside))
    assert composed == pytest.approx(rho2(inside), rel=1e-8, abs=1e-8)


def test_monodromy_empty_word_identity():
    rho = monodromy(DECAY, CYL, "", (0.0, 0.0), W_GRID, dt=1e-2)
    assert np.max(np.abs(rho.rho - W_GRID)) < 1e-10


def test_monodromy_strictly_increasing_and_positive(rho_g1):
    assert np.all(rho_g1.rho > 0.0)
    assert np.all(np.diff(rho_g1.rho) > 0.0)


def test_monodromy_mixed_word_on_torus():
    # two commuting deck translations: the monodromy of a mixed word agrees
    # with the composition of the generator maps in either order
    torus = CoveringManifold(EUC2, ((2 * math.pi, 0.0), (0.0, 2 * math.pi)))
    data = ab("1", ("-0.5*v", "-0.25*v"))  # closed, invariant under both
    w = np.logspace(-2, -1, 5)
    # generator maps sampled over a grid wide enough to hold the images
    wide = np.logspace(-2, 1, 9)
    rho1 = monodromy(data, torus, "g1", (0.0, 0.0), wide, dt=2e-2)
    rho2 = monodromy(data, torus, "g2", (0.0, 0.0), wide, dt=2e-2)
    mixed = monodromy(data, torus, "g1 g2", (0.0, 0.0), w, dt=2e-2)
    scale = math.exp(1.5 * math.pi)
    assert mixed.rho / w == pytest.approx(np.full(5, scale), rel=1e-7)
    assert rho2(rho1(w)) == pytest.approx(mixed.rho, rel=1e-7)
    assert rho1(rho2(w)) == pytest.approx(mixed.rho, rel=1e-7)


def test_monodromy_requires_deck_invariant_b():
    drift = ab("1", ("-0.1*x1*v", "0"))  # not periodic in x1
    with pytest.raises(DeckInvarianceError):
        monodromy(drift, CYL, "g1", (0.0, 0.0), W_GRID)


def test_monodromy_map_table_validation():
    with pytest.raises(TableError):
        MonodromyMap("g1", np.array([1.0, 2.0]), np.array([2.0, 1.0]))
    with pytest.raises(TableError):
        MonodromyMap("g1", np.array([1.0, 2.0]), np.array([-1.0, 1.0]))
    good = MonodromyMap("g1", np.array([1.0, 2.0, 4.0]),
                        np.array([2.0, 4.0, 8.0]))
    with pytest.raises(TableError):
        good(8.0)


# --- gauge transformations ------------------------------------------------------------

def test_gauge_identity():
    pair = hw("v*exp(0.5*x1)")
    same = gauge_transform(pair, parse("w"))
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(10, 2))
    xd = rng.uniform(0.3, 1.5, size=(10, 2))
    assert force_hw(same, EUC2, x, xd) == pytest.approx(
        force_hw(pair, EUC2, x, xd), abs=1e-14)


def test_gauge_scaling_leaves_force_unchanged():
    pair = hw("v*exp(0.5*x1)")
    scale = math.exp(math.pi)
    moved = gauge_transform(pair, parse(f"{scale!r}*w"))
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, size=(20, 2))
    xd = rng.uniform(-1.5, 1.5, size=(20, 2))
    xd[np.linalg.norm(xd, axis=1) < 0.3] += 1.0
    f0 = force_hw(pair, EUC2, x, xd)
    f1 = force_hw(moved, EUC2, x, xd)
    assert np.max(np.abs(f1 - f0)) < 1e-9
    # h' is the constant scale
    assert moved.h_val(2.0) == pytest.approx(scale, rel=1e-12)


def test_gauge_square_map():
    # rho(w) = w^2 on [1, 4]: h'(w) = 2 sqrt(w)
    pair = hw("v")
    moved = gauge_transform(pair, parse("w^2"))
    for w in (1.0, 2.0, 4.0):
        assert moved.h_val(w) == pytest.approx(2.0 * math.sqrt(w), rel=1e-10)
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(12, 2))
    xd = rng.uniform(0.5, 2.0, size=(12, 2))
    f0 = force_hw(pair, EUC2, x, xd)
    f1 = force_hw(moved, EUC2, x, xd)
    assert np.max(np.abs(f1 - f0)) < 1e-8


def test_gauge_with_sampled_monodromy_map():
    # a sampled linear map: interpolation and derivative stencils are exact
    w = np.logspace(-2, 2, 17)
    rho = MonodromyMap("g1", w, math.exp(math.pi) * w)
    pair = hw("v*exp(0.5*x1)")
    moved = gauge_transform(pair, rho)
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.5, 0.5, size=(10, 2))
    xd = rng.uniform(0.5, 1.5, size=(10, 2))
    f0 = force_hw(pair, EUC2, x, xd)
    f1 = force_hw(moved, EUC2, x, xd)
    assert np.max(np.abs(f1 - f0)) < 1e-7


def test_closed_form_rho_inverse():
    rho = ClosedFormRho(parse("w^2"))
    assert rho.inverse(9.0) == pytest.approx(3.0, rel=1e-12)


# --- finite-difference weights -----------------------------------------------------------

def test_fd_weights_exact_for_polynomials():
    nodes = np.array([0.1, 0.3, 0.9, 2.0, 5.0])
    w = fd_weights(0.9, nodes)
    for poly, dpoly in [(nodes ** 2, 2 * 0.9), (nodes ** 3, 3 * 0.81),
                        (np.ones_like(nodes), 0.0)]:
        assert w @ poly == pytest.approx(dpoly, abs=1e-10)


# --- extraction of h -----------------------------------------------------------------------

def test_extract_h_trivial():
    out = extract_h(ZERO_B, (0.0, 0.0), np.linspace(0.5, 2.0, 8))
    assert out.h == pytest.approx(np.ones(8), abs=1e-14)
    assert out.consistency_defect < 1e-12


def test_extract_h_round_trip_unit():
    derived = DerivedAB(hw("v*exp(0.5*x1)"))
    out = extract_h(derived, (0.0, 0.0), np.linspace(0.5, 2.0, 20))
    assert out.h == pytest.approx(np.ones(20), abs=1e-8)
    assert out.consistency_defect < 1e-7


def test_extract_h_round_trip_square():
    derived = DerivedAB(hw("v", h="w^2"))
    v = np.linspace(0.5, 2.0, 20)
    out = extract_h(derived, (0.0, 0.0), v)
    assert out.h == pytest.approx(v ** 2, rel=1e-9)


def test_extract_h_rejects_non_normalizing_data():
    with pytest.raises(CompatibilityError):
        extract_h(DECAY, (0.0, 0.0), np.linspace(0.5, 2.0, 5))
