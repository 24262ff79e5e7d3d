"""Escape-function construction: constants, cutoffs, tubes, certificates."""

import math

import numpy as np
import pytest

from nontrap import escape as esc
from nontrap import flow as fl
from nontrap import geometry as geo
from nontrap.errors import ConfigurationError, ConstructionError, IntegrationError


@pytest.fixture(scope="module")
def escape_free(free_1d):
    return esc.assemble_escape(free_1d, 0.2)


@pytest.fixture(scope="module")
def escape_longrange(longrange_1d):
    return esc.assemble_escape(longrange_1d, 0.2)


@pytest.fixture(scope="module")
def report_free(escape_free):
    return esc.verify_proposition(escape_free, n_x=300, n_interior=40, n_energy=16)


@pytest.fixture(scope="module")
def report_longrange(escape_longrange):
    return esc.verify_proposition(escape_longrange, n_x=300, n_interior=40, n_energy=16)


# -- boundary constants ------------------------------------------------------

def test_boundary_constants_free(free_1d):
    c = esc.boundary_constants(free_1d)
    assert c.M == 0.0
    assert c.x0 == pytest.approx(min(1.0 / 6.0, c.c1 / 2.0, c.eps1))
    assert c.delta1 == pytest.approx(1.25 * free_1d.delta)
    assert c.c0 > 0


def test_boundary_constants_free_2d(free_2d):
    c = esc.boundary_constants(free_2d)
    # on the shell the angular energy at |tau| < 7/8 is >= 1 - (7/8)^2
    exact = 15.0 / 64.0
    assert c.c1 <= exact + 1e-9
    assert c.c1 >= exact - c.delta1 - 0.03


def test_boundary_constants_refinement_stability():
    model = geo.build_model(
        {"dimension": 2, "potential": "longrange_pow", "amplitude": 0.5, "gamma": 1.0}
    )
    c1 = esc.boundary_constants(model, refine=1)
    c2 = esc.boundary_constants(model, refine=2)
    assert abs(c2.M - c1.M) <= 0.25 * max(c1.M, 1e-12)
    assert c2.x0 == pytest.approx(c1.x0, rel=0.25)


# -- cutoffs -----------------------------------------------------------------

def test_cutoff_values():
    cut = esc.build_cutoffs(1.0, 15.0 / 64.0, 0.25)
    assert cut.chi_minus(0.2) == 0.0
    assert cut.chi_minus(0.9) == 1.0
    assert cut.chi_plus(-0.9) == 1.0
    assert cut.chi_plus(0.0) == 0.0
    assert cut.rho(0.3) == 1.0
    assert cut.rho(1.1) == 0.0
    assert cut.psi(1.0) == 1.0
    assert cut.psi(0.7) == 0.0 and cut.psi(1.3) == 0.0


def test_cutoff_partial_slope_inequality():
    cut = esc.build_cutoffs(1.0, 15.0 / 64.0, 0.25)
    assert esc.partial_slope_margin(cut) >= 0.0
    assert cut.chi_partial(-0.75) > 0.0
    # supported in (-7/8, 7/8)
    assert cut.chi_partial(-0.88) == 0.0
    assert cut.chi_partial(0.88) == 0.0


def test_cutoff_monotonicity():
    cut = esc.build_cutoffs(1.0, 0.2, 0.1)
    t = np.linspace(-2, 2, 801)
    assert np.all(cut.chi_minus.d(t) >= 0)
    assert np.all(cut.chi_plus.d(t) <= 0)
    s = np.linspace(0, 2, 401)
    assert np.all(cut.rho.d(s) <= 0)


def test_cutoff_slope_overflow_guard():
    with pytest.raises(ConstructionError):
        esc.build_cutoffs(1.0, 1e-3, 0.1)


# -- boundary pieces ---------------------------------------------------------

def _demo_setup():
    model = geo.preset_model("zero", delta=0.5)
    consts = esc.BoundaryConstants(M=0.0, M_f=0.0, c1=0.4, eps1=0.5,
                                   x0=1.0 / 6.0, delta1=0.625, c0=1.0)
    cutoffs = esc.build_cutoffs(1.0, consts.c1, 0.5)
    return model, consts, cutoffs


def test_boundary_piece_plateau_value():
    """x = 0.05, tau = 0.9 with all cutoffs at plateau: q_-/psi equals
    x^(-0.2) ~= 1.8206."""
    model, consts, cutoffs = _demo_setup()
    Z, ZETA = np.array([[20.0]]), np.array([[-0.9]])
    val, hpq = esc.eval_boundary_piece("minus", model, consts, cutoffs, 0.2, Z, ZETA)
    assert val[0] == pytest.approx(0.05 ** (-0.2), rel=1e-12)
    assert val[0] == pytest.approx(1.8206, abs=2e-4)
    assert hpq[0] < 0.0
    x = 0.05
    assert -(x ** (-0.8)) * hpq[0] == pytest.approx(0.2 * 2 * 0.9, rel=1e-10)


def test_boundary_piece_flow_finite_difference():
    model, consts, cutoffs = _demo_setup()
    Z, ZETA = np.array([[20.0]]), np.array([[-0.9]])
    val, hpq = esc.eval_boundary_piece("minus", model, consts, cutoffs, 0.2, Z, ZETA)
    d = 1e-6
    Zp, Cp = fl.flow_displace(model, Z, ZETA, d)
    vp, _ = esc.eval_boundary_piece("minus", model, consts, cutoffs, 0.2, Zp, Cp)
    fd = (vp[0] - val[0]) / d
    assert abs(fd - hpq[0]) <= 1e-5 * (1 + abs(hpq[0]))


def test_boundary_piece_outside_support():
    model, consts, cutoffs = _demo_setup()
    Z, ZETA = np.array([[20.0]]), np.array([[0.0]])  # tau = 0
    val, hpq = esc.eval_boundary_piece("minus", model, consts, cutoffs, 0.2, Z, ZETA)
    assert val[0] == 0.0 and hpq[0] == 0.0


def test_boundary_piece_incoming_sign_everywhere(escape_free):
    """x^{-1+eps} H_p q_- <= 0 at every verification grid point."""
    e = escape_free
    Z, ZETA = esc.phase_grid(e.model, n_x=250, n_interior=40, n_energy=12)
    pc = e.pieces(Z, ZETA)
    weighted = pc.x ** (-1.0 + e.eps) * pc.hp_minus
    assert np.max(weighted) <= 1e-12


# -- tubes -------------------------------------------------------------------

def test_tube_time_cutoff_shape():
    T = 7.0
    t = np.linspace(-1.5, T + 2.5, 2000)
    v = esc._chi_tube(t, T)
    d = esc._chi_tube_d(t, T)
    assert np.all(v >= 0)
    assert np.all(v[(t <= -1.0) | (t >= T + 2.0)] == 0.0)
    grow = (t >= -1.0) & (t <= T + 2.0 / 3.0)
    assert np.all(d[grow] >= -1e-12)
    core = (t >= -0.5) & (t <= T + 2.0 / 3.0)
    assert np.allclose(d[core], 1.0)


def test_tubes_cover_and_certify(escape_free):
    tubes = escape_free.tubes
    assert tubes.covering.n_uncovered == 0
    assert tubes.covering.n_test > 0
    assert len(tubes.tubes) > 50


def test_tube_seed_value(escape_free):
    """At a tube seed the flow coordinates are (t, sigma) = (0, 0), so
    q_circ/psi >= chi(0) phi(0) = 1 there."""
    tb = escape_free.tubes.tubes[3]
    n = escape_free.model.dimension
    qv, hv = esc.eval_q_circ(escape_free.model, escape_free.tubes,
                             tb.seed[None, :n], tb.seed[None, n:])
    assert qv[0] >= 1.0 - 1e-8


def test_tube_far_point_zero(escape_free):
    qv, hv = esc.eval_q_circ(escape_free.model, escape_free.tubes,
                             np.array([[900.0]]), np.array([[1.0]]))
    assert qv[0] == 0.0 and hv[0] == 0.0


def test_tubes_fail_on_trapping(double_bump_1d):
    consts = esc.BoundaryConstants(M=0.0, M_f=0.0, c1=0.2, eps1=0.5,
                                   x0=0.1, delta1=0.125, c0=1.0)
    cutoffs = esc.build_cutoffs(1.0, 0.2, 0.1)
    with pytest.raises(IntegrationError):
        esc.build_tubes(double_bump_1d, consts, cutoffs, T_max=60.0)


# -- assembly and certificate ------------------------------------------------

def test_assemble_rejects_bad_eps(free_1d):
    with pytest.raises(ConfigurationError):
        esc.assemble_escape(free_1d, 0.3)
    with pytest.raises(ConfigurationError):
        esc.assemble_escape(free_1d, 0.25)
    with pytest.raises(ConfigurationError):
        esc.assemble_escape(free_1d, 0.0)


def test_assemble_rejects_trapping(double_bump_1d):
    with pytest.raises(ConstructionError):
        esc.assemble_escape(
            double_bump_1d, 0.2,
            verdict=fl.nontrapping_scan(double_bump_1d, n_samples=60, T_max=40.0),
        )


def test_assembled_constants_positive(escape_free):
    e = escape_free
    assert e.C > 0 and e.C_prime > 0 and e.C_dprime > 0
    assert e.c2 > 0 and e.c3 > 0
    assert e.c4 == math.inf  # 1D: the intermediate band misses the shell
    assert e.cascade["halvings_C"] <= 60
    assert e.cascade["halvings_Cp"] <= 60


def test_certificate_free(report_free):
    assert report_free.passed
    assert report_free.c_prime > 0 and report_free.c_dprime > 0
    assert report_free.n_points >= 2e4


def test_certificate_longrange_vs_free(report_free, report_longrange):
    """Construction robustness: the power-law model's constants stay within
    2x of the free ones."""
    assert report_longrange.passed
    assert 0.5 <= report_longrange.c_prime / report_free.c_prime <= 2.0
    assert 0.5 <= report_longrange.c_dprime / report_free.c_dprime <= 2.0


def test_certificate_refinement_stability(escape_free, report_free):
    fine = esc.verify_proposition(escape_free, n_x=424, n_interior=56,
                                  n_energy=23)
    assert abs(fine.c_prime - report_free.c_prime) <= 0.2 * report_free.c_prime
    assert abs(fine.c_dprime - report_free.c_dprime) <= 0.2 * report_free.c_dprime


def test_q_positivity_on_plateau(escape_free):
    e = escape_free
    Z, ZETA = esc.phase_grid(e.model, n_x=250, n_interior=40, n_energy=12)
    pc = e.pieces(Z, ZETA)
    q, _ = e.combine(pc)
    assert np.min(q) >= 0.0
    inner = (pc.psi == 1.0) & (pc.x <= 0.5 * e.constants.x0)
    assert np.all(q[inner] > 0.0)


def test_sabotaged_outgoing_constant_fails(escape_free):
    e = escape_free
    e.C_prime *= 1e6
    try:
        with pytest.raises(ConstructionError):
            esc.verify_proposition(e, n_x=200, n_interior=30, n_energy=10)
        rep = esc.verify_proposition(e, n_x=200, n_interior=30, n_energy=10,
                                     raise_on_failure=False)
        assert not rep.passed
        taus = np.array([geo.scattering_coords(w[:1], w[1:])[2]
                         for w in rep.witnesses])
        assert np.all(taus < 0)  # witnesses live in the outgoing region
    finally:
        e.C_prime /= 1e6


def test_hpq_matches_flow_finite_difference(escape_free):
    """Analytic H_p q against the flow finite difference at 1e3 random
    shell points, 1e-4 relative."""
    e = escape_free
    rng = np.random.default_rng(11)
    n = 1000
    r = np.exp(rng.uniform(np.log(1.2), np.log(60.0), n))
    sgn = rng.choice([-1.0, 1.0], n)
    Z = (r * sgn)[:, None]
    p = rng.uniform(0.91, 1.09, n)
    ZETA = (rng.choice([-1.0, 1.0], n) * np.sqrt(p))[:, None]
    pc = e.pieces(Z, ZETA)
    _, hp = e.combine(pc)
    fd = esc.hpq_finite_difference(e, Z, ZETA, delta=1e-5)
    rel = np.abs(hp - fd) / (np.abs(hp) + np.abs(fd) + 1e-8)
    assert np.max(rel) <= 1e-4


def test_measured_collar_floors(escape_free):
    """c2 (incoming) and c3 (outgoing) floors are positive and match the
    eps * 2|tau| mechanism on the shell."""
    e = escape_free
    lo = 2.0 * e.eps * math.sqrt(e.model.lambda2 - e.model.delta)
    assert e.c2 >= 0.9 * lo
    assert e.c3 >= 0.9 * lo


def test_eval_boundary_q_includes_psi():
    model, consts, cutoffs = _demo_setup()
    Z, ZETA = np.array([[20.0]]), np.array([[-0.9]])
    v_psi, h_psi = esc.eval_boundary_q("minus", model, consts, cutoffs, 0.2, Z, ZETA)
    v, h = esc.eval_boundary_piece("minus", model, consts, cutoffs, 0.2, Z, ZETA)
    p = geo.symbol_p(model, Z, ZETA)
    psi = cutoffs.psi(p)
    assert v_psi[0] == pytest.approx(v[0] * psi[0])
    assert h_psi[0] == pytest.approx(h[0] * psi[0])
