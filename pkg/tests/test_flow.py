"""Flow integration, escape classification, scans and incoming times."""

import numpy as np
import pytest

from nontrap import flow, geometry as geo
from nontrap.errors import IntegrationError


def test_free_flow_straight_line(free_1d):
    traj = flow.integrate_flow(free_1d, [0.0], [1.0], (0.0, 10.0))
    assert traj.Z[-1, 0] == pytest.approx(20.0, abs=1e-8)
    assert traj.ZETA[-1, 0] == pytest.approx(1.0, abs=1e-10)


def test_double_bump_confinement(double_bump_1d):
    """Turning points where V = 1 exist on both sides; the orbit stays
    inside |z| <= 3 for t in [0, 200]."""
    traj = flow.integrate_flow(double_bump_1d, [0.0], [1.0], (0.0, 200.0), tol=1e-10)
    assert np.max(np.abs(traj.Z)) <= 3.0
    assert traj.energy_drift <= 1e-8 * (1 + abs(traj.p0))


def test_well_escape_asymptotic_speed(well_1d):
    """p(0) = 4 - 2 = 2; the orbit escapes with |zeta| -> sqrt(2)."""
    traj = flow.integrate_flow(well_1d, [0.0], [2.0], (0.0, 60.0))
    assert abs(traj.Z[-1, 0]) > 40.0
    assert abs(traj.ZETA[-1, 0]) == pytest.approx(np.sqrt(2.0), abs=1e-6)


def test_energy_drift_both_directions(longrange_1d):
    for span in [(0.0, 50.0), (0.0, -50.0)]:
        traj = flow.integrate_flow(longrange_1d, [1.5], [0.8], span, tol=1e-10)
        assert traj.energy_drift <= 1e-8 * (1 + abs(traj.p0))


def test_time_reversal(double_bump_1d):
    fwd = flow.integrate_flow(double_bump_1d, [0.3], [0.9], (0.0, 25.0), tol=1e-11)
    back = flow.integrate_flow(
        double_bump_1d, fwd.Z[-1], fwd.ZETA[-1], (0.0, -25.0), tol=1e-11
    )
    assert abs(back.Z[-1, 0] - 0.3) <= 1e-6
    assert abs(back.ZETA[-1, 0] - 0.9) <= 1e-6


def test_trajectory_table(free_1d):
    traj = flow.integrate_flow(free_1d, [2.0], [1.0], (0.0, 5.0))
    header, table = traj.table(free_1d)
    assert header == ["t", "z1", "zeta1", "x", "tau", "p"]
    assert table.shape == (len(traj.t), 6)
    assert np.allclose(table[:, 5], 1.0, atol=1e-9)  # p conserved


def test_classify_free_escapes(free_1d):
    res = flow.classify_point(free_1d, [0.0], [1.0], T_max=100.0)
    assert res.verdict_fwd == flow.ESCAPED
    assert res.verdict_bwd == flow.ESCAPED
    assert res.escape_time_fwd == pytest.approx(20.0, rel=1e-3)


def test_classify_double_bump_interior(double_bump_1d):
    res = flow.classify_point(double_bump_1d, [0.0], [1.0], T_max=200.0)
    assert res.verdict_fwd == flow.UNDETERMINED
    assert res.verdict_bwd == flow.UNDETERMINED


def test_classify_longrange_outgoing():
    model = geo.preset_model("longrange_pow", amplitude=1.0)
    v5 = model.potential.value(np.array([[5.0]]))[0]
    zeta = np.sqrt(1.0 - v5)
    res = flow.classify_point(model, [5.0], [zeta], T_max=120.0)
    assert res.verdict_fwd == flow.ESCAPED


def test_classify_verdict_stable_under_tol_halving(double_bump_1d, free_1d):
    for model, pt in [
        (double_bump_1d, ([0.5], [0.9])),
        (free_1d, ([3.0], [-1.0])),
    ]:
        a = flow.classify_point(model, *pt, T_max=80.0, tol=1e-8)
        b = flow.classify_point(model, *pt, T_max=80.0, tol=5e-9)
        assert (a.verdict_fwd, a.verdict_bwd) == (b.verdict_fwd, b.verdict_bwd)


def test_nontrapping_scan_free(free_1d):
    verdict = flow.nontrapping_scan(
        free_1d, n_samples=1000, T_max=100.0, delta=0.25
    )
    assert verdict.sampled_points > 900
    assert verdict.is_nontrapping_empirical
    assert verdict.window == (0.75, 1.25)


def test_nontrapping_scan_double_bump(double_bump_1d):
    verdict = flow.nontrapping_scan(double_bump_1d, n_samples=150, T_max=60.0)
    assert not verdict.is_nontrapping_empirical
    # interior well witnesses sit between the bumps
    zs = np.array([w[0][0] for w in verdict.trapped_witnesses])
    assert np.any(np.abs(zs) < 3.0)


def test_nontrapping_scan_longrange(longrange_1d):
    verdict = flow.nontrapping_scan(longrange_1d, n_samples=200, T_max=150.0)
    assert verdict.is_nontrapping_empirical


def test_monotone_incoming_radial_ratio(longrange_1d):
    """Backward flow from a small-x window point: tau/x strictly increases
    (numerical form of the radial monotonicity estimate)."""
    z0, zeta0 = [30.0], [-np.sqrt(1.0 - 0.5 / np.sqrt(1 + 900.0))]
    # outgoing at the right end: backward flow is incoming
    traj = flow.integrate_flow(longrange_1d, z0, zeta0, (0.0, -30.0), tol=1e-10)
    x, _, tau, _ = geo.scattering_coords(traj.Z, traj.ZETA)
    vals = tau / x
    assert np.all(np.diff(vals) > 0)


def test_time_to_incoming_free_closed_form(free_1d):
    x0 = 1.0 / 6.0
    T = flow.time_to_incoming(free_1d, [0.0], [1.0], x0 / 2, 2.0 / 3.0, T_max=100.0)
    assert 6.0 <= T <= 6.1

    T2 = flow.time_to_incoming(free_1d, [20.0], [1.0], x0 / 2, 2.0 / 3.0, T_max=100.0)
    assert 16.0 <= T2 <= 16.1


def test_time_to_incoming_trapped_fails(double_bump_1d):
    with pytest.raises(IntegrationError):
        flow.time_to_incoming(
            double_bump_1d, [0.0], [1.0], 0.05, 2.0 / 3.0, T_max=60.0
        )


def test_halton_deterministic():
    a = flow.halton(64, 3)
    b = flow.halton(64, 3)
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a < 1))
    # reasonable low-discrepancy spread in 1D projection
    assert abs(np.mean(a[:, 0]) - 0.5) < 0.05


def test_batched_flow_matches_adaptive(longrange_1d):
    Z0 = np.array([[2.0], [-3.0], [5.0]])
    C0 = np.array([[0.9], [1.0], [-0.8]])
    ts, Zs, Cs = flow.batched_flow(longrange_1d, Z0, C0, 0.0, 8.0, dt=0.01)
    for i in range(3):
        traj = flow.integrate_flow(longrange_1d, Z0[i], C0[i], (0.0, 8.0), tol=1e-12)
        assert abs(Zs[-1, i, 0] - traj.Z[-1, 0]) <= 1e-6
        assert abs(Cs[-1, i, 0] - traj.ZETA[-1, 0]) <= 1e-6


def test_flow_displace_small_step(free_1d):
    Z = np.array([[1.0]])
    C = np.array([[0.7]])
    Z2, C2 = flow.flow_displace(free_1d, Z, C, 1e-5)
    assert Z2[0, 0] == pytest.approx(1.0 + 2 * 0.7 * 1e-5, rel=1e-12)
    assert C2[0, 0] == pytest.approx(0.7)


def test_escaped_radius_monotone(longrange_1d):
    """Once escaped (r > R_esc with outward speed), r stays monotone."""
    traj = flow.integrate_flow(longrange_1d, [1.0], [1.0], (0.0, 60.0))
    r = traj.radius()
    out = np.flatnonzero(r > 40.0)
    assert out.size > 3
    assert np.all(np.diff(r[out[0]:]) > 0)
