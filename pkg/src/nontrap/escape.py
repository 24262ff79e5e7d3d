"""Construction and grid certification of an escape function.

Given an empirically non-trapping model, this module assembles

    q = q_minus + C'' q_partial + C q_circ + C' q_plus,

where the boundary pieces are x^{-+eps} chi(tau) psi(p) rho(x/x0) localized
to the incoming (tau > lam/3), outgoing (tau < -lam/3) and intermediate
bands near infinity, and q_circ is a finite sum of flow tubes covering the
compact region.  The three constants are chosen by a halving cascade so
that q >= 0 everywhere and -H_p q admits a positive weighted floor; the
final certificate

    q >= c' x^eps psi(p),   -H_p q >= c'' x^{1+eps} psi(p)

is measured on a deterministic phase-space grid.  All evaluators return the
quantities divided by psi(p) (every piece carries that factor, and H_p
psi(p) vanishes identically), which keeps the grid ratios finite through
the window edge where psi underflows.

The verifier is a sampled certificate, not a proof: margins (a 1.5 safety
factor on the remainder sup, the halving floors) absorb off-grid
excursions, and refinement stability is the honesty check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from nontrap import flow as fl
from nontrap import geometry as geo
from nontrap.errors import ConfigurationError, ConstructionError
from nontrap.smooth import SmoothFn, falling_step, plateau, rising_step

# normalization point of the intermediate cutoff's exponential profile;
# balances the two halving budgets of the assembly cascade
_TAU_REF_FACTOR = 0.125


# ---------------------------------------------------------------------------
# cutoffs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CutoffFamily:
    """The scalar cutoffs of the construction with analytic derivatives.

    chi_minus: 0 below lam/3, 1 above 2 lam/3 (incoming band);
    chi_plus:  its mirror image (outgoing band);
    chi_partial: supported in (-7 lam/8, 7 lam/8), shaped so that
        chi' >= (6 lam / c1) chi on (-7 lam/8, 3 lam/4);
    rho: 1 on [0, 1/2], supported in [0, 1);
    psi: energy window cutoff, 1 on the half-window plateau.
    """

    lam: float
    c1: float
    delta: float
    chi_minus: SmoothFn
    chi_plus: SmoothFn
    chi_partial: SmoothFn
    rho: SmoothFn
    psi: SmoothFn
    slope: float
    tau_ref: float


def build_cutoffs(lam: float, c1: float, delta: float) -> CutoffFamily:
    if lam <= 0 or c1 <= 0:
        raise ConfigurationError("build_cutoffs needs lam > 0 and c1 > 0")
    lam2 = lam * lam
    if not 0 < delta < lam2:
        raise ConfigurationError(f"delta must lie in (0, lam^2), got {delta}")
    k = 6.0 * lam / c1
    # overflow guard for the exponential profile over the band
    if k * 2.0 * lam > 600.0:
        raise ConstructionError(
            f"intermediate cutoff slope {k:.1f} too steep for float64 "
            "(c1 too small); reduce the energy window"
        )
    tau_ref = _TAU_REF_FACTOR * lam
    u = plateau(-7 * lam / 8, -3 * lam / 4, 3 * lam / 4, 7 * lam / 8)

    def chi_partial(t):
        t = np.asarray(t, dtype=float)
        return np.exp(k * (t - tau_ref)) * u(t)

    def chi_partial_d(t):
        t = np.asarray(t, dtype=float)
        return np.exp(k * (t - tau_ref)) * (k * u(t) + u.d(t))

    chi_minus = rising_step(lam / 3.0, 2.0 * lam / 3.0)
    up = rising_step(lam / 3.0, 2.0 * lam / 3.0)
    chi_plus = SmoothFn(lambda t: up(-np.asarray(t, float)),
                        lambda t: -up.d(-np.asarray(t, float)))
    rho = falling_step(0.5, 1.0)
    psi = plateau(lam2 - delta, lam2 - 0.5 * delta, lam2 + 0.5 * delta, lam2 + delta)
    return CutoffFamily(
        lam=lam, c1=c1, delta=delta,
        chi_minus=chi_minus, chi_plus=chi_plus,
        chi_partial=SmoothFn(chi_partial, chi_partial_d),
        rho=rho, psi=psi, slope=k, tau_ref=tau_ref,
    )


def partial_slope_margin(cutoffs: CutoffFamily, n=4000) -> float:
    """min of chi'_partial - (6 lam / c1) chi_partial over the enforced
    band (must be >= 0; equals e^{k(t-ref)} u'(t) analytically)."""
    lam = cutoffs.lam
    t = np.linspace(-7 * lam / 8, 3 * lam / 4, n)
    gap = cutoffs.chi_partial.d(t) - cutoffs.slope * cutoffs.chi_partial(t)
    return float(np.min(gap))


# ---------------------------------------------------------------------------
# boundary constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryConstants:
    """Certified constants of the near-boundary construction."""

    M: float          # 1.5x grid sup of the collar remainders |a| + |b|
    M_f: float        # same for the radial-ratio remainder f
    c1: float         # angular (or 1D surrogate) lower bound
    eps1: float       # collar threshold
    x0: float         # working collar width
    delta1: float     # energy width certificate (> delta)
    c0: float         # measured floor of -H_p(tau/x) on the collar shell

    def describe(self):
        return (f"M={self.M:.6g} c1={self.c1:.6g} x0={self.x0:.6g} "
                f"eps1={self.eps1:.6g} delta1={self.delta1:.6g} c0={self.c0:.6g}")


def _collar_points(model, eps1, n_x, n_tau, n_y=17, n_mu=21, x_min=1e-4):
    """Deterministic scattering-coordinate grid on the collar x < eps1,
    converted to Euclidean points.  Returns (Z, ZETA)."""
    lam = model.lam
    xs = np.geomspace(x_min, eps1 * 0.999, n_x)
    taus = np.linspace(-1.6 * lam, 1.6 * lam, n_tau)
    if model.dimension == 1:
        X, T, Y = np.meshgrid(xs, taus, np.array([1.0, -1.0]), indexing="ij")
        x, t, y = X.ravel(), T.ravel(), Y.ravel()
        r = 1.0 / x
        Z = (r * y)[:, None]
        ZETA = (-t * y)[:, None]
        return Z, ZETA
    ys = np.linspace(0.0, 2.0 * np.pi, n_y, endpoint=False)
    hmax = float(np.max(model.metric.h(ys)))
    mus = np.linspace(-1.6 * lam * math.sqrt(hmax), 1.6 * lam * math.sqrt(hmax), n_mu)
    X, T, Yg, MU = np.meshgrid(xs, taus, ys, mus, indexing="ij")
    x, t, y, mu = X.ravel(), T.ravel(), Yg.ravel(), MU.ravel()
    r = 1.0 / x
    omega = np.stack([np.cos(y), np.sin(y)], axis=-1)
    eperp = np.stack([-np.sin(y), np.cos(y)], axis=-1)
    Z = r[:, None] * omega
    ZETA = -t[:, None] * omega + mu[:, None] * eperp
    return Z, ZETA


def boundary_constants(model, n_x=40, n_tau=41, refine=1) -> BoundaryConstants:
    """Estimate the collar constants from dense deterministic grids.

    The remainder sup M is inflated by a 1.5 safety factor; c1 is the inf
    of the angular energy over the intermediate band (2D), or the 1D
    surrogate solving the self-consistent radial bound (the same inequality
    the angular term enforces in higher dimension), both with a 5% margin.
    """
    lam, lam2, gamma = model.lam, model.lambda2, model.gamma
    delta1 = 1.25 * model.delta
    n_x, n_tau = n_x * refine, (n_tau - 1) * refine + 1

    # provisional collar for the remainder sup: x < 1/2
    Z, ZETA = _collar_points(model, 0.5, n_x, n_tau)
    p = geo.symbol_p(model, Z, ZETA)
    sub = p <= 2.0 * lam2
    if not np.any(sub):
        raise ConstructionError("empty collar sample; model badly scaled")
    a, b, f = geo.collar_remainders(model, Z[sub], ZETA[sub])
    snap = 1e-9 * (1.0 + lam2)
    M_raw = float(np.max(np.abs(a) + np.abs(b)))
    M = 0.0 if M_raw < snap else 1.5 * M_raw
    Mf_raw = float(np.max(np.abs(f)))
    M_f = 0.0 if Mf_raw < snap else 1.5 * Mf_raw

    eps1 = min(0.5, (lam2 / (2.0 * (M_f + 1.0))) ** (1.0 / gamma))

    # measured floor of -H_p(tau/x) on the collar energy shell
    Zc, ZEc = _collar_points(model, eps1, n_x, n_tau)
    pc = geo.symbol_p(model, Zc, ZEc)
    shell = (pc > 0.5 * lam2) & (pc < 2.0 * lam2)
    vel = geo.hamilton_field_scattering(model, Zc[shell], ZEc[shell])
    hp_ratio = vel.taudot / vel.x - vel.tau * vel.xdot / vel.x**2
    c0 = float(np.min(-hp_ratio))
    if c0 <= 0:
        raise ConstructionError(
            "radial monotonicity floor non-positive on the collar; "
            "decrease eps1 (stronger potential decay needed)"
        )

    if model.dimension == 1:
        # 1D surrogate: on the intermediate band -x^{-1} H_p tau equals
        # 2(p - tau^2) - x^gamma(remainder) >= 2 A - M x0^gamma with
        # A = (15/64) lam^2 - delta1; the x0 formula gives
        # M x0^gamma = M c1 / (2(M+1)), and solving the self-consistent
        # bound c1 = 2A - M c1 / (2(M+1)) yields the factor below.
        A = (15.0 / 64.0) * lam2 - delta1
        c1 = 0.95 * 2.0 * A * (2.0 * M + 2.0) / (3.0 * M + 2.0)
    else:
        # slice-wise closed form: at fixed (x, y, tau) the window infimum
        # of g_b is attained at the lowest energy,
        #   g_b = (lam^2 - delta1 - tau^2 - V) / (h (1 + dm));
        # the collar threshold shrinks until the band stays positive
        c1 = -math.inf
        for _ in range(8):
            c1 = 0.95 * _angular_band_floor(model, eps1, delta1, n_x, n_tau)
            if c1 > 0:
                break
            eps1 *= 0.5
    if c1 <= 0:
        raise ConstructionError(
            f"angular lower bound c1 = {c1:.3g} <= 0: energy window too wide "
            "or collar too thick; reduce delta or eps1"
        )
    # the band inequality needs the remainder below c1/2 on the collar
    eps1 = min(eps1, (c1 / (2.0 * (M + 1.0))) ** (1.0 / gamma))

    x0 = min(
        (lam / (6.0 * (M + 1.0))) ** (1.0 / gamma),
        (c1 / (2.0 * (M + 1.0))) ** (1.0 / gamma),
        eps1,
    )
    return BoundaryConstants(M=M, M_f=M_f, c1=c1, eps1=eps1, x0=x0,
                             delta1=delta1, c0=c0)


def _angular_band_floor(model, eps1, delta1, n_x, n_tau, n_y=65):
    """inf over the collar band {x < eps1, |tau| < 7 lam/8} of the lowest
    window value of g_b (closed form per slice; 2D only).  Slices whose
    whole window lies below tau^2 + V are off the band and skipped; a slice
    straddling the window floor forces a negative return (collar too
    thick)."""
    lam, lam2 = model.lam, model.lambda2
    xs = np.geomspace(1e-4, eps1 * 0.999, n_x)
    taus = np.linspace(-7 * lam / 8, 7 * lam / 8, n_tau) * (1.0 - 1e-9)
    ys = np.linspace(0.0, 2.0 * np.pi, n_y, endpoint=False)
    X, T, Y = np.meshgrid(xs, taus, ys, indexing="ij")
    x, tau, y = X.ravel(), T.ravel(), Y.ravel()
    r = 1.0 / x
    Z = r[:, None] * np.stack([np.cos(y), np.sin(y)], axis=-1)
    V = model.potential.value(Z)
    h = model.metric.h(y)
    dm = model._metric_defect(r, y)
    top = lam2 + delta1 - tau**2 - V    # window present iff > 0
    lo = lam2 - delta1 - tau**2 - V     # lowest-window angular energy
    present = top > 0
    if not np.any(present):
        raise ConstructionError("intermediate band sample empty; widen grids")
    gb_min = lo[present] / (h[present] * (1.0 + dm[present]))
    return float(np.min(gb_min))


# ---------------------------------------------------------------------------
# boundary pieces
# ---------------------------------------------------------------------------

def eval_boundary_piece(kind, model, consts, cutoffs, eps, Z, ZETA):
    """(q/psi, H_p q/psi) for one boundary piece on a batch of points.

    kind in {'minus', 'plus', 'partial'}.  The derivative uses the exact
    Hamilton field through the chart (product rule on x^alpha chi(tau)
    rho(x/x0)); the psi(p) factor is flow-invariant and divided out.
    """
    if kind == "minus":
        chi, alpha = cutoffs.chi_minus, -eps
    elif kind == "plus":
        chi, alpha = cutoffs.chi_plus, +eps
    elif kind == "partial":
        chi, alpha = cutoffs.chi_partial, -eps
    else:
        raise ConfigurationError(f"unknown boundary piece {kind!r}")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    ZETA = np.atleast_2d(np.asarray(ZETA, dtype=float))
    x, _, tau, _ = geo.scattering_coords(Z, ZETA)
    x0 = consts.x0
    rho_v = cutoffs.rho(x / x0)
    chi_v = chi(tau)
    val = x**alpha * chi_v * rho_v
    hpq = np.zeros_like(val)
    # the derivative is supported wherever any factor or its derivative is
    live = (chi_v != 0.0) | (chi.d(tau) != 0.0)
    live &= (rho_v != 0.0) | (cutoffs.rho.d(x / x0) != 0.0)
    if np.any(live):
        vel = geo.hamilton_field_scattering(model, Z[live], ZETA[live])
        xl, taul = x[live], tau[live]
        rv, rd = cutoffs.rho(xl / x0), cutoffs.rho.d(xl / x0)
        cv, cd = chi(taul), chi.d(taul)
        hpq[live] = (
            alpha * xl ** (alpha - 1.0) * vel.xdot * cv * rv
            + xl**alpha * cd * vel.taudot * rv
            + xl**alpha * cv * rd * vel.xdot / x0
        )
    return val, hpq


def eval_boundary_q(kind, model, consts, cutoffs, eps, Z, ZETA):
    """(q_kind, H_p q_kind) including the psi(p) factor.

    The certificates work with the psi-stripped eval_boundary_piece; this
    wrapper is the plain evaluator (H_p psi(p) = 0, so both components just
    scale by psi)."""
    val, hpq = eval_boundary_piece(kind, model, consts, cutoffs, eps, Z, ZETA)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    ZETA = np.atleast_2d(np.asarray(ZETA, dtype=float))
    psi = cutoffs.psi(geo.symbol_p(model, Z, ZETA))
    return val * psi, hpq * psi


# ---------------------------------------------------------------------------
# tubes
# ---------------------------------------------------------------------------

def _chi_tube(t, T):
    """Tube time cutoff: supported in (-1, T+2), slope exactly 1 on
    [-1/2, T+2/3] (the covering zone), falling only on (T+2/3, T+2)."""
    t = np.asarray(t, dtype=float)
    rise = rising_step(-1.0, -0.5)
    down = falling_step(T + 2.0 / 3.0, T + 2.0)
    return rise(t) * (1.0 + t) * down(t)


def _chi_tube_d(t, T):
    t = np.asarray(t, dtype=float)
    rise = rising_step(-1.0, -0.5)
    down = falling_step(T + 2.0 / 3.0, T + 2.0)
    lin = 1.0 + t
    return rise.d(t) * lin * down(t) + rise(t) * down(t) + rise(t) * lin * down.d(t)


@dataclass
class Tube:
    """One flow tube: a transversal disc through the seed swept by the
    backward flow over (-1, T+2).

    The disc is anisotropic: the transversal hyperplane always contains the
    energy gradient (grad p is orthogonal to H_p), and the disc must stay
    inside the escaping-energy region, so its extent along grad p is sized
    by the window width while the remaining (position-like) directions use
    the seed-grid scale."""

    seed: np.ndarray          # phase-space point (2n,)
    T: float
    normal: np.ndarray        # unit H_p direction at the seed (2n,)
    basis: np.ndarray         # (2n-1, 2n) orthonormal disc basis
    radii: np.ndarray         # per-direction disc radii
    bbox_lo: Optional[np.ndarray]   # sampled sweep bounding box, inflated
    bbox_hi: Optional[np.ndarray]

    @property
    def window(self):
        return (-1.0, self.T + 2.0)

    @property
    def max_radius(self):
        return float(np.max(self.radii))

    def disc_distance(self, offsets):
        """Anisotropic disc norm of phase-space offsets (rows)."""
        comps = offsets @ self.basis.T
        return np.sqrt(np.sum((comps / self.radii) ** 2, axis=-1))


@dataclass
class CoveringReport:
    n_test: int
    n_uncovered: int
    uncovered: List[np.ndarray]
    refinements: int


@dataclass
class TubeCollection:
    tubes: List[Tube]
    t_cov: float
    covering: CoveringReport
    seed_spacing: float

    @property
    def max_T(self):
        return max(t.T for t in self.tubes) if self.tubes else 0.0

    def bbox_candidates(self, states):
        """Boolean (n_tubes, m): state within each tube's bounding box."""
        S = np.asarray(states)
        out = np.empty((len(self.tubes), S.shape[0]), dtype=bool)
        for j, tb in enumerate(self.tubes):
            out[j] = np.all((S >= tb.bbox_lo) & (S <= tb.bbox_hi), axis=1)
        return out


def _phase_state(Z, ZETA):
    return np.concatenate([Z, ZETA], axis=-1)


def _k_region_seeds(model, consts, spacing):
    """Seed grid on K = supp psi(p) & {x >= x0/4} (one seed per position
    cell and momentum branch/direction, at the window center energy)."""
    lam2 = model.lambda2
    r_max = 4.0 / consts.x0
    zs = np.arange(-r_max, r_max + 0.5 * spacing, spacing)
    seeds = []
    if model.dimension == 1:
        for z in zs:
            v = model.potential.value(np.array([[z]]))[0]
            k2 = lam2 - v
            if k2 <= 0:
                continue
            for sgn in (1.0, -1.0):
                seeds.append((np.array([z]), np.array([sgn * math.sqrt(k2)])))
        return seeds
    n_dir = 8
    for zx in zs:
        for zy in zs:
            if math.hypot(zx, zy) > r_max + 0.5 * spacing:
                continue
            z = np.array([zx, zy])
            for d in range(n_dir):
                ang = 2.0 * np.pi * (d + 0.5) / n_dir
                direction = np.array([math.cos(ang), math.sin(ang)])
                kappa = _shell_momentum(model, z, direction, lam2)
                if kappa is None:
                    continue
                seeds.append((z, kappa * direction))
    return seeds


def _shell_momentum(model, z, direction, p_target):
    """|zeta| with p(z, kappa * direction) = p_target (metric-corrected)."""
    v = model.potential.value(z[None, :])[0]
    if p_target - v <= 0:
        return None
    if model.dimension == 1 or model.metric.is_flat:
        return math.sqrt(p_target - v)
    r = float(np.hypot(z[0], z[1]))
    y = math.atan2(z[1], z[0])
    Ldir = z[0] * direction[1] - z[1] * direction[0]
    dm = float(model._metric_defect(np.array([r]), np.array([y]))[0])
    m_eff = 1.0 + (dm * Ldir**2 / r**2 if r > 0 else 0.0)
    return math.sqrt((p_target - v) / m_eff)


def _disc_frame(normal, u_p, r_mom, r_pos):
    """Orthonormal disc basis led by the energy direction with its narrow
    radius, completed by position-like directions at the grid radius."""
    d = normal.shape[0]
    basis = [u_p]
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        v = e - np.dot(e, normal) * normal
        for b in basis:
            v = v - np.dot(v, b) * b
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            basis.append(v / nv)
    basis = basis[: d - 1]
    radii = np.array([r_mom] + [r_pos] * (len(basis) - 1))
    return np.stack(basis), radii


def _disc_offsets(tube: Tube, n):
    """Sample offsets spanning the transversal disc (center, half and full
    radius along each disc axis)."""
    offs = [np.zeros(2 * n)]
    for e, rad in zip(tube.basis, tube.radii):
        for c in (0.5, 1.0):
            offs.append(c * rad * e)
            offs.append(-c * rad * e)
    return np.stack(offs)


def build_tubes(model, consts, cutoffs, seed_spacing=1.0, t_cov=0.5,
                radius_factor=2.0, mom_factor=1.3, T_max=500.0,
                max_refine=2, max_extend=6) -> TubeCollection:
    """Tubes along backward bicharacteristic segments seeded on a grid of K.

    Per seed: T from the first certified incoming time (inflated for the
    slowest disc member), a transversal hyperplane normal to H_p, an
    anisotropic disc whose half-size images cover K (certified on a 2x
    finer test grid), and a sampled certificate that the late tube portion
    [T+1/2, T+2] stays inside {x < x0/2, tau > 2 lam/3}.
    """
    lam = model.lam
    tau_target = 2.0 * lam / 3.0
    x_target = consts.x0 / 2.0
    # keep the tube count roughly collar-independent
    spacing = max(seed_spacing, (4.0 / consts.x0) / 40.0)
    last_report = None
    for attempt in range(max_refine + 1):
        seeds = _k_region_seeds(model, consts, spacing)
        if not seeds:
            raise ConstructionError("no seeds found on K; check the window")
        kappa_min = min(float(np.linalg.norm(zeta)) for _, zeta in seeds)
        if kappa_min <= 0:
            raise ConstructionError("seed with vanishing momentum on K")
        r_mom = mom_factor * model.delta / kappa_min
        r_pos = radius_factor * spacing
        tubes = []
        for z, zeta in seeds:
            T = fl.time_to_incoming(model, z, zeta, x_target, tau_target,
                                    T_max=T_max)
            # the slowest disc member (lowest shell energy on the disc)
            # lags the center trajectory; size the segment for it
            kappa = float(np.linalg.norm(zeta))
            T = T * (1.0 + 2.0 * mom_factor * model.delta / kappa**2) + 0.5
            dz, dzeta = geo.hamilton_field(model, z[None, :], zeta[None, :])
            n_vec = _phase_state(dz[0], dzeta[0])
            n_norm = float(np.linalg.norm(n_vec))
            if n_norm == 0.0:
                raise ConstructionError(f"stationary seed at {z}, {zeta}")
            n_vec = n_vec / n_norm
            # grad p = (-zetadot, zdot) lies inside the transversal
            grad_p = np.concatenate([-dzeta[0], dz[0]])
            u_p = grad_p / np.linalg.norm(grad_p)
            basis, radii = _disc_frame(n_vec, u_p, r_mom, r_pos)
            tubes.append(Tube(seed=_phase_state(z, zeta), T=T,
                              normal=n_vec, basis=basis, radii=radii,
                              bbox_lo=None, bbox_hi=None))
        _certify_tubes(model, tubes, consts, lam, max_extend)
        coll = TubeCollection(tubes=tubes, t_cov=t_cov,
                              covering=CoveringReport(0, 0, [], attempt),
                              seed_spacing=spacing)
        report = _certify_covering(model, coll, consts, spacing, attempt)
        coll.covering = report
        last_report = report
        if report.n_uncovered == 0:
            return coll
        spacing *= 0.5
    raise ConstructionError(
        f"tube covering failed after {max_refine} refinements: "
        f"{last_report.n_uncovered} uncovered test points, first few "
        f"{[u.tolist() for u in last_report.uncovered[:3]]}"
    )


def _certify_tubes(model, tubes: List[Tube], consts, lam, max_extend):
    """Sampled disc sweep for every tube in one batched backward flow:
    bounding boxes over the whole window, and the late-portion
    disjointness from K' (auto-extending T when the margin check fails)."""
    n = model.dimension
    for round_ in range(max_extend + 1):
        pend = [tb for tb in tubes if tb.bbox_lo is None]
        if not pend:
            return
        offs = [tb.seed[None, :] + _disc_offsets(tb, n) for tb in pend]
        counts = [o.shape[0] for o in offs]
        pts = np.concatenate(offs, axis=0)
        T_all = max(tb.T for tb in pend)
        ts, Zs, Cs = fl.batched_flow(model, pts[:, :n], pts[:, n:], 0.0,
                                     -(T_all + 2.2), 0.02, store_stride=5)
        states = np.concatenate([Zs, Cs], axis=-1)  # (nt, sum counts, 2n)
        start = 0
        for tb, cnt in zip(pend, counts):
            sl = states[:, start:start + cnt, :]
            start += cnt
            window = (-ts <= tb.T + 2.2)
            flat = sl[window].reshape(-1, 2 * n)
            lo, hi = flat.min(axis=0), flat.max(axis=0)
            pad = 0.25 * tb.max_radius + 0.05 * (np.abs(lo) + np.abs(hi))
            late = (-ts >= tb.T + 0.5) & (-ts <= tb.T + 2.0 + 1e-9)
            Zl = sl[late][..., :n].reshape(-1, n)
            Cl = sl[late][..., n:].reshape(-1, n)
            x, _, tau, _ = geo.scattering_coords(Zl, Cl)
            if np.all(x < consts.x0 / 2.0) and np.all(tau > 2.0 * lam / 3.0):
                tb.bbox_lo = lo - pad
                tb.bbox_hi = hi + pad
            elif round_ < max_extend:
                tb.T += max(1.0, 0.1 * tb.T)  # retry with a longer segment
    bad = [tb for tb in tubes if tb.bbox_lo is None]
    if bad:
        raise ConstructionError(
            f"late tube portion not disjoint from K' after extending T to "
            f"{bad[0].T}; increase the time margin"
        )


def _certify_covering(model, coll: TubeCollection, consts, spacing, attempt):
    """Every point of a 2x finer K grid, widened across the window, must
    lie in some tube's interior zone."""
    test = _k_region_seeds(model, consts, 0.5 * spacing)
    Z0, C0 = [], []
    for z, zeta in test:
        direction = zeta / np.linalg.norm(zeta)
        for off in (-0.9, 0.0, 0.9):
            kap = _shell_momentum(model, z, direction,
                                  model.lambda2 + off * model.delta)
            if kap is None:
                continue
            Z0.append(z)
            C0.append(kap * direction)
    Z0 = np.array(Z0)
    C0 = np.array(C0)
    qv, _ = eval_q_circ(model, coll, Z0, C0, covering_mode=True)
    bad = qv <= 0.0
    uncovered = [np.concatenate([Z0[i], C0[i]]) for i in np.flatnonzero(bad)[:16]]
    return CoveringReport(n_test=len(Z0), n_uncovered=int(np.sum(bad)),
                          uncovered=uncovered, refinements=attempt)


# ---------------------------------------------------------------------------
# tube evaluation (flow coordinates by crossing detection)
# ---------------------------------------------------------------------------

def eval_q_circ(model, coll: TubeCollection, Z, ZETA, dt=0.05,
                store_stride=2, chunk=6000, covering_mode=False):
    """(q_circ/psi, H_p q_circ/psi) on a batch of points.

    Each point is flowed once over the union of its candidate tube windows;
    for every tube the crossing times of the transversal hyperplane are
    located by sign change plus vectorized Newton refinement on the cubic
    Hermite interpolant, keeping crossings that land inside the disc.
    Summed contributions are chi_j(t) phi_j(sigma) and -chi'_j(t)
    phi_j(sigma).

    In covering_mode only the interior zone counts: crossings with t in
    [-t_cov, T_j + 0.6] (where the time cutoff has slope one and value at
    least 1/2) and disc distance <= 1/2; the flow span is short.
    """
    n = model.dimension
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    ZETA = np.atleast_2d(np.asarray(ZETA, dtype=float))
    m = Z.shape[0]
    qv = np.zeros(m)
    hp = np.zeros(m)
    if not coll.tubes:
        return qv, hp
    states = _phase_state(Z, ZETA)
    cand = None if covering_mode else coll.bbox_candidates(states)
    if covering_mode:
        t_hi_pt = np.full(m, coll.t_cov + coll.seed_spacing + 0.8)
        active = np.arange(m)
    else:
        has = cand.any(axis=0)
        active = np.flatnonzero(has)
        if active.size == 0:
            return qv, hp
        t_hi_pt = np.zeros(m)
        for j, tb in enumerate(coll.tubes):
            sel = cand[j]
            t_hi_pt[sel] = np.maximum(t_hi_pt[sel], tb.T + 2.0 + 0.1)
    order = active[np.argsort(t_hi_pt[active])]
    pos = 0
    while pos < order.size:
        idx = order[pos: pos + chunk]
        pos += chunk
        t_hi = float(np.max(t_hi_pt[idx]))
        _eval_chunk(model, coll, Z[idx], ZETA[idx], idx, qv, hp,
                    t_hi, dt, store_stride, cand, covering_mode)
    return qv, hp


def _eval_chunk(model, coll, Zc, Cc, idx, qv, hp, t_hi, dt, store_stride,
                cand, covering_mode):
    n = model.dimension
    t_lo = -(coll.t_cov + 0.1) if covering_mode else -1.1
    ts_b, Zb, Cb = fl.batched_flow(model, Zc, Cc, 0.0, t_lo, dt,
                                   store_stride=store_stride)
    ts_f, Zf, Cf = fl.batched_flow(model, Zc, Cc, 0.0, t_hi, dt,
                                   store_stride=store_stride)
    ts = np.concatenate([ts_b[::-1], ts_f[1:]])
    S = np.concatenate(
        [np.concatenate([Zb, Cb], axis=-1)[::-1],
         np.concatenate([Zf, Cf], axis=-1)[1:]], axis=0)
    S = np.ascontiguousarray(S)
    dt_det = dt * store_stride
    dims = S.shape[-1]
    phi_shape = falling_step(0.5, 1.0)
    for j, tb in enumerate(coll.tubes):
        colmask = None if covering_mode else cand[j][idx]
        if colmask is not None and not np.any(colmask):
            continue
        # the tube parameter of a point IS the forward-flow time to the
        # transversal: pt = exp(-t H_p)(sigma)  <=>  exp(+t H_p)(pt) in Sigma
        if covering_mode:
            w_lo = -coll.t_cov
            w_hi = min(tb.T + 0.6, coll.t_cov + coll.seed_spacing + 0.7)
        else:
            w_lo, w_hi = tb.window
        row = np.flatnonzero((ts >= w_lo - 3 * dt_det) & (ts <= w_hi + 3 * dt_det))
        if row.size < 2:
            continue
        k0, k1 = int(row[0]), int(row[-1])
        block = S[k0:k1 + 1]
        sv = (block.reshape(-1, dims) @ tb.normal).reshape(block.shape[:2])
        sv -= float(tb.seed @ tb.normal)
        sign_change = np.signbit(sv[:-1]) != np.signbit(sv[1:])
        if colmask is not None:
            sign_change &= colmask[None, :]
        ks, ms = np.nonzero(sign_change)
        if ks.size == 0:
            continue
        ks = ks + k0
        # distance prefilter at the bracketing sample
        near = np.linalg.norm(S[ks, ms, :] - tb.seed, axis=1) \
            <= tb.max_radius * 1.5 + 0.2
        ks, ms = ks[near], ms[near]
        if ks.size == 0:
            continue
        t_star, s_star = _refine_crossings(model, ts, S, ks, ms, tb)
        sigma = tb.disc_distance(s_star - tb.seed)
        rad_lim = 0.5 if covering_mode else 1.0
        ok = (sigma <= rad_lim) & (t_star >= w_lo) & (t_star <= w_hi)
        if not np.any(ok):
            continue
        tube_t, pts_idx = t_star[ok], ms[ok]
        phi = phi_shape(sigma[ok])
        if covering_mode:
            np.add.at(qv, idx[pts_idx], 1.0)
            continue
        ch = _chi_tube(tube_t, tb.T)
        chd = _chi_tube_d(tube_t, tb.T)
        np.add.at(qv, idx[pts_idx], ch * phi)
        np.add.at(hp, idx[pts_idx], -chd * phi)
    return


def _refine_crossings(model, ts, S, ks, cols, tb):
    """Vectorized Newton on the cubic Hermite interpolant of the signed
    distance over each bracketing interval."""
    y0 = S[ks, cols, :]
    y1 = S[ks + 1, cols, :]
    t0 = ts[ks]
    t1 = ts[ks + 1]
    dt = (t1 - t0)[:, None]
    n = model.dimension
    dz0, dc0 = geo.hamilton_field(model, y0[:, :n], y0[:, n:])
    dz1, dc1 = geo.hamilton_field(model, y1[:, :n], y1[:, n:])
    f0 = np.concatenate([dz0, dc0], axis=-1) * dt
    f1 = np.concatenate([dz1, dc1], axis=-1) * dt
    u = np.full(ks.shape, 0.5)
    for _ in range(12):
        uu = u[:, None]
        h00 = 2 * uu**3 - 3 * uu**2 + 1
        h10 = uu**3 - 2 * uu**2 + uu
        h01 = -2 * uu**3 + 3 * uu**2
        h11 = uu**3 - uu**2
        y = h00 * y0 + h10 * f0 + h01 * y1 + h11 * f1
        d00 = 6 * uu**2 - 6 * uu
        d10 = 3 * uu**2 - 4 * uu + 1
        d01 = -6 * uu**2 + 6 * uu
        d11 = 3 * uu**2 - 2 * uu
        yd = d00 * y0 + d10 * f0 + d01 * y1 + d11 * f1
        s = (y - tb.seed) @ tb.normal
        sd = yd @ tb.normal
        step = np.where(np.abs(sd) > 1e-14, s / np.where(sd == 0, 1.0, sd), 0.0)
        u = np.clip(u - step, 0.0, 1.0)
    uu = u[:, None]
    h00 = 2 * uu**3 - 3 * uu**2 + 1
    h10 = uu**3 - 2 * uu**2 + uu
    h01 = -2 * uu**3 + 3 * uu**2
    h11 = uu**3 - uu**2
    y = h00 * y0 + h10 * f0 + h01 * y1 + h11 * f1
    t_star = t0 + u * (t1 - t0)
    return t_star, y


# ---------------------------------------------------------------------------
# phase-space grids
# ---------------------------------------------------------------------------

def phase_grid(model, x_min=1e-3, n_x=600, n_interior=80, n_energy=40,
               inset=0.999, n_y=24, n_dir=12):
    """Deterministic grid covering supp psi(p) up to x >= x_min.

    Positions combine a log grid in x on each end (resolving the collar
    scales) with a linear interior block; at every position the window is
    sampled at n_energy energies and both momentum branches (1D) or n_dir
    directions (2D).  Returns (Z, ZETA)."""
    lam2, delta = model.lambda2, model.delta
    offsets = inset * np.linspace(-1.0, 1.0, n_energy)
    if model.dimension == 1:
        xs = np.geomspace(x_min, 0.999, n_x)
        zs_out = 1.0 / xs
        zs = np.concatenate([-zs_out, np.linspace(-0.999, 0.999, n_interior), zs_out])
        Z0 = zs[:, None]
        V = model.potential.value(Z0)
        P = lam2 + delta * offsets
        k2 = P[None, :] - V[:, None]            # (pos, energy)
        pos, en = np.nonzero(k2 > 0)
        kap = np.sqrt(k2[pos, en])
        Z = np.repeat(zs[pos], 2)[:, None]
        ZETA = np.stack([kap, -kap], axis=-1).reshape(-1)[:, None]
        return Z, ZETA
    xs = np.geomspace(x_min, 0.999, n_x)
    rs = np.concatenate([1.0 / xs, np.linspace(0.05, 0.999, n_interior)])
    ys = np.linspace(0.0, 2.0 * np.pi, n_y, endpoint=False)
    dirs = np.linspace(0.0, 2.0 * np.pi, n_dir, endpoint=False)
    R, Y, E, D = np.meshgrid(rs, ys, offsets, dirs, indexing="ij")
    r, y, e, d = R.ravel(), Y.ravel(), E.ravel(), D.ravel()
    Z = np.stack([r * np.cos(y), r * np.sin(y)], axis=-1)
    direction = np.stack([np.cos(d), np.sin(d)], axis=-1)
    v = model.potential.value(Z)
    p_req = lam2 + delta * e
    Ldir = Z[:, 0] * direction[:, 1] - Z[:, 1] * direction[:, 0]
    dm = model._metric_defect(r, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        m_eff = 1.0 + np.where(r > 0, dm * Ldir**2 / np.maximum(r, 1e-300) ** 2, 0.0)
    k2 = (p_req - v) / m_eff
    keep = k2 > 0
    ZETA = np.sqrt(np.clip(k2, 0, None))[:, None] * direction
    return Z[keep], ZETA[keep]


# ---------------------------------------------------------------------------
# assembled escape function
# ---------------------------------------------------------------------------

@dataclass
class PieceArrays:
    """All piece evaluations on a batch, divided by psi(p)."""

    x: np.ndarray
    tau: np.ndarray
    psi: np.ndarray
    q_minus: np.ndarray
    hp_minus: np.ndarray
    q_plus: np.ndarray
    hp_plus: np.ndarray
    q_partial: np.ndarray
    hp_partial: np.ndarray
    q_circ: np.ndarray
    hp_circ: np.ndarray


@dataclass
class EscapeFunction:
    """q = q_minus + C'' q_partial + C q_circ + C' q_plus with certified
    constants and batch evaluators."""

    model: object
    eps: float
    constants: BoundaryConstants
    cutoffs: CutoffFamily
    tubes: TubeCollection
    C: float
    C_prime: float
    C_dprime: float
    c2: float
    c3: float
    c4: float
    cascade: Dict[str, float] = field(default_factory=dict)

    def pieces(self, Z, ZETA) -> PieceArrays:
        model = self.model
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        ZETA = np.atleast_2d(np.asarray(ZETA, dtype=float))
        x, _, tau, _ = geo.scattering_coords(Z, ZETA)
        psi = self.cutoffs.psi(geo.symbol_p(model, Z, ZETA))
        qm, hm = eval_boundary_piece("minus", model, self.constants,
                                     self.cutoffs, self.eps, Z, ZETA)
        qp, hplus = eval_boundary_piece("plus", model, self.constants,
                                        self.cutoffs, self.eps, Z, ZETA)
        qd, hd = eval_boundary_piece("partial", model, self.constants,
                                     self.cutoffs, self.eps, Z, ZETA)
        qc, hc = eval_q_circ(model, self.tubes, Z, ZETA)
        return PieceArrays(x=x, tau=tau, psi=psi, q_minus=qm, hp_minus=hm,
                           q_plus=qp, hp_plus=hplus, q_partial=qd,
                           hp_partial=hd, q_circ=qc, hp_circ=hc)

    def combine(self, pc: PieceArrays):
        """(q/psi, H_p q/psi) from piece arrays."""
        q = (pc.q_minus + self.C_dprime * pc.q_partial
             + self.C * pc.q_circ + self.C_prime * pc.q_plus)
        hp = (pc.hp_minus + self.C_dprime * pc.hp_partial
              + self.C * pc.hp_circ + self.C_prime * pc.hp_plus)
        return q, hp

    def q(self, Z, ZETA):
        """Actual q values (psi factor included)."""
        pc = self.pieces(Z, ZETA)
        qpp, _ = self.combine(pc)
        return qpp * pc.psi

    def hp_q(self, Z, ZETA):
        """Actual H_p q values (psi factor included)."""
        pc = self.pieces(Z, ZETA)
        _, hp = self.combine(pc)
        return hp * pc.psi


def hpq_finite_difference(esc: EscapeFunction, Z, ZETA, delta=1e-5):
    """Flow finite difference of q/psi along H_p (equals H_p q / psi since
    psi(p) is flow-invariant); the oracle for the analytic derivative."""
    Zp, Cp = fl.flow_displace(esc.model, np.atleast_2d(Z), np.atleast_2d(ZETA), delta)
    Zm, Cm = fl.flow_displace(esc.model, np.atleast_2d(Z), np.atleast_2d(ZETA), -delta)
    qp, _ = esc.combine(esc.pieces(Zp, Cp))
    qm, _ = esc.combine(esc.pieces(Zm, Cm))
    return (qp - qm) / (2.0 * delta)


def assemble_escape(model, eps, verdict=None, seed_spacing=1.0,
                    grid_kwargs=None, max_halvings=60,
                    scan_samples=300) -> EscapeFunction:
    """Build the escape function by the halving cascade.

    eps must lie in (0, 1/4).  Non-trapping is a precondition: pass a scan
    verdict or one is run here (coarse).  The cascade floors are measured
    on a construction grid; verify_proposition re-certifies on the finer
    verification grid.
    """
    if not 0.0 < eps < 0.25:
        raise ConfigurationError(
            f"escape weight eps must lie in (0, 1/4), got {eps}"
        )
    if verdict is None:
        verdict = fl.nontrapping_scan(model, n_samples=scan_samples, T_max=150.0)
    if not verdict.is_nontrapping_empirical:
        raise ConstructionError(
            f"model is empirically trapping "
            f"({len(verdict.trapped_witnesses)} witnesses); no escape function"
        )
    consts = boundary_constants(model)
    cutoffs = build_cutoffs(model.lam, consts.c1, model.delta)
    tubes = build_tubes(model, consts, cutoffs, seed_spacing=seed_spacing)

    gkw = {"n_x": 220, "n_interior": 40, "n_energy": 14}
    gkw.update(grid_kwargs or {})
    Z, ZETA = phase_grid(model, **gkw)
    esc = EscapeFunction(model=model, eps=eps, constants=consts,
                         cutoffs=cutoffs, tubes=tubes,
                         C=1.0, C_prime=1.0, C_dprime=1.0,
                         c2=0.0, c3=0.0, c4=math.inf)
    pc = esc.pieces(Z, ZETA)
    x, tau = pc.x, pc.tau
    lam = model.lam
    x0 = consts.x0
    wm = x ** (-1.0 + eps)
    ws = x ** (-1.0 - eps)
    A_minus = -wm * pc.hp_minus
    A_circ = -wm * pc.hp_circ
    A_partial = -wm * pc.hp_partial
    A_plus = -ws * pc.hp_plus

    D1 = (x <= 0.5 * x0) & (tau >= 2.0 * lam / 3.0)
    D2pos = (x >= 0.5 * x0) | D1
    D2full = (x >= 0.5 * x0) | ((x <= 0.5 * x0) & (tau >= -0.75 * lam))
    D3 = (x <= 0.5 * x0) & (tau <= -2.0 * lam / 3.0)
    D4 = (x <= 0.5 * x0) & (np.abs(tau) < 0.75 * lam)

    if not np.any(D1):
        raise ConstructionError("construction grid misses the incoming collar")
    c2 = float(np.min(A_minus[D1]))
    if c2 <= 0:
        raise ConstructionError(f"incoming floor c2 = {c2:.3g} <= 0")
    c3 = float(np.min(A_plus[D3])) if np.any(D3) else math.inf
    c4 = float(np.min(A_partial[D4])) if np.any(D4) else math.inf

    cascade = {"c2": c2, "c3": c3, "c4": c4}

    C = 1.0
    halv = 0
    while np.min(A_minus[D1] + C * A_circ[D1]) < 0.5 * c2:
        C *= 0.5
        halv += 1
        if halv > max_halvings:
            bad = Z[D1][np.argsort(A_minus[D1] + C * A_circ[D1])[:8]]
            raise ConstructionError(f"tube-stage cascade exhausted; worst at {bad}")
    cascade["halvings_C"] = halv

    floor2 = float(np.min(A_minus[D2pos] + C * A_circ[D2pos]))
    if floor2 <= 0:
        worst = np.argmin(A_minus[D2pos] + C * A_circ[D2pos])
        raise ConstructionError(
            "no positive floor on the covered region after the tube stage "
            f"(floor {floor2:.3g}); covering margin too thin near "
            f"{Z[D2pos][worst]}"
        )
    cascade["floor2"] = floor2

    Cpp = 1.0
    halv = 0
    while np.min(A_minus[D2pos] + C * A_circ[D2pos] + Cpp * A_partial[D2pos]) \
            < 0.5 * floor2:
        Cpp *= 0.5
        halv += 1
        if halv > max_halvings:
            raise ConstructionError("intermediate-stage cascade exhausted")
    cascade["halvings_Cpp"] = halv

    three = A_minus + C * A_circ + Cpp * A_partial
    floor3 = float(np.min(three[D2full]))
    if floor3 <= 0:
        raise ConstructionError(
            f"no positive floor through the intermediate band ({floor3:.3g})"
        )
    cascade["floor3"] = floor3

    # final stage: the outgoing piece enters with the stronger weight
    base = x ** (-2.0 * eps) * three
    Cp = min(1.0, Cpp)
    halv = 0
    while np.min(base + Cp * A_plus) <= 0.0:
        Cp *= 0.5
        halv += 1
        if halv > max_halvings:
            raise ConstructionError("outgoing-stage cascade exhausted")
    cascade["halvings_Cp"] = halv
    cascade["c_dprime_construction"] = float(np.min(base + Cp * A_plus))

    esc.C, esc.C_prime, esc.C_dprime = C, Cp, Cpp
    esc.c2, esc.c3, esc.c4 = c2, c3, c4
    esc.cascade = cascade
    return esc


# ---------------------------------------------------------------------------
# the final certificate
# ---------------------------------------------------------------------------

@dataclass
class VerifyReport:
    c_prime: float
    c_dprime: float
    b_floor: float
    n_points: int
    argmin_q: Tuple[np.ndarray, np.ndarray]
    argmin_hpq: Tuple[np.ndarray, np.ndarray]
    witnesses: List[np.ndarray]

    @property
    def passed(self):
        return self.c_prime > 0 and self.c_dprime > 0 and self.b_floor > 0

    def summary(self):
        return (f"c'={self.c_prime:.6g} c''={self.c_dprime:.6g} "
                f"b_floor={self.b_floor:.6g} on {self.n_points} points")


def verify_proposition(esc: EscapeFunction, x_min=1e-3, n_x=600,
                       n_interior=80, n_energy=40,
                       raise_on_failure=True) -> VerifyReport:
    """Largest constants with q >= c' x^eps psi(p) and
    -H_p q >= c'' x^{1+eps} psi(p) at every grid point, plus the quadratic
    form b = -2 q H_p q / psi^2 >= b_floor x^{1+2 eps} where psi > 1/2.

    The default grid has >= 1e5 points over supp psi(p) down to x = x_min.
    """
    Z, ZETA = phase_grid(esc.model, x_min=x_min, n_x=n_x,
                         n_interior=n_interior, n_energy=n_energy)
    pc = esc.pieces(Z, ZETA)
    q, hp = esc.combine(pc)
    x = pc.x
    eps = esc.eps
    ratio_q = q / x**eps
    ratio_h = -hp / x ** (1.0 + eps)
    i_q = int(np.argmin(ratio_q))
    i_h = int(np.argmin(ratio_h))
    c_prime = float(ratio_q[i_q])
    c_dprime = float(ratio_h[i_h])
    plateau_mask = pc.psi > 0.5
    b = 2.0 * q * (-hp)
    if np.any(plateau_mask):
        b_floor = float(np.min(b[plateau_mask] / x[plateau_mask] ** (1.0 + 2 * eps)))
    else:
        b_floor = math.inf
    witnesses = []
    if c_prime <= 0:
        witnesses += [np.concatenate([Z[i], ZETA[i]])
                      for i in np.argsort(ratio_q)[:8]]
    if c_dprime <= 0:
        witnesses += [np.concatenate([Z[i], ZETA[i]])
                      for i in np.argsort(ratio_h)[:8]]
    report = VerifyReport(
        c_prime=c_prime, c_dprime=c_dprime, b_floor=b_floor,
        n_points=int(Z.shape[0]),
        argmin_q=(Z[i_q].copy(), ZETA[i_q].copy()),
        argmin_hpq=(Z[i_h].copy(), ZETA[i_h].copy()),
        witnesses=witnesses,
    )
    if raise_on_failure and not report.passed:
        raise ConstructionError(
            f"escape certificate failed: {report.summary()}; "
            f"witnesses {[w.tolist() for w in witnesses[:3]]}"
        )
    return report
