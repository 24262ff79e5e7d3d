"""Discretized Schrodinger operators and weighted resolvent norms.

P = h^2 Delta + V is discretized by banded finite differences on a box
[-L, L] with one of two boundary treatments:

- ``dirichlet``: the literal self-adjoint box operator; shifted solves need
  t != 0 (a finite box has discrete spectrum);
- ``cap``: a complex absorbing profile -i W(z) supported in the outer 20%
  of the box emulates the limiting resolvent at t = 0 and avoids box
  resonances.

The weighted norm ||<z>^-s R(lambda^2 + it) <z>^-s|| is the largest
singular value of the weighted resolvent, computed by power iteration where
every application is a forward plus adjoint banded solve reusing a single
LU factorization (the shifted matrix is complex symmetric, so the adjoint
solve is a conjugated solve).

The ground-truth oracle for the free line is the explicit kernel

    (i / (2 h sqrt(w))) exp(i sqrt(w) |z - z'| / h),   Im sqrt(w) > 0,

applied in O(M) per matvec through one-sided exponential recurrences, with
a grid-doubling convergence certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import eigh_tridiagonal, get_lapack_funcs
from scipy.signal import lfilter

from nontrap.errors import ConfigurationError, ConvergenceError
from nontrap.smooth import falling_step

_POWER_SEED = 7


# ---------------------------------------------------------------------------
# grids and discrete operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [-L, L] with N intervals; interior points only."""

    L: float
    N: int

    @property
    def dz(self):
        return 2.0 * self.L / self.N

    @property
    def z(self):
        """Interior nodes (Dirichlet rows)."""
        return -self.L + self.dz * np.arange(1, self.N)

    @property
    def size(self):
        return self.N - 1


def default_cap_profile(grid: Grid1D, lambda2: float, strength=0.5, fraction=0.2):
    """Absorbing profile W >= 0 supported in the outer `fraction` of the box
    (cubic ramp, strength*lambda2 at the wall)."""
    z = grid.z
    z0 = (1.0 - fraction) * grid.L
    u = np.clip((np.abs(z) - z0) / (grid.L - z0), 0.0, 1.0)
    return strength * lambda2 * u**3


@dataclass
class DiscreteOperator:
    """Banded matrix action of P = h^2 Delta + V (+ -iW for cap)."""

    grid: Grid1D
    h: float
    V: np.ndarray
    boundary: str               # 'dirichlet' | 'cap'
    W: Optional[np.ndarray]     # absorbing profile (cap only)
    order: int = 2
    extra_diagonal: Optional[np.ndarray] = None  # e.g. centrifugal term

    @property
    def size(self):
        return self.grid.size

    @property
    def bandwidth(self):
        return 1 if self.order == 2 else 2

    def diagonals(self):
        """(offsets, bands) of the symmetric banded matrix (complex)."""
        n = self.size
        dz2 = self.grid.dz**2
        c = self.h**2 / dz2
        diag = np.asarray(self.V, dtype=complex).copy()
        if self.extra_diagonal is not None:
            diag += self.extra_diagonal
        if self.boundary == "cap":
            diag -= 1j * self.W
        if self.order == 2:
            diag += 2.0 * c
            off1 = np.full(n - 1, -c, dtype=complex)
            return [0, 1], [diag, off1]
        diag += 2.5 * c
        off1 = np.full(n - 1, -4.0 / 3.0 * c, dtype=complex)
        off2 = np.full(n - 2, c / 12.0, dtype=complex)
        return [0, 1, 2], [diag, off1, off2]

    def apply(self, u):
        """Matrix-vector product P u."""
        offsets, bands = self.diagonals()
        out = bands[0] * u
        for off, band in zip(offsets[1:], bands[1:]):
            out[:-off] += band * u[off:]
            out[off:] += band * u[:-off]
        return out

    def shifted_solver(self, w: complex) -> "BandedSolver":
        """LU factorization of (P - w)."""
        return BandedSolver(self, w)

    def real_tridiagonal(self):
        """(diag, offdiag) of the real symmetric operator (dirichlet,
        order 2); used by dense spectral routines."""
        if self.boundary != "dirichlet" or self.order != 2:
            raise ConfigurationError(
                "spectral routines need a real symmetric tridiagonal operator "
                "(dirichlet boundary, order 2)"
            )
        offsets, bands = self.diagonals()
        return np.real(bands[0]), np.real(bands[1])


class BandedSolver:
    """One LU factorization of the shifted banded matrix, reusable for many
    forward and adjoint solves.

    The matrix is complex symmetric (M^T = M), so M^H = conj(M) and the
    adjoint solve is conj(solve(conj(rhs)))."""

    def __init__(self, op: DiscreteOperator, w: complex):
        self.op = op
        self.w = complex(w)
        n = op.size
        kl = ku = op.bandwidth
        offsets, bands = op.diagonals()
        ab = np.zeros((2 * kl + ku + 1, n), dtype=complex)
        # LAPACK banded storage: ab[kl + ku + i - j, j] = M[i, j]
        diag = bands[0] - self.w
        ab[kl + ku, :] = diag
        for off, band in zip(offsets[1:], bands[1:]):
            ab[kl + ku - off, off:] = band      # superdiagonal
            ab[kl + ku + off, :-off] = band     # subdiagonal
        gbtrf, = get_lapack_funcs(("gbtrf",), (ab,))
        lu, ipiv, info = gbtrf(ab, kl, ku)
        if info < 0:
            raise ConfigurationError(f"gbtrf: illegal argument {-info}")
        if info > 0:
            raise ConvergenceError(
                f"singular shifted factorization at w={self.w} "
                "(dirichlet at an eigenvalue? use t != 0 or cap boundary)"
            )
        self._lu, self._ipiv, self._kl, self._ku = lu, ipiv, kl, ku
        self._gbtrs, = get_lapack_funcs(("gbtrs",), (ab,))

    def solve(self, f):
        """(P - w)^{-1} f with residual verification (<= 1e-10 ||f||).

        Certified solves are not attainable arbitrarily close to a discrete
        eigenvalue (conditioning); use solve_uncertified inside power
        iterations, which only need backward stability."""
        u = self._solve_raw(np.asarray(f, dtype=complex))
        nf = np.linalg.norm(f)
        for _ in range(3):
            res = self.op.apply(u) - self.w * u - f
            if nf == 0 or np.linalg.norm(res) <= 1e-10 * nf:
                return u
            u = u - self._solve_raw(res)
        res = self.op.apply(u) - self.w * u - f
        if nf > 0 and np.linalg.norm(res) > 1e-10 * nf:
            raise ConvergenceError(
                f"shifted solve residual {np.linalg.norm(res)/nf:.2e} "
                "exceeds 1e-10 (shift too close to the spectrum?)"
            )
        return u

    def solve_uncertified(self, f):
        """Raw LU solve plus one refinement step (backward stable; no
        residual contract)."""
        u = self._solve_raw(np.asarray(f, dtype=complex))
        res = self.op.apply(u) - self.w * u - f
        return u - self._solve_raw(res)

    def _solve_raw(self, f):
        b = np.asarray(f, dtype=complex)
        x, info = self._gbtrs(self._lu, self._kl, self._ku, b, self._ipiv)
        if info != 0:
            raise ConvergenceError(f"gbtrs failed with info={info}")
        return x

    def solve_adjoint(self, f):
        """(P - w)^{-H} f via the complex-symmetric identity."""
        return np.conj(self.solve_uncertified(np.conj(np.asarray(f, dtype=complex))))


def discretize(model, h, L=200.0, N=2**15, boundary="cap", order=2,
               cap_strength=0.5, cap_fraction=0.2,
               extra_diagonal=None) -> DiscreteOperator:
    """Banded discretization of P for a 1D model.

    Guards (configuration errors, never silent): the grid must resolve the
    h-oscillation at the shell (>= 10 points per wavelength 2 pi h / lam)
    and the box must contain the weight's mass (L >= 40).
    """
    if model.dimension != 1:
        raise ConfigurationError(
            "discretize is one-dimensional; use radial_mode_operators for n=2"
        )
    if boundary not in ("dirichlet", "cap"):
        raise ConfigurationError(f"unknown boundary treatment {boundary!r}")
    if order not in (2, 4):
        raise ConfigurationError("finite-difference order must be 2 or 4")
    if L < 40.0:
        raise ConfigurationError(f"box must contain the weight's mass: L >= 40, got {L}")
    grid = Grid1D(L=float(L), N=int(N))
    lam = math.sqrt(model.lambda2)
    ppw = 2.0 * math.pi * h / (lam * grid.dz)
    if ppw < 10.0:
        raise ConfigurationError(
            f"resolution violation: {ppw:.1f} points per wavelength at "
            f"h={h}, need >= 10 (increase N)"
        )
    V = model.potential.value(grid.z[:, None])
    W = default_cap_profile(grid, model.lambda2, cap_strength, cap_fraction) \
        if boundary == "cap" else None
    if W is not None:
        # absorption must live strictly outside the weight's effective region
        onset = (1.0 - cap_fraction) * L
        if (1.0 + onset**2) ** (-0.5) > 0.05:
            raise ConfigurationError(
                "cap onset too close to the weighted region; enlarge L"
            )
    return DiscreteOperator(
        grid=grid, h=float(h), V=V, boundary=boundary, W=W, order=order,
        extra_diagonal=extra_diagonal,
    )


def small_box_operator(model, h, L=60.0, N=512, boundary="dirichlet",
                       order=2) -> DiscreteOperator:
    """Small dense-solvable operator for spectral-identity work
    (functional calculus, spectral-mapping bounds).

    No resolution guard: those identities hold exactly on the discrete
    self-adjoint matrix whatever the dispersion error; resolvent-norm
    measurements must use discretize() instead."""
    grid = Grid1D(L=float(L), N=int(N))
    V = model.potential.value(grid.z[:, None])
    W = default_cap_profile(grid, model.lambda2) if boundary == "cap" else None
    return DiscreteOperator(grid=grid, h=float(h), V=V, boundary=boundary,
                            W=W, order=order)


def solve_shifted(op: DiscreteOperator, w: complex, f):
    """One-off solve (P - w) u = f (factor + solve + residual check)."""
    if op.boundary == "dirichlet" and abs(complex(w).imag) == 0.0:
        raise ConfigurationError(
            "dirichlet boundary requires a nonreal shift (t != 0)"
        )
    return op.shifted_solver(w).solve(f)


# ---------------------------------------------------------------------------
# power iteration for weighted norms
# ---------------------------------------------------------------------------

@dataclass
class NormResult:
    value: float
    iterations: int
    converged: bool
    history: Tuple[float, ...] = ()


def _power_norm(apply_A: Callable, apply_AH: Callable, n: int,
                tol=1e-6, maxiter=500, fail_tol=1e-4) -> NormResult:
    rng = np.random.default_rng(_POWER_SEED)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    sigma_old = 0.0
    hist = []
    for it in range(1, maxiter + 1):
        w = apply_AH(apply_A(v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return NormResult(0.0, it, True)
        sigma = math.sqrt(nw)
        hist.append(sigma)
        rel = abs(sigma - sigma_old) / max(sigma, 1e-300)
        v = w / nw
        if it > 2 and rel <= tol:
            return NormResult(sigma, it, True, tuple(hist[-4:]))
        sigma_old = sigma
    if hist and abs(hist[-1] - hist[-2]) / max(hist[-1], 1e-300) <= fail_tol:
        return NormResult(hist[-1], maxiter, True, tuple(hist[-4:]))
    raise ConvergenceError(
        f"weighted norm power iteration: no convergence in {maxiter} "
        f"iterations; last values {hist[-4:]}"
    )


def weighted_resolvent_norm(op: DiscreteOperator, lambda2: float, t: float,
                            s: float, s_source: Optional[float] = None,
                            tol=1e-6, maxiter=500) -> NormResult:
    """|| <z>^-s R(lambda2 + it) <z>^-s_source || by power iteration.

    Default is the symmetric weight of the uniform estimate (s_source = s);
    the asymmetric variant (source side 1/2 + 3 eps) is available through
    s_source.
    """
    if op.boundary == "dirichlet" and t == 0.0:
        raise ConfigurationError("dirichlet boundary requires t != 0")
    w = complex(lambda2, t)
    solver = op.shifted_solver(w)
    z = op.grid.z
    wr = (1.0 + z**2) ** (-0.5 * s)
    wc = wr if s_source is None else (1.0 + z**2) ** (-0.5 * s_source)

    def apply_A(v):
        return wr * solver.solve_uncertified(wc * v)

    def apply_AH(v):
        return wc * solver.solve_adjoint(wr * v)

    return _power_norm(apply_A, apply_AH, op.size, tol=tol, maxiter=maxiter)


# ---------------------------------------------------------------------------
# analytic free-kernel oracle
# ---------------------------------------------------------------------------

class FreeKernelOperator:
    """Weighted free resolvent on a fine grid, applied via one-sided
    exponential recurrences (O(M) per matvec)."""

    def __init__(self, lambda2, t, h, s, L=200.0, M=2**16, s_source=None):
        if t <= 0:
            raise ConfigurationError("the analytic oracle needs t > 0")
        self.w = complex(lambda2, t)
        self.h = float(h)
        sq = np.sqrt(self.w)
        if sq.imag < 0:
            sq = -sq
        self.kappa = sq / h          # Im kappa > 0
        self.pref = 1j / (2.0 * h * sq)
        self.M = int(M)
        self.z = np.linspace(-L, L, self.M)
        self.dzg = self.z[1] - self.z[0]
        self.q = np.exp(1j * self.kappa * self.dzg)  # |q| < 1
        self.wr = (1.0 + self.z**2) ** (-0.5 * s)
        self.wc = self.wr if s_source is None else (1.0 + self.z**2) ** (-0.5 * s_source)

    def _sum_same(self, u, q):
        """S_i = sum_{j <= i} q^{i-j} u_j (stable: |q| <= 1)."""
        return lfilter([1.0], [1.0, -q], u)

    def _sum_above(self, u, q):
        """S_i = sum_{j > i} q^{j-i} u_j."""
        rev = u[::-1]
        acc = lfilter([q], [1.0, -q], rev[:-1])
        out = np.zeros_like(u)
        out[:-1] = acc[::-1]
        return out

    def _kernel_apply(self, u, kappa_sign_conj=False):
        q = np.conj(self.q) if kappa_sign_conj else self.q
        pref = np.conj(self.pref) if kappa_sign_conj else self.pref
        total = self._sum_same(u.astype(complex), q) + self._sum_above(u.astype(complex), q)
        return pref * self.dzg * total

    def apply(self, v):
        return self.wr * self._kernel_apply(self.wc * v)

    def apply_adjoint(self, v):
        # kernel is complex symmetric; adjoint = conjugate kernel, weights swapped
        return self.wc * np.conj(self._kernel_apply(np.conj(self.wr * v)))

    def dense_matrix(self):
        """Explicit weighted kernel matrix (small M only; test oracle)."""
        if self.M > 4000:
            raise ConfigurationError("dense_matrix is for small grids")
        dz = np.abs(self.z[:, None] - self.z[None, :])
        K = self.pref * np.exp(1j * self.kappa * dz) * self.dzg
        return self.wr[:, None] * K * self.wc[None, :]

    def norm(self, tol=1e-6, maxiter=500) -> NormResult:
        return _power_norm(self.apply, self.apply_adjoint, self.M,
                           tol=tol, maxiter=maxiter)


def analytic_free_resolvent_norm(lambda2, t, h, s, L=200.0, M=2**16,
                                 s_source=None, certify=True) -> float:
    """Weighted free resolvent norm from the explicit kernel.

    With certify=True the value is recomputed at double resolution and the
    two must agree within 0.5% (the oracle's own convergence certificate).
    """
    base = FreeKernelOperator(lambda2, t, h, s, L=L, M=M, s_source=s_source).norm().value
    if certify:
        fine = FreeKernelOperator(lambda2, t, h, s, L=L, M=2 * M, s_source=s_source).norm().value
        if abs(fine - base) > 5e-3 * fine:
            raise ConvergenceError(
                f"oracle not grid-converged: {base} vs {fine} at doubled M"
            )
        return fine
    return base


# ---------------------------------------------------------------------------
# h sweep and scaling report
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    h: float
    lambda2: float
    t: float
    s: float
    norm: float
    iterations: int
    mode: str


@dataclass
class ScalingReport:
    model_name: str
    s: float
    t_rule: str
    h_list: List[float]
    cells: List[SweepCell]
    slope: float
    intercept: float
    residual: float
    uniformity: dict            # h -> max/min over the lambda probes
    lambda_probes: List[float]

    @property
    def max_uniformity_ratio(self):
        return max(self.uniformity.values()) if self.uniformity else math.inf

    def center_norms(self):
        lam0 = self.lambda_probes[len(self.lambda_probes) // 2]
        return {
            c.h: c.norm for c in self.cells if c.lambda2 == lam0
        }


def _t_for(t_rule, h):
    if t_rule == "cap":
        return 0.0
    if t_rule == "dirichlet":
        return h / 10.0
    raise ConfigurationError(f"unknown t_rule {t_rule!r} (cap|dirichlet)")


def _sweep_cell(model, h, lam2, t_rule, s, L, N, order) -> SweepCell:
    boundary = "cap" if t_rule == "cap" else "dirichlet"
    t = _t_for(t_rule, h)
    op = discretize(model, h, L=L, N=N, boundary=boundary, order=order)
    res = weighted_resolvent_norm(op, lam2, t, s)
    return SweepCell(h=h, lambda2=lam2, t=t, s=s, norm=res.value,
                     iterations=res.iterations, mode=boundary)


def h_sweep(model, lambda2=None, h_list=(0.2, 0.14, 0.1, 0.07, 0.05),
            t_rule="cap", s=0.7, L=200.0, N=2**15, order=2,
            lambda_probes=None, jobs=1, model_name="model") -> ScalingReport:
    """Sweep h, fit the scaling exponent, probe uniformity in lambda^2.

    The fitted slope is of log(norm) against log(1/h); the probes are three
    energies across the window plateau and the per-h max/min ratio is the
    uniformity certificate.
    """
    lam2 = model.lambda2 if lambda2 is None else float(lambda2)
    h_list = sorted(set(float(h) for h in h_list), reverse=True)
    if lambda_probes is None:
        half = 0.5 * model.delta
        lambda_probes = [lam2 - half, lam2, lam2 + half]
    tasks = [(h, l2) for h in h_list for l2 in lambda_probes]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [
                ex.submit(_sweep_cell, model, h, l2, t_rule, s, L, N, order)
                for (h, l2) in tasks
            ]
            cells = [f.result() for f in futs]
    else:
        cells = [_sweep_cell(model, h, l2, t_rule, s, L, N, order) for (h, l2) in tasks]
    by_h = {}
    for c in cells:
        by_h.setdefault(c.h, []).append(c.norm)
    uniformity = {h: max(v) / min(v) for h, v in by_h.items()}
    center = [c.norm for c in cells if c.lambda2 == lambda_probes[len(lambda_probes) // 2]]
    hs = np.array(h_list)
    ns = np.array(center)
    coef = np.polyfit(np.log(1.0 / hs), np.log(ns), 1)
    slope, intercept = float(coef[0]), float(coef[1])
    fit = slope * np.log(1.0 / hs) + intercept
    residual = float(np.sqrt(np.mean((np.log(ns) - fit) ** 2)))
    return ScalingReport(
        model_name=model_name, s=s, t_rule=t_rule, h_list=list(h_list),
        cells=cells, slope=slope, intercept=intercept, residual=residual,
        uniformity=uniformity, lambda_probes=list(lambda_probes),
    )


def window_sup_norm(model, h, s=0.7, n_scan=81, t_rule="cap", L=200.0,
                    N=2**15, order=2, lambda2=None) -> Tuple[float, float]:
    """Sup of the weighted norm over a fine lambda^2 scan of the window
    plateau.  The uniform estimate is a statement about the whole window,
    so its failure under trapping is measured by the window sup (a pointwise
    probe would be resonance-position roulette).

    Returns (sup_norm, argmax_lambda2)."""
    lam2 = model.lambda2 if lambda2 is None else float(lambda2)
    half = 0.5 * model.delta
    boundary = "cap" if t_rule == "cap" else "dirichlet"
    t = _t_for(t_rule, h)
    op = discretize(model, h, L=L, N=N, boundary=boundary, order=order)
    best, arg = -math.inf, lam2
    for l2 in np.linspace(lam2 - half, lam2 + half, n_scan):
        res = weighted_resolvent_norm(op, float(l2), t, s)
        if res.value > best:
            best, arg = res.value, float(l2)
    return best, arg


# ---------------------------------------------------------------------------
# 2D: radial symmetry reduction
# ---------------------------------------------------------------------------

def radial_mode_operators(model, h, L=200.0, N=2**15, boundary="cap",
                          order=2, r_ref=1.0, cap_strength=0.5):
    """Half-line operators for the angular modes of a radially symmetric 2D
    model (u = sum_l e^{i l y} v_l(r) / sqrt(r)).

    Modes are truncated once the centrifugal term h^2 (l^2 - 1/4) / r^2
    exceeds 4 lambda^2 at the reference radius; beyond that the mode is
    elliptic on the weight-relevant region and its contribution is O(1).
    Returns a list of (l, DiscreteOperator) on the half line (0, L].
    """
    if model.dimension != 2 or not model.metric.is_flat:
        raise ConfigurationError(
            "radial reduction needs a radially symmetric (flat-metric) 2D model"
        )
    lam = math.sqrt(model.lambda2)
    l_max = int(math.ceil(math.sqrt(4.0 * model.lambda2 * r_ref**2 / h**2 + 0.25)))
    grid = Grid1D(L=float(L) / 2.0, N=int(N))  # reuse [-L/2, L/2] -> (0, L]
    # half-line nodes: shift so r in (0, L]
    r = grid.z + grid.L
    ppw = 2.0 * math.pi * h / (lam * grid.dz)
    if ppw < 10.0:
        raise ConfigurationError("resolution violation on the radial grid")
    ops = []
    Vr = model.potential.value(np.stack([r, np.zeros_like(r)], axis=-1))
    W = None
    if boundary == "cap":
        z0 = 0.8 * float(L)
        u = np.clip((r - z0) / (float(L) - z0), 0.0, 1.0)
        W = cap_strength * model.lambda2 * u**3
    for l in range(0, l_max + 1):
        centrifugal = h**2 * (l**2 - 0.25) / r**2
        ops.append(
            (l, DiscreteOperator(grid=grid, h=h, V=Vr, boundary=boundary, W=W,
                                 order=order, extra_diagonal=centrifugal))
        )
    return ops, r


def weighted_resolvent_norm_2d(model, h, lambda2=None, t=0.0, s=0.7,
                               L=200.0, N=2**15, boundary="cap",
                               tol=1e-6) -> Tuple[float, int]:
    """Weighted 2D norm = sup over angular modes of the half-line norms
    (the radial weight acts diagonally in each mode).  Returns
    (norm, argmax_mode)."""
    lam2 = model.lambda2 if lambda2 is None else float(lambda2)
    ops, r = radial_mode_operators(model, h, L=L, N=N, boundary=boundary)
    wr = (1.0 + r**2) ** (-0.5 * s)
    best, arg = -math.inf, 0
    for l, op in ops:
        solver = op.shifted_solver(complex(lam2, t))

        def apply_A(v):
            return wr * solver.solve_uncertified(wr * v)

        def apply_AH(v):
            return wr * solver.solve_adjoint(wr * v)

        res = _power_norm(apply_A, apply_AH, op.size, tol=tol)
        if res.value > best:
            best, arg = res.value, l
    if arg == len(ops) - 1:
        raise ConvergenceError(
            "2D mode truncation suspect: the largest retained mode dominates"
        )
    return best, arg


# ---------------------------------------------------------------------------
# functional calculus
# ---------------------------------------------------------------------------

def _eigendecomposition(op: DiscreteOperator):
    if op.size > 4096:
        raise ConfigurationError("eigen method requires N <= 4096")
    diag, off = op.real_tridiagonal()
    return eigh_tridiagonal(diag, off)


def eigenvalues(op: DiscreteOperator):
    diag, off = op.real_tridiagonal()
    return eigh_tridiagonal(diag, off, eigvals_only=True)


def gaussian_bump(center: float, width: float, order=6):
    """(f, derivatives) for f = exp(-((x-c)/w)^2) with analytic derivatives
    via the Hermite recurrence; the clean input family for the
    Helffer-Sjostrand quadrature."""

    def deriv(j):
        def d(x):
            u = (np.asarray(x, dtype=float) - center) / width
            h_prev = np.ones_like(u)
            h = 2.0 * u
            if j == 0:
                hj = h_prev
            elif j == 1:
                hj = h
            else:
                for m in range(1, j):
                    h_prev, h = h, 2.0 * u * h - 2.0 * m * h_prev
                hj = h
            return (-1.0) ** j * hj * np.exp(-(u**2)) / width**j

        return d

    derivs = [deriv(j) for j in range(order + 1)]
    return derivs[0], derivs


def function_of_operator(op: DiscreteOperator, f: Callable, method="eigen",
                         support: Optional[Tuple[float, float]] = None,
                         K=4, nx=200, ny=100, Y=1.0, check=True,
                         check_tol=1e-6, derivatives=None) -> np.ndarray:
    """Dense matrix of f(P) for compactly supported smooth f.

    'eigen' is spectral mapping through a dense symmetric
    eigendecomposition.  'helffer_sjostrand' builds the almost-analytic
    extension f~(x+iy) = chi(y) sum_{k<=K} f^(k)(x) (iy)^k / k! and
    integrates dbar f~ against shifted solves over a contour box; with
    check=True the quadrature is re-run at half resolution and must agree.

    Derivatives of f up to order K+1 are taken from `derivatives`
    (callables, preferred: exact) or by spectral differentiation of samples
    with a noise-aware low-pass (float rounding amplified by k^(K+1) makes
    raw spectral derivatives of steep cutoffs meaningless)."""
    if method == "eigen":
        vals, vecs = _eigendecomposition(op)
        return (vecs * f(vals)[None, :]) @ vecs.T
    if method != "helffer_sjostrand":
        raise ConfigurationError(f"unknown method {method!r}")
    if support is None:
        raise ConfigurationError("helffer_sjostrand needs the support of f")

    val = _hs_matrix(op, f, support, K, nx, ny, Y, derivatives)
    if check:
        coarse = _hs_matrix(op, f, support, K, nx // 2, ny // 2, Y, derivatives)
        diff = np.linalg.norm(val - coarse, 2)
        if diff > check_tol * (1.0 + np.linalg.norm(val, 2)):
            raise ConvergenceError(
                f"Helffer-Sjostrand quadrature not converged: {diff:.2e} "
                "change under refinement"
            )
    return val


def _spectral_derivatives(f, lo, hi, K, sel_count):
    """Sampled derivatives f^(0..K+1) with a smooth low-pass at the float
    noise crossing of the spectrum."""
    M = 4096
    xs = np.linspace(lo, hi, M, endpoint=False)
    dxs = xs[1] - xs[0]
    fv = f(xs)
    fhat = np.fft.fft(fv)
    k = 2.0 * np.pi * np.fft.fftfreq(M, d=dxs)
    mag = np.abs(fhat)
    floor = 1e-13 * np.max(mag)
    above = np.abs(k)[mag > floor]
    k_cut = np.max(above) if above.size else np.max(np.abs(k))
    mask = falling_step(0.5 * k_cut, k_cut)(np.abs(k))
    derivs = [np.real(np.fft.ifft(mask * fhat))]
    for j in range(1, K + 2):
        derivs.append(np.real(np.fft.ifft(mask * (1j * k) ** j * fhat)))
    return xs, dxs, derivs


def _hs_matrix(op, f, support, K, nx, ny, Y, derivatives=None):
    a, b = support
    pad = 0.5 * (b - a)
    lo, hi = a - pad, b + pad
    if derivatives is not None:
        if len(derivatives) < K + 2:
            raise ConfigurationError(
                f"helffer_sjostrand needs derivatives up to order {K + 1}"
            )
        x_nodes = lo + (np.arange(nx) + 0.5) * (hi - lo) / nx
        dx = (hi - lo) / nx
        dtab = [np.asarray(derivatives[j](x_nodes), dtype=float) for j in range(K + 2)]
    else:
        xs, dxs, derivs = _spectral_derivatives(f, lo, hi, K, nx)
        stride = max(1, len(xs) // nx)
        sel = np.arange(0, len(xs), stride)
        x_nodes = xs[sel]
        dx = dxs * stride
        dtab = [d[sel] for d in derivs]
    y_nodes = (np.arange(ny) + 0.5) * (Y / ny)
    dy = Y / ny
    chi = falling_step(0.5 * Y, Y)
    n = op.size
    out = np.zeros((n, n), dtype=complex)
    eye_f = np.asfortranarray(np.eye(n, dtype=complex))
    fac = [math.factorial(j) for j in range(K + 2)]
    for yv in y_nodes:
        cy = float(chi(yv))
        cyd = float(chi.d(yv))
        if cy == 0.0 and cyd == 0.0:
            continue
        iy = 1j * yv
        # dbar f~ = (1/2) chi f^{K+1} (iy)^K / K! + (i/2) chi' sum f^k (iy)^k / k!
        taylor = np.zeros(len(x_nodes), dtype=complex)
        for j in range(K + 1):
            taylor += dtab[j] * iy**j / fac[j]
        dbar = 0.5 * cy * dtab[K + 1] * iy**K / fac[K] + 0.5j * cyd * taylor
        cutoff = 1e-15 * np.max(np.abs(dbar))
        for ix, xv in enumerate(x_nodes):
            wgt = dbar[ix]
            if abs(wgt) <= cutoff:
                continue
            solver = op.shifted_solver(complex(xv, yv))
            B = eye_f.copy(order="F")
            Rz, info = solver._gbtrs(
                solver._lu, solver._kl, solver._ku, B, solver._ipiv,
                overwrite_b=1,
            )
            if info != 0:
                raise ConvergenceError(f"gbtrs failed with info={info}")
            # real f, symmetric P: the conjugate node contributes 2 Re
            Rz *= (2.0 / math.pi) * dx * dy * wgt
            out += Rz
    return np.real(out)


def nonchar_bound(op: DiscreteOperator, psi: Callable, lambda2: float,
                  t_list) -> float:
    """sup over t of ||(Id - psi(P)) (P - lambda2 - i t)^{-1}|| on L^2,
    by spectral mapping on the discrete spectrum."""
    vals = eigenvalues(op)
    best = 0.0
    for t in t_list:
        best = max(best, float(np.max(
            np.abs(1.0 - psi(vals)) / np.abs(vals - complex(lambda2, t))
        )))
    return best


def scalar_spectral_bound(psi: Callable, lambda2: float, t_list,
                          sigma_range, n=20001) -> float:
    """sup over t and a fine sigma grid of |1 - psi(sigma)| / |sigma - w|."""
    sig = np.linspace(sigma_range[0], sigma_range[1], n)
    best = 0.0
    for t in t_list:
        best = max(best, float(np.max(
            np.abs(1.0 - psi(sig)) / np.abs(sig - complex(lambda2, t))
        )))
    return best
