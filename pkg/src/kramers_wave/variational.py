"""Stochastic-control bounds on Gaussian partition functions.

The free field is built progressively: a bump profile rho feeds per-mode
schedules rho_t(k) = rho(2<k>/<t>), whose derivative sigma_t(k)^2 fixes
the noise intensity.  Integrating J_t against Brownian increments up to
T_end produces the truncated free field; adding an adapted drift and its
quadratic cost gives an upper bound on -log E e^{-V} for any strategy,
and the infimum attains it.

Conventions that the construction leaves open are fixed here and pinned
by the oracle comparison tests: mode variance E|phi(k)|^2 = rho^2/bracket
with no volume factor, drift cost ||v||^2 = sum_k |v(k)|^2, Brownian
increments with total per-mode variance equal to the grid spacing.

Only scalar (zero-mode) drift families are implemented; richer feedback
ansatz chains are out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .spectral import (
    MassKind,
    SpectralField,
    TorusSpec,
    _half_mode_rows,
    mode_ksq,
    zero_mode_row,
)


def bump(s):
    """C^2 cutoff: 1 below 1, 0 above 2, quintic in between."""
    s = np.asarray(s, dtype=float)
    x = np.clip(s - 1.0, 0.0, 1.0)
    val = 1.0 - x**3 * (10.0 - 15.0 * x + 6.0 * x * x)
    return val if val.ndim else float(val)


def bump_deriv(s):
    s = np.asarray(s, dtype=float)
    x = s - 1.0
    inside = (x > 0.0) & (x < 1.0)
    x = np.clip(x, 0.0, 1.0)
    val = np.where(inside, -30.0 * x * x * (1.0 - x) ** 2, 0.0)
    return val if val.ndim else float(val)


def _angle(tsq):
    """<t> = sqrt(1 + t^2), vectorized in t^2."""
    return np.sqrt(1.0 + tsq)


@dataclass
class RhoSchedule:
    """Time grid geometric in <t> plus the per-mode bump schedules."""

    N: int
    points_per_octave: int = 64
    t_end: float | None = None
    t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.N < 0:
            raise ValueError("N must be nonnegative")
        if self.t_end is None:
            self.t_end = float(self.N + 2)
        if self.t_end < self.N:
            raise ValueError("t_end must reach at least N")
        m_end = math.sqrt(1.0 + self.t_end**2)
        octaves = math.log2(m_end)
        n_pts = max(2, math.ceil(self.points_per_octave * octaves)) + 1
        m = np.geomspace(1.0, m_end, n_pts)
        self.t = np.sqrt(np.maximum(m * m - 1.0, 0.0))
        self.t[0] = 0.0
        self.t[-1] = self.t_end

    @property
    def m(self) -> np.ndarray:
        return _angle(self.t**2)

    def rho_t(self, t, ksq) -> np.ndarray:
        """rho_t(k) = rho(2<k>/<t>) for |k|^2 = ksq (lattice bracket)."""
        kang = _angle(np.asarray(ksq, dtype=float))
        return bump(2.0 * kang / _angle(np.asarray(t, dtype=float) ** 2))

    def sigma_sq(self, t, ksq) -> np.ndarray:
        """d/dt rho_t(k)^2, in closed form (nonnegative)."""
        t = np.asarray(t, dtype=float)
        kang = _angle(np.asarray(ksq, dtype=float))
        m = _angle(t * t)
        s = 2.0 * kang / m
        return -2.0 * bump(s) * bump_deriv(s) * 2.0 * kang * t / m**3

    def rho_sq_grid(self, ksq) -> np.ndarray:
        """rho_t(k)^2 on the full grid, shape (len(t), len(ksq))."""
        kang = _angle(np.asarray(ksq, dtype=float))
        s = 2.0 * kang[None, :] / self.m[:, None]
        return bump(s) ** 2

    def interval_vars(self, ksq) -> np.ndarray:
        """Exact per-interval variance increments rho_{t+}^2 - rho_t^2."""
        # rho_t is nondecreasing in t; clip float dust so sqrt stays safe
        return np.maximum(np.diff(self.rho_sq_grid(ksq), axis=0), 0.0)


def sigma_identity_check(schedule: RhoSchedule, k_values) -> float:
    """Max defect of the cumulative quadrature of sigma^2 against rho_T^2.

    The identity int_0^T sigma_t(k)^2 dt = rho_T(k)^2 is exact; this
    integrates sigma^2 numerically (three-point Gauss-Legendre per grid
    interval) and reports the worst absolute error over k and all grid
    endpoints T.
    """
    nodes, weights = np.polynomial.legendre.leggauss(3)
    ksq = np.asarray([float(k) ** 2 for k in k_values])
    a, b = schedule.t[:-1], schedule.t[1:]
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    tp = mid[:, None] + half[:, None] * nodes[None, :]
    sig = schedule.sigma_sq(tp[:, :, None], ksq[None, None, :])
    per_interval = np.einsum("g,igk->ik", weights, sig) * half[:, None]
    cum = np.concatenate([np.zeros((1, len(ksq))), np.cumsum(per_interval, axis=0)])
    target = schedule.rho_sq_grid(ksq)
    return float(np.max(np.abs(cum - target)))


def _j_multiplier(spec: TorusSpec, schedule: RhoSchedule, t, mass_kind: MassKind) -> np.ndarray:
    ksq = mode_ksq(spec.d, spec.N).astype(float)
    bracket = spec.bracket(mass_kind)
    sig = np.sqrt(np.maximum(schedule.sigma_sq(t, ksq), 0.0))
    mult = np.zeros_like(sig)
    ok = bracket > 0
    mult[ok] = sig[ok] / np.sqrt(bracket[ok])
    return mult


def apply_Jt(
    g: SpectralField, t: float, schedule: RhoSchedule, mass_kind: MassKind
) -> SpectralField:
    """Per-mode smoothing sigma_t(k) 1_{bracket>0} / sqrt(bracket)."""
    if not 0.0 <= t <= schedule.t_end:
        raise ValueError(f"t={t} outside the schedule range [0, {schedule.t_end}]")
    mult = _j_multiplier(g.spec, schedule, t, mass_kind)
    return SpectralField(g.spec, mult * g.coeffs)


@dataclass
class BrownianPath:
    """Hermitian complex increments on the schedule grid.

    Convention: E|dB(k)|^2 = dt for every mode (real and imaginary parts
    carry dt/2 each for k != 0; dB(0) is real with variance dt), so the
    Ito isometry carries no extra factor.
    """

    spec: TorusSpec
    t: np.ndarray
    increments: np.ndarray  # (len(t)-1, n_modes)

    @classmethod
    def sample(cls, schedule: RhoSchedule, spec: TorusSpec, rng: np.random.Generator):
        xi = _hermitian_batch(spec, rng, len(schedule.t) - 1)
        dt = np.diff(schedule.t)
        return cls(spec, schedule.t.copy(), xi * np.sqrt(dt)[:, None])

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        plus, conj, zero = _half_mode_rows(self.spec.d, self.spec.N)
        if np.max(np.abs(self.increments[:, zero].imag), initial=0.0) > tol:
            return False
        if len(plus) == 0:
            return True
        gap = self.increments[:, conj] - np.conj(self.increments[:, plus])
        return float(np.max(np.abs(gap))) <= tol


def _hermitian_batch(spec: TorusSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """n independent hermitian-standard coefficient rows, shape (n, n_modes)."""
    plus, conj, zero = _half_mode_rows(spec.d, spec.N)
    z = np.zeros((n, spec.n_modes), dtype=np.complex128)
    if len(plus):
        vals = (rng.standard_normal((n, len(plus))) + 1j * rng.standard_normal((n, len(plus)))) / math.sqrt(2.0)
        z[:, plus] = vals
        z[:, conj] = np.conj(vals)
    z[:, zero] = rng.standard_normal(n)
    return z


def integrate_I(obj, schedule: RhoSchedule, spec: TorusSpec, mass_kind: MassKind) -> SpectralField:
    """I_T = int_0^T J_t f_t dt over the grid.

    For a BrownianPath the per-interval multiplier uses the exact interval
    variance (so the time-T law is exact); for a callable t -> SpectralField
    drift the rule is plain left-point quadrature with sigma at the left
    node, matching the Ito convention of the drift cost.
    """
    ksq = mode_ksq(spec.d, spec.N).astype(float)
    bracket = spec.bracket(mass_kind)
    ok = bracket > 0
    inv_root = np.zeros(spec.n_modes)
    inv_root[ok] = 1.0 / np.sqrt(bracket[ok])

    if isinstance(obj, BrownianPath):
        if len(obj.t) != len(schedule.t):
            raise ValueError("path grid does not match the schedule")
        dvar = schedule.interval_vars(ksq)
        dt = np.diff(schedule.t)
        mult = np.sqrt(dvar / dt[:, None]) * inv_root[None, :]
        coeffs = np.sum(mult * obj.increments, axis=0)
        return SpectralField(spec, coeffs)

    coeffs = np.zeros(spec.n_modes, dtype=np.complex128)
    dt = np.diff(schedule.t)
    for i, t_i in enumerate(schedule.t[:-1]):
        f = obj(t_i)
        mult = _j_multiplier(spec, schedule, t_i, mass_kind)
        coeffs += mult * f.coeffs * dt[i]
    return SpectralField(spec, coeffs)


def phi_mode_std(spec: TorusSpec, schedule: RhoSchedule, mass_kind: MassKind) -> np.ndarray:
    """Per-mode standard deviations of the time-T_end free field."""
    ksq = mode_ksq(spec.d, spec.N).astype(float)
    bracket = spec.bracket(mass_kind)
    rho_sq = schedule.rho_sq_grid(ksq)[-1]
    std = np.zeros(spec.n_modes)
    ok = bracket > 0
    std[ok] = np.sqrt(rho_sq[ok] / bracket[ok])
    return std


def sample_phi(
    spec: TorusSpec,
    schedule: RhoSchedule,
    mass_kind: MassKind,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Exact field samples at T_end, shape (n, n_modes)."""
    return phi_mode_std(spec, schedule, mass_kind)[None, :] * _hermitian_batch(spec, rng, n)


def phi_wick_constant(spec: TorusSpec, schedule: RhoSchedule, mass_kind: MassKind) -> float:
    """E phi(x)^2 = sum_k rho^2/bracket for the progressively built field."""
    return float(np.sum(phi_mode_std(spec, schedule, mass_kind) ** 2))


# ---------------------------------------------------------------------------
# Drift strategies (scalar, zero-mode families)


@dataclass(frozen=True)
class _Context:
    spec: TorusSpec
    schedule: RhoSchedule
    mass_kind: MassKind
    bracket0: float
    rho_sq_end0: float
    g0: np.ndarray  # per-interval zero-mode noise multipliers
    dt: np.ndarray


def _make_context(spec, schedule, mass_kind) -> _Context:
    zrow = zero_mode_row(spec)
    bracket0 = float(spec.bracket(mass_kind)[zrow])
    if bracket0 <= 0:
        raise ValueError("zero-mode drift families need a positive bracket")
    dvar0 = schedule.interval_vars(np.array([0.0]))[:, 0]
    rho_sq_end0 = float(schedule.rho_sq_grid(np.array([0.0]))[-1, 0])
    g0 = np.sqrt(dvar0 / bracket0)
    return _Context(spec, schedule, mass_kind, bracket0, rho_sq_end0, g0, np.diff(schedule.t))


class ZeroDrift:
    tag = "zero"
    needs_future = False

    def realize(self, ctx: _Context, rng: np.random.Generator, n: int):
        phi0 = np.sqrt(ctx.rho_sq_end0 / ctx.bracket0) * rng.standard_normal(n)
        return phi0, np.zeros(n), np.zeros(n)


@dataclass
class ConstantShift:
    """v_t(0) = a sigma_t(0) sqrt(bracket): shifts the final zero mode by
    a rho_T(0)^2 at quadratic cost a^2 rho_T(0)^2 bracket / 2."""

    a: float
    tag = "constant-shift"
    needs_future = False

    def realize(self, ctx: _Context, rng: np.random.Generator, n: int):
        phi0 = np.sqrt(ctx.rho_sq_end0 / ctx.bracket0) * rng.standard_normal(n)
        shift = self.a * ctx.rho_sq_end0
        cost = 0.5 * self.a**2 * ctx.bracket0 * ctx.rho_sq_end0
        return phi0, np.full(n, shift), np.full(n, cost)


@dataclass
class FeedbackShift:
    """Adapted steering toward `target`: each step looks at the zero mode
    accumulated so far (noise plus drift) and pushes proportionally."""

    target: float
    gain: float
    tag = "feedback"
    needs_future = False

    def realize(self, ctx: _Context, rng: np.random.Generator, n: int):
        running = np.zeros(n)  # zero mode of phi + shift so far
        shift = np.zeros(n)
        cost = np.zeros(n)
        root_br = math.sqrt(ctx.bracket0)
        for i, g in enumerate(ctx.g0):
            if g == 0.0:
                continue
            sigma_bar = g * root_br / math.sqrt(ctx.dt[i])  # sigma/sqrt(br)*br^{1/2}
            v = self.gain * (self.target - running) * sigma_bar * root_br
            xi = rng.standard_normal(n)
            dshift = (sigma_bar / root_br) * v * ctx.dt[i]
            cost += 0.5 * v * v * ctx.dt[i]
            shift += dshift
            running += g * xi + dshift
        phi0 = running - shift
        return phi0, shift, cost


@dataclass
class LeakedShift:
    """Negative control: the constant-shift family with `a` chosen per path
    AFTER seeing the final Gaussian zero mode (not adapted).  Lands the
    zero mode exactly on `target`."""

    target: float
    tag = "leaked-constant-shift"
    needs_future = True

    def realize(self, ctx: _Context, rng: np.random.Generator, n: int):
        phi0 = np.sqrt(ctx.rho_sq_end0 / ctx.bracket0) * rng.standard_normal(n)
        shift = self.target - phi0
        cost = 0.5 * ctx.bracket0 * shift**2 / ctx.rho_sq_end0
        return phi0, shift, cost


def bd_objective(
    V,
    strategy,
    spec: TorusSpec,
    schedule: RhoSchedule,
    mass_kind: MassKind,
    n_paths: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte-Carlo E[V(phi_T + I_T[v]) + cost(v)] for one drift strategy.

    Always an upper bound for -log E e^{-V} in expectation when the
    strategy is adapted; leaked strategies (needs_future) can go below.
    """
    ctx = _make_context(spec, schedule, mass_kind)
    phi0, shift0, cost = strategy.realize(ctx, rng, n_paths)
    coeffs = phi_mode_std(spec, schedule, mass_kind)[None, :] * _hermitian_batch(spec, rng, n_paths)
    zrow = zero_mode_row(spec)
    coeffs[:, zrow] = phi0 + shift0
    vals = np.empty(n_paths)
    for i in range(n_paths):
        vals[i] = V(SpectralField(spec, coeffs[i]))
    if not np.all(np.isfinite(vals)):
        raise ValueError("potential returned a non-finite value")
    total = vals + cost
    return float(total.mean()), float(total.std(ddof=1) / math.sqrt(n_paths))


def log_partition_oracle(
    V,
    spec: TorusSpec,
    schedule: RhoSchedule,
    mass_kind: MassKind,
    n_samples: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """-log E e^{-V(phi)} by plain Monte Carlo with a jackknife s.e.

    The exponential is shifted by its max to avoid overflow.
    """
    samples = sample_phi(spec, schedule, mass_kind, n_samples, rng)
    vals = np.empty(n_samples)
    for i in range(n_samples):
        vals[i] = V(SpectralField(spec, samples[i]))
    if not np.all(np.isfinite(vals)):
        raise ValueError("potential returned a non-finite value")
    w = -vals
    m = w.max()
    e = np.exp(w - m)
    total = e.sum()
    estimate = -(m + math.log(total / n_samples))
    # delete-one jackknife of the log
    rest = total - e
    loo = -(m + np.log(rest / (n_samples - 1)))
    se = math.sqrt((n_samples - 1) / n_samples * np.sum((loo - loo.mean()) ** 2))
    return float(estimate), float(se)


@dataclass(frozen=True)
class OptimizeResult:
    a: float
    objective: float
    se: float
    unimodal: bool


def optimize_constant_drift(
    V,
    spec: TorusSpec,
    schedule: RhoSchedule,
    mass_kind: MassKind,
    rng: np.random.Generator,
    a_range: tuple[float, float] = (-2.0, 2.0),
    n_paths: int = 4000,
    n_coarse: int = 15,
    tol: float = 1e-3,
) -> OptimizeResult:
    """Golden-section minimum of the constant-shift objective.

    All evaluations reuse one set of field samples (common random
    numbers), so the empirical objective is a smooth function of the
    shift.  A coarse scan checks unimodality first; if it finds several
    separated minima the coarse argmin is returned flagged.
    """
    ctx = _make_context(spec, schedule, mass_kind)
    coeffs = phi_mode_std(spec, schedule, mass_kind)[None, :] * _hermitian_batch(spec, rng, n_paths)
    zrow = zero_mode_row(spec)
    base0 = coeffs[:, zrow].real.copy()

    def objective(a: float) -> tuple[float, float]:
        work = coeffs.copy()
        work[:, zrow] = base0 + a * ctx.rho_sq_end0
        vals = np.empty(n_paths)
        for i in range(n_paths):
            vals[i] = V(SpectralField(spec, work[i]))
        cost = 0.5 * a * a * ctx.bracket0 * ctx.rho_sq_end0
        return float(vals.mean() + cost), float(vals.std(ddof=1) / math.sqrt(n_paths))

    grid = np.linspace(a_range[0], a_range[1], n_coarse)
    scan = [objective(a) for a in grid]
    values = np.array([s[0] for s in scan])
    ses = np.array([s[1] for s in scan])
    noise = 2.0 * ses.mean()
    minima = [
        i
        for i in range(1, n_coarse - 1)
        if values[i] < values[i - 1] - noise and values[i] < values[i + 1] - noise
    ]
    best = int(np.argmin(values))
    unimodal = len(minima) <= 1
    if not unimodal:
        val, se = scan[best]
        return OptimizeResult(float(grid[best]), val, se, False)

    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, n_coarse - 1)]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = objective(x1)[0], objective(x2)[0]
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = objective(x1)[0]
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = objective(x2)[0]
    a_best = 0.5 * (lo + hi)
    val, se = objective(a_best)
    return OptimizeResult(float(a_best), val, se, True)
