"""Chaos-sum evaluation of the 3d renormalization constants.

The second and third order counterterms reduce, after Ito isometry and
Plancherel, to lattice sums over mode pairs/triples weighted by time
integrals of the bump-schedule densities.  Everything here is keyed by
integer magnitude classes |k|^2, which is what makes the sums affordable:
the quadratures are computed once per class combination and shared by
every lattice point in the class.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .spectral import MassKind, TorusSpec, mode_table, wick_constant
from .variational import RhoSchedule, sigma_identity_check

# Combinatorial prefactor shared by the pair and triple sums: a factor 4
# from the differentiated quartic and 3! from the Wick contractions, squared.
CHAOS_PREFACTOR = 24.0**2

_GAMMA_BUDGET_N = 12
_DELTA_BUDGET_N = 3


def _cumulative_matrix(x: np.ndarray) -> np.ndarray:
    """Map node values to integrals of the interpolant from -1 to each node."""
    q = len(x)
    vander = np.polynomial.legendre.legvander(x, q - 1)
    operator = np.zeros((q, q))
    for k in range(q):
        coef = np.zeros(q)
        coef[k] = 1.0
        anti = np.polynomial.legendre.Legendre(coef).integ(lbnd=-1.0)
        operator[:, k] = anti(x)
    return operator @ np.linalg.inv(vander)


class _PanelQuadrature:
    """Gauss-Legendre nodes per schedule interval, with cumulative operator.

    `integral` is plain panel quadrature; `cumulative` returns the integral
    of the per-panel interpolant from t = 0 to every node, which is what the
    nested (time-ordered) integrals consume.
    """

    def __init__(self, schedule: RhoSchedule, n_nodes: int = 7):
        x, w = np.polynomial.legendre.leggauss(n_nodes)
        t0, t1 = schedule.t[:-1], schedule.t[1:]
        self.half = 0.5 * (t1 - t0)
        self.nodes = t0[:, None] + (x[None, :] + 1.0) * self.half[:, None]
        self.weights = w[None, :] * self.half[:, None]
        self._cum = _cumulative_matrix(x)

    def integral(self, values: np.ndarray) -> np.ndarray:
        return np.sum(values * self.weights, axis=(-2, -1))

    def cumulative(self, values: np.ndarray) -> np.ndarray:
        panel = np.sum(values * self.weights, axis=-1)
        offsets = np.cumsum(panel, axis=-1) - panel
        within = (values @ self._cum.T) * self.half[:, None]
        return offsets[..., None] + within


_QUAD_CACHE: dict[tuple, _PanelQuadrature] = {}


def _schedule_key(schedule: RhoSchedule) -> tuple:
    return (schedule.N, schedule.points_per_octave, round(float(schedule.t_end), 12))


def _quadrature(schedule: RhoSchedule, n_nodes: int) -> _PanelQuadrature:
    key = _schedule_key(schedule) + (n_nodes,)
    if key not in _QUAD_CACHE:
        _QUAD_CACHE[key] = _PanelQuadrature(schedule, n_nodes)
    return _QUAD_CACHE[key]


@dataclass(frozen=True)
class ChaosSumConfig:
    """Quadrature resolution and truncation radius for the chaos sums."""

    N: int
    points_per_octave: int = 64
    panel_nodes: int = 7

    def __post_init__(self) -> None:
        if self.N < 0:
            raise ValueError("N must be nonnegative")
        if self.panel_nodes < 3:
            raise ValueError("panel_nodes must be at least 3")
        defect = sigma_identity_check(self.schedule, range(self.N + 1))
        if defect >= 1e-6:
            raise ValueError(
                f"sigma identity defect {defect:.3e} at {self.points_per_octave} "
                "points per octave; raise the resolution"
            )

    @property
    def schedule(self) -> RhoSchedule:
        return RhoSchedule(self.N, points_per_octave=self.points_per_octave)


@dataclass(frozen=True)
class RadialTimeTable:
    """g(a, b) = int sigma_t(a)^2 rho_t(b)^2 dt on integer magnitude classes."""

    classes: np.ndarray
    values: np.ndarray
    mass_kind: MassKind

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.classes), len(self.classes)):
            raise ValueError("table shape does not match the class list")

    def lookup(self, a: int, b: int) -> float:
        ia = int(np.searchsorted(self.classes, a))
        ib = int(np.searchsorted(self.classes, b))
        if ia >= len(self.classes) or self.classes[ia] != a:
            raise KeyError(f"no magnitude class |k|^2 = {a}")
        if ib >= len(self.classes) or self.classes[ib] != b:
            raise KeyError(f"no magnitude class |k|^2 = {b}")
        return float(self.values[ia, ib])


_TABLE_CACHE: dict[tuple, RadialTimeTable] = {}


def _magnitude_classes(N: int, mass_kind: MassKind) -> np.ndarray:
    ksq = (mode_table(3, N) ** 2).sum(axis=1)
    classes = np.unique(ksq)
    if mass_kind.excludes_zero:
        classes = classes[classes > 0]
    return classes.astype(np.int64)


def radial_time_table(
    schedule: RhoSchedule, mass_kind: MassKind, N: int, panel_nodes: int = 7
) -> RadialTimeTable:
    """Time-integral table over the magnitude classes present in the ball."""
    key = _schedule_key(schedule) + (mass_kind, N, panel_nodes)
    if key in _TABLE_CACHE:
        return _TABLE_CACHE[key]
    classes = _magnitude_classes(N, mass_kind)
    quad = _quadrature(schedule, panel_nodes)
    csq = classes.astype(float)[:, None, None]
    sig = schedule.sigma_sq(quad.nodes[None, :, :], csq)
    rho2 = schedule.rho_t(quad.nodes[None, :, :], csq) ** 2
    values = np.einsum("amq,bmq->ab", sig * quad.weights[None, :, :], rho2)
    # the exact integrals live in [0, 1]; clip the ~1e-8 quadrature dust
    values = np.clip(values, 0.0, 1.0)
    table = RadialTimeTable(classes, values, mass_kind)
    _TABLE_CACHE[key] = table
    return table


def _ball_points(spec: TorusSpec, mass_kind: MassKind) -> tuple[np.ndarray, np.ndarray]:
    pts = mode_table(spec.d, spec.N).astype(np.int64)
    ksq = (pts**2).sum(axis=1)
    if mass_kind.excludes_zero:
        keep = ksq > 0
        pts, ksq = pts[keep], ksq[keep]
    return pts, ksq


def gamma_N(
    spec: TorusSpec,
    mass_kind: MassKind,
    schedule: RhoSchedule | None = None,
    threads: int = 1,
) -> float:
    """Second order constant: the pair sum over K_N x K_N.

    Grouped by magnitude class; the outer lattice loop is exact, only the
    time integrals are shared through the class table.
    """
    if spec.d != 3:
        raise ValueError("gamma_N is a d = 3 quantity")
    if spec.N > _GAMMA_BUDGET_N:
        raise ValueError(f"pair-sum budget exceeded: N = {spec.N} > {_GAMMA_BUDGET_N}")
    if schedule is None:
        schedule = RhoSchedule(spec.N)
    pts, ksq = _ball_points(spec, mass_kind)
    if len(pts) == 0:
        return 0.0
    table = radial_time_table(schedule, mass_kind, spec.N)
    cls_idx = np.searchsorted(table.classes, ksq)
    inv_br = 1.0 / (mass_kind.shift + spec.C_L * ksq.astype(float))

    # weight of the summed mode n12, tabulated over every reachable |n12|^2
    cs = np.arange((2 * spec.N) ** 2 + 1, dtype=float)
    br_c = mass_kind.shift + spec.C_L * cs
    rho_end = schedule.rho_t(schedule.t_end, cs) ** 2
    w12 = np.where(br_c > 0, rho_end / np.where(br_c > 0, br_c, 1.0), 0.0)

    # per point: g(class of n1, class of n2) / bracket(n2), gathered once
    g_pt = table.values[:, cls_idx] * inv_br[None, :]

    def block(rows: range) -> list[float]:
        out = []
        for i in rows:
            csq_vec = ksq[i] + 2 * (pts @ pts[i]) + ksq
            out.append(inv_br[i] * float(w12[csq_vec] @ g_pt[cls_idx[i]]))
        return out

    if threads > 1:
        chunk = max(1, len(pts) // (4 * threads))
        ranges = [range(s, min(s + chunk, len(pts))) for s in range(0, len(pts), chunk)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = [x for part in pool.map(block, ranges) for x in part]
    else:
        partials = block(range(len(pts)))
    return CHAOS_PREFACTOR * math.fsum(partials)


@dataclass(frozen=True)
class GammaDiffTable:
    """gamma difference between the two mass brackets across truncations."""

    n_values: tuple[int, ...]
    gamma_plus: np.ndarray
    gamma_minus: np.ndarray

    @property
    def diffs(self) -> np.ndarray:
        return self.gamma_plus - self.gamma_minus

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.diffs)


def gamma_diff_table(
    n_values: Sequence[int], L: float = 1.0, points_per_octave: int = 64, threads: int = 1
) -> GammaDiffTable:
    plus, minus = [], []
    for n in n_values:
        spec = TorusSpec(d=3, L=L, N=int(n))
        schedule = ChaosSumConfig(int(n), points_per_octave=points_per_octave).schedule
        plus.append(gamma_N(spec, MassKind.POSITIVE_PLUS_TWO, schedule, threads=threads))
        minus.append(gamma_N(spec, MassKind.NEGATIVE_UNIT, schedule, threads=threads))
    return GammaDiffTable(tuple(int(n) for n in n_values), np.array(plus), np.array(minus))


@dataclass(frozen=True)
class CDiffReport:
    """Wick-constant difference at beta = 1 next to its analytic bound.

    The bound is 1/volume times (1/2 + sum over k != 0 of
    |1/(C_L|k|^2 + 2) - 1/(C_L|k|^2 - 1)|), the lattice sum truncated at
    |k| <= cutoff with an integral estimate for the remainder.
    """

    spec: TorusSpec
    value: float
    k0_term: float
    tail_sum: float
    remainder: float
    cutoff: int

    @property
    def bound(self) -> float:
        return self.k0_term + self.tail_sum + self.remainder


def c_diff(spec: TorusSpec, cutoff: int = 64) -> CDiffReport:
    """C_{N,+} - C_{N,-} at beta = 1 plus the uniform-in-N tail bound."""
    value = (
        wick_constant(spec, MassKind.POSITIVE_PLUS_TWO, 1.0).value
        - wick_constant(spec, MassKind.NEGATIVE_UNIT, 1.0).value
    )
    c_l = spec.C_L
    axis = np.arange(-cutoff, cutoff + 1)
    tail = 0.0
    # slab loop keeps the d = 3 box at cutoff = 64 from materialising at once
    if spec.d == 1:
        ksq = axis.astype(float) ** 2
        keep = (ksq > 0) & (ksq <= cutoff**2)
        tail = float(np.sum(_bracket_gap(c_l, ksq[keep])))
    else:
        for kx in axis:
            if spec.d == 2:
                ksq = float(kx) ** 2 + axis.astype(float) ** 2
            else:
                ksq = float(kx) ** 2 + (axis[:, None].astype(float) ** 2 + axis[None, :] ** 2)
            keep = (ksq > 0) & (ksq <= cutoff**2)
            tail += float(np.sum(_bracket_gap(c_l, ksq[keep])))
    # |gap(k)| <= 3 / (C_L^2 |k|^4) * (1 - 1/(C_L K^2))^-1 beyond the cutoff;
    # bound the lattice sum by the integral over |x| > cutoff - 1
    bias = 1.0 / (1.0 - 1.0 / (c_l * cutoff**2))
    r = float(cutoff - 1)
    if spec.d == 1:
        geom = 2.0 / (3.0 * r**3)
    elif spec.d == 2:
        geom = np.pi / r**2
    else:
        geom = 4.0 * np.pi / r
    remainder = 3.0 * bias * geom / c_l**2
    vol = spec.volume
    return CDiffReport(
        spec=spec,
        value=value,
        k0_term=0.5 / vol,
        tail_sum=tail / vol,
        remainder=remainder / vol,
        cutoff=cutoff,
    )


def _bracket_gap(c_l: float, ksq: np.ndarray) -> np.ndarray:
    return np.abs(1.0 / (c_l * ksq + 2.0) - 1.0 / (c_l * ksq - 1.0))


_DELTA_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _delta_tables(schedule: RhoSchedule, N: int, panel_nodes: int = 7):
    """Ordered-time quadruple integrals Q[a1, a2, a3, c] by nested quadrature.

    Q = int_{t2 < t1 < t} sigma_t(c)^2 sigma_{t1}(a3)^2 sigma_{t2}(a2)^2
        rho_{t2}(a1)^2, the innermost leg already collapsed to rho^2 by the
        sigma identity.  Indexed by magnitude class; c runs over every
        reachable |n1+n2+n3|^2.
    """
    key = _schedule_key(schedule) + (N, panel_nodes)
    if key in _DELTA_CACHE:
        return _DELTA_CACHE[key]
    classes = _magnitude_classes(N, MassKind.POSITIVE_PLUS_TWO)
    quad = _quadrature(schedule, panel_nodes)
    csq = classes.astype(float)[:, None, None]
    sig = schedule.sigma_sq(quad.nodes[None, :, :], csq)
    rho2 = schedule.rho_t(quad.nodes[None, :, :], csq) ** 2
    c_vals = np.arange((3 * N) ** 2 + 1, dtype=float)[:, None, None]
    sig_out = schedule.sigma_sq(quad.nodes[None, :, :], c_vals) * quad.weights[None, :, :]
    sig_out = sig_out.reshape(len(c_vals), -1)
    na = len(classes)
    q_table = np.empty((na, na, na, len(c_vals)))
    for i in range(na):
        for j in range(na):
            f2 = quad.cumulative(sig[j] * rho2[i])
            for k in range(na):
                f3 = quad.cumulative(sig[k] * f2)
                q_table[i, j, k] = sig_out @ f3.ravel()
    out = (classes, q_table)
    _DELTA_CACHE[key] = out
    return out


def delta_leading(
    spec: TorusSpec,
    mass_kind: MassKind,
    beta: float,
    schedule: RhoSchedule | None = None,
) -> float:
    """Leading third order constant, -(lambda^2/2) E int (J_t W^3)^2."""
    if spec.d != 3:
        raise ValueError("delta_leading is a d = 3 quantity")
    if spec.N > _DELTA_BUDGET_N:
        raise ValueError(f"triple-sum budget exceeded: N = {spec.N} > {_DELTA_BUDGET_N}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    if schedule is None:
        schedule = RhoSchedule(spec.N)
    lam = 1.0 / (4.0 * beta)
    pts, ksq = _ball_points(spec, mass_kind)
    if len(pts) == 0:
        return 0.0
    classes, q_table = _delta_tables(schedule, spec.N)
    cls_idx = np.searchsorted(classes, ksq)
    inv_br = 1.0 / (mass_kind.shift + spec.C_L * ksq.astype(float))
    cs = np.arange((3 * spec.N) ** 2 + 1, dtype=float)
    br_c = mass_kind.shift + spec.C_L * cs
    inv_br_c = np.where(br_c > 0, 1.0 / np.where(br_c > 0, br_c, 1.0), 0.0)

    partials = []
    for i1 in range(len(pts)):
        q_i1 = q_table[cls_idx[i1]]
        for i2 in range(len(pts)):
            base = pts[i1] + pts[i2]
            csq_vec = ((base[None, :] + pts) ** 2).sum(axis=1)
            vals = q_i1[cls_idx[i2], cls_idx, csq_vec] * inv_br * inv_br_c[csq_vec]
            partials.append(inv_br[i1] * inv_br[i2] * float(np.sum(vals)))
    return -(lam * lam / 2.0) * CHAOS_PREFACTOR * math.fsum(partials)


@dataclass(frozen=True)
class RenormConstants3D:
    """The divergent constants at one (N, beta): Wick, gamma, leading delta.

    delta fields are None above the triple-sum budget.
    """

    spec: TorusSpec
    beta: float
    C_plus: float
    C_minus: float
    gamma_plus: float
    gamma_minus: float
    delta_leading_plus: float | None
    delta_leading_minus: float | None

    def __post_init__(self) -> None:
        if self.spec.d != 3:
            raise ValueError("RenormConstants3D requires d = 3")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        for name in ("gamma_plus", "gamma_minus"):
            g = getattr(self, name)
            if not math.isfinite(g) or g < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {g}")

    @property
    def lam(self) -> float:
        return 1.0 / (4.0 * self.beta)

    @classmethod
    def compute(
        cls, spec: TorusSpec, beta: float, points_per_octave: int = 64, threads: int = 1
    ) -> "RenormConstants3D":
        schedule = ChaosSumConfig(spec.N, points_per_octave=points_per_octave).schedule
        with_delta = spec.N <= _DELTA_BUDGET_N
        return cls(
            spec=spec,
            beta=beta,
            C_plus=wick_constant(spec, MassKind.POSITIVE_PLUS_TWO, beta).value,
            C_minus=wick_constant(spec, MassKind.NEGATIVE_UNIT, beta).value,
            gamma_plus=gamma_N(spec, MassKind.POSITIVE_PLUS_TWO, schedule, threads=threads),
            gamma_minus=gamma_N(spec, MassKind.NEGATIVE_UNIT, schedule, threads=threads),
            delta_leading_plus=(
                delta_leading(spec, MassKind.POSITIVE_PLUS_TWO, beta, schedule)
                if with_delta
                else None
            ),
            delta_leading_minus=(
                delta_leading(spec, MassKind.NEGATIVE_UNIT, beta, schedule)
                if with_delta
                else None
            ),
        )


def constants_csv(records: Sequence[RenormConstants3D]) -> str:
    """One row per (record, mass); delta left blank above its budget."""
    lines = ["N,mass,beta,C,gamma,delta_leading"]
    for rec in records:
        for kind, c, g, dl in (
            (MassKind.POSITIVE_PLUS_TWO, rec.C_plus, rec.gamma_plus, rec.delta_leading_plus),
            (MassKind.NEGATIVE_UNIT, rec.C_minus, rec.gamma_minus, rec.delta_leading_minus),
        ):
            tail = "" if dl is None else f"{dl:.17g}"
            lines.append(f"{rec.spec.N},{kind.value},{rec.beta:.17g},{c:.17g},{g:.17g},{tail}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ConvolutionBoundReport:
    """S(n) = sum <n1>^-alpha <n-n1>^-beta against <n>^(d-alpha-beta)."""

    alpha: float
    beta_exp: float
    d: int
    entries: tuple[tuple[tuple[int, ...], float, float], ...]

    @property
    def max_ratio(self) -> float:
        return max(r for _, _, r in self.entries)

    @property
    def spread(self) -> float:
        ratios = [r for _, _, r in self.entries]
        return max(ratios) / min(ratios)


def convolution_bound_check(
    alpha: float, beta_exp: float, d: int, n_list: Sequence
) -> ConvolutionBoundReport:
    """Numeric check of the discrete convolution inequality.

    Window half-width max(4|n|, 32); the neglected tail decays like
    |n1|^(d - 1 - alpha - beta) and is far below the +-20% band the
    report's ratio spread is held to.
    """
    if not (alpha < d and beta_exp < d):
        raise ValueError("need alpha < d and beta_exp < d")
    if alpha + beta_exp <= d:
        raise ValueError("need alpha + beta_exp > d")
    entries = []
    for n in n_list:
        vec = np.zeros(d, dtype=np.int64)
        if np.ndim(n) == 0:
            vec[0] = int(n)
        else:
            arr = np.asarray(n, dtype=np.int64)
            if arr.shape != (d,):
                raise ValueError(f"mode {n!r} does not have dimension {d}")
            vec = arr
        requested = tuple(int(c) for c in vec)
        # S(n) = S(-n) exactly: canonicalize the sign so both run the same sum
        nonzero = vec[vec != 0]
        if len(nonzero) and nonzero[0] < 0:
            vec = -vec
        nsq = float((vec**2).sum())
        w = int(max(4 * math.ceil(math.sqrt(nsq)), 32))
        axis = np.arange(-w, w + 1, dtype=np.int64)
        total = 0.0
        for kx in axis:
            if d == 1:
                left = 1.0 + float(kx) ** 2
                right = 1.0 + float(kx - vec[0]) ** 2
                total += float(left ** (-alpha / 2.0) * right ** (-beta_exp / 2.0))
                continue
            if d == 2:
                lsq = float(kx) ** 2 + axis.astype(float) ** 2
                rsq = float(kx - vec[0]) ** 2 + (axis - vec[1]).astype(float) ** 2
            else:
                lsq = (
                    float(kx) ** 2
                    + axis[:, None].astype(float) ** 2
                    + axis[None, :].astype(float) ** 2
                )
                rsq = (
                    float(kx - vec[0]) ** 2
                    + (axis[:, None] - vec[1]).astype(float) ** 2
                    + (axis[None, :] - vec[2]).astype(float) ** 2
                )
            total += float(np.sum((1.0 + lsq) ** (-alpha / 2.0) * (1.0 + rsq) ** (-beta_exp / 2.0)))
        ratio = total / (1.0 + nsq) ** ((d - alpha - beta_exp) / 2.0)
        entries.append((requested, total, ratio))
    return ConvolutionBoundReport(alpha, beta_exp, d, tuple(entries))
