"""Crossing statistics and closed-form transition rate predictions.

Rates follow the Eyring-Kramers pattern: a frequency prefactor assembled
from the linearization spectra at the saddle (mass -1) and the wells
(mass +2), times exp(-beta L^d / 4) from the well depth.  In d >= 2 the
prefactor carries the Wick counterterm exp(-3 C_N L^d / 2); in d = 1 the
mode product converges absolutely and is truncated adaptively with an
analytic tail bound instead.

All products are evaluated in log space.  Crossing counting uses linear
interpolation and ignores tangencies, matching the brute-force oracle
convention exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, polygamma

from .spectral import MassKind, TorusSpec, mode_ksq, wick_constant

TWO_PI = 2.0 * math.pi


@dataclass
class CrossingRecord:
    times: np.ndarray
    directions: np.ndarray  # +1 up, -1 down
    span: float
    start: float = 0.0

    def __post_init__(self) -> None:
        # interpolated times of a double crossing can coincide at float
        # resolution, so only a decrease is an error
        if len(self.times) > 1 and np.any(np.diff(self.times) < 0):
            raise ValueError("crossing times must not decrease")

    @property
    def n_up(self) -> int:
        return int(np.sum(self.directions > 0))

    @property
    def n_down(self) -> int:
        return int(np.sum(self.directions < 0))

    @property
    def total(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class RatePrediction:
    prefactor: float
    exponent: float
    provenance: str

    def __post_init__(self) -> None:
        if self.prefactor <= 0:
            raise ValueError("prefactor must be positive")

    @property
    def rate(self) -> float:
        return self.prefactor * math.exp(self.exponent)


def count_crossings(times, values, level: float = 0.0) -> CrossingRecord:
    """Sign crossings of `values - level` with linearly interpolated times.

    A sample exactly at the level is skipped: it counts only if the signs
    on either side differ (tangencies are not crossings).
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(times) < 2:
        raise ValueError("need at least two samples")
    if np.any(np.diff(times) <= 0):
        raise ValueError("time stamps must increase strictly")
    w = values - level
    span = float(times[-1] - times[0])
    start = float(times[0])
    nz = np.flatnonzero(w != 0.0)
    if len(nz) < 2:
        return CrossingRecord(np.empty(0), np.empty(0, dtype=int), span, start)
    sg = np.sign(w[nz])
    change = np.flatnonzero(sg[1:] != sg[:-1]) + 1
    i_prev = nz[change - 1]
    i_next = nz[change]
    w1 = w[i_prev]
    w2 = w[i_next]
    t1 = times[i_prev]
    t2 = times[i_next]
    tc = t1 + w1 / (w1 - w2) * (t2 - t1)
    return CrossingRecord(tc, sg[change].astype(int), span, start)


@dataclass(frozen=True)
class RateEstimate:
    rate: float
    se: float
    degenerate: bool = False


def empirical_rate(record: CrossingRecord, n_batches: int = 20) -> RateEstimate:
    """Bidirectional crossing frequency with a batch-means standard error."""
    if record.span <= 0:
        raise ValueError("observation span must be positive")
    if record.total == 0:
        return RateEstimate(0.0, 0.0, degenerate=True)
    n_batches = max(n_batches, 20)
    edges = np.linspace(0.0, record.span, n_batches + 1)
    counts, _ = np.histogram(record.times - record.start, bins=edges)
    batch_rates = counts / (record.span / n_batches)
    rate = record.total / record.span
    se = float(batch_rates.std(ddof=1) / math.sqrt(n_batches))
    return RateEstimate(rate, se, degenerate=False)


def white_noise_mean_factor(beta: float, spec: TorusSpec) -> float:
    """E max(0, v_hat(0)) for white-noise velocity: sqrt(1/(2 pi beta L^d))."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return math.sqrt(1.0 / (TWO_PI * beta * spec.volume))


def prefactor_product(spec: TorusSpec) -> float:
    """prod_{|k| <= N} sqrt((C_L|k|^2 + 2) / |C_L|k|^2 - 1|), in log space."""
    ksq = mode_ksq(spec.d, spec.N)
    y = spec.C_L * ksq
    log_sum = 0.5 * float(np.sum(np.log(y + 2.0) - np.log(np.abs(y - 1.0))))
    return math.exp(log_sum)


def _log_product_tail_1d(L: float, tol: float = 1e-12) -> float:
    """log prod_{k in Z} sqrt((C_L k^2 + 2)/|C_L k^2 - 1|) with adaptive cutoff.

    The log tail sum_{k>K} log(1 + 3/y_k), y_k = C_L k^2 - 1, is pinned by
    3 sum 1/y_k (digamma closed form) minus a remainder below
    (9/2) sum 1/y_k^2 (trigamma closed form); K grows until the remainder
    is negligible.
    """
    C_L = (TWO_PI / L) ** 2
    a = 1.0 / math.sqrt(C_L)  # y_k = C_L (k^2 - a^2)

    def tail1(K: int) -> float:
        return float(digamma(K + 1 + a) - digamma(K + 1 - a)) / (2 * a * C_L)

    def tail2(K: int) -> float:
        # sum_{k>K} 1/(k^2-a^2)^2 = (psi'(K+1-a) + psi'(K+1+a))/(4a^2)
        #                          - (psi(K+1+a) - psi(K+1-a))/(4a^3)
        p1 = float(polygamma(1, K + 1 - a) + polygamma(1, K + 1 + a)) / (4 * a * a)
        p0 = float(digamma(K + 1 + a) - digamma(K + 1 - a)) / (4 * a**3)
        return (p1 - p0) / C_L**2

    K = 16
    while 4.5 * tail2(K) > tol:
        K *= 2
        if K > 1 << 22:
            raise RuntimeError("tail bound failed to close; L too close to 2*pi?")
    ks = np.arange(1, K + 1, dtype=float)
    y = C_L * ks * ks - 1.0
    explicit = float(np.sum(np.log1p(3.0 / y)))
    return 0.5 * math.log(2.0) + explicit + 3.0 * tail1(K)


def rate_main(beta: float, spec: TorusSpec) -> RatePrediction:
    """Renormalized Eyring-Kramers rate for the truncated wave flow, d in {2,3}."""
    if spec.d not in (2, 3):
        raise ValueError("the renormalized rate formula applies in d = 2, 3")
    C_N = wick_constant(spec, MassKind.NEGATIVE_UNIT, 1.0).value
    pref = prefactor_product(spec) / TWO_PI * math.exp(-1.5 * C_N * spec.volume)
    return RatePrediction(pref, -beta * spec.volume / 4.0, f"renormalized-wave-rate-{spec.d}d")


def rate_nlw_1d(beta: float, spec: TorusSpec) -> RatePrediction:
    """Transition frequency of the 1d wave flow with the full mode product."""
    if spec.d != 1:
        raise ValueError("1d formula")
    pref = math.exp(_log_product_tail_1d(spec.L)) / TWO_PI
    return RatePrediction(pref, -beta * spec.L / 4.0, "wave-rate-1d")


def hitting_time_she_1d(beta: float, spec: TorusSpec) -> RatePrediction:
    """Expected first hitting time of the opposite well for the 1d heat flow.

    The prefactor is the overdamped Kramers constant 2*pi/|lambda_0| (the
    unstable curvature at the saddle has magnitude one) times the square
    root of the spectral determinant ratio between saddle and well, the
    same structure as the 2d formula.  It is the exact reciprocal of the
    wave-rate prefactor at every truncation level.  The exponent is the
    bare barrier height beta/4; unlike the rate formulas it carries no
    volume factor.
    """
    if spec.d != 1:
        raise ValueError("1d formula")
    pref = TWO_PI * math.exp(-_log_product_tail_1d(spec.L))
    return RatePrediction(pref, beta / 4.0, "heat-hitting-time-1d")


def hitting_time_she_2d(beta: float, spec: TorusSpec) -> RatePrediction:
    """Expected hitting time for the 2d heat flow with Wick counterterm."""
    if spec.d != 2:
        raise ValueError("2d formula")
    C_N = wick_constant(spec, MassKind.NEGATIVE_UNIT, 1.0).value
    pref = TWO_PI / prefactor_product(spec) * math.exp(1.5 * C_N * spec.volume)
    return RatePrediction(pref, beta * spec.volume / 4.0, "heat-hitting-time-2d")


def renormalized_prefactor_bound(specs: list[TorusSpec]) -> dict:
    """Table of the N-uniform renormalized prefactor factor.

    q_N = prod over nonzero retained modes of sqrt((C_L|k|^2+2)/(C_L|k|^2-1))
          * exp(-3 C_N L^d / 2).
    Returns the values plus min/max and successive differences.
    """
    values = []
    for spec in specs:
        if spec.d not in (2, 3):
            raise ValueError("the q_N table is defined for d = 2, 3")
        ksq = mode_ksq(spec.d, spec.N)
        y = spec.C_L * ksq[ksq > 0]
        log_prod = 0.5 * float(np.sum(np.log(y + 2.0) - np.log(y - 1.0)))
        C_N = wick_constant(spec, MassKind.NEGATIVE_UNIT, 1.0).value
        values.append(math.exp(log_prod - 1.5 * C_N * spec.volume))
    values = np.array(values)
    return {
        "N": [s.N for s in specs],
        "q": values,
        "min": float(values.min()),
        "max": float(values.max()),
        "diffs": np.diff(values),
    }


def tst_identity_rate(saddle_ratio: float, beta: float, spec: TorusSpec) -> RatePrediction:
    """Flux-over-population identity: rate = 2 E[max(0, v0)] x density(0)."""
    if saddle_ratio <= 0:
        raise ValueError("saddle ratio must be positive")
    pref = 2.0 * white_noise_mean_factor(beta, spec) * saddle_ratio
    return RatePrediction(pref, 0.0, "tst-identity")
