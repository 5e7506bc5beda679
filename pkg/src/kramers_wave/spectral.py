"""Spectral representation of real fields on the torus [0, L]^d.

Fields are truncated Fourier series

    u(x) = sum_{|k| <= N} u_hat(k) exp(i (2*pi/L) k . x),   k in Z^d,

with the Euclidean-ball truncation |k| <= N and Hermitian coefficients
(u real).  Integrals follow int_T u dx = L^d * u_hat(0).  The lattice
Laplacian multiplier is C_L |k|^2 with C_L = (2*pi/L)^2; since L < 2*pi
we always have C_L > 1, which keeps the |k| >= 1 modes of the -1 mass
bracket positive.

Nonlinear products are evaluated pointwise on an oversampled FFT grid.
A product of j factors is alias-free on the retained ball as soon as the
grid has M >= (j+1)N + 1 points per axis; grids are rounded up to the
next 5-smooth integer so the FFTs stay fast.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

TWO_PI = 2.0 * np.pi


class MassKind(enum.Enum):
    """Sign convention of the mass term in quadratic brackets.

    NEGATIVE_UNIT is the double-well linearization (-1 + C_L|k|^2); its
    zero mode has a negative bracket, so Wick sums and Gaussian
    covariances built from it skip k = 0.  POSITIVE_PLUS_TWO is the
    stable linearization around the wells (+2 + C_L|k|^2).
    """

    NEGATIVE_UNIT = "negative-unit"
    POSITIVE_PLUS_TWO = "positive-plus-two"

    @property
    def shift(self) -> float:
        return -1.0 if self is MassKind.NEGATIVE_UNIT else 2.0

    @property
    def excludes_zero(self) -> bool:
        return self is MassKind.NEGATIVE_UNIT


@dataclass(frozen=True)
class TorusSpec:
    """Geometry and truncation: dimension d, side length L < 2*pi, radius N."""

    d: int
    L: float
    N: int

    def __post_init__(self) -> None:
        if self.d not in (1, 2, 3):
            raise ValueError(f"d must be 1, 2 or 3, got {self.d}")
        if not (0.0 < self.L < TWO_PI):
            raise ValueError(f"L must lie in (0, 2*pi), got {self.L}")
        if self.N < 0 or int(self.N) != self.N:
            raise ValueError(f"N must be a nonnegative integer, got {self.N}")

    @property
    def C_L(self) -> float:
        return (TWO_PI / self.L) ** 2

    @property
    def volume(self) -> float:
        return self.L**self.d

    @property
    def n_modes(self) -> int:
        return len(mode_table(self.d, self.N))

    def bracket(self, mass_kind: MassKind) -> np.ndarray:
        """Per-mode quadratic bracket shift + C_L |k|^2, aligned with mode_table."""
        ksq = mode_ksq(self.d, self.N)
        return mass_kind.shift + self.C_L * ksq


@lru_cache(maxsize=None)
def mode_table(d: int, N: int) -> np.ndarray:
    """Integer modes k with |k| <= N, lexicographic order, shape (n, d)."""
    axes = [np.arange(-N, N + 1)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    keep = (grid**2).sum(axis=1) <= N * N
    table = grid[keep]
    # lexicographic for reproducible ordering
    order = np.lexsort(table.T[::-1])
    table = np.ascontiguousarray(table[order])
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def mode_ksq(d: int, N: int) -> np.ndarray:
    ksq = (mode_table(d, N) ** 2).sum(axis=1).astype(np.float64)
    ksq.setflags(write=False)
    return ksq


@lru_cache(maxsize=None)
def _mode_index(d: int, N: int) -> dict[tuple[int, ...], int]:
    return {tuple(int(c) for c in row): i for i, row in enumerate(mode_table(d, N))}


@lru_cache(maxsize=None)
def _conjugate_rows(d: int, N: int) -> np.ndarray:
    """Row i of this array is the row index of -k where k = mode_table[i]."""
    index = _mode_index(d, N)
    table = mode_table(d, N)
    return np.array([index[tuple(int(-c) for c in row)] for row in table])


@lru_cache(maxsize=None)
def _half_mode_rows(d: int, N: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Canonical half of the mode set for Hermitian sampling.

    Returns (plus_rows, conj_rows, zero_row): plus_rows are the modes whose
    first nonzero component is positive, conj_rows their -k partners.
    """
    table = mode_table(d, N)
    index = _mode_index(d, N)
    plus, conj = [], []
    zero_row = index[(0,) * d]
    for i, row in enumerate(table):
        for c in row:
            if c > 0:
                plus.append(i)
                conj.append(index[tuple(int(-x) for x in row)])
                break
            if c < 0:
                break
    return np.array(plus, dtype=int), np.array(conj, dtype=int), zero_row


def good_grid_size(m: int) -> int:
    """Smallest 5-smooth integer >= m."""
    n = max(1, int(m))
    while True:
        r = n
        for p in (2, 3, 5):
            while r % p == 0:
                r //= p
        if r == 1:
            return n
        n += 1


def min_grid(N: int, factors: int = 3) -> int:
    """Alias-free grid size per axis for a pointwise product of `factors` fields."""
    return good_grid_size((factors + 1) * N + 1)


@lru_cache(maxsize=None)
def grid_embedding(d: int, N: int, M: int):
    """Index machinery tying the mode table to an M^d FFT array.

    Returns (flat_rows, ksq_grid, mask) where flat_rows[i] is the raveled
    FFT-layout position of mode_table row i, ksq_grid is |k|^2 on the full
    grid and mask marks retained modes.
    """
    if M < 2 * N + 1:
        raise ValueError(f"grid M={M} cannot hold modes up to N={N}")
    freqs = [np.rint(np.fft.fftfreq(M) * M).astype(int)] * d
    mesh = np.meshgrid(*freqs, indexing="ij")
    ksq_grid = sum(m.astype(np.float64) ** 2 for m in mesh)
    mask = ksq_grid <= N * N
    table = mode_table(d, N)
    flat_rows = np.ravel_multi_index(tuple((table[:, a] % M) for a in range(d)), (M,) * d)
    ksq_grid.setflags(write=False)
    mask.setflags(write=False)
    flat_rows.setflags(write=False)
    return flat_rows, ksq_grid, mask


class SpectralField:
    """A real field stored as its retained Fourier coefficients."""

    __slots__ = ("spec", "coeffs")

    def __init__(self, spec: TorusSpec, coeffs: np.ndarray):
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        if coeffs.shape != (spec.n_modes,):
            raise ValueError(
                f"expected {spec.n_modes} coefficients for {spec}, got {coeffs.shape}"
            )
        self.spec = spec
        self.coeffs = coeffs

    @classmethod
    def zero(cls, spec: TorusSpec) -> "SpectralField":
        return cls(spec, np.zeros(spec.n_modes, dtype=np.complex128))

    @classmethod
    def constant(cls, spec: TorusSpec, value: float) -> "SpectralField":
        f = cls.zero(spec)
        f.coeffs[zero_mode_row(spec)] = value
        return f

    def copy(self) -> "SpectralField":
        return SpectralField(self.spec, self.coeffs.copy())

    def __getitem__(self, k) -> complex:
        if isinstance(k, int):
            k = (k,)
        idx = _mode_index(self.spec.d, self.spec.N).get(tuple(int(c) for c in k))
        if idx is None:
            raise KeyError(f"mode {k} outside |k| <= {self.spec.N}")
        return complex(self.coeffs[idx])

    @property
    def zero_mode(self) -> float:
        return float(self.coeffs[zero_mode_row(self.spec)].real)

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        conj = _conjugate_rows(self.spec.d, self.spec.N)
        return bool(np.max(np.abs(self.coeffs - np.conj(self.coeffs[conj]))) <= tol)

    def hermitize(self) -> "SpectralField":
        """Project onto the Hermitian (real-field) subspace."""
        conj = _conjugate_rows(self.spec.d, self.spec.N)
        sym = 0.5 * (self.coeffs + np.conj(self.coeffs[conj]))
        return SpectralField(self.spec, sym)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.spec, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.spec, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.spec, self.coeffs * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.spec, -self.coeffs)

    def _check(self, other: "SpectralField") -> None:
        if other.spec != self.spec:
            raise ValueError(f"spec mismatch: {self.spec} vs {other.spec}")

    def l2_sum(self) -> float:
        """sum_k |u_hat(k)|^2 (so int u^2 dx = L^d * l2_sum)."""
        return float(np.vdot(self.coeffs, self.coeffs).real)

    def sobolev_norm(self, s: float) -> float:
        """(sum_k <k>^(2s) |u_hat(k)|^2)^(1/2) with <k>^2 = 1 + |k|^2."""
        ksq = mode_ksq(self.spec.d, self.spec.N)
        return float(np.sqrt(np.sum((1.0 + ksq) ** s * np.abs(self.coeffs) ** 2)))


@lru_cache(maxsize=None)
def zero_mode_row(spec: TorusSpec) -> int:
    return _mode_index(spec.d, spec.N)[(0,) * spec.d]


def integral(f: SpectralField) -> float:
    """int_T f dx = L^d * f_hat(0)."""
    return f.spec.volume * f.zero_mode


def integral_product(f: SpectralField, g: SpectralField) -> float:
    """int_T f g dx for real fields, evaluated by Parseval."""
    f._check(g)
    return f.spec.volume * float(np.vdot(g.coeffs, f.coeffs).real)


def to_physical(f: SpectralField, M: int | None = None) -> np.ndarray:
    """Sample f on the uniform M^d grid x_j = j L / M (real array)."""
    spec = f.spec
    if M is None:
        M = good_grid_size(2 * spec.N + 1)
    flat, _, _ = grid_embedding(spec.d, spec.N, M)
    grid = np.zeros((M,) * spec.d, dtype=np.complex128)
    grid.ravel()[flat] = f.coeffs
    vals = np.fft.ifftn(grid) * (M**spec.d)
    return vals.real


def to_spectral(values: np.ndarray, spec: TorusSpec) -> SpectralField:
    """Project grid samples onto the retained ball (inverse of to_physical)."""
    M = values.shape[0]
    if values.shape != (M,) * spec.d:
        raise ValueError(f"expected a cubic grid, got shape {values.shape}")
    flat, _, _ = grid_embedding(spec.d, spec.N, M)
    hat = np.fft.fftn(np.asarray(values, dtype=np.float64)) / (M**spec.d)
    return SpectralField(spec, hat.ravel()[flat])


def pointwise_power(f: SpectralField, j: int, M: int | None = None) -> SpectralField:
    """P_N(f^j) with exact dealiasing (M >= (j+1)N + 1)."""
    if j < 1:
        raise ValueError("power must be >= 1")
    if M is None:
        M = min_grid(f.spec.N, factors=j)
    if M < (j + 1) * f.spec.N + 1:
        raise ValueError(f"grid M={M} aliases a degree-{j} product at N={f.spec.N}")
    vals = to_physical(f, M)
    return to_spectral(vals**j, f.spec)


def project(f: SpectralField, N_target: int) -> SpectralField:
    """Restrict or zero-pad onto the ball of radius N_target."""
    src = f.spec
    dst = TorusSpec(src.d, src.L, N_target)
    out = SpectralField.zero(dst)
    src_index = _mode_index(src.d, src.N)
    for i, row in enumerate(mode_table(dst.d, dst.N)):
        j = src_index.get(tuple(int(c) for c in row))
        if j is not None:
            out.coeffs[i] = f.coeffs[j]
    return out


def project_perp_zero(f: SpectralField) -> SpectralField:
    """Remove the spatial average: Pi_perp u = u - u_hat(0)."""
    g = f.copy()
    g.coeffs[zero_mode_row(f.spec)] = 0.0
    return g


def sample_hermitian_standard(spec: TorusSpec, rng: np.random.Generator) -> np.ndarray:
    """Coefficients of a real white array: E|z(k)|^2 = 1 for k != 0, z(0) ~ N(0,1).

    The conjugate symmetry z(-k) = conj(z(k)) is exact by construction, so
    the corresponding field is real.
    """
    plus, conj, zero = _half_mode_rows(spec.d, spec.N)
    z = np.zeros(spec.n_modes, dtype=np.complex128)
    if len(plus):
        re = rng.standard_normal(len(plus))
        im = rng.standard_normal(len(plus))
        vals = (re + 1j * im) / np.sqrt(2.0)
        z[plus] = vals
        z[conj] = np.conj(vals)
    z[zero] = rng.standard_normal()
    return z


# ---------------------------------------------------------------------------
# Wick ordering


@dataclass(frozen=True)
class WickConstants:
    """The scalar C_{N,beta} entering Wick-ordered powers.

    C = (1/L^d) sum_k 1 / (beta * (m^2 + C_L |k|^2)) over the retained
    ball, with k = 0 dropped for the NEGATIVE_UNIT bracket (where it
    would be negative).
    """

    spec: TorusSpec
    mass_kind: MassKind
    beta: float
    value: float


def wick_constant(spec: TorusSpec, mass_kind: MassKind, beta: float) -> WickConstants:
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    bracket = spec.bracket(mass_kind)
    if mass_kind.excludes_zero:
        keep = mode_ksq(spec.d, spec.N) > 0
        bracket = bracket[keep]
    value = float(np.sum(1.0 / (beta * bracket))) / spec.volume
    return WickConstants(spec, mass_kind, beta, value)


def _as_wick_value(C) -> float:
    return C.value if isinstance(C, WickConstants) else float(C)


def wick_power(f: SpectralField, j: int, C) -> SpectralField:
    """Wick power :f^j: relative to the constant C (Hermite recombination).

    :f:   = f
    :f^2: = P_N(f^2) - C
    :f^3: = P_N(f^3) - 3C f
    :f^4: = P_N(f^4) - 6C P_N(f^2) + 3C^2
    """
    c = _as_wick_value(C)
    if j == 1:
        return f.copy()
    if j == 2:
        g = pointwise_power(f, 2)
        g.coeffs[zero_mode_row(f.spec)] -= c
        return g
    if j == 3:
        return pointwise_power(f, 3) - 3.0 * c * f
    if j == 4:
        g = pointwise_power(f, 4) - 6.0 * c * pointwise_power(f, 2)
        g.coeffs[zero_mode_row(f.spec)] += 3.0 * c * c
        return g
    raise ValueError(f"wick_power supports j in 1..4, got {j}")


def wick_cubic_drift(f: SpectralField, C) -> SpectralField:
    """P_N(f^3) - 3C f, the renormalized cubic force in all the dynamics."""
    return wick_power(f, 3, C)


@dataclass
class PhaseState:
    """Position/velocity pair for second order dynamics."""

    u: SpectralField
    v: SpectralField

    def __post_init__(self) -> None:
        if self.u.spec != self.v.spec:
            raise ValueError("u and v must share a spec")

    @property
    def spec(self) -> TorusSpec:
        return self.u.spec

    def copy(self) -> "PhaseState":
        return PhaseState(self.u.copy(), self.v.copy())
