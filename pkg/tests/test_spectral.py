from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kramers_wave.spectral import (
    MassKind,
    SpectralField,
    TorusSpec,
    good_grid_size,
    grid_embedding,
    integral,
    integral_product,
    min_grid,
    mode_table,
    pointwise_power,
    project,
    project_perp_zero,
    sample_hermitian_standard,
    to_physical,
    to_spectral,
    wick_constant,
    wick_power,
)

import oracles

TWO_PI = 2.0 * math.pi


def random_field(spec: TorusSpec, rng: np.random.Generator, scale: float = 1.0) -> SpectralField:
    return SpectralField(spec, scale * sample_hermitian_standard(spec, rng))


def test_mode_counts():
    # ball sizes counted by hand
    assert len(mode_table(1, 0)) == 1
    assert len(mode_table(1, 8)) == 17
    assert len(mode_table(2, 1)) == 5
    assert len(mode_table(2, 4)) == 49
    assert len(mode_table(3, 1)) == 7
    assert len(mode_table(3, 2)) == 33


def test_mode_table_matches_oracle():
    for d, N in [(1, 5), (2, 3), (3, 2)]:
        expected = oracles.modes_in_ball(d, N)
        got = [tuple(int(c) for c in row) for row in mode_table(d, N)]
        assert sorted(got) == expected


def test_spec_validation():
    with pytest.raises(ValueError):
        TorusSpec(4, 1.0, 2)
    with pytest.raises(ValueError):
        TorusSpec(1, TWO_PI, 2)  # L must be strictly below 2*pi
    with pytest.raises(ValueError):
        TorusSpec(1, 0.0, 2)
    with pytest.raises(ValueError):
        TorusSpec(1, 1.0, -1)


def test_bracket_signs():
    # C_L > 1 for all admissible L, so only the k = 0 bracket can be negative
    for L in (0.5, 1.0, 3.0, 6.0):
        spec = TorusSpec(1, L, 4)
        assert spec.C_L > 1.0
        br = spec.bracket(MassKind.NEGATIVE_UNIT)
        ksq = (mode_table(1, 4) ** 2).sum(axis=1)
        assert br[ksq == 0] < 0
        assert np.all(br[ksq > 0] > 0)
        assert np.all(spec.bracket(MassKind.POSITIVE_PLUS_TWO) > 0)


def test_good_grid_size():
    assert good_grid_size(1) == 1
    assert good_grid_size(5) == 5
    assert good_grid_size(17) == 18
    assert good_grid_size(33) == 36
    assert good_grid_size(65) == 72
    assert min_grid(8, factors=3) == 36


def test_transform_round_trip():
    rng = np.random.default_rng(7)
    for d, N in [(1, 8), (2, 4), (3, 2)]:
        spec = TorusSpec(d, 1.0, N)
        f = random_field(spec, rng)
        g = to_spectral(to_physical(f), spec)
        np.testing.assert_allclose(g.coeffs, f.coeffs, atol=1e-12)


def test_physical_values_match_direct_sum():
    rng = np.random.default_rng(3)
    spec = TorusSpec(2, 0.9, 3)
    f = random_field(spec, rng)
    M = 8
    vals = to_physical(f, M)
    axes = [np.arange(M) * (spec.L / M)] * 2
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    modes = [tuple(int(c) for c in row) for row in mode_table(2, 3)]
    direct = oracles.dft_direct(modes, f.coeffs, spec.L, pts)
    np.testing.assert_allclose(vals.ravel(), direct.real, atol=1e-12)
    assert np.max(np.abs(direct.imag)) < 1e-12  # hermitian coefficients give a real field


@pytest.mark.parametrize("d,N", [(1, 8), (2, 3), (3, 2)])
def test_dealiased_cubic_matches_convolution(d, N):
    rng = np.random.default_rng(11 + d)
    spec = TorusSpec(d, 1.0, N)
    f = random_field(spec, rng, scale=0.7)
    fast = pointwise_power(f, 3)
    modes = [tuple(int(c) for c in row) for row in mode_table(d, N)]
    _, slow = oracles.cubic_by_convolution(modes, f.coeffs, d, N)
    np.testing.assert_allclose(fast.coeffs, slow, atol=1e-10)


def test_dealiased_square_matches_convolution():
    rng = np.random.default_rng(5)
    spec = TorusSpec(2, 1.3, 3)
    f = random_field(spec, rng)
    fast = pointwise_power(f, 2)
    modes = [tuple(int(c) for c in row) for row in mode_table(2, 3)]
    _, slow = oracles.convolve_product(modes, f.coeffs, modes, f.coeffs, 2, 3)
    np.testing.assert_allclose(fast.coeffs, slow, atol=1e-11)


def test_undersized_grid_rejected():
    spec = TorusSpec(1, 1.0, 4)
    f = SpectralField.zero(spec)
    with pytest.raises(ValueError):
        pointwise_power(f, 3, M=12)
    with pytest.raises(ValueError):
        grid_embedding(1, 4, 7)


def test_integral_conventions():
    rng = np.random.default_rng(19)
    spec = TorusSpec(1, 0.8, 5)
    f = random_field(spec, rng)
    modes = [tuple(int(c) for c in row) for row in mode_table(1, 5)]
    # int f dx against dense quadrature
    quad = oracles.integral_by_quadrature(modes, f.coeffs, spec.L, 1, lambda u: u, M=256)
    assert abs(integral(f) - quad) < 1e-10
    # int f^2 dx by Parseval against quadrature
    quad2 = oracles.integral_by_quadrature(modes, f.coeffs, spec.L, 1, lambda u: u**2, M=256)
    assert abs(integral_product(f, f) - quad2) < 1e-10
    assert abs(f.l2_sum() * spec.volume - quad2) < 1e-10


def test_sobolev_norm_direct():
    spec = TorusSpec(2, 1.0, 2)
    rng = np.random.default_rng(23)
    f = random_field(spec, rng)
    acc = 0.0
    for row, c in zip(mode_table(2, 2), f.coeffs):
        acc += (1.0 + float(row @ row)) ** 0.75 * abs(c) ** 2
    assert abs(f.sobolev_norm(0.75) - math.sqrt(acc)) < 1e-12


def test_projection_and_zero_mode():
    spec = TorusSpec(1, 1.0, 4)
    rng = np.random.default_rng(2)
    f = random_field(spec, rng)
    g = project(f, 2)
    assert g.spec.N == 2
    assert g[(1,)] == f[(1,)]
    h = project(g, 4)
    assert h[(3,)] == 0.0
    p = project_perp_zero(f)
    assert p.zero_mode == 0.0
    assert p[(2,)] == f[(2,)]


def test_hermitian_sampling_symmetry_and_variance():
    spec = TorusSpec(2, 1.0, 3)
    rng = np.random.default_rng(41)
    n = 20000
    acc = np.zeros(spec.n_modes)
    for _ in range(n):
        z = sample_hermitian_standard(spec, rng)
        f = SpectralField(spec, z)
        assert f.is_hermitian(1e-13)
        acc += np.abs(z) ** 2
    mean_sq = acc / n
    # E|z|^2 = 1 for every mode; allow 5 standard errors (kurtosis <= 3 here)
    se = math.sqrt(2.0 / n)
    assert np.max(np.abs(mean_sq - 1.0)) < 5 * se


def test_wick_constant_values():
    # closed forms for tiny mode sets
    c = wick_constant(TorusSpec(1, 1.0, 1), MassKind.NEGATIVE_UNIT, 1.0)
    assert abs(c.value - 2.0 / (4.0 * math.pi**2 - 1.0)) < 1e-14
    c2 = wick_constant(TorusSpec(1, 1.0, 1), MassKind.POSITIVE_PLUS_TWO, 1.0)
    assert abs(c2.value - (0.5 + 2.0 / (4.0 * math.pi**2 + 2.0))) < 1e-14
    c3 = wick_constant(TorusSpec(2, 1.0, 1), MassKind.NEGATIVE_UNIT, 2.0)
    assert abs(c3.value - 4.0 / (2.0 * (4.0 * math.pi**2 - 1.0))) < 1e-14


@pytest.mark.parametrize("d,N,L,beta", [(1, 6, 1.0, 4.0), (2, 5, 3.0, 2.0), (3, 3, 1.0, 1.0)])
def test_wick_constant_matches_oracle(d, N, L, beta):
    for kind in MassKind:
        got = wick_constant(TorusSpec(d, L, N), kind, beta).value
        want = oracles.wick_constant_direct(d, N, L, beta, kind.shift)
        assert abs(got - want) < 1e-13 * max(1.0, abs(want))


def test_wick_beta_scaling():
    spec = TorusSpec(2, 1.0, 4)
    c1 = wick_constant(spec, MassKind.NEGATIVE_UNIT, 1.0).value
    c8 = wick_constant(spec, MassKind.NEGATIVE_UNIT, 8.0).value
    assert abs(c8 - c1 / 8.0) < 1e-15


def test_wick_powers_of_constant_field():
    # :a^2: = a^2 - C, :a^3: = a^3 - 3Ca, :a^4: = a^4 - 6Ca^2 + 3C^2
    spec = TorusSpec(1, 1.0, 3)
    C = 0.37
    a = 1.42
    f = SpectralField.constant(spec, a)
    assert abs(wick_power(f, 2, C).zero_mode - (a * a - C)) < 1e-12
    assert abs(wick_power(f, 3, C).zero_mode - (a**3 - 3 * C * a)) < 1e-12
    assert abs(wick_power(f, 4, C).zero_mode - (a**4 - 6 * C * a * a + 3 * C * C)) < 1e-12


@given(
    a=st.floats(-2.0, 2.0),
    C=st.floats(0.01, 2.0),
    seed=st.integers(0, 2**31 - 1),
)
@settings(max_examples=25, deadline=None)
def test_wick_binomial_shift(a, C, seed):
    """:(u+a)^3: = :u^3: + 3a :u^2: + 3a^2 u + a^3 (same C throughout)."""
    spec = TorusSpec(1, 1.0, 4)
    rng = np.random.default_rng(seed)
    u = random_field(spec, rng, scale=0.5)
    shifted = u.copy()
    shifted.coeffs[0] += 0  # keep layout explicit; zero mode handled below
    shifted = shifted + SpectralField.constant(spec, a)
    lhs = wick_power(shifted, 3, C)
    rhs = (
        wick_power(u, 3, C)
        + 3.0 * a * wick_power(u, 2, C)
        + (3.0 * a * a) * u
        + SpectralField.constant(spec, a**3)
    )
    np.testing.assert_allclose(lhs.coeffs, rhs.coeffs, atol=1e-10)


@given(
    C1=st.floats(0.01, 1.5),
    C2=st.floats(0.01, 1.5),
    seed=st.integers(0, 2**31 - 1),
)
@settings(max_examples=25, deadline=None)
def test_wick_change_of_ordering(C1, C2, seed):
    """Reordering from constant C1 to C2 follows the Hermite shift rules."""
    spec = TorusSpec(1, 1.0, 4)
    rng = np.random.default_rng(seed)
    u = random_field(spec, rng, scale=0.6)
    dc = C2 - C1
    # :u^2:
    lhs2 = wick_power(u, 2, C2)
    rhs2 = wick_power(u, 2, C1) - SpectralField.constant(spec, dc)
    np.testing.assert_allclose(lhs2.coeffs, rhs2.coeffs, atol=1e-11)
    # :u^3:
    lhs3 = wick_power(u, 3, C2)
    rhs3 = wick_power(u, 3, C1) - 3.0 * dc * u
    np.testing.assert_allclose(lhs3.coeffs, rhs3.coeffs, atol=1e-11)
    # :u^4:
    lhs4 = wick_power(u, 4, C2)
    rhs4 = (
        wick_power(u, 4, C1)
        - 6.0 * dc * wick_power(u, 2, C1)
        + SpectralField.constant(spec, 3.0 * dc * dc)
    )
    np.testing.assert_allclose(lhs4.coeffs, rhs4.coeffs, atol=1e-10)


def test_wick_cubic_drift_is_wick_power():
    spec = TorusSpec(2, 1.0, 2)
    rng = np.random.default_rng(9)
    u = random_field(spec, rng)
    C = wick_constant(spec, MassKind.NEGATIVE_UNIT, 2.0)
    np.testing.assert_allclose(
        wick_power(u, 3, C).coeffs,
        (pointwise_power(u, 3) - 3.0 * C.value * u).coeffs,
        atol=1e-12,
    )


@given(seed=st.integers(0, 2**31 - 1), dN=st.sampled_from([(1, 6), (2, 3)]))
@settings(max_examples=20, deadline=None)
def test_round_trip_property(seed, dN):
    d, N = dN
    spec = TorusSpec(d, 1.7, N)
    rng = np.random.default_rng(seed)
    f = random_field(spec, rng)
    g = to_spectral(to_physical(f), spec)
    np.testing.assert_allclose(g.coeffs, f.coeffs, atol=1e-12)
