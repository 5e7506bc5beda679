from __future__ import annotations

import math

import numpy as np
import pytest

from kramers_wave.gibbs import (
    GibbsConfig,
    GibbsSampler,
    SaddleRatioEstimate,
    UmbrellaWindow,
    conditioned_sampler,
    estimate_saddle_ratio,
    integrated_autocorrelation,
    make_umbrella_windows,
    mcmc_step,
    potential_energy,
    sample_conditioned_saddle,
    sample_gff,
    sample_white_noise,
    wham_density,
)
from kramers_wave.spectral import (
    MassKind,
    SpectralField,
    TorusSpec,
    mode_table,
    sample_hermitian_standard,
    wick_constant,
)

import oracles


def test_gff_variances():
    spec = TorusSpec(1, 1.0, 2)
    beta = 3.0
    rng = np.random.default_rng(100)
    n = 30000
    acc = np.zeros(spec.n_modes)
    for _ in range(n):
        f = sample_gff(spec, beta, MassKind.POSITIVE_PLUS_TWO, rng)
        acc += np.abs(f.coeffs) ** 2
    var = acc / n
    ksq = (mode_table(1, 2) ** 2).sum(axis=1)
    want = 1.0 / (beta * spec.volume * (2.0 + spec.C_L * ksq))
    # |z|^2 of a complex Gaussian has relative sd 1 (k=0: sqrt(2))
    se = want * math.sqrt(2.0 / n)
    assert np.all(np.abs(var - want) < 3.5 * se)


def test_gff_negative_unit_zero_mode_always_zero():
    spec = TorusSpec(2, 1.0, 3)
    rng = np.random.default_rng(4)
    for _ in range(50):
        f = sample_gff(spec, 2.0, MassKind.NEGATIVE_UNIT, rng)
        assert f.zero_mode == 0.0
        assert f.is_hermitian(1e-13)


def test_gff_beta_scaling():
    spec = TorusSpec(1, 1.0, 3)
    rng1 = np.random.default_rng(7)
    rng2 = np.random.default_rng(7)
    a = sample_gff(spec, 1.0, MassKind.POSITIVE_PLUS_TWO, rng1)
    b = sample_gff(spec, 4.0, MassKind.POSITIVE_PLUS_TWO, rng2)
    np.testing.assert_allclose(b.coeffs, 0.5 * a.coeffs, atol=1e-14)


def test_white_noise_flat_and_positive_part_mean():
    spec = TorusSpec(1, 1.0, 0)
    beta = 2.5
    rng = np.random.default_rng(11)
    n = 300000
    zs = np.empty(n)
    for i in range(n):
        zs[i] = sample_white_noise(spec, beta, rng).zero_mode
    pos = np.maximum(zs, 0.0)
    want = math.sqrt(1.0 / (2.0 * math.pi * beta * spec.volume))
    se = pos.std(ddof=1) / math.sqrt(n)
    assert abs(pos.mean() - want) < 3.0 * se
    assert abs(zs.mean()) < 3.0 * zs.std() / math.sqrt(n)

    # flatness across modes at moderate sample count
    spec2 = TorusSpec(2, 1.1, 2)
    acc = np.zeros(spec2.n_modes)
    m = 20000
    for _ in range(m):
        acc += np.abs(sample_white_noise(spec2, beta, rng).coeffs) ** 2
    ratios = (acc / m) / (1.0 / (beta * spec2.volume))
    assert np.all(ratios > 0.9) and np.all(ratios < 1.1)


def test_potential_energy_at_zero_field():
    # Hermite ordering leaves +3C^2 in :u^4:, so beta H(0) = (beta/4) 3 C^2 L^d
    spec = TorusSpec(1, 1.0, 3)
    beta = 2.0
    C = wick_constant(spec, MassKind.NEGATIVE_UNIT, beta)
    u = SpectralField.zero(spec)
    want = 0.25 * beta * 3.0 * C.value**2 * spec.volume
    assert abs(potential_energy(u, beta, C) - want) < 1e-14


def test_potential_energy_single_mode_small_amplitude():
    spec = TorusSpec(1, 1.0, 2)
    beta = 1.0
    C = 0.0
    for eps in (1e-3, 1e-5):
        u = SpectralField.zero(spec)
        u.coeffs[[1, 3]] = eps  # modes k = -1 and +1 (lexicographic order)
        got = potential_energy(u, beta, C)
        quad = 0.5 * beta * spec.volume * 2.0 * eps**2 * (spec.C_L - 1.0)
        assert abs(got - quad) < 10.0 * eps**4 * spec.volume + 1e-18


def test_potential_energy_matches_quadrature():
    rng = np.random.default_rng(21)
    spec = TorusSpec(1, 1.0, 4)
    beta = 1.7
    C = wick_constant(spec, MassKind.NEGATIVE_UNIT, beta)
    f = SpectralField(spec, 0.8 * sample_hermitian_standard(spec, rng))
    modes = [tuple(int(x) for x in row) for row in mode_table(1, 4)]
    c = C.value
    quart = oracles.integral_by_quadrature(
        modes, f.coeffs, spec.L, 1, lambda u: 0.25 * (u**4 - 6 * c * u**2 + 3 * c * c), M=64
    )
    mass = oracles.integral_by_quadrature(modes, f.coeffs, spec.L, 1, lambda u: -0.5 * u**2, M=64)
    grad_coeffs = np.array([1j * (2 * math.pi / spec.L) * k[0] for k in modes]) * f.coeffs
    grad_sq = oracles.integral_by_quadrature(modes, grad_coeffs, spec.L, 1, lambda g: 0.5 * g**2, M=64)
    want = beta * (quart + mass + grad_sq)
    got = potential_energy(f, beta, C)
    assert abs(got - want) < 1e-9 * max(1.0, abs(want))


def test_wick_zero_mean_under_gff():
    # small version of the zero-expectation property of Wick powers
    from kramers_wave.spectral import integral, wick_power

    spec = TorusSpec(2, 1.0, 6)
    beta = 2.0
    rng = np.random.default_rng(31)
    C = wick_constant(spec, MassKind.POSITIVE_PLUS_TWO, beta)
    n = 1500
    vals = {2: np.empty(n), 3: np.empty(n), 4: np.empty(n)}
    for i in range(n):
        f = sample_gff(spec, beta, MassKind.POSITIVE_PLUS_TWO, rng)
        for j in (2, 3, 4):
            vals[j][i] = integral(wick_power(f, j, C))
    for j in (2, 3, 4):
        se = vals[j].std(ddof=1) / math.sqrt(n)
        assert abs(vals[j].mean()) < 3.0 * se, f"Wick power {j} mean off: {vals[j].mean()} vs se {se}"


def _eval_grid_n1(theta0, thre, thim, L, M=6):
    """u at M grid points for d=1, N=1 fields, vectorized over samples."""
    x = np.arange(M) / M
    c = np.cos(2 * math.pi * x)
    s = np.sin(2 * math.pi * x)
    return (
        theta0[:, None]
        + 2.0 * thre[:, None] * c[None, :]
        - 2.0 * thim[:, None] * s[None, :]
    )


def _importance_oracle_n1(beta, L, C, n, rng, quartic=True):
    """Direct weighted sampling of the d=1, N=1 measure from a Gaussian reference."""
    C_L = (2 * math.pi / L) ** 2
    prec_ref = np.array([2.0, 2.0 + C_L])  # reference brackets for k=0 and |k|=1
    var0 = 1.0 / (beta * L * prec_ref[0])
    var1 = 1.0 / (beta * L * prec_ref[1])  # complex variance, halves per component
    theta0 = rng.normal(0.0, math.sqrt(var0), size=n)
    thre = rng.normal(0.0, math.sqrt(var1 / 2), size=n)
    thim = rng.normal(0.0, math.sqrt(var1 / 2), size=n)
    vals = _eval_grid_n1(theta0, thre, thim, L)
    m4 = (vals**4).mean(axis=1)
    m2 = (vals**2).mean(axis=1)
    bracket = np.array([-1.0, C_L - 1.0])
    quad = 0.5 * beta * L * (bracket[0] * theta0**2 + 2 * bracket[1] * (thre**2 + thim**2))
    S = quad.copy()
    if quartic:
        S += 0.25 * beta * L * (m4 - 6 * C * m2 + 3 * C * C)
    S_ref = 0.5 * beta * L * (prec_ref[0] * theta0**2 + 2 * prec_ref[1] * (thre**2 + thim**2))
    logw = S_ref - S
    logw -= logw.max()
    w = np.exp(logw)
    return theta0, thre, thim, w / w.sum()


def test_chain_matches_importance_sampling_histogram():
    """Detailed balance probe: stationary zero-mode histogram on d=1, N=1."""
    spec = TorusSpec(1, 1.0, 1)
    beta = 1.0
    config = GibbsConfig(spec, beta)
    C = wick_constant(spec, MassKind.NEGATIVE_UNIT, beta).value
    rng = np.random.default_rng(55)
    theta0, _, _, w = _importance_oracle_n1(beta, spec.L, C, 400000, rng)
    edges = np.linspace(-2.0, 2.0, 9)
    ref_hist, _ = np.histogram(theta0, bins=edges, weights=w)
    ess = 1.0 / np.sum((w / w.sum()) ** 2) if w.sum() > 0 else 1.0
    ref_se = np.sqrt(np.maximum(ref_hist, 1e-12) * (1 - ref_hist) / ess)

    sampler = GibbsSampler(config, np.random.default_rng(56))
    sampler.burn_in(2000)
    series = sampler.run(60000)
    got_hist, _ = np.histogram(series, bins=edges)
    got_frac = got_hist / len(series)
    tau = integrated_autocorrelation(series)
    got_se = np.sqrt(np.maximum(got_frac * (1 - got_frac), 1e-12) * tau / len(series))

    for b in range(len(edges) - 1):
        diff = abs(got_frac[b] - ref_hist[b])
        tol = 3.0 * math.hypot(got_se[b], ref_se[b]) + 0.004
        assert diff < tol, f"bin {b}: chain {got_frac[b]:.4f} vs oracle {ref_hist[b]:.4f}"


def test_chain_mode_variances_small_beta():
    # beta = 0.1 keeps the quartic term mild; compare against the weighted oracle
    spec = TorusSpec(1, 1.0, 1)
    beta = 0.1
    C = wick_constant(spec, MassKind.NEGATIVE_UNIT, beta).value
    rng = np.random.default_rng(77)
    theta0, thre, thim, w = _importance_oracle_n1(beta, spec.L, C, 500000, rng)
    want_var0 = float(np.sum(w * theta0**2) - np.sum(w * theta0) ** 2)
    want_var1 = float(np.sum(w * (thre**2 + thim**2)))

    config = GibbsConfig(spec, beta)
    sampler = GibbsSampler(config, np.random.default_rng(78))
    sampler.burn_in(2000)
    n = 40000
    v0 = np.empty(n)
    v1 = np.empty(n)
    for i in range(n):
        sampler.step()
        v0[i] = sampler.theta[0]
        v1[i] = sampler.theta[1] ** 2 + sampler.theta[2] ** 2
    tau = integrated_autocorrelation(v0)
    se0 = v0.std(ddof=1) ** 2 * math.sqrt(2 * tau / n) * 2  # loose variance-of-variance bound
    assert abs(v0.var() - want_var0) < 3 * se0 + 0.01 * want_var0
    se1 = v1.std(ddof=1) / math.sqrt(n / max(tau, 1.0))
    assert abs(v1.mean() - want_var1) < 3 * se1 + 0.01 * want_var1


def test_mcmc_step_deterministic_and_finite():
    spec = TorusSpec(1, 1.0, 4)
    config = GibbsConfig(spec, 2.0)
    rng = np.random.default_rng(5)
    state = sample_gff(spec, 2.0, MassKind.POSITIVE_PLUS_TWO, rng)
    out1, acc1 = mcmc_step(state, config, np.random.default_rng(99))
    out2, acc2 = mcmc_step(state, config, np.random.default_rng(99))
    assert acc1 == acc2
    np.testing.assert_array_equal(out1.coeffs, out2.coeffs)


def test_burn_in_tunes_acceptance():
    spec = TorusSpec(1, 1.0, 8)
    config = GibbsConfig(spec, 4.0, proposal_scale=5.0)  # deliberately poor start
    sampler = GibbsSampler(config, np.random.default_rng(13))
    sampler.burn_in(3000)
    for _ in range(1500):
        sampler.step()
    rate = sampler.n_accepted / sampler.n_proposed
    assert 0.35 < rate < 0.8, f"tuned acceptance {rate}"


def test_deep_well_chain_stays_put():
    spec = TorusSpec(1, 1.0, 4)
    config = GibbsConfig(spec, 32.0)
    start = SpectralField.constant(spec, 1.0)
    sampler = GibbsSampler(config, np.random.default_rng(17), initial=start)
    sampler.burn_in(500)
    series = sampler.run(1000)
    assert np.mean(series > 0) >= 0.99


def test_hmc_step_runs_and_mixes():
    spec = TorusSpec(1, 1.0, 2)
    config = GibbsConfig(spec, 1.0, proposal_scale=0.05, leapfrog_steps=8)
    sampler = GibbsSampler(config, np.random.default_rng(23))
    accepted = sum(sampler.hmc_step() for _ in range(400))
    assert accepted > 100  # mixes at all
    assert sampler.state().is_hermitian(1e-10)


def test_conditioned_saddle_samples():
    spec = TorusSpec(1, 1.0, 4)
    beta = 6.0
    config = GibbsConfig(spec, beta)
    rng = np.random.default_rng(29)
    sampler = conditioned_sampler(config, rng)
    sampler.burn_in(1000)
    n = 400
    v0 = np.empty(n)
    for i in range(n):
        ps = sample_conditioned_saddle(config, rng, sampler=sampler, decorrelate=10)
        assert ps.u.zero_mode == 0.0
        v0[i] = ps.v.zero_mode
        assert v0[i] > 0
    sigma = math.sqrt(1.0 / (beta * spec.volume))
    want = sigma * math.sqrt(2.0 / math.pi)
    se = v0.std(ddof=1) / math.sqrt(n)
    assert abs(v0.mean() - want) < 3.0 * se


def test_wham_recovers_gaussian_density():
    """Feed exact biased Gaussian samples; reweighting must recover the target."""
    rng = np.random.default_rng(41)
    sigma2 = 0.5
    kappa = 16.0
    windows = [UmbrellaWindow(c, kappa) for c in np.linspace(-2.0, 2.0, 15)]
    series = []
    for w in windows:
        prec = 1.0 / sigma2 + kappa
        mean = kappa * w.center / prec
        series.append(rng.normal(mean, 1.0 / math.sqrt(prec), size=4000))
    edges = np.arange(-2.6, 2.6 + 0.04, 0.04)
    centers = 0.5 * (edges[:-1] + edges[1:])
    rho = wham_density(series, windows, edges)
    target = np.exp(-(centers**2) / (2 * sigma2)) / math.sqrt(2 * math.pi * sigma2)
    keep = target > 0.02
    rel = np.abs(rho[keep] - target[keep]) / target[keep]
    assert np.median(rel) < 0.05
    assert rel.max() < 0.25
    # integral normalization
    assert abs(rho.sum() * 0.04 - 1.0) < 1e-8


def test_wham_divergence_reported_for_disjoint_windows():
    rng = np.random.default_rng(43)
    windows = [UmbrellaWindow(-5.0, 400.0), UmbrellaWindow(5.0, 400.0)]
    series = [rng.normal(-5, 0.05, 500), rng.normal(5, 0.05, 500)]
    edges = np.arange(-6, 6, 0.05)
    with pytest.raises(RuntimeError):
        wham_density(series, windows, edges, max_iter=300)


def test_saddle_ratio_gaussian_validation():
    """Quartic off, +2 bracket: the zero-mode density at 0 is sqrt(beta L^d / pi)."""
    spec = TorusSpec(1, 1.0, 2)
    beta = 4.0
    config = GibbsConfig(spec, beta, mass_kind=MassKind.POSITIVE_PLUS_TWO, quartic=False)
    windows = make_umbrella_windows(config, n_windows=21, span=1.6)
    est = estimate_saddle_ratio(
        config, windows, np.random.default_rng(47), n_per_window=2500, burn=800, n_boot=24
    )
    want = math.sqrt(beta * spec.volume / math.pi)
    assert est.se < 0.05 * want  # enough resolution for the check to mean something
    assert abs(est.value - want) < 3.0 * est.se + 0.01 * want


def test_saddle_ratio_symmetry_and_kde_cross_check():
    """Double well at moderate beta: umbrella density is even and matches a KDE."""
    spec = TorusSpec(1, 1.0, 2)
    beta = 2.0
    config = GibbsConfig(spec, beta)
    est = estimate_saddle_ratio(
        config, None, np.random.default_rng(53), n_per_window=2000, burn=800, n_boot=16
    )
    centers, rho = est.bin_centers, est.density
    # evenness of the estimated marginal
    for q in (0.5, 1.0):
        i_plus = np.argmin(np.abs(centers - q))
        i_minus = np.argmin(np.abs(centers + q))
        denom = max(rho[i_plus], rho[i_minus])
        assert abs(rho[i_plus] - rho[i_minus]) < 0.2 * denom + 3 * est.se

    # naive KDE from a long unbiased chain
    sampler = GibbsSampler(config, np.random.default_rng(54))
    sampler.burn_in(2000)
    series = sampler.run(60000)
    h = 0.08
    kde = np.mean(np.exp(-((series - 0.0) ** 2) / (2 * h * h))) / math.sqrt(2 * math.pi * h * h)
    tau = integrated_autocorrelation(series)
    kde_se = kde * math.sqrt(tau / len(series)) * 3  # loose
    assert abs(est.value - kde) < 3 * math.hypot(est.se, kde_se) + 0.05 * kde


def test_integrated_autocorrelation_benchmarks():
    rng = np.random.default_rng(61)
    iid = rng.standard_normal(20000)
    assert abs(integrated_autocorrelation(iid) - 1.0) < 0.3
    phi = 0.9
    n = 200000
    eps = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = 0.0
    for i in range(1, n):
        x[i] = phi * x[i - 1] + eps[i]
    want = (1 + phi) / (1 - phi)
    got = integrated_autocorrelation(x)
    assert want / 1.6 < got < want * 1.6


def test_umbrella_window_validation():
    with pytest.raises(ValueError):
        UmbrellaWindow(0.0, -1.0)
    ws = make_umbrella_windows(GibbsConfig(TorusSpec(1, 1.0, 2), 16.0))
    assert min(w.center for w in ws) <= -1.5
    assert max(w.center for w in ws) >= 1.5
    assert all(w.stiffness == 64.0 for w in ws)
