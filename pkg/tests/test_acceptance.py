"""Full-scale acceptance runs, one test per headline claim.

Unlike the module tests these are complete statistical experiments on fixed
seeds: the rate and transmission checks each run minutes of simulation.  Every
test prints its headline numbers before asserting, so a failure (or -rA)
shows the measured values next to the gate.
"""

import json
import math
import time

import numpy as np

import oracles
from kramers_wave import cli
from kramers_wave.dynamics import (
    IntegratorConfig,
    SCHEME_NLW,
    SCHEME_SDNLW,
    SCHEME_SHE,
    run,
)
from kramers_wave.gibbs import (
    GibbsConfig,
    GibbsSampler,
    estimate_saddle_ratio,
    sample_gff,
    sample_white_noise,
)
from kramers_wave.renorm3d import (
    ChaosSumConfig,
    delta_leading,
    gamma_N,
    gamma_diff_table,
)
from kramers_wave.spectral import (
    MassKind,
    PhaseState,
    SpectralField,
    TorusSpec,
    integral,
    mode_table,
    pointwise_power,
    sample_hermitian_standard,
    wick_constant,
    wick_power,
)
from kramers_wave.transmission import (
    OUTCOME_TRANSMITTED,
    TransmissionConfig,
    estimate_transmission,
    sinh_envelope_check,
)
from kramers_wave.tst import (
    count_crossings,
    empirical_rate,
    hitting_time_she_1d,
    rate_nlw_1d,
    renormalized_prefactor_bound,
    tst_identity_rate,
)
from kramers_wave.variational import (
    ConstantShift,
    FeedbackShift,
    RhoSchedule,
    ZeroDrift,
    bd_objective,
    log_partition_oracle,
    optimize_constant_drift,
    phi_wick_constant,
    sigma_identity_check,
)


def run_config(kind, torus, seed, **params):
    d, L, N = torus
    obj = {"experiment": kind, "torus": {"d": d, "L": L, "N": N}, "seed": seed}
    obj.update(params)
    record, _ = cli.run_experiment(cli.parse_config(json.dumps(obj)))
    return record


# ---------------------------------------------------------------------------
# 1. The crossing frequency of the wave flow equals the identity rate.


def test_wave_crossing_rate_matches_identity_rate():
    t0 = time.monotonic()
    rec = run_config(
        "tst-rate",
        (1, 1.0, 8),
        seed=104,
        beta=4.0,
        dt=0.005,
        horizon=50_000.0,
        n_members=2500,
        n_per_window=50_000,
        n_boot=32,
    )
    wall = time.monotonic() - t0
    r = rec.results
    se = math.hypot(
        rec.standard_errors["rate_empirical"], rec.standard_errors["rate_predicted"]
    )
    print(
        f"crossing rate {r['rate_empirical']:.5f} vs identity {r['rate_predicted']:.5f}"
        f" (combined se {se:.5f}, z {r['z_value']:+.2f}, rel {r['rel_gap']:.3f},"
        f" {r['n_crossings']:.0f} crossings, {wall:.0f}s)"
    )
    assert abs(r["z_value"]) <= 3.0
    assert r["rel_gap"] <= 0.10
    assert wall <= 600.0


# ---------------------------------------------------------------------------
# 2. The measured transition rate approaches the asymptotic formula from
#    below as beta grows.  The rate at each beta is the identity rate with
#    an umbrella-sampled saddle ratio; a damped wave run at the most active
#    beta cross-checks that the flow itself produces the same number.


def test_transition_rate_approaches_asymptotic_formula():
    t0 = time.monotonic()
    spec = TorusSpec(d=1, L=1.0, N=8)
    betas = (8.0, 12.0, 16.0)
    windows = (300_000, 300_000, 150_000)
    rates, rate_ses, ratios = [], [], []
    for beta, npw, seed in zip(betas, windows, (2081, 2082, 2083)):
        est = estimate_saddle_ratio(
            GibbsConfig(spec, beta),
            None,
            np.random.default_rng(seed),
            n_per_window=npw,
            n_boot=32,
        )
        rate = tst_identity_rate(est.value, beta, spec).rate
        formula = rate_nlw_1d(beta, spec).rate
        rates.append(rate)
        rate_ses.append(rate * est.se / est.value)
        ratios.append(rate / formula)
    gaps = [abs(r - 1.0) for r in ratios]
    print(
        "rate/formula: "
        + ", ".join(
            f"beta={b:g}: {r:.4f} +/- {s / rates[i] * ratios[i]:.4f}"
            for i, (b, r, s) in enumerate(zip(betas, ratios, rate_ses))
        )
    )
    for r in ratios:
        assert 0.5 <= r <= 1.5
    assert gaps[0] >= gaps[1] >= gaps[2], f"|ratio-1| not monotone: {gaps}"

    # dynamical cross-check: the damped flow preserves the same measure, so
    # its crossing rate must agree with the identity rate at beta = 8
    sampler = GibbsSampler(GibbsConfig(spec, betas[0]), np.random.default_rng(2090))
    sampler.burn_in(2000)
    state = PhaseState(
        sampler.state(), sample_white_noise(spec, betas[0], np.random.default_rng(2091))
    )
    ic = IntegratorConfig(dt=0.005, scheme=SCHEME_SDNLW, beta=betas[0], gamma=1.0)
    traj = run(state, ic, 20_000.0, rng=np.random.default_rng(2092))
    flow = empirical_rate(count_crossings(traj.times, traj.zero_mode), n_batches=40)
    gap = abs(flow.rate - rates[0])
    combined = math.hypot(flow.se, rate_ses[0])
    wall = time.monotonic() - t0
    print(
        f"damped-flow rate {flow.rate:.5f} +/- {flow.se:.5f} vs identity"
        f" {rates[0]:.5f} +/- {rate_ses[0]:.5f} ({wall:.0f}s total)"
    )
    assert gap <= 3.0 * combined
    assert wall <= 7200.0


# ---------------------------------------------------------------------------
# 3. Mean well-to-well hitting time of the heat flow matches the formula.


def _hitting_legs(times, values, threshold):
    # one leg spans from an entry into the + well to the first arrival in
    # the - well; the scan then re-arms on the next + entry
    legs = []
    armed_at = None
    for t, q in zip(times, values):
        if armed_at is None:
            if q >= threshold:
                armed_at = t
        elif q <= -threshold:
            legs.append(t - armed_at)
            armed_at = None
    return np.asarray(legs)


def test_heat_flow_hitting_time_matches_formula():
    t0 = time.monotonic()
    spec = TorusSpec(d=1, L=1.0, N=8)
    beta, delta = 12.0, 0.2
    # the 1d hitting-time law describes the plain cubic flow; the default 1d
    # counterterm would deepen the wells and stretch every leg by ~13%
    ic = IntegratorConfig(dt=0.005, scheme=SCHEME_SHE, beta=beta, wick_c=0.0)
    traj = run(
        SpectralField.constant(spec, 1.0), ic, 25_000.0, rng=np.random.default_rng(312)
    )
    legs = _hitting_legs(traj.times, traj.zero_mode, 1.0 - delta)
    mean = float(np.mean(legs))
    se = float(np.std(legs, ddof=1) / math.sqrt(len(legs)))
    predicted = hitting_time_she_1d(beta, spec).rate
    factor = max(mean / predicted, predicted / mean)
    wall = time.monotonic() - t0
    print(
        f"{len(legs)} transitions, mean {mean:.1f} +/- {se:.1f} vs formula"
        f" {predicted:.1f} (factor {factor:.2f}, {wall:.0f}s)"
    )
    assert len(legs) >= 50
    assert factor <= 1.5


# ---------------------------------------------------------------------------
# 4. The renormalized prefactor ratio stays order one uniformly in N.


def test_renormalized_prefactor_stays_order_one():
    for d, ns in ((2, (4, 8, 16, 32, 64)), (3, (2, 4, 8, 16))):
        table = renormalized_prefactor_bound([TorusSpec(d, 1.0, n) for n in ns])
        gaps = np.abs(table["diffs"])
        shown = np.array2string(gaps, formatter={"float_kind": lambda v: f"{v:.2e}"})
        print(f"d={d}: q in [{table['min']:.5f}, {table['max']:.5f}], doubling gaps {shown}")
        assert 0.1 <= table["min"] and table["max"] <= 10.0
        assert np.all(np.diff(gaps) < 0)


# ---------------------------------------------------------------------------
# 5. The wave integrator conserves energy and preserves the product measure.


def test_wave_energy_and_measure_are_preserved():
    spec = TorusSpec(d=1, L=1.0, N=8)
    beta = 4.0
    sampler = GibbsSampler(GibbsConfig(spec, beta), np.random.default_rng(51))
    sampler.burn_in(2000)
    state = PhaseState(
        sampler.state(), sample_white_noise(spec, beta, np.random.default_rng(52))
    )
    ic = IntegratorConfig(dt=0.005, scheme=SCHEME_NLW, beta=beta)
    horizon = 5000.0  # 1e6 steps
    traj = run(state, ic, horizon, record_energy_every=100)
    slope = np.polyfit(traj.energy_times, traj.energy, 1)[0]
    drift = abs(slope) * horizon
    level = abs(float(np.mean(traj.energy)))
    print(f"energy drift {drift:.2e} over 1e6 steps against |H| = {level:.3f}")
    assert drift < 1e-4 * level

    for d, seed in ((1, 54), (2, 55)):
        rec = run_config(
            "invariance-test",
            (d, 1.0, 8),
            seed=seed,
            beta=beta,
            horizon=10.0,
            n_samples=200,
        )
        z = rec.results["max_abs_z"]
        print(f"pushforward d={d}: max |z| = {z:.2f} (critical {rec.results['z_critical']:.2f})")
        assert rec.results["invariant"] == 1.0


# ---------------------------------------------------------------------------
# 6. Wick powers integrate to zero on average and obey the algebra exactly.


def test_wick_powers_zero_mean_and_identities():
    spec = TorusSpec(d=2, L=1.0, N=16)
    beta, mk = 1.0, MassKind.POSITIVE_PLUS_TWO
    C = wick_constant(spec, mk, beta).value
    rng = np.random.default_rng(61)
    n_samples = 10_000
    sums = {j: np.empty(n_samples) for j in (2, 3, 4)}
    for i in range(n_samples):
        f = sample_gff(spec, beta, mk, rng)
        for j in sums:
            sums[j][i] = integral(wick_power(f, j, C))
    for j, vals in sums.items():
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(n_samples))
        print(f"mean integral of :phi^{j}:  {mean:+.5f} +/- {se:.5f} (z {mean / se:+.2f})")
        assert abs(mean) <= 3.0 * se

    # exact identities on a fixed random field
    spec1 = TorusSpec(d=1, L=1.0, N=4)
    u = SpectralField(spec1, 0.6 * sample_hermitian_standard(spec1, np.random.default_rng(62)))
    a, c1, c2 = 0.7, 0.31, 0.9
    shifted = u + SpectralField.constant(spec1, a)
    lhs = wick_power(shifted, 3, c1)
    rhs = (
        wick_power(u, 3, c1)
        + 3.0 * a * wick_power(u, 2, c1)
        + (3.0 * a * a) * u
        + SpectralField.constant(spec1, a**3)
    )
    np.testing.assert_allclose(lhs.coeffs, rhs.coeffs, atol=1e-10)
    dc = c2 - c1
    reordered = (
        wick_power(u, 4, c1)
        - 6.0 * dc * wick_power(u, 2, c1)
        + SpectralField.constant(spec1, 3.0 * dc * dc)
    )
    np.testing.assert_allclose(wick_power(u, 4, c2).coeffs, reordered.coeffs, atol=1e-10)
    print("binomial shift and change-of-ordering identities hold to 1e-10")


# ---------------------------------------------------------------------------
# 7. Every admissible drift bounds the log-partition function from above.


def test_drift_objectives_bound_log_partition():
    t0 = time.monotonic()
    spec = TorusSpec(d=1, L=1.0, N=1)
    mk = MassKind.POSITIVE_PLUS_TWO
    sch = RhoSchedule(1)
    C = phi_wick_constant(spec, sch, mk)
    potentials = {
        "linear": lambda f: 0.8 * f.zero_mode,
        "quartic": lambda f: 0.5 * integral(wick_power(f, 4, C)),
        "well": lambda f: 3.0 * (f.zero_mode - 0.6) ** 2,
    }
    strategies = [ZeroDrift(), ConstantShift(0.3), FeedbackShift(target=0.3, gain=0.6)]
    for name, V in potentials.items():
        oracle, se_o = log_partition_oracle(V, spec, sch, mk, 40_000, np.random.default_rng(71))
        for strat in strategies:
            mean, se = bd_objective(V, strat, spec, sch, mk, 6000, np.random.default_rng(72))
            slack = (mean - oracle) / math.hypot(se, se_o)
            print(f"{name} / {strat.tag}: objective {mean:+.4f} vs oracle {oracle:+.4f} (z {slack:+.1f})")
            assert mean >= oracle - 3.0 * math.hypot(se, se_o)

    well = potentials["well"]
    best = optimize_constant_drift(well, spec, sch, mk, np.random.default_rng(73), n_paths=6000)
    zero, zero_se = bd_objective(well, ZeroDrift(), spec, sch, mk, 6000, np.random.default_rng(74))
    print(f"optimized constant drift a={best.a:+.3f}: {best.objective:.4f} vs zero drift {zero:.4f}")
    assert best.objective <= zero + 3.0 * math.hypot(best.se, zero_se)

    defect = sigma_identity_check(RhoSchedule(16), np.arange(17))
    wall = time.monotonic() - t0
    print(f"sigma identity defect {defect:.2e} ({wall:.0f}s)")
    assert defect < 1e-6


# ---------------------------------------------------------------------------
# 8. Saddle shots transmit with probability approaching one as beta grows.


def test_saddle_shots_transmit_at_high_beta():
    t0 = time.monotonic()
    spec = TorusSpec(d=2, L=1.0, N=8)
    delta = 0.2
    estimates = []
    for i, beta in enumerate((32.0, 64.0, 128.0)):
        tc = TransmissionConfig(spec=spec, beta=beta, delta=delta, dt=0.005, n_shots=500)
        est = estimate_transmission(
            tc, np.random.default_rng(810 + i), keep_traces=(beta == 128.0)
        )
        estimates.append(est)
        print(
            f"beta={beta:g}: p_hat {est.p_hat:.3f}, wilson"
            f" [{est.wilson[0]:.3f}, {est.wilson[1]:.3f}],"
            f" {est.n_timed_out} timed out"
        )
    for lo, hi in zip(estimates, estimates[1:]):
        assert hi.p_hat >= lo.p_hat or hi.wilson[0] <= lo.wilson[1]
    assert estimates[-1].p_hat >= 0.8

    transmitted = [
        tr for tr in estimates[-1].traces if tr.record.outcome == OUTCOME_TRANSMITTED
    ]
    bad = sum(
        1
        for tr in transmitted
        if not sinh_envelope_check(tr.record, tr.times, tr.zero_mode, delta, 128.0).passed
    )
    frac = bad / len(transmitted)
    wall = time.monotonic() - t0
    print(f"envelope violations at beta=128: {bad}/{len(transmitted)} ({frac:.1%}, {wall:.0f}s)")
    assert frac <= 0.05
    assert wall <= 3600.0


# ---------------------------------------------------------------------------
# 9. The 3d constants diverge individually with a bounded, settling gap.


def test_three_d_constants_diverge_with_settling_gap():
    table = gamma_diff_table([2, 4, 6, 8])
    gp = np.asarray(table.gamma_plus)
    gm = np.asarray(table.gamma_minus)
    diffs = gp - gm
    increments = np.abs(np.diff(diffs))
    print(
        f"gamma_plus {np.array2string(gp, precision=3)},"
        f" gap increments {np.array2string(increments, precision=3)}"
    )
    assert np.all(np.diff(gp) > 0) and np.all(np.diff(gm) > 0)
    assert np.all(np.diff(increments) < 0)

    spec2 = TorusSpec(d=3, L=1.0, N=2)
    sch2 = ChaosSumConfig(2).schedule
    for mk in (MassKind.POSITIVE_PLUS_TWO, MassKind.NEGATIVE_UNIT):
        grouped = gamma_N(spec2, mk, sch2)
        brute = oracles.gamma_pairs_brute(spec2, mk, sch2)
        assert abs(grouped - brute) < 1e-10
    print("grouped chaos sums equal brute-force pair enumeration at N=2")

    spec1 = TorusSpec(d=3, L=1.0, N=1)
    sch1 = ChaosSumConfig(1).schedule
    value = delta_leading(spec1, MassKind.NEGATIVE_UNIT, 1.0, sch1)
    est, se = oracles.delta_mc_oracle(
        spec1, MassKind.NEGATIVE_UNIT, 1.0, sch1, np.random.default_rng(42), ns=1200, stride=1
    )
    print(f"delta leading term {value:.3e} vs MC oracle {est:.3e} +/- {se:.1e}")
    assert abs(est - value) < 3.0 * se


# ---------------------------------------------------------------------------
# 10. The counting and product kernels agree exactly with brute force.


def test_counting_and_dealiasing_match_bruteforce():
    rng = np.random.default_rng(1001)
    for _ in range(1000):
        n = int(rng.integers(2, 80))
        times = np.cumsum(rng.uniform(0.01, 1.0, n))
        values = rng.normal(size=n)
        values[rng.random(n) < 0.1] = 0.0  # exact zeros exercise the tie rules
        t_ref, d_ref = oracles.crossing_scan(times, values)
        rec = count_crossings(times, values)
        np.testing.assert_array_equal(rec.times, t_ref)
        np.testing.assert_array_equal(rec.directions, d_ref)
    print("crossing counter identical to dense scan on 1000 signals")

    for d, ns in ((1, (1, 2, 4, 8)), (2, (1, 2, 4, 8))):
        for n in ns:
            spec = TorusSpec(d, 1.0, n)
            f = SpectralField(
                spec, 0.7 * sample_hermitian_standard(spec, np.random.default_rng(13 + d + n))
            )
            fast = pointwise_power(f, 3)
            modes = [tuple(int(c) for c in row) for row in mode_table(d, n)]
            _, slow = oracles.cubic_by_convolution(modes, f.coeffs, d, n)
            np.testing.assert_allclose(fast.coeffs, slow, atol=1e-10)
    print("dealiased cubic equals the triple convolution for N <= 8")
