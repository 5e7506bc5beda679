"""Time integrators for the truncated wave and heat flows.

Three schemes share one code path layout:

- NLW (Strang splitting): half kick with the renormalized cubic force,
  exact linear flow of dd/dtt u_hat = (1 - C_L|k|^2) u_hat per mode, half
  kick.  Reversible and phase-space volume preserving.
- SdNLW: same splitting, but the linear substep is the exact damped
  Ornstein-Uhlenbeck update with the exact 2x2 increment covariance per
  mode (position and velocity correlated), intensity 2*gamma/(beta L^d).
- SHE: exponential Euler with the exact linear factor and exact linear
  increment variance, intensity 2/(beta L^d).

The renormalized mass shift sits inside the nonlinear kick
(-P_N(u^3) + 3C u), never in the linear flow, so the linear substep is
beta-independent.  Hot loops operate on full FFT-layout arrays; the
SpectralField view is only materialized at recording boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from .spectral import (
    MassKind,
    PhaseState,
    SpectralField,
    TorusSpec,
    WickConstants,
    _half_mode_rows,
    good_grid_size,
    grid_embedding,
    wick_constant,
    zero_mode_row,
)

SCHEME_NLW = "nlw-splitting"
SCHEME_SDNLW = "sdnlw-exponential"
SCHEME_SHE = "she-exponential"
_SCHEMES = (SCHEME_NLW, SCHEME_SDNLW, SCHEME_SHE)

MAX_DT = 0.01  # step-size contract guarding the cosh/sinh zero-mode flow


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    scheme: str
    beta: float
    gamma: float = 0.0
    wick_c: float | None = None  # defaults to C(spec, NegativeUnit, beta)
    cubic: bool = True
    max_n_3d: int = 8

    def __post_init__(self) -> None:
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, pick one of {_SCHEMES}")
        if not (0.0 < self.dt <= MAX_DT + 1e-15):
            raise ValueError(f"dt must lie in (0, {MAX_DT}], got {self.dt}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.scheme == SCHEME_NLW and self.gamma != 0.0:
            raise ValueError("NLW runs undamped; gamma must be 0")
        if self.scheme == SCHEME_SDNLW and self.gamma <= 0.0:
            raise ValueError("SdNLW needs gamma > 0")


@dataclass
class Trajectory:
    times: np.ndarray
    zero_mode: np.ndarray
    scheme: str
    dt: float
    energy_times: np.ndarray | None = None
    energy: np.ndarray | None = None
    snapshots: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.times) != len(self.zero_mode):
            raise ValueError("times and zero_mode must align")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("time stamps must increase strictly")


class _Workspace:
    """Embedded-grid machinery shared by the integrators."""

    def __init__(self, spec: TorusSpec, config: IntegratorConfig):
        self.spec = spec
        self.config = config
        N = spec.N
        self.M = good_grid_size(4 * N + 1) if config.cubic else good_grid_size(2 * N + 1)
        self.Md = self.M**spec.d
        flat, ksq_grid, mask = grid_embedding(spec.d, spec.N, self.M)
        self.flat = flat
        self.shape = (self.M,) * spec.d
        self.mask = mask.ravel().astype(np.float64)
        self.ksq = ksq_grid.ravel()
        plus, conj, zero = _half_mode_rows(spec.d, spec.N)
        self.plus_flat = flat[plus]
        self.conj_flat = flat[conj]
        self.zero_flat = int(flat[zero])
        if config.wick_c is not None:
            self.C = float(config.wick_c)
        else:
            self.C = wick_constant(spec, MassKind.NEGATIVE_UNIT, config.beta).value

    def embed(self, f: SpectralField) -> np.ndarray:
        grid = np.zeros(self.Md, dtype=np.complex128)
        grid[self.flat] = f.coeffs
        return grid

    def extract(self, grid: np.ndarray) -> SpectralField:
        return SpectralField(self.spec, grid[self.flat])

    def cubic_force(self, u: np.ndarray) -> np.ndarray:
        """-(P_N(u^3) - 3C u) on the embedded grid; zero when cubic is off."""
        if not self.config.cubic:
            return np.zeros_like(u)
        vals = np.fft.ifftn(u.reshape(self.shape)).real * self.Md
        cube = np.fft.fftn(vals * vals * vals).ravel()
        cube *= self.mask
        cube /= self.Md
        cube -= 3.0 * self.C * u
        np.negative(cube, out=cube)
        return cube

    def hermitian_noise(self, rng: np.random.Generator) -> np.ndarray:
        n = len(self.plus_flat)
        buf = rng.standard_normal(2 * n + 1)
        z = np.zeros(self.Md, dtype=np.complex128)
        if n:
            vals = (buf[:n] + 1j * buf[n : 2 * n]) * math.sqrt(0.5)
            z[self.plus_flat] = vals
            z[self.conj_flat] = np.conj(vals)
        z[self.zero_flat] = buf[2 * n]
        return z


class NlwIntegrator:
    def __init__(self, spec: TorusSpec, config: IntegratorConfig):
        self.ws = _Workspace(spec, config)
        self.dt = config.dt
        a = 1.0 - spec.C_L * self.ws.ksq  # linear flow: u'' = a u per mode
        dt = config.dt
        osc = a < 0
        w = np.sqrt(np.abs(a))
        w_safe = np.where(w == 0, 1.0, w)
        self.A = np.where(osc, np.cos(w * dt), np.cosh(w * dt))
        self.B = np.where(osc, np.sin(w * dt) / w_safe, np.sinh(w * dt) / w_safe)
        self.Cm = np.where(osc, -w * np.sin(w * dt), w * np.sinh(w * dt))
        self.D = self.A

    def linear(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u2 = self.A * u + self.B * v
        v2 = self.Cm * u + self.D * v
        return u2, v2

    def run_grid(
        self,
        u: np.ndarray,
        v: np.ndarray,
        n_steps: int,
        zero_out: np.ndarray | None = None,
        observer=None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Fused Strang loop: one cubic evaluation per step."""
        ws = self.ws
        dt = self.dt
        half = 0.5 * dt
        if n_steps == 0:
            return u, v
        F = ws.cubic_force(u)
        v = v + half * F
        for i in range(n_steps):
            u, v = self.linear(u, v)
            F = ws.cubic_force(u)
            if i < n_steps - 1:
                v += dt * F
            else:
                v += half * F
            if zero_out is not None:
                zero_out[i] = u[ws.zero_flat].real
            if observer is not None:
                _call_observer(observer, i, (i + 1) * dt, u, v, ws)
        return u, v


class SdnlwIntegrator:
    def __init__(self, spec: TorusSpec, config: IntegratorConfig):
        self.ws = _Workspace(spec, config)
        self.dt = config.dt
        gamma = config.gamma
        a_vals = 1.0 - spec.C_L * self.ws.ksq
        self.noise_scale = math.sqrt(2.0 * gamma / (config.beta * spec.volume))
        # per-|k|^2 class: exact flow matrix and unit-intensity increment chol
        Md = self.ws.Md
        self.P11 = np.empty(Md)
        self.P12 = np.empty(Md)
        self.P21 = np.empty(Md)
        self.P22 = np.empty(Md)
        self.L11 = np.empty(Md)
        self.L21 = np.empty(Md)
        self.L22 = np.empty(Md)
        cache: dict[float, tuple] = {}
        for a in np.unique(a_vals):
            cache[a] = _ou_increment(a, gamma, config.dt)
        for a, (phi, chol) in cache.items():
            sel = a_vals == a
            self.P11[sel], self.P12[sel] = phi[0, 0], phi[0, 1]
            self.P21[sel], self.P22[sel] = phi[1, 0], phi[1, 1]
            self.L11[sel], self.L21[sel], self.L22[sel] = chol

    def linear(self, u, v, rng):
        ws = self.ws
        u2 = self.P11 * u + self.P12 * v
        v2 = self.P21 * u + self.P22 * v
        if self.noise_scale > 0:
            z1 = ws.hermitian_noise(rng)
            z2 = ws.hermitian_noise(rng)
            u2 += self.noise_scale * (self.L11 * z1)
            v2 += self.noise_scale * (self.L21 * z1 + self.L22 * z2)
        return u2, v2

    def run_grid(self, u, v, n_steps, rng, zero_out=None, observer=None):
        ws = self.ws
        dt = self.dt
        half = 0.5 * dt
        if n_steps == 0:
            return u, v
        F = ws.cubic_force(u)
        v = v + half * F
        for i in range(n_steps):
            u, v = self.linear(u, v, rng)
            F = ws.cubic_force(u)
            if i < n_steps - 1:
                v += dt * F
            else:
                v += half * F
            if zero_out is not None:
                zero_out[i] = u[ws.zero_flat].real
            if observer is not None:
                _call_observer(observer, i, (i + 1) * dt, u, v, ws)
        return u, v


def _ou_increment(a: float, gamma: float, dt: float):
    """Exact flow and unit-intensity noise chol for x'' = a x - gamma x' + noise."""
    A = np.array([[0.0, 1.0], [a, -gamma]])
    phi = expm(A * dt)
    # Van Loan: exp([[A, g g^T],[0, -A^T]] dt) packs the increment covariance
    g = np.array([[0.0], [1.0]])
    H = np.zeros((4, 4))
    H[:2, :2] = A
    H[:2, 2:] = g @ g.T
    H[2:, 2:] = -A.T
    E = expm(H * dt)
    Q = E[:2, 2:] @ phi.T
    Q = 0.5 * (Q + Q.T)
    l11 = math.sqrt(max(Q[0, 0], 0.0))
    l21 = Q[1, 0] / l11 if l11 > 0 else 0.0
    l22 = math.sqrt(max(Q[1, 1] - l21 * l21, 0.0))
    return phi, (l11, l21, l22)


class SheIntegrator:
    def __init__(self, spec: TorusSpec, config: IntegratorConfig):
        self.ws = _Workspace(spec, config)
        self.dt = config.dt
        a = 1.0 - spec.C_L * self.ws.ksq
        E = np.exp(a * config.dt)
        self.E = E
        self.phi = (E - 1.0) / a  # a is never 0 on the grid (C_L > 1)
        var = (2.0 / (config.beta * spec.volume)) * (E * E - 1.0) / (2.0 * a)
        self.sig = np.sqrt(np.maximum(var, 0.0))

    def run_grid(self, u, n_steps, rng, zero_out=None, observer=None):
        ws = self.ws
        for i in range(n_steps):
            F = ws.cubic_force(u)
            u = self.E * u + self.phi * F + self.sig * ws.hermitian_noise(rng)
            if zero_out is not None:
                zero_out[i] = u[ws.zero_flat].real
            if observer is not None:
                _call_observer(observer, i, (i + 1) * self.dt, u, None, ws)
        return u


def _call_observer(observer, i, t, u, v, ws: _Workspace):
    try:
        observer(i, t, u[ws.zero_flat].real)
    except Exception as exc:  # noqa: BLE001 - abort with location, per contract
        raise RuntimeError(f"observer failed at step {i} (t={t:.6g}): {exc}") from exc


@lru_cache(maxsize=32)
def _integrator(spec: TorusSpec, config: IntegratorConfig):
    if spec.d == 3 and spec.N > config.max_n_3d:
        raise ValueError(
            f"d=3 runs are capped at N <= {config.max_n_3d} by default; "
            "raise max_n_3d explicitly for larger truncations"
        )
    if config.scheme == SCHEME_NLW:
        return NlwIntegrator(spec, config)
    if config.scheme == SCHEME_SDNLW:
        return SdnlwIntegrator(spec, config)
    return SheIntegrator(spec, config)


def nlw_step(state: PhaseState, config: IntegratorConfig) -> PhaseState:
    integ = _integrator(state.spec, config)
    u = integ.ws.embed(state.u)
    v = integ.ws.embed(state.v)
    u, v = integ.run_grid(u, v, 1)
    return PhaseState(integ.ws.extract(u), integ.ws.extract(v))


def sdnlw_step(state: PhaseState, config: IntegratorConfig, rng: np.random.Generator) -> PhaseState:
    integ = _integrator(state.spec, config)
    u = integ.ws.embed(state.u)
    v = integ.ws.embed(state.v)
    u, v = integ.run_grid(u, v, 1, rng)
    return PhaseState(integ.ws.extract(u), integ.ws.extract(v))


def she_step(u: SpectralField, config: IntegratorConfig, rng: np.random.Generator) -> SpectralField:
    integ = _integrator(u.spec, config)
    grid = integ.ws.embed(u)
    grid = integ.run_grid(grid, 1, rng)
    return integ.ws.extract(grid)


def energy(state: PhaseState, config: IntegratorConfig) -> float:
    """H_N = int [ v^2/2 + |grad u|^2/2 - u^2/2 + u^4/4 - (3C/2) u^2 ] dx."""
    ws = _integrator(state.spec, config).ws
    return _energy_grid(ws.embed(state.u), ws.embed(state.v), ws)


def _energy_grid(u: np.ndarray, v: np.ndarray, ws: _Workspace) -> float:
    spec = ws.spec
    usq = np.abs(u) ** 2
    kin = 0.5 * float(np.sum(np.abs(v) ** 2))
    grad = 0.5 * spec.C_L * float(np.sum(ws.ksq * usq))
    mass = -0.5 * float(np.sum(usq))
    if not ws.config.cubic:
        return spec.volume * (kin + grad + mass)
    wick_mass = -1.5 * ws.C * float(np.sum(usq))
    vals = np.fft.ifftn(u.reshape(ws.shape)).real * ws.Md
    quart = 0.25 * float(np.mean(vals**4))
    return spec.volume * (kin + grad + mass + wick_mass + quart)


def run(
    initial,
    config: IntegratorConfig,
    horizon: float,
    rng: np.random.Generator | None = None,
    record_energy_every: int = 0,
    snapshot_every: int = 0,
    observer=None,
) -> Trajectory:
    """Integrate for `horizon` time units, recording the zero mode each step.

    `initial` is a PhaseState for the wave schemes and a SpectralField for
    SHE.  horizon/dt must be within rounding of an integer.
    """
    n_steps = int(round(horizon / config.dt))
    if abs(n_steps * config.dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"horizon {horizon} is not an integer multiple of dt={config.dt}")
    if config.scheme != SCHEME_NLW and rng is None:
        raise ValueError(f"scheme {config.scheme} needs an rng")

    if config.scheme == SCHEME_SHE:
        if not isinstance(initial, SpectralField):
            raise TypeError("SHE evolves a SpectralField")
        spec = initial.spec
    else:
        if not isinstance(initial, PhaseState):
            raise TypeError("wave schemes evolve a PhaseState")
        spec = initial.spec
    integ = _integrator(spec, config)
    ws = integ.ws

    times = np.arange(n_steps + 1) * config.dt
    zero = np.empty(n_steps + 1)
    chunks = _record_plan(n_steps, record_energy_every, snapshot_every)
    e_times, e_vals, snaps = [], [], []

    if config.scheme == SCHEME_SHE:
        u = ws.embed(initial)
        zero[0] = u[ws.zero_flat].real
        pos = 0
        for start, stop in chunks:
            u = integ.run_grid(u, stop - start, rng, zero_out=zero[start + 1 : stop + 1], observer=None if observer is None else _shift_observer(observer, start, config.dt))
            pos = stop
            _maybe_record(stop, n_steps, record_energy_every, snapshot_every, u, None, ws, times, e_times, e_vals, snaps)
        assert pos == n_steps
    else:
        u = ws.embed(initial.u)
        v = ws.embed(initial.v)
        zero[0] = u[ws.zero_flat].real
        _maybe_record(0, n_steps, record_energy_every, snapshot_every, u, v, ws, times, e_times, e_vals, snaps, include_zero=True)
        for start, stop in chunks:
            if config.scheme == SCHEME_NLW:
                u, v = integ.run_grid(u, v, stop - start, zero_out=zero[start + 1 : stop + 1], observer=None if observer is None else _shift_observer(observer, start, config.dt))
            else:
                u, v = integ.run_grid(u, v, stop - start, rng, zero_out=zero[start + 1 : stop + 1], observer=None if observer is None else _shift_observer(observer, start, config.dt))
            _maybe_record(stop, n_steps, record_energy_every, snapshot_every, u, v, ws, times, e_times, e_vals, snaps)

    traj = Trajectory(
        times=times,
        zero_mode=zero,
        scheme=config.scheme,
        dt=config.dt,
        energy_times=np.array(e_times) if e_times else None,
        energy=np.array(e_vals) if e_vals else None,
        snapshots=snaps,
    )
    return traj


def _record_plan(n_steps: int, energy_every: int, snapshot_every: int) -> list[tuple[int, int]]:
    """Split [0, n_steps] at every recording boundary."""
    marks = {n_steps}
    for every in (energy_every, snapshot_every):
        if every > 0:
            marks.update(range(every, n_steps + 1, every))
    cuts = sorted(marks)
    plan = []
    prev = 0
    for c in cuts:
        if c > prev:
            plan.append((prev, c))
            prev = c
    return plan


def _maybe_record(
    step, n_steps, energy_every, snapshot_every, u, v, ws, times, e_times, e_vals, snaps, include_zero=False
):
    if energy_every > 0 and (step % energy_every == 0 or (include_zero and step == 0)):
        if v is not None:
            e_times.append(step * ws.config.dt)
            e_vals.append(_energy_grid(u, v, ws))
    if snapshot_every > 0 and step > 0 and step % snapshot_every == 0:
        if v is not None:
            snaps.append((step * ws.config.dt, PhaseState(ws.extract(u), ws.extract(v))))
        else:
            snaps.append((step * ws.config.dt, ws.extract(u)))


def _shift_observer(observer, offset_steps: int, dt: float):
    def shifted(i, t, q):
        observer(offset_steps + i, (offset_steps + i + 1) * dt, q)

    return shifted
