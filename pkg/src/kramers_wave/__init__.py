"""Transition-state theory for truncated stochastic phi^4 dynamics on the torus.

The package is organised around a spectral Galerkin representation of fields
on T^d = [0, L]^d with L < 2*pi.  Submodules:

- spectral: mode sets, transforms, Wick-ordered nonlinearities
- gibbs: Gibbs measure sampling (MALA/HMC, umbrella windows, WHAM)
- dynamics: wave, damped-wave and heat integrators
- tst: crossing statistics and Eyring-Kramers style rate formulas
- transmission: forward-shot transmission estimates at the saddle
- variational: Boue-Dupuis style variational bounds for log-partition values
- renorm3d: second/third order renormalization constants in d = 3
- cli: command line entry points
"""

__version__ = "0.1.0"

from .spectral import (  # noqa: F401
    MassKind,
    PhaseState,
    SpectralField,
    TorusSpec,
    WickConstants,
    wick_constant,
)
