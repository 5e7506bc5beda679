"""Command-line experiment runner.

One JSON config describes one experiment.  The runner derives every random
stream from the master seed with ``SeedSequence(seed, spawn_key=(replica,))``,
so replica k sees the same stream no matter how many replicas run or in what
order.  Artifacts (CSV tables, JSON summaries, binary trajectories) are a pure
function of (config, seed, package version); wall-clock time is printed to
stdout but never written into an artifact, to keep emitted bytes reproducible.

Environment variables are honoured for exactly two things: ``KRAMERS_WAVE_OUT``
(fallback output directory) and ``KRAMERS_WAVE_THREADS`` (worker thread count).
Everything else must come from the config file.

Exit codes: 0 success, 2 config error (every violation is reported, not just
the first), 3 runtime error inside an experiment.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import struct
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (
    MAX_DT,
    SCHEME_NLW,
    SCHEME_SDNLW,
    SCHEME_SHE,
    IntegratorConfig,
    energy,
    run,
)
from .gibbs import GibbsConfig, GibbsSampler, estimate_saddle_ratio, sample_white_noise
from .renorm3d import RenormConstants3D, constants_csv, gamma_diff_table
from .spectral import MassKind, PhaseState, TorusSpec, integral, integral_product, wick_power
from .transmission import TransmissionConfig, estimate_transmission
from .tst import (
    count_crossings,
    hitting_time_she_1d,
    hitting_time_she_2d,
    rate_main,
    rate_nlw_1d,
    tst_identity_rate,
)
from .variational import (
    ConstantShift,
    FeedbackShift,
    RhoSchedule,
    ZeroDrift,
    bd_objective,
    log_partition_oracle,
    optimize_constant_drift,
    phi_wick_constant,
)

_TWO_PI = 2.0 * math.pi

EXPERIMENT_KINDS = (
    "prefactor",
    "sample-gibbs",
    "simulate",
    "tst-rate",
    "transmission",
    "variational",
    "renorm3d",
    "invariance-test",
)

_MASS_NAMES = {
    "negative-unit": MassKind.NEGATIVE_UNIT,
    "positive-plus-two": MassKind.POSITIVE_PLUS_TWO,
}

_SCHEME_NAMES = {"nlw": SCHEME_NLW, "sdnlw": SCHEME_SDNLW, "she": SCHEME_SHE}


class ConfigError(ValueError):
    """Invalid experiment config; carries the full list of violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("\n".join(self.violations))


class ExperimentError(RuntimeError):
    """An experiment failed after the config was accepted."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description (defaults already applied)."""

    kind: str
    spec: TorusSpec
    params: dict
    seed: int = 0
    out: str | None = None


@dataclass(frozen=True)
class ResultRecord:
    """Named scalars with standard errors, tied to a config hash."""

    config_hash: str
    version: str
    results: dict
    standard_errors: dict
    wall_time: float

    def __post_init__(self) -> None:
        for name, value in self.results.items():
            if not math.isfinite(float(value)):
                raise ValueError(f"result {name!r} is not finite")
        extra = set(self.standard_errors) - set(self.results)
        if extra:
            raise ValueError(f"standard errors without a result: {sorted(extra)}")


# ---------------------------------------------------------------------------
# Config parsing.  Every check appends to `errors` and the parse keeps going,
# so one failed run reports everything wrong with the file at once.


def _fail(errors, path, message):
    errors.append(f"{path}: {message}")
    return None


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


class _Block:
    """Tracks which keys of a JSON object were consumed."""

    def __init__(self, obj, path, errors):
        self.obj = obj
        self.path = path
        self.errors = errors
        self.seen = set()

    def take(self, key, default=None):
        self.seen.add(key)
        return self.obj.get(key, default), key in self.obj

    def require(self, key):
        self.seen.add(key)
        if key not in self.obj:
            _fail(self.errors, _join(self.path, key), "missing required field")
            return None, False
        return self.obj[key], True

    def reject_unknown(self):
        for key in sorted(set(self.obj) - self.seen):
            _fail(self.errors, _join(self.path, key), "unknown field")


def _number(value, path, errors, lo=None, hi=None, open_lo=False, open_hi=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return _fail(errors, path, f"expected a number, got {value!r}")
    x = float(value)
    if not math.isfinite(x):
        return _fail(errors, path, f"must be finite, got {value!r}")
    if lo is not None and (x <= lo if open_lo else x < lo):
        op = ">" if open_lo else ">="
        return _fail(errors, path, f"must be {op} {lo:g}, got {value!r}")
    if hi is not None and (x >= hi if open_hi else x > hi):
        op = "<" if open_hi else "<="
        return _fail(errors, path, f"must be {op} {hi:g}, got {value!r}")
    return x


def _integer(value, path, errors, lo=None, hi=None):
    if isinstance(value, bool) or not isinstance(value, int):
        return _fail(errors, path, f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        return _fail(errors, path, f"must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        return _fail(errors, path, f"must be <= {hi}, got {value}")
    return value


def _boolean(value, path, errors):
    if not isinstance(value, bool):
        return _fail(errors, path, f"expected true or false, got {value!r}")
    return value


def _choice(value, path, errors, choices):
    if not isinstance(value, str) or value not in choices:
        return _fail(errors, path, f"expected one of {sorted(choices)}, got {value!r}")
    return value


def _list_of(value, path, errors, item, min_len=1):
    if not isinstance(value, list):
        return _fail(errors, path, f"expected a list, got {value!r}")
    if len(value) < min_len:
        return _fail(errors, path, f"needs at least {min_len} entry(ies)")
    out = [item(v, f"{path}[{i}]", errors) for i, v in enumerate(value)]
    return None if any(v is None for v in out) else out


def _parse_torus(obj, errors):
    if not isinstance(obj, dict):
        return _fail(errors, "torus", f"expected an object with d, L, N, got {obj!r}")
    block = _Block(obj, "torus", errors)
    d_raw, _ = block.require("d")
    l_raw, _ = block.require("L")
    n_raw, _ = block.require("N")
    block.reject_unknown()
    d = _integer(d_raw, "torus.d", errors, lo=1, hi=3) if d_raw is not None else None
    length = _number(l_raw, "torus.L", errors) if l_raw is not None else None
    n = _integer(n_raw, "torus.N", errors, lo=0) if n_raw is not None else None
    if d is None or length is None or n is None:
        return None
    try:
        return TorusSpec(d=d, L=length, N=n)
    except ValueError as exc:
        return _fail(errors, "torus", str(exc))


def _parse_potential(obj, errors):
    if not isinstance(obj, dict):
        return _fail(errors, "potential", f"expected an object, got {obj!r}")
    block = _Block(obj, "potential", errors)
    kind_raw, _ = block.require("kind")
    kind = None
    if kind_raw is not None:
        kind = _choice(
            kind_raw,
            "potential.kind",
            errors,
            {"linear-zero-mode", "quadratic-zero-mode", "wick-quartic"},
        )
    out = {"kind": kind}
    if kind == "linear-zero-mode":
        raw, _ = block.require("c")
        out["c"] = _number(raw, "potential.c", errors) if raw is not None else None
    elif kind == "quadratic-zero-mode":
        raw, _ = block.require("c")
        out["c"] = _number(raw, "potential.c", errors, lo=0.0, open_lo=True) if raw is not None else None
        raw, present = block.take("center", 0.0)
        out["center"] = _number(raw, "potential.center", errors) if present else 0.0
    elif kind == "wick-quartic":
        raw, _ = block.require("lam")
        out["lam"] = _number(raw, "potential.lam", errors, lo=0.0, open_lo=True) if raw is not None else None
    block.reject_unknown()
    if any(v is None for v in out.values()):
        return None
    return out


def _parse_strategy(obj, path, errors):
    if not isinstance(obj, dict):
        return _fail(errors, path, f"expected an object, got {obj!r}")
    block = _Block(obj, path, errors)
    kind_raw, _ = block.require("kind")
    kind = None
    if kind_raw is not None:
        kind = _choice(kind_raw, f"{path}.kind", errors, {"zero", "constant", "feedback"})
    out = {"kind": kind}
    if kind == "constant":
        raw, _ = block.require("a")
        out["a"] = _number(raw, f"{path}.a", errors) if raw is not None else None
    elif kind == "feedback":
        raw, _ = block.require("target")
        out["target"] = _number(raw, f"{path}.target", errors) if raw is not None else None
        raw, present = block.take("gain", 1.0)
        out["gain"] = _number(raw, f"{path}.gain", errors, lo=0.0) if present else 1.0
    block.reject_unknown()
    if any(v is None for v in out.values()):
        return None
    return out


def _take_number(block, key, errors, default=None, required=False, **kw):
    if required:
        raw, present = block.require(key)
        if not present:
            return None
    else:
        raw, present = block.take(key, default)
        if not present:
            return default
    return _number(raw, _join(block.path, key), errors, **kw)


def _take_integer(block, key, errors, default=None, required=False, **kw):
    if required:
        raw, present = block.require(key)
        if not present:
            return None
    else:
        raw, present = block.take(key, default)
        if not present:
            return default
    return _integer(raw, _join(block.path, key), errors, **kw)


def _parse_params(kind, block, spec, errors):
    """Per-experiment parameter schema; returns the resolved params dict."""
    p = {}
    if kind == "prefactor":
        raw, _ = block.require("beta_values")
        p["beta_values"] = (
            _list_of(raw, "beta_values", errors, lambda v, pth, e: _number(v, pth, e, lo=0.0, open_lo=True))
            if raw is not None
            else None
        )
        raw, present = block.take("d_values")
        p["d_values"] = (
            _list_of(raw, "d_values", errors, lambda v, pth, e: _integer(v, pth, e, lo=1, hi=3))
            if present
            else ([spec.d] if spec is not None else None)
        )
        raw, present = block.take("L_values")
        p["L_values"] = (
            _list_of(raw, "L_values", errors, lambda v, pth, e: _number(v, pth, e, lo=0.0, hi=_TWO_PI, open_lo=True, open_hi=True))
            if present
            else ([spec.L] if spec is not None else None)
        )
        raw, present = block.take("N_values")
        p["N_values"] = (
            _list_of(raw, "N_values", errors, lambda v, pth, e: _integer(v, pth, e, lo=0))
            if present
            else ([spec.N] if spec is not None else None)
        )
    elif kind == "sample-gibbs":
        p["beta"] = _take_number(block, "beta", errors, required=True, lo=0.0, open_lo=True)
        p["n_samples"] = _take_integer(block, "n_samples", errors, required=True, lo=1)
        raw, present = block.take("mass", "negative-unit")
        p["mass"] = _choice(raw, "mass", errors, set(_MASS_NAMES)) if present else "negative-unit"
        raw, present = block.take("quartic", True)
        p["quartic"] = _boolean(raw, "quartic", errors) if present else True
        p["burn_in"] = _take_integer(block, "burn_in", errors, default=1500, lo=0)
        p["thin"] = _take_integer(block, "thin", errors, default=1, lo=1)
        p["proposal_scale"] = _take_number(block, "proposal_scale", errors, default=0.5, lo=0.0, open_lo=True)
    elif kind == "simulate":
        raw, _ = block.require("scheme")
        p["scheme"] = _choice(raw, "scheme", errors, set(_SCHEME_NAMES)) if raw is not None else None
        p["beta"] = _take_number(block, "beta", errors, required=True, lo=0.0, open_lo=True)
        p["dt"] = _take_number(block, "dt", errors, required=True, lo=0.0, hi=MAX_DT, open_lo=True)
        p["horizon"] = _take_number(block, "horizon", errors, required=True, lo=0.0, open_lo=True)
        p["gamma"] = _take_number(block, "gamma", errors, default=0.0, lo=0.0)
        p["burn_in"] = _take_integer(block, "burn_in", errors, default=1500, lo=0)
        p["record_stride"] = _take_integer(block, "record_stride", errors, default=100, lo=1)
        p["record_energy_every"] = _take_integer(block, "record_energy_every", errors, default=0, lo=0)
        if p["scheme"] == "sdnlw" and p["gamma"] is not None and p["gamma"] <= 0:
            _fail(errors, "gamma", "sdnlw needs gamma > 0")
        if p["scheme"] in ("nlw", "she") and p["gamma"]:
            _fail(errors, "gamma", f"{p['scheme']} does not take a damping rate")
    elif kind == "tst-rate":
        p["beta"] = _take_number(block, "beta", errors, required=True, lo=0.0, open_lo=True)
        p["dt"] = _take_number(block, "dt", errors, default=0.005, lo=0.0, hi=MAX_DT, open_lo=True)
        p["horizon"] = _take_number(block, "horizon", errors, default=5.0e4, lo=0.0, open_lo=True)
        p["n_members"] = _take_integer(block, "n_members", errors, default=200, lo=20)
        p["burn_in"] = _take_integer(block, "burn_in", errors, default=2000, lo=0)
        p["decorrelate"] = _take_integer(block, "decorrelate", errors, default=150, lo=1)
        p["n_per_window"] = _take_integer(block, "n_per_window", errors, default=4000, lo=100)
        p["n_boot"] = _take_integer(block, "n_boot", errors, default=32, lo=2)
        if spec is not None and spec.d != 1:
            _fail(errors, "torus.d", "the tst-rate workflow is defined for d = 1")
    elif kind == "transmission":
        raw, _ = block.require("betas")
        p["betas"] = (
            _list_of(raw, "betas", errors, lambda v, pth, e: _number(v, pth, e, lo=0.0, open_lo=True))
            if raw is not None
            else None
        )
        p["delta"] = _take_number(block, "delta", errors, default=0.2, lo=0.0, hi=0.5, open_lo=True, open_hi=True)
        p["n_shots"] = _take_integer(block, "n_shots", errors, default=500, lo=1)
        p["dt"] = _take_number(block, "dt", errors, default=0.005, lo=0.0, hi=MAX_DT, open_lo=True)
        raw, present = block.take("t_max")
        p["t_max"] = (
            _number(raw, "t_max", errors, lo=0.0, open_lo=True) if present and raw is not None else None
        )
        p["epsilon"] = _take_number(block, "epsilon", errors, default=0.1, lo=0.0, open_lo=True)
        if spec is not None and spec.d not in (1, 2):
            _fail(errors, "torus.d", "shooting estimates are for d = 1 and d = 2")
    elif kind == "variational":
        raw, _ = block.require("potential")
        p["potential"] = _parse_potential(raw, errors) if raw is not None else None
        raw, _ = block.require("strategies")
        if raw is None:
            p["strategies"] = None
        elif not isinstance(raw, list) or not raw:
            p["strategies"] = _fail(errors, "strategies", "expected a nonempty list")
        else:
            items = [_parse_strategy(v, f"strategies[{i}]", errors) for i, v in enumerate(raw)]
            p["strategies"] = None if any(v is None for v in items) else items
        raw, present = block.take("mass", "positive-plus-two")
        mass = _choice(raw, "mass", errors, set(_MASS_NAMES)) if present else "positive-plus-two"
        if mass == "negative-unit":
            mass = _fail(errors, "mass", "the variational driver needs a positive mass bracket")
        p["mass"] = mass
        p["n_paths"] = _take_integer(block, "n_paths", errors, default=4000, lo=16)
        p["oracle_samples"] = _take_integer(block, "oracle_samples", errors, default=20000, lo=16)
        p["points_per_octave"] = _take_integer(block, "points_per_octave", errors, default=64, lo=16)
        raw, present = block.take("optimize", False)
        p["optimize"] = _boolean(raw, "optimize", errors) if present else False
    elif kind == "renorm3d":
        raw, _ = block.require("n_values")
        p["n_values"] = (
            _list_of(raw, "n_values", errors, lambda v, pth, e: _integer(v, pth, e, lo=0, hi=12))
            if raw is not None
            else None
        )
        p["beta"] = _take_number(block, "beta", errors, required=True, lo=0.0, open_lo=True)
        p["points_per_octave"] = _take_integer(block, "points_per_octave", errors, default=64, lo=16)
        if spec is not None and spec.d != 3:
            _fail(errors, "torus.d", "renormalization constants are a d = 3 computation")
    elif kind == "invariance-test":
        p["beta"] = _take_number(block, "beta", errors, required=True, lo=0.0, open_lo=True)
        p["horizon"] = _take_number(block, "horizon", errors, default=10.0, lo=0.0, open_lo=True)
        p["n_samples"] = _take_integer(block, "n_samples", errors, default=200, lo=8)
        p["dt"] = _take_number(block, "dt", errors, default=0.005, lo=0.0, hi=MAX_DT, open_lo=True)
        p["burn_in"] = _take_integer(block, "burn_in", errors, default=1500, lo=0)
        p["decorrelate"] = _take_integer(block, "decorrelate", errors, default=25, lo=1)
        if spec is not None and spec.d not in (1, 2):
            _fail(errors, "torus.d", "the pushforward check runs the wave flow in d = 1 or 2")
    else:  # pragma: no cover - guarded by the kind check in parse_config
        raise AssertionError(kind)
    return p


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON experiment config.

    Raises ConfigError listing every violation, each tagged with the JSON
    path of the offending field.  Unknown keys are rejected.
    """
    errors: list[str] = []
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: not valid JSON ({exc})"]) from exc
    if not isinstance(obj, dict):
        raise ConfigError([f"config: expected a JSON object, got {type(obj).__name__}"])

    block = _Block(obj, "", errors)
    kind_raw, _ = block.require("experiment")
    kind = _choice(kind_raw, "experiment", errors, set(EXPERIMENT_KINDS)) if kind_raw is not None else None

    torus_raw, _ = block.require("torus")
    spec = _parse_torus(torus_raw, errors) if torus_raw is not None else None

    raw, present = block.take("seed", 0)
    seed = _integer(raw, "seed", errors, lo=0, hi=2**64 - 1) if present else 0

    raw, present = block.take("out")
    out = None
    if present:
        if isinstance(raw, str) and raw:
            out = raw
        else:
            _fail(errors, "out", f"expected a nonempty string, got {raw!r}")

    params = _parse_params(kind, block, spec, errors) if kind is not None else {}
    block.reject_unknown()

    if errors:
        raise ConfigError(errors)
    clean = {k: v for k, v in params.items() if v is not None or k == "t_max"}
    return ExperimentConfig(kind=kind, spec=spec, params=clean, seed=seed, out=out)


def emit_config(config: ExperimentConfig) -> str:
    """Canonical JSON echo of a config; parse(emit(parse(x))) == parse(x)."""
    obj = {
        "experiment": config.kind,
        "torus": {"d": config.spec.d, "L": config.spec.L, "N": config.spec.N},
        "seed": config.seed,
    }
    if config.out is not None:
        obj["out"] = config.out
    for key, value in config.params.items():
        if value is None:
            continue
        obj[key] = value
    return canonical_json(obj)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical config echo."""
    return hashlib.sha256(emit_config(config).encode("utf-8")).hexdigest()


def hash_of_echo(echo_obj) -> str:
    """Recompute the config hash from the echo embedded in a summary."""
    return hashlib.sha256(canonical_json(echo_obj).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Emission helpers


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def csv_table(header, rows) -> str:
    """CSV with floats at 17 significant digits (re-parses to the same bits).

    No rows gives a header-only table, not an empty string.
    """
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row width {len(row)} != header width {len(header)}")
        lines.append(",".join(_format_cell(v) for v in row))
    return "\n".join(lines) + "\n"


SUMMARY_SCHEMA = {
    "experiment": "string",
    "config": "object",
    "config_hash": "string (sha256 hex of the canonical config echo)",
    "version": "string",
    "results": "object: name -> finite number",
    "standard_errors": "object: subset of results' names -> finite number",
}


def summary_schema_violations(obj) -> list[str]:
    """Check a parsed summary against SUMMARY_SCHEMA; empty list means valid."""
    problems = []
    if not isinstance(obj, dict):
        return [f"summary: expected an object, got {type(obj).__name__}"]
    for key in SUMMARY_SCHEMA:
        if key not in obj:
            problems.append(f"summary.{key}: missing")
    for key in sorted(set(obj) - set(SUMMARY_SCHEMA)):
        problems.append(f"summary.{key}: unknown field")
    for key in ("experiment", "config_hash", "version"):
        if key in obj and not isinstance(obj[key], str):
            problems.append(f"summary.{key}: expected a string")
    if "config" in obj and not isinstance(obj["config"], dict):
        problems.append("summary.config: expected an object")
    for key in ("results", "standard_errors"):
        table = obj.get(key)
        if table is None:
            continue
        if not isinstance(table, dict):
            problems.append(f"summary.{key}: expected an object")
            continue
        for name, value in table.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                problems.append(f"summary.{key}.{name}: expected a finite number")
    if isinstance(obj.get("results"), dict) and isinstance(obj.get("standard_errors"), dict):
        for name in sorted(set(obj["standard_errors"]) - set(obj["results"])):
            problems.append(f"summary.standard_errors.{name}: no matching result")
    return problems


def summary_json(record: ResultRecord, config: ExperimentConfig) -> str:
    obj = {
        "experiment": config.kind,
        "config": json.loads(emit_config(config)),
        "config_hash": record.config_hash,
        "version": record.version,
        "results": {k: float(v) for k, v in sorted(record.results.items())},
        "standard_errors": {k: float(v) for k, v in sorted(record.standard_errors.items())},
    }
    return canonical_json(obj)


_TRAJ_MAGIC = b"KWTRAJ01"


def trajectory_bytes(values, header: dict) -> bytes:
    """Binary zero-mode series: magic, u32 header length, header JSON, then
    little-endian float64 samples."""
    payload = np.ascontiguousarray(values, dtype="<f8")
    if payload.ndim != 1:
        raise ValueError("trajectory payload must be one-dimensional")
    head = dict(header)
    head["byte_order"] = "little"
    head["dtype"] = "float64"
    head["n_samples"] = int(payload.shape[0])
    head_bytes = json.dumps(head, sort_keys=True, allow_nan=False).encode("utf-8")
    return _TRAJ_MAGIC + struct.pack("<I", len(head_bytes)) + head_bytes + payload.tobytes()


def read_trajectory(data: bytes) -> tuple[dict, np.ndarray]:
    if data[: len(_TRAJ_MAGIC)] != _TRAJ_MAGIC:
        raise ValueError("not a trajectory file (bad magic)")
    offset = len(_TRAJ_MAGIC)
    (head_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    header = json.loads(data[offset : offset + head_len].decode("utf-8"))
    offset += head_len
    values = np.frombuffer(data, dtype="<f8", offset=offset).copy()
    if len(values) != header["n_samples"]:
        raise ValueError(f"payload holds {len(values)} samples, header says {header['n_samples']}")
    return header, values


def write_artifacts(artifacts: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(artifacts):
        path = out / name
        data = artifacts[name]
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data, encoding="utf-8")
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Experiment runners.  Each returns (results, standard_errors, artifacts).


def replica_rng(seed: int, replica: int) -> np.random.Generator:
    """Stream for one replica, independent of how many replicas exist."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replica,)))


_RATE_HEADER = ["method", "d", "L", "N", "beta", "prefactor", "exponent", "rate"]


def _predict(kind_d: int, beta: float, spec: TorusSpec, heat: bool):
    if heat:
        return hitting_time_she_1d(beta, spec) if kind_d == 1 else hitting_time_she_2d(beta, spec)
    return rate_nlw_1d(beta, spec) if kind_d == 1 else rate_main(beta, spec)


def _run_prefactor(cfg: ExperimentConfig, threads: int):
    p = cfg.params
    rows = []
    for d in p["d_values"]:
        for length in p["L_values"]:
            for n in p["N_values"]:
                spec = TorusSpec(d=d, L=length, N=n)
                for beta in p["beta_values"]:
                    pred = _predict(d, beta, spec, heat=False)
                    rows.append(
                        (pred.provenance, d, length, n, beta, pred.prefactor, pred.exponent, pred.rate)
                    )
                    if d <= 2:
                        hit = _predict(d, beta, spec, heat=True)
                        rows.append(
                            (hit.provenance, d, length, n, beta, hit.prefactor, hit.exponent, hit.rate)
                        )
    results = {"n_rows": float(len(rows))}
    return results, {}, {"prefactor.csv": csv_table(_RATE_HEADER, rows)}


def _run_sample_gibbs(cfg: ExperimentConfig, threads: int):
    p = cfg.params
    gc = GibbsConfig(
        cfg.spec,
        p["beta"],
        mass_kind=_MASS_NAMES[p["mass"]],
        quartic=p["quartic"],
        proposal_scale=p["proposal_scale"],
    )
    sampler = GibbsSampler(gc, replica_rng(cfg.seed, 0))
    sampler.burn_in(p["burn_in"])
    series = sampler.run(p["n_samples"], thin=p["thin"])
    diag = sampler.diagnostics(series)
    n_eff = max(diag.ess, 1.0)
    results = {
        "mean_q": float(np.mean(series)),
        "var_q": float(np.var(series)),
        "acceptance": float(diag.acceptance),
        "iact": float(diag.iact),
        "ess": float(diag.ess),
    }
    ses = {"mean_q": float(np.std(series) / math.sqrt(n_eff))}
    rows = list(enumerate(series.tolist()))
    return results, ses, {"samples.csv": csv_table(["index", "q"], rows)}


def _gibbs_initial(cfg: ExperimentConfig, beta: float, burn_in: int, replica: int):
    gc = GibbsConfig(cfg.spec, beta)
    sampler = GibbsSampler(gc, replica_rng(cfg.seed, replica))
    sampler.burn_in(burn_in)
    return sampler.state()


def _run_simulate(cfg: ExperimentConfig, threads: int):
    p = cfg.params
    scheme = _SCHEME_NAMES[p["scheme"]]
    ic = IntegratorConfig(dt=p["dt"], scheme=scheme, beta=p["beta"], gamma=p["gamma"])
    u = _gibbs_initial(cfg, p["beta"], p["burn_in"], 0)
    if scheme == SCHEME_SHE:
        initial = u
    else:
        initial = PhaseState(u, sample_white_noise(cfg.spec, p["beta"], replica_rng(cfg.seed, 1)))
    rng = None if scheme == SCHEME_NLW else replica_rng(cfg.seed, 2)
    traj = run(initial, ic, p["horizon"], rng=rng, record_energy_every=p["record_energy_every"])
    record = count_crossings(traj.times, traj.zero_mode)
    results = {
        "n_steps": float(len(traj.times) - 1),
        "n_crossings": float(len(record.times)),
        "mean_q": float(np.mean(traj.zero_mode)),
        "final_q": float(traj.zero_mode[-1]),
    }
    ses = {}
    if traj.energy is not None and len(traj.energy) > 1:
        slope = np.polyfit(traj.energy_times, traj.energy, 1)[0]
        scale = max(float(np.mean(np.abs(traj.energy))), 1e-300)
        results["energy_drift"] = float(abs(slope) * p["horizon"] / scale)
    stride = p["record_stride"]
    sampled = traj.zero_mode[::stride]
    t_sampled = traj.times[::stride]
    header = {
        "config_hash": config_hash(cfg),
        "version": __version__,
        "scheme": scheme,
        "dt": p["dt"] * stride,
        "t0": float(t_sampled[0]),
        "quantity": "u_hat(0)",
    }
    artifacts = {
        "trajectory.bin": trajectory_bytes(sampled, header),
        "trajectory.csv": csv_table(["t", "q"], list(zip(t_sampled.tolist(), sampled.tolist()))),
    }
    return results, ses, artifacts


def _run_tst_rate(cfg: ExperimentConfig, threads: int):
    # The wave flow conserves energy, so one trajectory explores only its
    # own energy shell.  The rate identity's frequency is an expectation
    # over Gibbs x white-noise data: average crossings over an ensemble of
    # fresh stationary starts whose total span is `horizon`.
    p = cfg.params
    beta = p["beta"]
    gc = GibbsConfig(cfg.spec, beta)
    sampler = GibbsSampler(gc, replica_rng(cfg.seed, 0))
    sampler.burn_in(p["burn_in"])
    ic = IntegratorConfig(dt=p["dt"], scheme=SCHEME_NLW, beta=beta)
    n_members = p["n_members"]
    steps = max(1, int(round(p["horizon"] / n_members / p["dt"])))
    t_member = steps * p["dt"]
    member_rates = np.empty(n_members)
    for i in range(n_members):
        sampler.run(p["decorrelate"])
        state = PhaseState(sampler.state(), sample_white_noise(cfg.spec, beta, replica_rng(cfg.seed, 1 + i)))
        traj = run(state, ic, t_member)
        member_rates[i] = len(count_crossings(traj.times, traj.zero_mode).times) / t_member
    emp_rate = float(np.mean(member_rates))
    emp_se = float(np.std(member_rates, ddof=1) / math.sqrt(n_members))
    n_total = float(np.sum(member_rates) * t_member)

    ratio = estimate_saddle_ratio(
        gc,
        None,
        replica_rng(cfg.seed, n_members + 1),
        n_per_window=p["n_per_window"],
        n_boot=p["n_boot"],
    )
    pred = tst_identity_rate(ratio.value, beta, cfg.spec)
    pred_se = pred.rate * (ratio.se / ratio.value) if ratio.value > 0 else float("nan")
    combined = math.hypot(emp_se, pred_se)
    z = (emp_rate - pred.rate) / combined if combined > 0 else float("inf")
    rel_gap = abs(emp_rate - pred.rate) / pred.rate if pred.rate > 0 else float("inf")

    spec = cfg.spec
    rows = [
        (pred.provenance, spec.d, spec.L, spec.N, beta, pred.prefactor, pred.exponent, pred.rate),
        ("empirical", spec.d, spec.L, spec.N, beta, emp_rate, 0.0, emp_rate),
    ]
    results = {
        "rate_empirical": emp_rate,
        "rate_predicted": pred.rate,
        "saddle_ratio": ratio.value,
        "n_crossings": n_total,
        "z_value": z,
        "rel_gap": rel_gap,
    }
    ses = {"rate_empirical": emp_se, "rate_predicted": pred_se, "saddle_ratio": ratio.se}
    return results, ses, {"rates.csv": csv_table(_RATE_HEADER, rows)}


_SHOT_HEADER = ["beta", "shot", "outcome", "tau_plus", "sigma_plus", "theta_plus", "q"]


def _run_transmission(cfg: ExperimentConfig, threads: int):
    p = cfg.params
    rows = []
    results = {}
    ses = {}
    curve = []
    for i, beta in enumerate(p["betas"]):
        tc = TransmissionConfig(
            spec=cfg.spec,
            beta=beta,
            delta=p["delta"],
            dt=p["dt"],
            t_max=p["t_max"],
            n_shots=p["n_shots"],
            epsilon=p["epsilon"],
        )
        est = estimate_transmission(tc, replica_rng(cfg.seed, i))
        for j, rec in enumerate(est.records):
            rows.append((beta, j, rec.outcome, rec.tau_plus, rec.sigma_plus, rec.theta_plus, rec.q))
        key = f"p_hat[beta={beta:g}]"
        n_used = est.n_transmitted + est.n_recrossed
        results[key] = est.p_hat
        ses[key] = math.sqrt(est.p_hat * (1.0 - est.p_hat) / n_used) if n_used else float("nan")
        curve.append(
            {
                "beta": beta,
                "p_hat": est.p_hat,
                "wilson": list(est.wilson),
                "correction": list(est.correction),
                "n_shots": est.n_shots,
                "n_transmitted": est.n_transmitted,
                "n_recrossed": est.n_recrossed,
                "n_timed_out": est.n_timed_out,
            }
        )
    artifacts = {
        "shots.csv": csv_table(_SHOT_HEADER, rows),
        "transmission.json": canonical_json({"config_hash": config_hash(cfg), "curve": curve}),
    }
    return results, ses, artifacts


def _strategy_instance(desc: dict):
    if desc["kind"] == "zero":
        return ZeroDrift(), "zero"
    if desc["kind"] == "constant":
        return ConstantShift(desc["a"]), f"constant(a={desc['a']:g})"
    return (
        FeedbackShift(target=desc["target"], gain=desc["gain"]),
        f"feedback(target={desc['target']:g},gain={desc['gain']:g})",
    )


def _build_potential(desc: dict, wick_c: float):
    kind = desc["kind"]
    if kind == "linear-zero-mode":
        c = desc["c"]
        return lambda f: c * f.zero_mode
    if kind == "quadratic-zero-mode":
        c, center = desc["c"], desc["center"]
        return lambda f: c * (f.zero_mode - center) ** 2
    lam = desc["lam"]
    return lambda f: lam * integral(wick_power(f, 4, wick_c))


def _run_variational(cfg: ExperimentConfig, threads: int):
    p = cfg.params
    mass = _MASS_NAMES[p["mass"]]
    schedule = RhoSchedule(cfg.spec.N, points_per_octave=p["points_per_octave"])
    wick_c = phi_wick_constant(cfg.spec, schedule, mass)
    potential = _build_potential(p["potential"], wick_c)

    rows = []
    results = {}
    ses = {}
    for i, desc in enumerate(p["strategies"]):
        strategy, label = _strategy_instance(desc)
        mean, se = bd_objective(potential, strategy, cfg.spec, schedule, mass, p["n_paths"], replica_rng(cfg.seed, i))
        key = f"objective[{i}:{desc['kind']}]"
        results[key] = mean
        ses[key] = se
        rows.append((label, mean, se))
    oracle, oracle_se = log_partition_oracle(
        potential, cfg.spec, schedule, mass, p["oracle_samples"], replica_rng(cfg.seed, 1000)
    )
    results["oracle"] = oracle
    ses["oracle"] = oracle_se
    rows.append(("oracle", oracle, oracle_se))
    if p["optimize"]:
        opt = optimize_constant_drift(
            potential, cfg.spec, schedule, mass, replica_rng(cfg.seed, 2000), n_paths=p["n_paths"]
        )
        results["optimized_a"] = opt.a
        results["optimized_objective"] = opt.value
        ses["optimized_objective"] = opt.se
        rows.append((f"optimized(a={opt.a:.6g})", opt.value, opt.se))
    artifacts = {"objectives.csv": csv_table(["strategy", "objective", "se"], rows)}
    return results, ses, artifacts


def _run_renorm3d(cfg: ExperimentConfig, threads: int):
    p = cfg.params
    records = []
    results = {}
    for n in p["n_values"]:
        spec = TorusSpec(d=3, L=cfg.spec.L, N=n)
        rec = RenormConstants3D.compute(
            spec, p["beta"], points_per_octave=p["points_per_octave"], threads=threads
        )
        records.append(rec)
        results[f"gamma_plus[N={n}]"] = rec.gamma_plus
        results[f"gamma_minus[N={n}]"] = rec.gamma_minus
        results[f"gamma_diff[N={n}]"] = rec.gamma_plus - rec.gamma_minus
        if rec.delta_leading_plus is not None:
            results[f"delta_leading_plus[N={n}]"] = rec.delta_leading_plus
            results[f"delta_leading_minus[N={n}]"] = rec.delta_leading_minus
    table = gamma_diff_table(
        p["n_values"], L=cfg.spec.L, points_per_octave=p["points_per_octave"], threads=threads
    )
    summary = {
        "config_hash": config_hash(cfg),
        "n_values": list(table.n_values),
        "gamma_diffs": list(table.diffs),
        "diff_increments": list(table.increments),
    }
    artifacts = {
        "constants.csv": constants_csv(records),
        "gamma_diffs.json": canonical_json(summary),
    }
    return results, {}, artifacts


_OBSERVABLES = ("q", "q_sq", "perp_sq", "v0_sq")


def _observe(state: PhaseState) -> tuple[float, float, float, float]:
    q = state.u.zero_mode
    perp = integral_product(state.u, state.u) - state.u.spec.volume * q * q
    return (q, q * q, perp, state.v.zero_mode ** 2)


def _run_invariance(cfg: ExperimentConfig, threads: int):
    p = cfg.params
    beta = p["beta"]
    gc = GibbsConfig(cfg.spec, beta)
    sampler = GibbsSampler(gc, replica_rng(cfg.seed, 0))
    sampler.burn_in(p["burn_in"])
    ic = IntegratorConfig(dt=p["dt"], scheme=SCHEME_NLW, beta=beta)
    n_steps = int(round(p["horizon"] / p["dt"]))
    horizon = n_steps * p["dt"]

    n = p["n_samples"]
    diffs = np.empty((len(_OBSERVABLES), n))
    for i in range(n):
        sampler.run(p["decorrelate"])
        state = PhaseState(sampler.state(), sample_white_noise(cfg.spec, beta, replica_rng(cfg.seed, 1 + i)))
        before = _observe(state)
        traj = run(state, ic, horizon, snapshot_every=n_steps)
        after = _observe(traj.snapshots[-1][1])
        diffs[:, i] = np.subtract(after, before)

    results = {}
    ses = {}
    rows = []
    # Paired differences: under pushforward invariance each observable's
    # mean change is zero.  Four tests at family level 0.01 -> 0.0025 each.
    z_crit = 3.0233  # two-sided normal quantile at 0.0025
    worst = 0.0
    for name, row in zip(_OBSERVABLES, diffs):
        se = float(np.std(row, ddof=1) / math.sqrt(n))
        mean = float(np.mean(row))
        z = mean / se if se > 0 else 0.0
        worst = max(worst, abs(z))
        results[f"z[{name}]"] = z
        results[f"mean_diff[{name}]"] = mean
        ses[f"mean_diff[{name}]"] = se
        rows.append((name, mean, se, z))
    results["max_abs_z"] = worst
    results["z_critical"] = z_crit
    results["invariant"] = 1.0 if worst < z_crit else 0.0
    artifacts = {"pushforward.csv": csv_table(["observable", "mean_diff", "se", "z"], rows)}
    return results, ses, artifacts


_RUNNERS = {
    "prefactor": _run_prefactor,
    "sample-gibbs": _run_sample_gibbs,
    "simulate": _run_simulate,
    "tst-rate": _run_tst_rate,
    "transmission": _run_transmission,
    "variational": _run_variational,
    "renorm3d": _run_renorm3d,
    "invariance-test": _run_invariance,
}


def run_experiment(config: ExperimentConfig, threads: int = 1) -> tuple[ResultRecord, dict]:
    """Run one experiment; returns the record and its artifact payloads.

    The worker pool (renorm3d only) is owned here; runners never nest their
    own.  Module errors surface as ExperimentError tagged with the kind.
    """
    if threads < 1:
        raise ValueError("threads must be >= 1")
    runner = _RUNNERS[config.kind]
    start = time.perf_counter()
    try:
        results, ses, artifacts = runner(config, threads)
    except (ValueError, RuntimeError, TypeError, KeyError) as exc:
        raise ExperimentError(f"{config.kind}: {exc}") from exc
    wall = time.perf_counter() - start
    record = ResultRecord(
        config_hash=config_hash(config),
        version=__version__,
        results=results,
        standard_errors=ses,
        wall_time=wall,
    )
    artifacts = dict(artifacts)
    artifacts["summary.json"] = summary_json(record, config)
    return record, artifacts


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kramers-wave",
        description="Metastable transition experiments for truncated wave and heat flows.",
    )
    parser.add_argument("experiment", choices=EXPERIMENT_KINDS, help="must match the config's experiment field")
    parser.add_argument("--config", required=True, help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    parser.add_argument("--out", default=None, help="output directory (default: config, $KRAMERS_WAVE_OUT, '.')")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default: $KRAMERS_WAVE_THREADS, 1)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return 2
    try:
        config = parse_config(text)
    except ConfigError as exc:
        for violation in exc.violations:
            print(violation, file=sys.stderr)
        return 2
    if config.kind != args.experiment:
        print(
            f"experiment: config says {config.kind!r} but the command line asked for {args.experiment!r}",
            file=sys.stderr,
        )
        return 2
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            print(f"seed: must fit in an unsigned 64-bit integer, got {args.seed}", file=sys.stderr)
            return 2
        config = replace(config, seed=args.seed)

    out_dir = args.out or config.out or os.environ.get("KRAMERS_WAVE_OUT") or "."
    if args.threads is not None:
        threads = args.threads
    else:
        try:
            threads = int(os.environ.get("KRAMERS_WAVE_THREADS", "1"))
        except ValueError:
            threads = 1
    if threads < 1:
        print(f"threads: must be >= 1, got {threads}", file=sys.stderr)
        return 2

    try:
        record, artifacts = run_experiment(config, threads=threads)
    except ExperimentError as exc:
        print(str(exc), file=sys.stderr)
        return 3

    paths = write_artifacts(artifacts, out_dir)
    print(f"{config.kind}: done in {record.wall_time:.2f}s (seed {config.seed})")
    for name in sorted(record.results):
        value = record.results[name]
        line = f"  {name} = {value:.10g}"
        if name in record.standard_errors:
            line += f" (se {record.standard_errors[name]:.4g})"
        print(line)
    for path in paths:
        print(f"  wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
