"""
Deterministic synthetic turbocharged diesel engine.

The surrogate stands in for the test-bench engine: it produces the signals
the identification works on (pump position T, speed R, boost pressure P,
airflow mdot, fuel flow mdot_f, opacity Op) and can be driven in closed
loop. Per sample ``k`` (defaults, Ts = 0.1 s)::

    mdot(k)   = 0.0009 P(k) R(k) / 60
    mdot_f(k) = min(0.0025 T(k) (0.5 + R(k)/2000) * governor(R(k)), 1.3 phi_s mdot(k))
    P(k+1)    = P(k) + Ts/0.8 (100 + 0.04 R(k) - P(k))
    phi(k)    = mdot_f(k) / mdot(k),   phi_s = 1/14.6
    eta_c(k)  = 1 / (1 + exp(20 (phi(k) - 1.5 phi_s)))
    R(k+1)    = max(R(k) + Ts/0.04 (2240 mdot_f eta_c - 0.12 R - 2e-5 R^2), r_idle)
    s(k)      = 100 / (1 + exp(-60 (phi(k) - 1.1 phi_s)))
    Op(k+1)   = Op(k) + Ts/0.2 (s(k-3) - Op(k))

The ``min`` is the boost-compensated full-load stop: fuel never exceeds
1.3 times the stoichiometric amount for the air actually delivered, so a
wider pump opening always adds torque and an upward step accelerates the
engine while the mixture runs rich. The smoke peak comes from that lag
between fuel and boost.

Gaussian measurement noise is added to the emitted records only.

Logs are exchanged as CSV with header ``k,t,T,R,P,mdot,mdot_f,Op``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from opacon import exceptions

logger = logging.getLogger(__name__)

CHANNELS = ("T", "R", "P", "mdot", "mdot_f", "Op")
CSV_COLUMNS = ("k", "t") + CHANNELS

AMBIENT_PRESSURE = 100.0
R_ENVELOPE = (0.0, 6000.0)
P_ENVELOPE = (95.0, 300.0)
OP_ENVELOPE = (-1.0, 101.0)


@dataclass(frozen=True)
class PlantParams:
    """
    Coefficients of the surrogate difference equations.

    The noise standard deviations apply to the emitted measurements of
    R (rpm), P (kPa), Op (%) and mdot (g/s).
    """

    ts: float = 0.1
    fuel_gain: float = 0.0025
    fuel_speed_ref: float = 2000.0
    boost_tau: float = 0.8
    boost_gain: float = 0.04
    airflow_gain: float = 0.0009
    afr_stoich: float = 14.6
    eff_slope: float = 20.0
    eff_rich: float = 1.5
    fuel_limit: float = 1.3
    torque_gain: float = 2240.0
    inertia: float = 0.04
    friction_lin: float = 0.12
    friction_quad: float = 2.0e-5
    smoke_slope: float = 60.0
    smoke_rich: float = 1.1
    smoke_tau: float = 0.2
    smoke_delay: int = 3
    r_idle: float = 600.0
    r_max: float = 4500.0
    r_gov_width: float = 400.0
    sigma_r: float = 5.0
    sigma_p: float = 0.5
    sigma_op: float = 0.5
    sigma_mdot: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("ts", "boost_tau", "smoke_tau", "r_gov_width", "inertia", "fuel_limit"):
            if not getattr(self, name) > 0:
                raise exceptions.ConfigError(f"Plant parameter {name} must be positive")
        for name in (
            "fuel_gain",
            "boost_gain",
            "airflow_gain",
            "afr_stoich",
            "eff_slope",
            "torque_gain",
            "smoke_slope",
        ):
            if not getattr(self, name) > 0:
                raise exceptions.ConfigError(f"Plant gain {name} must be positive")
        for name in ("sigma_r", "sigma_p", "sigma_op", "sigma_mdot"):
            if getattr(self, name) < 0:
                raise exceptions.ConfigError(f"Noise level {name} cannot be negative")
        if self.smoke_delay < 0:
            raise exceptions.ConfigError("smoke_delay cannot be negative")

    @property
    def phi_stoich(self) -> float:
        return 1.0 / self.afr_stoich

    @property
    def noise_sigmas(self) -> np.ndarray:
        return np.array([self.sigma_r, self.sigma_p, self.sigma_op, self.sigma_mdot])

    def noiseless(self) -> "PlantParams":
        return replace(self, sigma_r=0.0, sigma_p=0.0, sigma_op=0.0, sigma_mdot=0.0)


@dataclass(frozen=True)
class PlantState:
    """Noise-free plant state; ``smoke`` holds s(k-delay) ... s(k-1)."""

    R: float
    P: float
    Op: float
    smoke: Tuple[float, ...] = ()

    @classmethod
    def initial(cls, params, R=1000.0, P=None, Op=0.0):
        if P is None:
            P = AMBIENT_PRESSURE + params.boost_gain * R
        return cls(float(R), float(P), float(Op), (float(Op),) * params.smoke_delay)


@dataclass(frozen=True)
class SignalRecord:
    k: int
    t: float
    T: float
    R: float
    P: float
    mdot: float
    mdot_f: float
    Op: float


@dataclass
class SignalLog:
    """
    Uniformly sampled engine signals.

    Attributes:
        ts (float): Sample period in seconds.
        frame (DataFrame): One row per sample, columns ``k,t,T,R,P,mdot,mdot_f,Op``.
    """

    ts: float
    frame: pd.DataFrame = field(repr=False)

    def __post_init__(self):
        if not self.ts > 0:
            raise exceptions.LogFormatError("Sample period must be positive")
        missing = [c for c in CSV_COLUMNS if c not in self.frame.columns]
        if missing:
            raise exceptions.LogFormatError(f"Log is missing columns {missing}")
        if len(self.frame) == 0:
            raise exceptions.LogFormatError("Log must contain at least one record")
        k = self.frame["k"].to_numpy()
        if np.any(np.diff(k) <= 0):
            raise exceptions.LogFormatError("Sample indices must be strictly increasing")
        self.frame = self.frame.loc[:, list(CSV_COLUMNS)].reset_index(drop=True)

    @classmethod
    def from_records(cls, ts, records):
        frame = pd.DataFrame([asdict(r) for r in records], columns=list(CSV_COLUMNS))
        return cls(ts, frame)

    def __len__(self):
        return len(self.frame)

    def __getitem__(self, index) -> SignalRecord:
        row = self.frame.iloc[index]
        return SignalRecord(int(row["k"]), *(float(row[c]) for c in CSV_COLUMNS[1:]))

    def records(self) -> Iterator[SignalRecord]:
        for i in range(len(self)):
            yield self[i]

    def channel(self, name) -> np.ndarray:
        """Column ``name`` as floats; ``k`` and ``t`` are accepted besides the signals."""
        if name not in CSV_COLUMNS:
            raise exceptions.InputShapeError(f"Unknown channel {name!r}")
        return self.frame[name].to_numpy(dtype=float)

    def channels(self) -> dict:
        return {name: self.channel(name) for name in CHANNELS}

    def slice(self, start, stop=None) -> "SignalLog":
        return SignalLog(self.ts, self.frame.iloc[start:stop].copy())

    def split(self, fraction=0.7) -> Tuple["SignalLog", "SignalLog"]:
        """Split in time order into a training and a validation log."""
        cut = int(round(len(self) * fraction))
        if cut < 1 or cut >= len(self):
            raise exceptions.IllPosedError(
                f"Cannot split a log of {len(self)} samples at fraction {fraction}"
            )
        return self.slice(0, cut), self.slice(cut)


def fuel_flow(params, R, T):
    governor = expit((params.r_max - R) / params.r_gov_width)
    return params.fuel_gain * T * (0.5 + R / params.fuel_speed_ref) * governor


def airflow(params, R, P):
    return params.airflow_gain * P * R / 60.0


def smoke(params, phi):
    return 100.0 * expit(params.smoke_slope * (phi - params.smoke_rich * params.phi_stoich))


def _signals(params, state, T):
    mdot = airflow(params, state.R, state.P)
    air = max(mdot, 1e-6)
    mdot_f = min(fuel_flow(params, state.R, T), params.fuel_limit * params.phi_stoich * air)
    return mdot_f, mdot, mdot_f / air


def advance(params, state, T) -> PlantState:
    """Noise-free transition from sample k to k+1 under pump position ``T``."""
    T = min(max(float(T), 0.0), 100.0)
    mdot_f, _, phi = _signals(params, state, T)
    eta_c = expit(-params.eff_slope * (phi - params.eff_rich * params.phi_stoich))

    R_next = state.R + (params.ts / params.inertia) * (
        params.torque_gain * mdot_f * eta_c
        - params.friction_lin * state.R
        - params.friction_quad * state.R**2
    )
    R_next = max(R_next, params.r_idle)
    P_next = state.P + (params.ts / params.boost_tau) * (
        AMBIENT_PRESSURE + params.boost_gain * state.R - state.P
    )

    smoke_line = state.smoke + (smoke(params, phi),)
    Op_next = state.Op + (params.ts / params.smoke_tau) * (smoke_line[0] - state.Op)

    if not all(math.isfinite(v) for v in (R_next, P_next, Op_next)):
        raise exceptions.PlantFaultError(
            f"Plant state became non-finite: R={R_next}, P={P_next}, Op={Op_next}"
        )
    return PlantState(R_next, P_next, Op_next, smoke_line[1:])


def measure(params, state, T, k, noise=None) -> SignalRecord:
    """Record of sample ``k``; ``noise`` is a standard-normal 4-vector (R, P, Op, mdot)."""
    T = min(max(float(T), 0.0), 100.0)
    mdot_f, mdot, _ = _signals(params, state, T)
    values = np.array([state.R, state.P, state.Op, mdot])
    if noise is not None:
        values = values + params.noise_sigmas * np.asarray(noise, dtype=float)
    return SignalRecord(
        int(k),
        k * params.ts,
        T,
        float(values[0]),
        float(values[1]),
        float(values[3]),
        float(mdot_f),
        float(values[2]),
    )


def plant_step(params, state, T, k=0, noise=None) -> Tuple[PlantState, SignalRecord]:
    """
    Advance the plant by one sample.

    Args:
        params (PlantParams): Plant coefficients.
        state (PlantState): State at sample ``k``.
        T (float): Pump position in %, clamped to [0, 100].
        k (int): Sample index used for the emitted record.
        noise (array_like, optional): Standard-normal draws for the
            measurement noise of this sample.

    Returns:
        tuple: The state at ``k + 1`` and the (noisy) record of sample ``k``.

    Raises:
        PlantFaultError: If the state becomes non-finite.
    """

    record = measure(params, state, T, k, noise)
    return advance(params, state, T), record


def draw_noise(params, n_samples) -> np.ndarray:
    rng = np.random.default_rng(params.seed)
    return rng.standard_normal((n_samples, 4))


def simulate_plant(params, T_seq, initial_state: Optional[PlantState] = None) -> SignalLog:
    """
    Run the surrogate over a pump-position sequence.

    When no initial state is given the plant is first settled at ``T_seq[0]``.
    """

    T_seq = np.asarray(T_seq, dtype=float)
    if T_seq.ndim != 1 or T_seq.size == 0:
        raise exceptions.InputShapeError("Pump-position sequence must be a non-empty vector")
    state = initial_state or steady_state(params, T_seq[0], n_steps=2000)
    noise = draw_noise(params, T_seq.size)

    records = []
    for k, T in enumerate(T_seq):
        state, record = plant_step(params, state, T, k, noise[k])
        records.append(record)
    return SignalLog.from_records(params.ts, records)


def steady_state(params, T, n_steps=10000, initial_state=None) -> PlantState:
    """Iterate the noise-free plant at constant ``T``."""
    state = initial_state or PlantState.initial(params, R=2000.0)
    for _ in range(n_steps):
        state = advance(params, state, T)
    return state


def operating_point(params, r_target, n_steps=3000, xtol=0.05) -> float:
    """Pump position whose settled speed is ``r_target``."""

    def speed_error(T):
        return steady_state(params, T, n_steps).R - r_target

    low, high = speed_error(0.0), speed_error(100.0)
    if low >= 0:
        return 0.0
    if high <= 0:
        return 100.0
    return float(brentq(speed_error, 0.0, 100.0, xtol=xtol))


# Primitive feedback taps (order, tap) of x^order + x^tap + 1.
_MLS_TAPS = ((5, 3), (6, 5), (7, 6), (9, 5), (10, 7), (11, 9), (15, 14), (17, 14), (20, 17))


def mls_bits(n_bits, seed=0) -> np.ndarray:
    """
    Maximum-length shift-register sequence of ``n_bits`` bits.

    The register order is the smallest whose period covers ``n_bits``; the
    seed picks the non-zero start state.
    """
    order, tap = next(
        ((n, t) for n, t in _MLS_TAPS if 2**n - 1 >= n_bits), _MLS_TAPS[-1]
    )
    reg = seed % (2**order - 1) + 1
    bits = np.empty(n_bits, dtype=bool)
    for i in range(n_bits):
        bits[i] = reg & 1
        feedback = (reg ^ (reg >> (order - tap))) & 1
        reg = (reg >> 1) | (feedback << (order - 1))
    return bits


def generate_excitation(
    kind,
    n_samples,
    seed=0,
    low=20.0,
    high=80.0,
    n_levels=8,
    min_hold=5,
    max_hold=None,
) -> np.ndarray:
    """
    Pump-position sequence for identification experiments.

    Args:
        kind (str): ``"staircase"`` (ascending, ``n_levels`` >= 8 steps),
            ``"prbs"`` (binary maximum-length sequence between ``low`` and
            ``high``, one bit per ``min_hold`` samples) or ``"aprbs"``
            (amplitude-modulated PRBS).
        n_samples (int): Sequence length, at least 100.
        seed (int): Seed for ``"prbs"`` and ``"aprbs"``.
        low (float): Lowest level in %.
        high (float): Highest level in %.
        n_levels (int): Number of equally spaced levels in [low, high].
        min_hold (int): Shortest hold time in samples (>= 5).
        max_hold (int, optional): Longest hold time; defaults to ``min_hold``.

    Returns:
        ndarray: The sequence, within [0, 100].

    Raises:
        ExcitationError: On invalid arguments.
    """

    if n_samples < 100:
        raise exceptions.ExcitationError("Excitation needs at least 100 samples")
    if not 0.0 <= low < high <= 100.0:
        raise exceptions.ExcitationError(f"Invalid level range [{low}, {high}]")
    if n_levels < 2:
        raise exceptions.ExcitationError("Excitation needs at least two levels")
    levels = np.linspace(low, high, n_levels)

    if kind == "staircase":
        if n_levels < 8:
            raise exceptions.ExcitationError("A staircase needs at least 8 levels")
        width = n_samples // n_levels
        seq = np.repeat(levels, width)
        return np.concatenate([seq, np.full(n_samples - seq.size, levels[-1])])

    max_hold = min_hold if max_hold is None else max_hold
    if kind in ("prbs", "aprbs") and (min_hold < 5 or max_hold < min_hold):
        raise exceptions.ExcitationError(
            f"Invalid hold range [{min_hold}, {max_hold}]; minimum hold is 5 samples"
        )

    if kind == "prbs":
        n_bits = -(-n_samples // min_hold)
        bits = np.repeat(mls_bits(n_bits, seed), min_hold)[:n_samples]
        return np.where(bits, float(high), float(low))

    if kind == "aprbs":
        rng = np.random.default_rng(seed)
        seq = np.empty(n_samples)
        k = 0
        while k < n_samples:
            hold = int(rng.integers(min_hold, max_hold + 1))
            seq[k : k + hold] = levels[rng.integers(0, n_levels)]
            k += hold
        return seq

    raise exceptions.ExcitationError(f"Unknown excitation kind {kind!r}")


def save_log(log: SignalLog, path, header=None):
    """
    Write ``log`` as CSV.

    ``header`` entries are written first as ``# key: value`` comment lines.
    """

    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}: {value}\n")
        frame = log.frame.copy()
        frame["k"] = frame["k"].astype(int)
        frame.to_csv(fh, index=False, float_format="%.17g")


def load_log(path, ts=None) -> SignalLog:
    """
    Read a CSV log.

    Args:
        path: File to read.
        ts (float, optional): Sample period, required for single-row logs.

    Raises:
        LogFormatError: On missing columns, non-numeric cells or non-uniform
            time stamps; the message names the offending line.
    """

    with open(path) as fh:
        lines = fh.read().splitlines()
    skip = 0
    while skip < len(lines) and (lines[skip].startswith("#") or not lines[skip].strip()):
        skip += 1
    if skip == len(lines):
        raise exceptions.LogFormatError(f"{path}: empty log")

    try:
        frame = pd.read_csv(
            path, skiprows=skip, skipinitialspace=True, float_precision="round_trip"
        )
    except pd.errors.ParserError as exc:
        raise exceptions.LogFormatError(f"{path}: {exc}")

    header_line = skip + 1
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise exceptions.LogFormatError(f"{path}, line {header_line}: missing columns {missing}")
    if frame.empty:
        raise exceptions.LogFormatError(f"{path}: empty log body")

    numeric = frame.loc[:, list(CSV_COLUMNS)].copy()
    for column in CSV_COLUMNS:
        if not pd.api.types.is_numeric_dtype(numeric[column]):
            numeric[column] = pd.to_numeric(numeric[column], errors="coerce")
    bad = np.nonzero(numeric.isna().any(axis=1).to_numpy())[0]
    if bad.size:
        raise exceptions.LogFormatError(
            f"{path}, line {header_line + 1 + bad[0]}: missing or non-numeric cell"
        )
    numeric = numeric.astype(float)
    numeric["k"] = numeric["k"].astype(int)

    t = numeric["t"].to_numpy()
    if len(t) > 1:
        step = t[1] - t[0]
        if not step > 0:
            raise exceptions.LogFormatError(
                f"{path}, line {header_line + 2}: time stamps must increase"
            )
        off = np.nonzero(np.abs(np.diff(t) - step) > 1e-6 * step)[0]
        if off.size:
            raise exceptions.LogFormatError(
                f"{path}, line {header_line + 2 + off[0]}: non-uniform time stamp"
            )
        ts = step if ts is None else ts
    elif ts is None:
        raise exceptions.LogFormatError(f"{path}: a single-record log needs an explicit ts")

    return SignalLog(ts, numeric)
