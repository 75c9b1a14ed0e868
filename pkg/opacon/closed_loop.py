"""
Reference profiles, closed-loop runs and run metrics.

A run steps a :class:`~opacon.neurocontrol.Controller` against either the
neural engine model (:class:`ModelTarget`) or the surrogate plant
(:class:`PlantTarget`) along a :class:`ReferenceProfile`, and records the
trajectories in a :class:`RunResult`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from opacon import exceptions
from opacon.engine_surrogate import (
    R_ENVELOPE,
    PlantParams,
    draw_noise,
    measure,
    operating_point,
    plant_step,
    steady_state,
)
from opacon.neurocontrol import (
    Controller,
    CriterionWeights,
    TrainingConfig,
    start_rollout,
    train_controller,
)
from opacon.sysid import EngineModel, find_operating_point, settle

logger = logging.getLogger(__name__)

OP_REF_MODES = ("ceiling", "steady-map")
DEFAULT_STEPS = ((0.0, 1200.0), (15.0, 2000.0), (30.0, 2800.0), (45.0, 1600.0))
RUN_COLUMNS = ("k", "t", "U", "R_ref", "R", "P", "mdot", "Op_ref", "Op")
METRICS = ("rmse_speed", "rmse_transient", "max_opacity", "opacity_excess")
TRANSIENT_WINDOW = 2.0


@dataclass(frozen=True)
class ReferenceProfile:
    """
    Speed reference and opacity constraint, one value per sample.

    Attributes:
        ts (float): Sample time, in seconds.
        r_ref (ndarray): Speed reference, in rpm.
        op_ref (ndarray): Opacity constraint, in %.
        mode (str): ``ceiling`` or ``steady-map``.
    """

    ts: float
    r_ref: np.ndarray = field(repr=False)
    op_ref: np.ndarray = field(repr=False)
    mode: str = "ceiling"

    def __post_init__(self):
        r_ref = np.array(self.r_ref, dtype=float).reshape(-1)
        op_ref = np.array(self.op_ref, dtype=float).reshape(-1)
        if r_ref.size != op_ref.size or r_ref.size < 2:
            raise exceptions.ProfileError(
                f"Profile needs two equal-length sequences of 2+ samples, got {r_ref.size}/{op_ref.size}"
            )
        if not self.ts > 0:
            raise exceptions.ProfileError(f"Sample time must be positive, got {self.ts}")
        if self.mode not in OP_REF_MODES:
            raise exceptions.ProfileError(f"Unknown opacity reference mode {self.mode!r}")
        low, high = R_ENVELOPE
        if np.any(r_ref <= low) or np.any(r_ref > high) or not np.all(np.isfinite(r_ref)):
            raise exceptions.ProfileError(f"Speed reference leaves ({low}, {high}] rpm")
        if np.any(op_ref < 0) or np.any(op_ref > 100) or not np.all(np.isfinite(op_ref)):
            raise exceptions.ProfileError("Opacity constraint leaves [0, 100] %")
        object.__setattr__(self, "r_ref", r_ref)
        object.__setattr__(self, "op_ref", op_ref)

    def __len__(self):
        return self.r_ref.size

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) * self.ts

    def step_indices(self) -> np.ndarray:
        return np.flatnonzero(np.diff(self.r_ref) != 0) + 1

    def levels(self) -> List[float]:
        return sorted(set(self.r_ref.tolist()))


def build_profile(
    steps: Sequence[Tuple[float, float]] = DEFAULT_STEPS,
    op_ref_mode="ceiling",
    ts=0.1,
    duration=60.0,
    ceiling=15.0,
    opacity_map: Optional[Mapping[float, float]] = None,
) -> ReferenceProfile:
    """
    Piecewise-constant speed reference with an opacity constraint.

    Args:
        steps: ``(time, rpm)`` pairs; the first time must be 0 and times
            must increase.
        op_ref_mode (str): ``ceiling`` holds ``Op_ref`` at ``ceiling``;
            ``steady-map`` uses ``opacity_map[level]`` for each level.
        ts (float): Sample time, in seconds.
        duration (float): Profile length, in seconds.
        ceiling (float): Constant ceiling, in %.
        opacity_map (dict): Settled opacity per speed level, for
            ``steady-map`` mode (see :func:`steady_opacity`).

    Raises:
        ProfileError: On an empty profile, misordered steps, levels outside
            the envelope or a missing opacity-map entry.
    """

    if not duration > 0 or not ts > 0:
        raise exceptions.ProfileError(f"Profile needs positive duration and Ts, got {duration}/{ts}")
    if op_ref_mode not in OP_REF_MODES:
        raise exceptions.ProfileError(f"Unknown opacity reference mode {op_ref_mode!r}")
    steps = [(float(t), float(level)) for t, level in steps]
    if not steps or steps[0][0] != 0:
        raise exceptions.ProfileError("The first reference step must start at t=0")
    times = [t for t, _ in steps]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise exceptions.ProfileError(f"Step times must increase: {times}")
    if times[-1] >= duration:
        raise exceptions.ProfileError(f"Step at {times[-1]} s is past the {duration} s profile")

    n = int(round(duration / ts))
    r_ref = np.empty(n)
    for i, (t0, level) in enumerate(steps):
        t1 = steps[i + 1][0] if i + 1 < len(steps) else duration
        r_ref[int(round(t0 / ts)) : int(round(t1 / ts))] = level

    if op_ref_mode == "ceiling":
        op_ref = np.full(n, float(ceiling))
    else:
        if opacity_map is None:
            raise exceptions.ProfileError("steady-map mode needs an opacity map")
        missing = [level for _, level in steps if level not in opacity_map]
        if missing:
            raise exceptions.ProfileError(f"No settled opacity for levels {missing}")
        op_ref = np.array([opacity_map[level] for level in r_ref])
    return ReferenceProfile(ts, r_ref, op_ref, op_ref_mode)


def steady_opacity(model: EngineModel, levels, settle_steps=1500) -> Dict[float, float]:
    """Settled model opacity at each speed level."""
    result = {}
    for level in levels:
        T = find_operating_point(model, level, n_steps=settle_steps)
        result[float(level)] = float(settle(model, T, settle_steps)["Op"][-1])
    return result


@dataclass
class Observation:
    R: float
    R_prev: float
    Op_ahead: float
    P: float
    mdot: float
    Op: float


class LoopTarget(Protocol):
    ts: float

    def reset(self, r_start: float, n_samples: int) -> None:
        ...

    def observe(self, k: int) -> Observation:
        ...

    def apply(self, k: int, T: float) -> None:
        ...


class ModelTarget:
    """The neural engine model; the controller reads the opacity lookahead."""

    def __init__(self, model: EngineModel, ts=0.1, settle_steps=1500):
        self.model = model
        self.ts = ts
        self.settle_steps = settle_steps
        self.rollout = None

    def reset(self, r_start, n_samples):
        self.rollout = start_rollout(self.model, r_start, self.settle_steps)

    def observe(self, k):
        s, now = self.rollout.series, self.rollout.now
        return Observation(
            s["R"][now],
            s["R"][now - 1],
            s["Op"][now + self.model.delay - 1],
            s["P"][now],
            s["mdot"][now],
            s["Op"][now],
        )

    def apply(self, k, T):
        self.rollout.push(T)


class PlantTarget:
    """The surrogate plant; the controller reads the latest measured opacity."""

    def __init__(self, params: PlantParams, settle_steps=3000):
        self.params = params
        self.ts = params.ts
        self.settle_steps = settle_steps

    def reset(self, r_start, n_samples):
        T0 = operating_point(self.params, r_start, self.settle_steps)
        self.state = steady_state(self.params, T0, self.settle_steps)
        self.noise = draw_noise(self.params, n_samples)
        self.last_R = None

    def observe(self, k):
        record = measure(self.params, self.state, 0.0, k, self.noise[k])
        R_prev = record.R if self.last_R is None else self.last_R
        self.last_R = record.R
        return Observation(record.R, R_prev, record.Op, record.P, record.mdot, record.Op)

    def apply(self, k, T):
        self.state, _ = plant_step(self.params, self.state, T, k, self.noise[k])


@dataclass
class RunResult:
    """
    Trajectories of one closed-loop run and the metrics derived from them.

    Attributes:
        frame (DataFrame): Columns ``k, t, U, R_ref, R, P, mdot, Op_ref, Op``.
        metrics (dict): See :func:`compute_metrics`.
        eta_op (float, optional): Opacity weight the controller was trained with.
    """

    frame: pd.DataFrame
    metrics: Dict[str, float]
    eta_op: Optional[float] = None


def compute_metrics(trajectories, profile: ReferenceProfile) -> Dict[str, float]:
    """
    Tracking and opacity metrics of a run.

    ``rmse_speed`` is over the whole run; ``rmse_transient`` over the union
    of +-2 s windows around every reference step (0 without steps);
    ``max_opacity`` is the peak of ``Op``; ``opacity_excess`` is
    ``sum(max(0, Op - Op_ref)) * Ts``.

    Raises:
        InputShapeError: If the trajectories and the profile differ in length.
    """

    R = np.asarray(trajectories["R"], dtype=float)
    Op = np.asarray(trajectories["Op"], dtype=float)
    if R.size != len(profile) or Op.size != len(profile):
        raise exceptions.InputShapeError(
            f"Trajectories of {R.size}/{Op.size} samples for a {len(profile)}-sample profile"
        )
    error = R - profile.r_ref
    half = int(round(TRANSIENT_WINDOW / profile.ts))
    window = np.zeros(R.size, dtype=bool)
    for i in profile.step_indices():
        window[max(0, i - half) : i + half + 1] = True

    return {
        "rmse_speed": float(np.sqrt(np.mean(error**2))),
        "rmse_transient": float(np.sqrt(np.mean(error[window] ** 2))) if window.any() else 0.0,
        "max_opacity": float(Op.max()),
        "opacity_excess": float(np.sum(np.maximum(0.0, Op - profile.op_ref)) * profile.ts),
    }


def run_closed_loop(target: LoopTarget, controller: Controller, profile: ReferenceProfile, eta_op=None) -> RunResult:
    """
    Step ``controller`` against ``target`` along ``profile``.

    Raises:
        ProfileError: If the target and profile sample times differ.
        SimulationFaultError: If the target diverges; carries the step index.
    """

    if not math.isclose(target.ts, profile.ts, rel_tol=1e-9):
        raise exceptions.ProfileError(f"Target Ts={target.ts} differs from profile Ts={profile.ts}")
    n, d = len(profile), controller.delay
    target.reset(profile.r_ref[0], n)
    rows = []
    for k in range(n):
        try:
            obs = target.observe(k)
            r_next = profile.r_ref[min(k + 1, n - 1)]
            op_ahead = profile.op_ref[min(k + d, n - 1)]
            x = controller.features(r_next, obs.R, obs.R_prev, op_ahead, obs.Op_ahead)
            U = controller.forward(x)
            target.apply(k, U)
        except (exceptions.SimulationFaultError, exceptions.PlantFaultError) as exc:
            raise exceptions.SimulationFaultError(f"Closed loop diverged at step {k}: {exc}", step=k)
        rows.append((k, k * profile.ts, U, profile.r_ref[k], obs.R, obs.P, obs.mdot, profile.op_ref[k], obs.Op))

    frame = pd.DataFrame(rows, columns=RUN_COLUMNS)
    metrics = compute_metrics(frame, profile)
    logger.info("Run finished: %s", ", ".join(f"{k}={v:.4g}" for k, v in metrics.items()))
    return RunResult(frame, metrics, eta_op)


def save_run(result: RunResult, path, header=None, metrics_path=None):
    """Write the run CSV and, optionally, the metrics JSON document."""
    header = dict(header or {})
    if result.eta_op is not None:
        header["eta-op"] = result.eta_op
    with open(path, "w", newline="") as fh:
        for key, value in header.items():
            fh.write(f"# {key}: {value}\n")
        result.frame.to_csv(fh, index=False, float_format="%.17g")
    if metrics_path is not None:
        document = {**result.metrics, "eta_op": result.eta_op}
        document.update({k.replace("-", "_"): v for k, v in header.items() if k != "eta-op"})
        with open(metrics_path, "w") as fh:
            json.dump(document, fh, indent=2, sort_keys=True)


def load_run(path) -> RunResult:
    """Read a run CSV and recompute its metrics from the trajectories."""
    header = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise exceptions.LogFormatError(f"Cannot read run file {path}: {exc}")
    for line in lines:
        if not line.startswith("#"):
            break
        key, _, value = line[1:].partition(":")
        header[key.strip()] = value.strip()
    try:
        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise exceptions.LogFormatError(f"{path}: {exc}")
    missing = [c for c in RUN_COLUMNS if c not in frame.columns]
    if missing:
        raise exceptions.LogFormatError(f"{path}: missing columns {missing}")
    if len(frame) < 2:
        raise exceptions.LogFormatError(f"{path}: a run needs at least two samples")
    ts = float(frame["t"].iloc[1] - frame["t"].iloc[0])
    profile = ReferenceProfile(ts, frame["R_ref"].to_numpy(), frame["Op_ref"].to_numpy())
    eta = header.get("eta-op")
    return RunResult(frame, compute_metrics(frame, profile), float(eta) if eta not in (None, "None") else None)


def sweep_eta(
    model: EngineModel,
    profile: ReferenceProfile,
    etas=(0.0, 0.2, 0.8),
    cfg: TrainingConfig = TrainingConfig(),
    target: Optional[LoopTarget] = None,
) -> List[Tuple[float, Controller, RunResult]]:
    """Train and evaluate one controller per opacity weight."""
    target = target or ModelTarget(model, profile.ts, cfg.settle_steps)
    results = []
    for eta in etas:
        controller, _ = train_controller(model, profile, CriterionWeights(1.0, eta), cfg)
        results.append((eta, controller, run_closed_loop(target, controller, profile, eta_op=eta)))
    return results


def check_sweep(rows: Sequence[Tuple[float, Mapping[str, float]]]) -> List[str]:
    """
    Monotonicity violations across an opacity-weight sweep.

    ``rows`` are ``(eta_op, metrics)`` pairs. Peak opacity must not rise and
    transient tracking error must not fall as ``eta_op`` grows.
    """

    ordered = sorted(rows, key=lambda row: row[0])
    violations = []
    for (eta_a, a), (eta_b, b) in zip(ordered, ordered[1:]):
        if b["max_opacity"] > a["max_opacity"]:
            violations.append(
                f"max_opacity rises from {a['max_opacity']:.3f} (eta={eta_a}) to {b['max_opacity']:.3f} (eta={eta_b})"
            )
        if b["rmse_transient"] < a["rmse_transient"]:
            violations.append(
                f"rmse_transient falls from {a['rmse_transient']:.3f} (eta={eta_a}) to {b['rmse_transient']:.3f} (eta={eta_b})"
            )
    return violations
