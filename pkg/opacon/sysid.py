"""
Output-error identification of the neural engine model.

The engine model is four interconnected MISO output-error networks::

    R(k)    = NN_R(R(k-1), R(k-2), T(k-1))
    P(k)    = NN_P(P(k-1), R(k-1))
    mdot(k) = NN_m(mdot(k-1), P(k-1), R(k-1))
    Op(k)   = NN_Op(Op(k-1), T(k-4), R(k-4), mdot(k-4))

Each sub-model regresses on its own past *estimates*, never on past
measurements, and is trained by Levenberg-Marquardt on the simulation
error with forward sensitivities as the Jacobian. Lag orders and hidden
sizes can be chosen with the two-phase Final Prediction Error search
(:func:`select_structure`).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from scipy.optimize import brentq

from opacon import exceptions
from opacon.engine_surrogate import SignalLog
from opacon.neural_core import LmConfig, Mlp, lm_train, n_params

logger = logging.getLogger(__name__)

ENGINE_CHANNELS = ("R", "P", "mdot", "Op")
ROLES = {"R": "speed", "P": "pressure", "mdot": "airflow", "Op": "opacity"}
WIRING = {
    "R": {"T"},
    "P": {"R"},
    "mdot": {"P", "R"},
    "Op": {"T", "R", "mdot"},
}


@dataclass(frozen=True)
class RegressorSpec:
    """
    Lag structure of one MISO sub-model.

    The regressor of sample ``k`` is ``y(k-1) ... y(k-output_lags)``
    followed, for each input ``u`` with ``n`` lags, by
    ``u(k-delay) ... u(k-delay-n+1)``.

    Attributes:
        output (str): Output channel.
        output_lags (int): Number of past output estimates.
        inputs (tuple): ``(channel, n_lags)`` pairs, in regressor order.
        delay (int): Pure delay of every exogenous input, in samples.
    """

    output: str
    output_lags: int
    inputs: Tuple[Tuple[str, int], ...] = ()
    delay: int = 1

    def __post_init__(self):
        inputs = self.inputs.items() if isinstance(self.inputs, Mapping) else self.inputs
        inputs = tuple((str(c), int(n)) for c, n in inputs)
        object.__setattr__(self, "inputs", inputs)

        if self.output_lags < 0 or any(n < 0 for _, n in inputs):
            raise exceptions.ConfigError(f"Lag orders cannot be negative: {self}")
        if self.delay < 0:
            raise exceptions.ConfigError(f"Delay cannot be negative: {self}")
        if self.n_regressors < 1:
            raise exceptions.ConfigError(f"{self.output} model needs at least one regressor")
        if self.output in dict(inputs):
            raise exceptions.ConfigError(f"{self.output} cannot be its own exogenous input")

    @property
    def n_regressors(self) -> int:
        return self.output_lags + sum(n for _, n in self.inputs)

    @property
    def max_lag(self) -> int:
        lags = [self.output_lags] + [self.delay + n - 1 for _, n in self.inputs if n > 0]
        return max(lags)

    @property
    def label(self) -> str:
        parts = [f"{self.output}:{self.output_lags}"]
        parts += [f"{c}:{n}" for c, n in self.inputs]
        return "|".join(parts) + f"|d={self.delay}"

    def to_dict(self) -> dict:
        return {
            "output": self.output,
            "output_lags": self.output_lags,
            "inputs": dict(self.inputs),
            "delay": self.delay,
        }

    @classmethod
    def from_dict(cls, data) -> "RegressorSpec":
        try:
            return cls(
                data["output"],
                int(data["output_lags"]),
                tuple(dict(data.get("inputs") or {}).items()),
                int(data.get("delay", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise exceptions.ConfigError(f"Malformed regressor document: {exc}")


DEFAULT_SPECS = {
    "R": RegressorSpec("R", 2, (("T", 1),), delay=1),
    "P": RegressorSpec("P", 1, (("R", 1),), delay=1),
    "mdot": RegressorSpec("mdot", 1, (("P", 1), ("R", 1)), delay=1),
    "Op": RegressorSpec("Op", 1, (("T", 1), ("R", 1), ("mdot", 1)), delay=4),
}
DEFAULT_HIDDEN = {"R": 6, "P": 4, "mdot": 4, "Op": 8}


@dataclass(frozen=True)
class ChannelScaler:
    mean: float
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and self.scale > 0):
            raise exceptions.ConfigError(f"Invalid normalization {self.mean}/{self.scale}")

    @classmethod
    def fit(cls, values) -> "ChannelScaler":
        values = np.asarray(values, dtype=float)
        std = float(values.std())
        return cls(float(values.mean()), std if std > 0 else 1.0)

    def normalize(self, values):
        return (np.asarray(values, dtype=float) - self.mean) / self.scale

    def denormalize(self, values):
        return np.asarray(values, dtype=float) * self.scale + self.mean


def fit_scalers(channels: Mapping[str, Sequence], spec: RegressorSpec) -> Dict[str, ChannelScaler]:
    names = [spec.output] + [c for c, _ in spec.inputs]
    return {name: ChannelScaler.fit(channels[name]) for name in names}


@dataclass(frozen=True)
class SubModel:
    """
    A trained MISO output-error network.

    Attributes:
        net (Mlp): The network, operating on normalized signals.
        spec (RegressorSpec): Regressor structure.
        scalers (dict): ``ChannelScaler`` per output and input channel.
    """

    net: Mlp
    spec: RegressorSpec
    scalers: Mapping[str, ChannelScaler] = field(repr=False)

    def __post_init__(self):
        if self.net.n_in != self.spec.n_regressors:
            raise exceptions.CompositionError(
                f"{self.spec.output} network has {self.net.n_in} inputs, "
                f"regressor defines {self.spec.n_regressors}"
            )
        needed = {self.spec.output} | {c for c, _ in self.spec.inputs}
        missing = needed - set(self.scalers)
        if missing:
            raise exceptions.CompositionError(f"Missing normalization for {sorted(missing)}")

    @property
    def output_scaler(self) -> ChannelScaler:
        return self.scalers[self.spec.output]

    def with_net(self, net) -> "SubModel":
        return SubModel(net, self.spec, self.scalers)

    def regressor(self, series: Mapping[str, Sequence], k: int) -> np.ndarray:
        """Normalized regressor of sample ``k`` from engineering-unit series."""
        spec = self.spec
        out = self.scalers[spec.output]
        y = series[spec.output]
        x = [(y[k - i] - out.mean) / out.scale for i in range(1, spec.output_lags + 1)]
        for name, n in spec.inputs:
            u, sc = series[name], self.scalers[name]
            x += [(u[k - spec.delay - i] - sc.mean) / sc.scale for i in range(n)]
        return np.array(x, dtype=float)

    def slot(self, k: int, channel: str, i: int) -> Optional[int]:
        """Position of sample ``channel(i)`` in the regressor of sample ``k``."""
        spec = self.spec
        if channel == spec.output:
            lag = k - i
            return lag - 1 if 1 <= lag <= spec.output_lags else None
        offset = spec.output_lags
        for name, n in spec.inputs:
            if name == channel:
                pos = k - spec.delay - i
                return offset + pos if 0 <= pos < n else None
            offset += n
        return None

    def to_dict(self) -> dict:
        return {
            "network": self.net.to_dict(),
            "regressors": self.spec.to_dict(),
            "normalization": {
                name: {"mean": sc.mean, "scale": sc.scale} for name, sc in self.scalers.items()
            },
        }

    @classmethod
    def from_dict(cls, data) -> "SubModel":
        try:
            scalers = {
                name: ChannelScaler(float(v["mean"]), float(v["scale"]))
                for name, v in data["normalization"].items()
            }
            return cls(Mlp.from_dict(data["network"]), RegressorSpec.from_dict(data["regressors"]), scalers)
        except (KeyError, TypeError, AttributeError) as exc:
            raise exceptions.CompositionError(f"Malformed sub-model document: {exc}")


def _exogenous_block(model: SubModel, exogenous: Mapping[str, Sequence], n: int) -> np.ndarray:
    spec = model.spec
    columns = []
    for name, n_lags in spec.inputs:
        if name not in exogenous:
            raise exceptions.InputShapeError(f"Missing exogenous channel {name!r}")
        u = np.asarray(exogenous[name], dtype=float)
        if u.size != n:
            raise exceptions.InputShapeError(
                f"Channel {name!r} has {u.size} samples, expected {n}"
            )
        u = model.scalers[name].normalize(u)
        for lag in range(spec.delay, spec.delay + n_lags):
            column = np.zeros(n)
            column[lag:] = u[: n - lag]
            columns.append(column)
    return np.column_stack(columns) if columns else np.empty((n, 0))


def _check_history(model, init_history, n):
    m = model.spec.max_lag
    init = np.asarray(init_history, dtype=float).reshape(-1)
    if init.size < m:
        raise exceptions.InsufficientHistoryError(
            f"{model.spec.output} model needs {m} initial samples, got {init.size}"
        )
    if n < m:
        raise exceptions.InsufficientHistoryError(
            f"{model.spec.output} model needs at least {m} samples, got {n}"
        )
    return init[:m]


def _run(model: SubModel, x_exo: np.ndarray, init_n: np.ndarray, sensitivities: bool):
    net, ny = model.net, model.spec.output_lags
    n, m = x_exo.shape[0], init_n.size
    yn = np.empty(n)
    yn[:m] = init_n
    S = np.zeros((n, net.p)) if sensitivities else None

    for k in range(m, n):
        x = np.concatenate([yn[k - ny : k][::-1], x_exo[k]])
        if sensitivities:
            yn[k], dx, dtheta = net.evaluate(x)
            S[k] = dtheta
            if ny:
                S[k] += dx[:ny] @ S[k - ny : k][::-1]
        else:
            yn[k] = net.forward(x)
    return yn, S


def _exogenous_length(model, exogenous):
    names = [c for c, _ in model.spec.inputs]
    if not names:
        raise exceptions.InputShapeError("Sub-model has no exogenous inputs; pass n explicitly")
    if names[0] not in exogenous:
        raise exceptions.InputShapeError(f"Missing exogenous channel {names[0]!r}")
    return len(exogenous[names[0]])


def simulate_submodel(model: SubModel, exogenous: Mapping[str, Sequence], init_history, n=None) -> np.ndarray:
    """
    Simulate one sub-model in output-error mode.

    Args:
        model (SubModel): The sub-model.
        exogenous (dict): Engineering-unit input channels, all of equal
            length. The measured output channel, if present, is ignored.
        init_history (array_like): Output values for the first
            ``spec.max_lag`` samples.
        n (int, optional): Sequence length; only needed without inputs.

    Returns:
        ndarray: Simulated output in engineering units; the first
        ``max_lag`` entries are the initial history.

    Raises:
        InputShapeError: On a missing or mis-sized channel.
        InsufficientHistoryError: If the initial history is too short.
    """

    n = _exogenous_length(model, exogenous) if n is None else n
    init = _check_history(model, init_history, n)
    x_exo = _exogenous_block(model, exogenous, n)
    yn, _ = _run(model, x_exo, model.output_scaler.normalize(init), sensitivities=False)
    return model.output_scaler.denormalize(yn)


def oe_sensitivities(model: SubModel, exogenous: Mapping[str, Sequence], init_history, n=None) -> np.ndarray:
    """
    Forward sensitivities ``dy(k)/dtheta`` of the simulated output.

    Computed by the recursion
    ``dy(k)/dtheta = dF/dtheta + sum_i dF/dy(k-i) * dy(k-i)/dtheta``,
    zero over the initial history. Rows are in engineering units.
    """

    n = _exogenous_length(model, exogenous) if n is None else n
    init = _check_history(model, init_history, n)
    x_exo = _exogenous_block(model, exogenous, n)
    _, S = _run(model, x_exo, model.output_scaler.normalize(init), sensitivities=True)
    return S * model.output_scaler.scale


class _OeObjective:
    """Residual/Jacobian oracles over one data set, caching the last sensitivity run."""

    def __init__(self, template: SubModel, channels: Mapping[str, Sequence]):
        self.template = template
        out = template.output_scaler
        y = np.asarray(channels[template.spec.output], dtype=float)
        self.m = template.spec.max_lag
        self.x_exo = _exogenous_block(template, channels, y.size)
        self.init_n = out.normalize(y[: self.m])
        self.target = out.normalize(y[self.m :])

    def _model(self, theta):
        return self.template.net.with_weights(theta)

    def residual(self, theta):
        model = self.template.with_net(self._model(theta))
        yn, _ = _run(model, self.x_exo, self.init_n, sensitivities=False)
        return self.target - yn[self.m :]

    def jacobian(self, theta):
        model = self.template.with_net(self._model(theta))
        _, S = _run(model, self.x_exo, self.init_n, sensitivities=True)
        return -S[self.m :]


class _OneStepObjective:
    """Residual/Jacobian oracles of the one-step predictor on measured output lags."""

    def __init__(self, template: SubModel, channels: Mapping[str, Sequence]):
        self.template = template
        spec = template.spec
        y = template.output_scaler.normalize(channels[spec.output])
        m, n = spec.max_lag, y.size
        lags = [y[m - i : n - i] for i in range(1, spec.output_lags + 1)]
        x_exo = _exogenous_block(template, channels, n)[m:]
        self.X = np.column_stack(lags + [x_exo]) if lags else x_exo
        self.target = y[m:]

    def residual(self, theta):
        return self.target - self.template.net.with_weights(theta).forward_batch(self.X)

    def jacobian(self, theta):
        return -self.template.net.with_weights(theta).weight_jacobian_batch(self.X)


def _channels(data) -> Mapping[str, np.ndarray]:
    return data.channels() if isinstance(data, SignalLog) else data


def _attempt(one_step, objective, theta0, cfg, label, attempt):
    try:
        warm = lm_train(one_step.residual, one_step.jacobian, theta0, cfg)
        if np.all(np.isfinite(warm.theta)):
            theta0 = warm.theta
        logger.debug("%s attempt %d: one-step sse=%.6g", label, attempt, warm.sse)
    except (exceptions.TrainingInitError, exceptions.SingularSystemError) as exc:
        logger.warning("%s attempt %d: one-step warm start failed: %s", label, attempt, exc)
    try:
        result = lm_train(objective.residual, objective.jacobian, theta0, cfg)
    except (exceptions.TrainingInitError, exceptions.SingularSystemError) as exc:
        logger.warning("%s attempt %d failed: %s", label, attempt, exc)
        return None
    if not (np.isfinite(result.sse) and np.all(np.isfinite(result.theta))):
        logger.warning("%s attempt %d diverged", label, attempt)
        return None
    return result


def fit_oe_model(
    data,
    spec: RegressorSpec,
    n_hidden: int,
    cfg: LmConfig = LmConfig(),
    restarts: int = 2,
    scalers: Optional[Mapping[str, ChannelScaler]] = None,
) -> Tuple[SubModel, float]:
    """
    Train one output-error sub-model by Levenberg-Marquardt.

    The residual is the normalized simulation error ``y - y_hat`` after the
    initial history; its Jacobian comes from :func:`oe_sensitivities`.
    Every attempt starts from random weights, first fits them as a one-step
    predictor on the measured output lags and then refines them on the
    simulation error. The attempt with the lowest simulation SSE is kept.

    Args:
        data (SignalLog or dict): Measured channels.
        spec (RegressorSpec): Regressor structure.
        n_hidden (int): Hidden units.
        cfg (LmConfig): Optimizer settings; ``cfg.seed`` seeds the first
            initialization, attempt ``i`` uses ``cfg.seed + i``.
        restarts (int): Attempts after the first one.
        scalers (dict, optional): Normalization to use instead of fitting
            it on ``data``.

    Returns:
        tuple: The trained ``SubModel`` and its final SSE (normalized units).

    Raises:
        IllPosedError: If there are no more residuals than parameters.
        TrainingDivergedError: If every attempt diverged.
    """

    channels = _channels(data)
    scalers = dict(scalers) if scalers is not None else fit_scalers(channels, spec)
    n_samples = len(channels[spec.output])
    n_eff = n_samples - spec.max_lag
    p = n_params(spec.n_regressors, n_hidden)
    if n_eff <= p:
        raise exceptions.IllPosedError(
            f"{spec.output} model with {p} parameters needs more than {p} usable samples, got {max(n_eff, 0)}"
        )

    template = SubModel(Mlp.zeros(spec.n_regressors, n_hidden), spec, scalers)
    objective = _OeObjective(template, channels)
    one_step = _OneStepObjective(template, channels)

    best = None
    for attempt in range(restarts + 1):
        theta0 = Mlp.init_random(spec.n_regressors, n_hidden, seed=cfg.seed + attempt).weights
        result = _attempt(one_step, objective, theta0, cfg, spec.label, attempt)
        if result is not None and (best is None or result.sse < best.sse):
            best = result

    if best is None:
        raise exceptions.TrainingDivergedError(
            f"{spec.label} diverged after {restarts} restarts", restarts=restarts
        )
    logger.info(
        "Fitted %s with %d hidden units: sse=%.6g after %d iterations",
        spec.label,
        n_hidden,
        best.sse,
        best.iterations,
    )
    return template.with_net(template.net.with_weights(best.theta)), best.sse


def fpe(sse, n, p) -> float:
    """
    Akaike's Final Prediction Error, ``(sse/n) (n + p) / (n - p)``.

    Raises:
        FpeDomainError: Unless ``n > p >= 1`` and ``sse >= 0``.
    """

    if not (p >= 1 and n > p):
        raise exceptions.FpeDomainError(f"FPE needs n > p >= 1, got n={n}, p={p}")
    if sse < 0:
        raise exceptions.FpeDomainError(f"SSE cannot be negative, got {sse}")
    return (sse / n) * (n + p) / (n - p)


def order_grid(base: RegressorSpec, output_orders=range(1, 5), input_orders=range(1, 5)) -> List[RegressorSpec]:
    """Candidates with every (output lag, uniform input lag) pair."""
    return [
        RegressorSpec(base.output, ny, tuple((c, nu) for c, _ in base.inputs), base.delay)
        for ny in output_orders
        for nu in input_orders
    ]


@dataclass
class FpeCandidate:
    spec: RegressorSpec
    n_hidden: int
    sse: float
    p: int
    n: int
    fpe: float
    phase: int
    failed: bool = False
    selected: bool = False


@dataclass
class FpeReport:
    """Scores of every candidate of a structure search, in search order."""

    candidates: List[FpeCandidate] = field(default_factory=list)

    @property
    def selected(self) -> Optional[FpeCandidate]:
        return next((c for c in self.candidates if c.selected), None)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "order_spec": c.spec.label,
                    "n_hidden": c.n_hidden,
                    "sse": c.sse,
                    "p": c.p,
                    "N": c.n,
                    "fpe": c.fpe,
                    "selected": int(c.selected),
                    "phase": c.phase,
                    "failed": int(c.failed),
                }
                for c in self.candidates
            ],
            columns=["order_spec", "n_hidden", "sse", "p", "N", "fpe", "selected", "phase", "failed"],
        )

    def save(self, path, header=None):
        with open(path, "w", newline="") as fh:
            for key, value in (header or {}).items():
                fh.write(f"# {key}: {value}\n")
            self.to_frame().to_csv(fh, index=False, float_format="%.17g")


def _score(channels, spec, n_hidden, cfg, restarts, scalers, phase):
    n_eff = len(channels[spec.output]) - spec.max_lag
    p = n_params(spec.n_regressors, n_hidden)
    try:
        model, sse = fit_oe_model(channels, spec, n_hidden, cfg, restarts, scalers)
    except (exceptions.IllPosedError, exceptions.TrainingDivergedError) as exc:
        logger.warning("Candidate %s/%d failed: %s", spec.label, n_hidden, exc)
        return FpeCandidate(spec, n_hidden, np.nan, p, n_eff, np.nan, phase, failed=True), None
    score = fpe(sse, n_eff, p)
    logger.info("Candidate %s/%d: fpe=%.6g", spec.label, n_hidden, score)
    return FpeCandidate(spec, n_hidden, sse, p, n_eff, score, phase), model


def _best(rows):
    scored = [(i, c) for i, c in enumerate(rows) if not c.failed]
    if not scored:
        return None
    return min(scored, key=lambda ic: (ic[1].fpe, ic[0]))[0]


def select_structure(
    data,
    orders: Sequence[RegressorSpec],
    nodes: Sequence[int],
    cfg: LmConfig = LmConfig(),
    phase1_nodes: int = 10,
    restarts: int = 2,
) -> Tuple[FpeReport, SubModel]:
    """
    Two-phase FPE structure search.

    Phase 1 trains every candidate regressor structure with
    ``phase1_nodes`` hidden units and keeps the one with minimal FPE.
    Phase 2 retrains that structure for every hidden-unit count in
    ``nodes`` and keeps the minimal-FPE count.

    Returns:
        tuple: The full report and the selected trained sub-model.

    Raises:
        SelectionFailedError: If every candidate of a phase failed.
    """

    if not orders or not nodes:
        raise exceptions.ConfigError("Structure search needs non-empty order and node grids")
    channels = _channels(data)
    output = orders[0].output
    names = {output} | {c for spec in orders for c, _ in spec.inputs}
    scalers = {name: ChannelScaler.fit(channels[name]) for name in names}

    report = FpeReport()
    phase1_models = []
    for spec in orders:
        row, model = _score(channels, spec, phase1_nodes, cfg, restarts, scalers, phase=1)
        report.candidates.append(row)
        phase1_models.append(model)
    best = _best(report.candidates)
    if best is None:
        raise exceptions.SelectionFailedError("Every order candidate failed", report=report)
    best_spec = report.candidates[best].spec
    logger.info("Phase 1 selected %s", best_spec.label)

    phase2 = []
    models = []
    for n_hidden in nodes:
        if n_hidden == phase1_nodes:
            row = FpeCandidate(**{**report.candidates[best].__dict__, "phase": 2})
            model = phase1_models[best]
        else:
            row, model = _score(channels, best_spec, n_hidden, cfg, restarts, scalers, phase=2)
        phase2.append(row)
        models.append(model)
    report.candidates.extend(phase2)
    chosen = _best(phase2)
    if chosen is None:
        raise exceptions.SelectionFailedError("Every node candidate failed", report=report)
    phase2[chosen].selected = True
    logger.info("Phase 2 selected %d hidden units", phase2[chosen].n_hidden)
    return report, models[chosen]


@dataclass(frozen=True)
class EngineModel:
    """
    The composite neural engine model.

    Attributes:
        speed (SubModel): NN_R.
        pressure (SubModel): NN_P.
        airflow (SubModel): NN_m.
        opacity (SubModel): NN_Op.
    """

    speed: SubModel
    pressure: SubModel
    airflow: SubModel
    opacity: SubModel

    @property
    def delay(self) -> int:
        return self.opacity.spec.delay

    @property
    def init_length(self) -> int:
        return max(sub.spec.max_lag for sub in self.submodels().values())

    def submodels(self) -> Dict[str, SubModel]:
        return {"R": self.speed, "P": self.pressure, "mdot": self.airflow, "Op": self.opacity}

    def scaler(self, channel) -> ChannelScaler:
        for sub in self.submodels().values():
            if channel in sub.scalers:
                return sub.scalers[channel]
        raise exceptions.CompositionError(f"No normalization for channel {channel!r}")


def assemble_engine_model(nn_r, nn_p, nn_m, nn_op) -> EngineModel:
    """
    Connect the four sub-models.

    Raises:
        CompositionError: If a sub-model has the wrong output or reads a
            channel it is not wired to.
    """

    given = {"R": nn_r, "P": nn_p, "mdot": nn_m, "Op": nn_op}
    for channel, sub in given.items():
        if sub.spec.output != channel:
            raise exceptions.CompositionError(
                f"The {ROLES[channel]} slot needs a {channel} model, got {sub.spec.output}"
            )
        inputs = {c for c, n in sub.spec.inputs if n > 0}
        extra = inputs - WIRING[channel]
        if extra:
            raise exceptions.CompositionError(
                f"{channel} model reads {sorted(extra)}, allowed inputs are {sorted(WIRING[channel])}"
            )
    return EngineModel(nn_r, nn_p, nn_m, nn_op)


class EngineRollout:
    """
    Incremental simulation of an :class:`EngineModel`.

    After each pump position is pushed, every channel computes all samples
    whose regressors are complete. Opacity, whose inputs are delayed by
    ``d``, therefore runs ``d - 1`` samples ahead of speed.
    """

    def __init__(self, model: EngineModel, history: Mapping[str, Sequence]):
        self.model = model
        m = model.init_length
        self.series = {}
        for channel in ("T",) + ENGINE_CHANNELS:
            values = [float(v) for v in history.get(channel, ())]
            if len(values) < m:
                raise exceptions.InsufficientHistoryError(
                    f"Channel {channel!r} needs {m} initial samples, got {len(values)}"
                )
            self.series[channel] = values[:m]
        self._catch_up()

    def copy(self) -> "EngineRollout":
        clone = object.__new__(EngineRollout)
        clone.model = self.model
        clone.series = {c: list(v) for c, v in self.series.items()}
        return clone

    @property
    def now(self) -> int:
        """Index of the next pump position to be pushed."""
        return len(self.series["T"])

    def _ready(self, sub: SubModel, k: int) -> bool:
        if k > self.now - 1 + max(sub.spec.delay, 1):
            return False
        for name, n in sub.spec.inputs:
            if n > 0 and k - sub.spec.delay >= len(self.series[name]):
                return False
        return True

    def _catch_up(self):
        progress = True
        while progress:
            progress = False
            for channel, sub in self.model.submodels().items():
                out = self.series[channel]
                while self._ready(sub, len(out)):
                    k = len(out)
                    y = sub.output_scaler.denormalize(sub.net.forward(sub.regressor(self.series, k)))
                    if not np.isfinite(y):
                        raise exceptions.SimulationFaultError(
                            f"{channel} estimate became non-finite at sample {k}", step=k
                        )
                    out.append(float(y))
                    progress = True

    def push(self, T):
        self.series["T"].append(float(T))
        self._catch_up()

    def partial(self, channel, k, wrt, i) -> float:
        """Direct partial of ``channel(k)`` w.r.t. ``wrt(i)`` through its own regressor."""
        sub = self.model.submodels()[channel]
        slot = sub.slot(k, wrt, i)
        if slot is None:
            return 0.0
        dx = sub.net.input_jacobian(sub.regressor(self.series, k))
        return float(dx[slot] * sub.output_scaler.scale / sub.scalers[wrt].scale)

    def trajectories(self, start=0, stop=None) -> Dict[str, np.ndarray]:
        return {c: np.array(v[start:stop]) for c, v in self.series.items()}


def simulate_engine_model(model: EngineModel, T_seq, init: Mapping[str, Sequence]) -> Dict[str, np.ndarray]:
    """
    Simulate the composite model from the pump position alone.

    Args:
        model (EngineModel): The engine model.
        T_seq (array_like): Pump position for every sample.
        init (dict): Initial values of R, P, mdot and Op for the first
            ``model.init_length`` samples.

    Returns:
        dict: ``R``, ``P``, ``mdot`` and ``Op`` estimates aligned with ``T_seq``.

    Raises:
        InsufficientHistoryError: If the initial histories are too short.
        SimulationFaultError: If an estimate becomes non-finite.
    """

    T_seq = np.asarray(T_seq, dtype=float)
    m = model.init_length
    if T_seq.size < m:
        raise exceptions.InsufficientHistoryError(
            f"Pump sequence needs at least {m} samples, got {T_seq.size}"
        )
    history = {c: init[c] for c in ENGINE_CHANNELS if c in init}
    history["T"] = T_seq[:m]
    rollout = EngineRollout(model, history)
    for T in T_seq[m:]:
        rollout.push(T)
    traj = rollout.trajectories(0, T_seq.size)
    return {c: traj[c] for c in ENGINE_CHANNELS}


def settle(model: EngineModel, T, n_steps=1500) -> Dict[str, List[float]]:
    """Histories (``init_length`` samples, T included) after holding ``T`` constant."""
    m = model.init_length
    start = {c: [model.scaler(c).mean] * m for c in ENGINE_CHANNELS}
    start["T"] = [float(T)] * m
    rollout = EngineRollout(model, start)
    for _ in range(n_steps):
        rollout.push(T)
    end = rollout.now
    return {c: v[end - m : end] for c, v in rollout.series.items()}


def find_operating_point(model: EngineModel, r_target, n_steps=1500, grid=11) -> float:
    """Pump position whose settled model speed is closest to ``r_target``."""

    def speed_error(T):
        return settle(model, T, n_steps)["R"][-1] - r_target

    Ts = np.linspace(0.0, 100.0, grid)
    errors = np.array([speed_error(T) for T in Ts])
    for i in range(grid - 1):
        if errors[i] == 0:
            return float(Ts[i])
        if errors[i] * errors[i + 1] < 0:
            return float(brentq(speed_error, Ts[i], Ts[i + 1], xtol=0.05))
    return float(Ts[np.argmin(np.abs(errors))])


def identify_engine(
    data,
    specs: Mapping[str, RegressorSpec] = DEFAULT_SPECS,
    hidden: Mapping[str, int] = DEFAULT_HIDDEN,
    cfg: LmConfig = LmConfig(),
    restarts: int = 2,
) -> EngineModel:
    """Fit the four sub-models on measured channels and connect them."""
    channels = _channels(data)
    fitted = {}
    for channel in ENGINE_CHANNELS:
        fitted[channel], _ = fit_oe_model(channels, specs[channel], hidden[channel], cfg, restarts)
    return assemble_engine_model(fitted["R"], fitted["P"], fitted["mdot"], fitted["Op"])


def nrmse(measured, estimated) -> float:
    """RMSE over the measured range, in percent."""
    measured = np.asarray(measured, dtype=float)
    span = float(measured.max() - measured.min())
    rmse = float(np.sqrt(np.mean((measured - np.asarray(estimated, dtype=float)) ** 2)))
    return 100.0 * rmse / span if span > 0 else float("inf")


def validate_engine_model(model: EngineModel, data) -> Dict[str, float]:
    """NRMSE per channel of the composite simulation, after the init window."""
    channels = _channels(data)
    m = model.init_length
    sim = simulate_engine_model(model, channels["T"], {c: channels[c][:m] for c in ENGINE_CHANNELS})
    return {c: nrmse(channels[c][m:], sim[c][m:]) for c in ENGINE_CHANNELS}


def save_engine_model(model: EngineModel, directory, header=None):
    """Write one YAML document per sub-model plus ``manifest.yaml``."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for channel, sub in model.submodels().items():
        name = f"{ROLES[channel]}.yaml"
        with open(os.path.join(directory, name), "w") as fh:
            yaml.safe_dump({**(header or {}), **sub.to_dict()}, fh, sort_keys=False)
        files[ROLES[channel]] = name
    manifest = {
        **(header or {}),
        "submodels": files,
        "wiring": {ROLES[c]: sorted(WIRING[c]) for c in ENGINE_CHANNELS},
        "delay": model.delay,
    }
    with open(os.path.join(directory, "manifest.yaml"), "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)


def load_engine_model(directory) -> EngineModel:
    path = os.path.join(directory, "manifest.yaml")
    try:
        with open(path) as fh:
            manifest = yaml.safe_load(fh)
        subs = {}
        for role, name in manifest["submodels"].items():
            with open(os.path.join(directory, name)) as fh:
                subs[role] = SubModel.from_dict(yaml.safe_load(fh))
    except (OSError, KeyError, TypeError, yaml.YAMLError) as exc:
        raise exceptions.CompositionError(f"Cannot read engine model from {directory}: {exc}")
    model = assemble_engine_model(subs["speed"], subs["pressure"], subs["airflow"], subs["opacity"])
    if int(manifest.get("delay", model.delay)) != model.delay:
        raise exceptions.CompositionError("Manifest delay does not match the opacity model")
    return model
