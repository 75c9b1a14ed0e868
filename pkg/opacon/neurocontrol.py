"""
Specialized training of the neural speed/opacity controller.

The controller is an :class:`~opacon.neural_core.Mlp` whose raw output is
squashed onto the pump range by ``U = 100 * sigmoid(raw)``. It reads::

    R_ref(k+1), R(k), R(k-1), Op_ref(k+d), Op(k+d-1)

and is trained through the fixed neural engine model: the plant Jacobian
the tracking errors need is replaced by the model's partial derivative with
respect to the pump position, and the weights follow a recursive
Gauss-Newton update whose covariance ``P`` is kept by the matrix inversion
lemma (one rank-one step per criterion term).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Tuple

import numpy as np
import yaml
from scipy.special import expit

from opacon import exceptions
from opacon.neural_core import Mlp
from opacon.sysid import ChannelScaler, EngineModel, EngineRollout, find_operating_point, settle

if TYPE_CHECKING:
    from opacon.closed_loop import ReferenceProfile

logger = logging.getLogger(__name__)

CONTROLLER_INPUTS = ("R_ref(k+1)", "R(k)", "R(k-1)", "Op_ref(k+d)", "Op(k+d-1)")


@dataclass(frozen=True)
class Controller:
    """
    Neural controller with a logistic actuator saturation.

    Attributes:
        net (Mlp): Five-input network on normalized signals.
        delay (int): Opacity delay ``d`` of the engine model it was built for.
        r_scaler (ChannelScaler): Speed normalization.
        op_scaler (ChannelScaler): Opacity normalization.
        u_max (float): Upper pump limit, in percent.
    """

    net: Mlp
    delay: int
    r_scaler: ChannelScaler
    op_scaler: ChannelScaler
    u_max: float = 100.0

    def __post_init__(self):
        if self.net.n_in != len(CONTROLLER_INPUTS):
            raise exceptions.InputShapeError(
                f"Controller network needs {len(CONTROLLER_INPUTS)} inputs, got {self.net.n_in}"
            )
        if self.delay < 1:
            raise exceptions.ConfigError(f"Controller delay must be at least 1, got {self.delay}")

    @classmethod
    def for_model(cls, model: EngineModel, n_hidden=6, seed=0, scale=0.1) -> "Controller":
        net = Mlp.init_random(len(CONTROLLER_INPUTS), n_hidden, seed=seed, scale=scale)
        return cls(net, model.delay, model.scaler("R"), model.scaler("Op"))

    def with_weights(self, weights) -> "Controller":
        return Controller(self.net.with_weights(weights), self.delay, self.r_scaler, self.op_scaler, self.u_max)

    @property
    def weights(self) -> np.ndarray:
        return self.net.weights

    def features(self, r_ref_next, r, r_prev, op_ref_ahead, op_ahead) -> np.ndarray:
        """Normalized network input from engineering-unit signals."""
        r_in = self.r_scaler.normalize([r_ref_next, r, r_prev])
        op_in = self.op_scaler.normalize([op_ref_ahead, op_ahead])
        return np.concatenate([r_in, op_in])

    def forward(self, x) -> float:
        return self.u_max * float(expit(self.net.forward(x)))

    def weight_jacobian(self, x) -> np.ndarray:
        """dU/dW through the saturation."""
        s = float(expit(self.net.forward(x)))
        return self.u_max * s * (1.0 - s) * self.net.weight_jacobian(x)

    def to_dict(self) -> dict:
        return {
            "network": self.net.to_dict(),
            "saturation": {"kind": "logistic", "u_min": 0.0, "u_max": self.u_max},
            "inputs": list(CONTROLLER_INPUTS),
            "delay": self.delay,
            "normalization": {
                "R": {"mean": self.r_scaler.mean, "scale": self.r_scaler.scale},
                "Op": {"mean": self.op_scaler.mean, "scale": self.op_scaler.scale},
            },
        }

    @classmethod
    def from_dict(cls, data) -> "Controller":
        try:
            norm = data["normalization"]
            return cls(
                Mlp.from_dict(data["network"]),
                int(data["delay"]),
                ChannelScaler(float(norm["R"]["mean"]), float(norm["R"]["scale"])),
                ChannelScaler(float(norm["Op"]["mean"]), float(norm["Op"]["scale"])),
                float(data.get("saturation", {}).get("u_max", 100.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise exceptions.CompositionError(f"Malformed controller document: {exc}")


def save_controller(controller: Controller, path, header=None):
    with open(path, "w") as fh:
        yaml.safe_dump({**(header or {}), **controller.to_dict()}, fh, sort_keys=False)


def load_controller(path) -> Controller:
    try:
        with open(path) as fh:
            return Controller.from_dict(yaml.safe_load(fh))
    except (OSError, yaml.YAMLError) as exc:
        raise exceptions.CompositionError(f"Cannot read controller from {path}: {exc}")


@dataclass(frozen=True)
class RlsState:
    """
    Weights and inverse-Hessian estimate of the recursive Gauss-Newton update.

    Attributes:
        weights (ndarray): Controller weight vector ``W``.
        P (ndarray): ``n x n`` symmetric positive definite matrix.
        delta (float): Scale of the initial ``P = delta * I``.
    """

    weights: np.ndarray
    P: np.ndarray = field(repr=False)
    delta: float = 1000.0

    @classmethod
    def initial(cls, weights, delta=1000.0) -> "RlsState":
        if not delta > 0:
            raise exceptions.ConfigError(f"RLS initial scale must be positive, got {delta}")
        weights = np.array(weights, dtype=float)
        return cls(weights, delta * np.eye(weights.size), delta)

    @property
    def n(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class CriterionWeights:
    eta_y: float = 1.0
    eta_z: float = 0.0

    def __post_init__(self):
        if not self.eta_y > 0:
            raise exceptions.ConfigError(f"Speed weight must be positive, got {self.eta_y}")
        if not self.eta_z >= 0:
            raise exceptions.ConfigError(f"Opacity weight cannot be negative, got {self.eta_z}")


@dataclass(frozen=True)
class SensitivityPair:
    psi_y: np.ndarray
    psi_z: np.ndarray
    e_y: float
    e_z: float


def _lemma(P, psi):
    Pp = P @ psi
    return P - np.outer(Pp, Pp) / (1.0 + psi @ Pp)


def _symmetrize(P):
    return (P + P.T) / 2.0


def _check_stream(state: RlsState, *vectors):
    for v in vectors:
        if v.shape != (state.n,):
            raise exceptions.InputShapeError(f"Sensitivity of shape {v.shape}, expected ({state.n},)")
        if not np.all(np.isfinite(v)):
            raise exceptions.RlsUpdateError("Sensitivity vector is not finite")


def _finish(state, P, step):
    weights = state.weights - step
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(weights))):
        raise exceptions.RlsUpdateError("Recursive update produced non-finite values")
    return RlsState(weights, P, state.delta)


def rls_update_single(state: RlsState, e_y, psi_y) -> RlsState:
    """
    One single-output recursive Gauss-Newton step.

    ``P_t = P - P psi psi^T P / (1 + psi^T P psi)`` (re-symmetrized), then
    ``W_t = W - P_t e psi``.

    Raises:
        RlsUpdateError: If the inputs or the result are not finite.
    """

    psi_y = np.asarray(psi_y, dtype=float)
    _check_stream(state, psi_y)
    if not math.isfinite(e_y):
        raise exceptions.RlsUpdateError(f"Tracking error is not finite: {e_y}")
    P = _symmetrize(_lemma(state.P, psi_y))
    return _finish(state, P, P @ (e_y * psi_y))


def rls_update_multi(state: RlsState, pair: SensitivityPair, weights: CriterionWeights) -> RlsState:
    """
    Two-term recursive Gauss-Newton step.

    The covariance takes one lemma step for ``psi_y`` and a second for
    ``psi_z``; the weighting factors enter the gradient term only::

        M   = lemma(P, psi_y)
        P_t = lemma(M, psi_z)
        W_t = W - P_t (eta_y e_y psi_y + eta_z e_z psi_z)

    Raises:
        RlsUpdateError: If the inputs or the result are not finite.
    """

    psi_y = np.asarray(pair.psi_y, dtype=float)
    psi_z = np.asarray(pair.psi_z, dtype=float)
    _check_stream(state, psi_y, psi_z)
    if not (math.isfinite(pair.e_y) and math.isfinite(pair.e_z)):
        raise exceptions.RlsUpdateError(f"Tracking errors are not finite: {pair.e_y}, {pair.e_z}")
    M = _lemma(state.P, psi_y)
    P = _symmetrize(_lemma(M, psi_z))
    gradient = weights.eta_y * pair.e_y * psi_y + weights.eta_z * pair.e_z * psi_z
    return _finish(state, P, P @ gradient)


def steepest_descent_update(state: RlsState, e_y, psi_y, mu=1.0) -> RlsState:
    """First-order update ``W - mu e psi``; ``P`` is left untouched."""
    psi_y = np.asarray(psi_y, dtype=float)
    _check_stream(state, psi_y)
    return _finish(state, state.P, mu * e_y * psi_y)


def controller_inputs(rollout: EngineRollout, controller: Controller, r_ref_next, op_ref_ahead) -> np.ndarray:
    """Controller features at the rollout's current sample."""
    now = rollout.now
    R, Op = rollout.series["R"], rollout.series["Op"]
    ahead = now + controller.delay - 1
    if len(R) <= now or len(Op) <= ahead or now < 1:
        raise exceptions.InsufficientHistoryError(
            f"Rollout at sample {now} lacks R({now}) or Op({ahead})"
        )
    return controller.features(r_ref_next, R[now], R[now - 1], op_ref_ahead, Op[ahead])


def sensitivity_psi(
    rollout: EngineRollout,
    controller: Controller,
    x,
    r_ref_next,
    op_ref_ahead,
    ceiling=False,
) -> SensitivityPair:
    """
    Tracking errors and their weight sensitivities after a pump push.

    Must be called right after ``T(k)`` (computed from features ``x``) has
    been pushed into ``rollout``. Errors are normalized by the model's
    channel scales::

        e_y = (R_ref(k+1) - R(k+1)) / s_R
        e_z = (Op_ref(k+d) - Op(k+d)) / s_Op
        psi = -(d model / d T(k)) / s * dU/dW

    In ceiling mode ``e_z = min(0, e_z)`` and ``psi_z`` is zero while the
    ceiling holds.

    Raises:
        InsufficientHistoryError: If the rollout has not produced the samples.
    """

    k = rollout.now - 1
    d = controller.delay
    R, Op = rollout.series["R"], rollout.series["Op"]
    if k < 0 or len(R) <= k + 1 or len(Op) <= k + d:
        raise exceptions.InsufficientHistoryError(f"Rollout lacks R({k + 1}) or Op({k + d})")

    dU = controller.weight_jacobian(x)
    r_scale = rollout.model.scaler("R").scale
    op_scale = rollout.model.scaler("Op").scale

    e_y = (r_ref_next - R[k + 1]) / r_scale
    e_z = (op_ref_ahead - Op[k + d]) / op_scale
    psi_y = -rollout.partial("R", k + 1, "T", k) / r_scale * dU
    psi_z = -rollout.partial("Op", k + d, "T", k) / op_scale * dU
    if ceiling:
        if e_z >= 0:
            e_z, psi_z = 0.0, np.zeros_like(dU)
    return SensitivityPair(psi_y, psi_z, float(e_y), float(e_z))


@dataclass(frozen=True)
class TrainingConfig:
    """
    Controller training settings.

    Attributes:
        n_hidden (int): Controller hidden units.
        epochs (int): Passes over the reference profile.
        delta (float): Initial covariance scale, reset every epoch.
        seed (int): Weight initialization seed.
        init_scale (float): Half-width of the uniform initial weights.
        settle_steps (int): Steps used to settle the model at the start.
    """

    n_hidden: int = 6
    epochs: int = 10
    delta: float = 1000.0
    seed: int = 0
    init_scale: float = 0.1
    settle_steps: int = 1500

    def __post_init__(self):
        if self.n_hidden < 1:
            raise exceptions.ConfigError("Controller needs at least one hidden unit")
        if self.epochs < 0:
            raise exceptions.ConfigError("Epoch count cannot be negative")
        if not self.delta > 0:
            raise exceptions.ConfigError("RLS initial scale must be positive")
        if self.settle_steps < 0:
            raise exceptions.ConfigError("Settling steps cannot be negative")


def start_rollout(model: EngineModel, r_start, settle_steps=1500) -> EngineRollout:
    """Rollout of ``model`` settled at the pump position giving ``r_start``."""
    T0 = find_operating_point(model, r_start, n_steps=settle_steps)
    logger.info("Starting from T=%.2f%% for R_ref=%.0f rpm", T0, r_start)
    return EngineRollout(model, settle(model, T0, settle_steps))


def _epoch(model, controller, profile, weights, cfg, start: EngineRollout, learn=True):
    ceiling = profile.mode == "ceiling"
    d = model.delay
    n = len(profile)
    rollout = start.copy()
    state = RlsState.initial(controller.weights, cfg.delta)
    J = 0.0
    speed_sq = []
    opacity = []

    for k in range(n - 1):
        r_ref_next = profile.r_ref[k + 1]
        op_ref_ahead = profile.op_ref[min(k + d, n - 1)]
        x = controller_inputs(rollout, controller, r_ref_next, op_ref_ahead)
        rollout.push(controller.forward(x))
        pair = sensitivity_psi(rollout, controller, x, r_ref_next, op_ref_ahead, ceiling)
        if learn:
            state = rls_update_multi(state, pair, weights)
            controller = controller.with_weights(state.weights)

        now = rollout.now
        J += 0.5 * (weights.eta_y * pair.e_y**2 + weights.eta_z * pair.e_z**2)
        speed_sq.append((r_ref_next - rollout.series["R"][now]) ** 2)
        opacity.append(rollout.series["Op"][now + d - 1])

    rmse = float(np.sqrt(np.mean(speed_sq))) if speed_sq else 0.0
    max_op = float(np.max(opacity)) if opacity else float("nan")
    return controller, J / max(n - 1, 1), rmse, max_op


def evaluate_controller(
    model: EngineModel,
    controller: Controller,
    profile: "ReferenceProfile",
    weights: CriterionWeights = CriterionWeights(),
    cfg: TrainingConfig = TrainingConfig(),
    start: EngineRollout = None,
) -> Dict[str, float]:
    """Criterion, speed RMSE and peak opacity of ``controller`` replayed with frozen weights."""
    start = start or start_rollout(model, profile.r_ref[0], cfg.settle_steps)
    _, J, rmse, max_op = _epoch(model, controller, profile, weights, cfg, start, learn=False)
    return {"J": J, "rmse_speed": rmse, "max_opacity": max_op}


def train_controller(
    model: EngineModel,
    profile: "ReferenceProfile",
    weights: CriterionWeights = CriterionWeights(),
    cfg: TrainingConfig = TrainingConfig(),
    controller: Controller = None,
) -> Tuple[Controller, List[Dict[str, float]]]:
    """
    Train a controller through the neural engine model.

    Every epoch resets ``P = delta * I`` and restarts the model from the
    state settled at ``R_ref(0)``, then steps the loop over the profile,
    applying :func:`rls_update_multi` after each pump push.

    After every epoch the controller is replayed once with frozen weights;
    ``J``, ``rmse_speed`` and ``max_opacity`` of the epoch row come from that
    replay and ``J_train`` is the criterion gathered while learning.

    Args:
        model (EngineModel): Identified engine model.
        profile (ReferenceProfile): Speed reference and opacity constraint.
        weights (CriterionWeights): Speed/opacity trade-off.
        cfg (TrainingConfig): Training settings.
        controller (Controller, optional): Starting controller; a seeded
            random one is built otherwise.

    Returns:
        tuple: The controller with the lowest frozen-weight criterion and
        one metrics row per epoch (``epoch, J, J_train, rmse_speed,
        max_opacity, eta_op``).

    Raises:
        CompositionError: If the controller delay differs from the model's.
        ControllerDivergedError: If an epoch criterion is not finite.
    """

    if controller is None:
        controller = Controller.for_model(model, cfg.n_hidden, cfg.seed, cfg.init_scale)
    if controller.delay != model.delay:
        raise exceptions.CompositionError(
            f"Controller delay {controller.delay} does not match model delay {model.delay}"
        )

    log: List[Dict[str, float]] = []
    if cfg.epochs == 0:
        return controller, log

    start = start_rollout(model, profile.r_ref[0], cfg.settle_steps)
    best, best_J = controller, math.inf
    for epoch in range(1, cfg.epochs + 1):
        try:
            controller, J_train, _, _ = _epoch(model, controller, profile, weights, cfg, start)
            frozen = evaluate_controller(model, controller, profile, weights, cfg, start)
        except (exceptions.SimulationFaultError, exceptions.RlsUpdateError) as exc:
            raise exceptions.ControllerDivergedError(f"Epoch {epoch} diverged: {exc}", epoch_log=log)
        row = {
            "epoch": epoch,
            "J": frozen["J"],
            "J_train": J_train,
            "rmse_speed": frozen["rmse_speed"],
            "max_opacity": frozen["max_opacity"],
            "eta_op": weights.eta_z,
        }
        log.append(row)
        J = frozen["J"]
        if not (math.isfinite(J) and math.isfinite(J_train)):
            raise exceptions.ControllerDivergedError(f"Criterion is not finite at epoch {epoch}", epoch_log=log)
        logger.info(
            "Epoch %d: J=%.6g rmse=%.1f rpm max Op=%.1f%%",
            epoch,
            J,
            frozen["rmse_speed"],
            frozen["max_opacity"],
        )
        if J < best_J:
            best, best_J = controller, J
    return best, log
