"""
One-hidden-layer perceptron and batch Levenberg-Marquardt.

Every network in the package (the engine sub-models and the controller) is
an :class:`Mlp`: logistic sigmoid hidden units and a single linear output.
The weight vector is laid out as

    [ W_h (n_hidden x n_in, row-major) | b_h (n_hidden) | w_out (n_hidden) | b_out ]

so ``p = n_hidden * (n_in + 1) + (n_hidden + 1)``.

:func:`lm_train` minimises ``r(theta)^T r(theta)`` for any residual oracle;
the output-error identification in :mod:`opacon.sysid` plugs its simulated
residuals and forward sensitivities into it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np
import scipy.linalg
from scipy.special import expit

from opacon import exceptions

logger = logging.getLogger(__name__)


def n_params(n_in: int, n_hidden: int) -> int:
    return n_hidden * (n_in + 1) + (n_hidden + 1)


@dataclass(frozen=True)
class Mlp:
    """
    Single-output perceptron with one sigmoidal hidden layer.

    Attributes:
        n_in (int): Number of inputs.
        n_hidden (int): Number of hidden units.
        weights (ndarray): Flat weight vector of length ``p``.
    """

    n_in: int
    n_hidden: int
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.n_in < 1 or self.n_hidden < 1:
            raise exceptions.InputShapeError(
                f"Mlp needs at least one input and one hidden unit, got {self.n_in}/{self.n_hidden}"
            )

        weights = np.array(self.weights, dtype=float).reshape(-1)
        if weights.size != n_params(self.n_in, self.n_hidden):
            raise exceptions.InputShapeError(
                f"Expected {n_params(self.n_in, self.n_hidden)} weights, got {weights.size}"
            )
        if not np.all(np.isfinite(weights)):
            raise exceptions.NonFiniteWeightsError("Mlp weights must be finite")

        weights.flags.writeable = False
        object.__setattr__(self, "weights", weights)

    @classmethod
    def init_random(cls, n_in, n_hidden, seed=0, scale=0.5):
        """Uniform weights in [-scale, scale] from a seeded generator."""
        rng = np.random.default_rng(seed)
        weights = rng.uniform(-scale, scale, size=n_params(n_in, n_hidden))
        return cls(n_in, n_hidden, weights)

    @classmethod
    def zeros(cls, n_in, n_hidden):
        return cls(n_in, n_hidden, np.zeros(n_params(n_in, n_hidden)))

    @property
    def p(self) -> int:
        return self.weights.size

    @property
    def hidden_weights(self) -> np.ndarray:
        return self.weights[: self.n_hidden * self.n_in].reshape(
            self.n_hidden, self.n_in
        )

    @property
    def hidden_bias(self) -> np.ndarray:
        start = self.n_hidden * self.n_in
        return self.weights[start : start + self.n_hidden]

    @property
    def output_weights(self) -> np.ndarray:
        start = self.n_hidden * (self.n_in + 1)
        return self.weights[start : start + self.n_hidden]

    @property
    def output_bias(self) -> float:
        return float(self.weights[-1])

    def with_weights(self, weights) -> "Mlp":
        return Mlp(self.n_in, self.n_hidden, weights)

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_in,):
            raise exceptions.InputShapeError(
                f"Expected input of length {self.n_in}, got shape {x.shape}"
            )
        return x

    def hidden(self, x) -> np.ndarray:
        """Hidden-layer activations for input ``x``."""
        x = self._check_input(x)
        return expit(self.hidden_weights @ x + self.hidden_bias)

    def forward(self, x) -> float:
        """
        Evaluate the network.

        Args:
            x (array_like): Input vector of length ``n_in``.

        Returns:
            float: ``w_out . sigmoid(W_h x + b_h) + b_out``.

        Raises:
            InputShapeError: If ``x`` has the wrong length.
        """

        h = self.hidden(x)
        return float(self.output_weights @ h + self.output_bias)

    def input_jacobian(self, x) -> np.ndarray:
        """Analytic d(output)/dx, length ``n_in``."""
        h = self.hidden(x)
        return (self.output_weights * h * (1.0 - h)) @ self.hidden_weights

    def weight_jacobian(self, x) -> np.ndarray:
        """Analytic d(output)/d(weights), laid out like :attr:`weights`."""
        x = self._check_input(x)
        h = expit(self.hidden_weights @ x + self.hidden_bias)
        delta = self.output_weights * h * (1.0 - h)
        return np.concatenate([np.outer(delta, x).ravel(), delta, h, [1.0]])

    def evaluate(self, x):
        """Output, input Jacobian and weight Jacobian from one hidden-layer pass."""
        x = self._check_input(x)
        h = expit(self.hidden_weights @ x + self.hidden_bias)
        delta = self.output_weights * h * (1.0 - h)
        y = float(self.output_weights @ h + self.output_bias)
        dtheta = np.concatenate([np.outer(delta, x).ravel(), delta, h, [1.0]])
        return y, delta @ self.hidden_weights, dtheta

    def _check_batch(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise exceptions.InputShapeError(
                f"Expected a batch of shape (N, {self.n_in}), got {X.shape}"
            )
        return X

    def forward_batch(self, X) -> np.ndarray:
        """Outputs for every row of ``X``."""
        X = self._check_batch(X)
        H = expit(X @ self.hidden_weights.T + self.hidden_bias)
        return H @ self.output_weights + self.output_bias

    def weight_jacobian_batch(self, X) -> np.ndarray:
        """Rows of d(output)/d(weights) for every row of ``X``, shape (N, p)."""
        X = self._check_batch(X)
        H = expit(X @ self.hidden_weights.T + self.hidden_bias)
        delta = H * (1.0 - H) * self.output_weights
        outer = (delta[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)
        return np.hstack([outer, delta, H, np.ones((X.shape[0], 1))])

    def to_dict(self) -> dict:
        return {
            "n_in": self.n_in,
            "n_hidden": self.n_hidden,
            "weights": [float(w) for w in self.weights],
        }

    @classmethod
    def from_dict(cls, data) -> "Mlp":
        try:
            return cls(int(data["n_in"]), int(data["n_hidden"]), data["weights"])
        except (KeyError, TypeError, ValueError) as exc:
            raise exceptions.InputShapeError(f"Malformed network document: {exc}")


@dataclass(frozen=True)
class LmConfig:
    """
    Levenberg-Marquardt settings.

    Attributes:
        damping (float): Initial damping lambda_0.
        increase (float): Factor applied to lambda on a rejected step.
        decrease (float): Factor applied to lambda on an accepted step.
        max_iter (int): Maximum number of iterations (accepted or rejected).
        tol (float): Stop once an accepted step lowers SSE by less than this
            relative amount.
        seed (int): Seed for weight initialization.
        max_damping (float): Give up once lambda grows past this value.
    """

    damping: float = 1e-2
    increase: float = 10.0
    decrease: float = 0.1
    max_iter: int = 500
    tol: float = 1e-9
    seed: int = 0
    max_damping: float = 1e10

    def __post_init__(self):
        if not self.damping > 0:
            raise exceptions.ConfigError("LM damping must be positive")
        if not self.increase > 1:
            raise exceptions.ConfigError("LM damping increase factor must be > 1")
        if not 0 < self.decrease < 1:
            raise exceptions.ConfigError("LM damping decrease factor must be in (0, 1)")
        if not self.tol > 0:
            raise exceptions.ConfigError("LM tolerance must be positive")
        if self.max_iter < 0:
            raise exceptions.ConfigError("LM max_iter cannot be negative")


@dataclass
class LmResult:
    theta: np.ndarray
    sse: float
    history: List[float]
    iterations: int
    converged: bool


def _sse(r):
    return float(r @ r)


def lm_train(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    theta0,
    cfg: LmConfig = LmConfig(),
) -> LmResult:
    """
    Minimise ``r(theta)^T r(theta)`` by batch Levenberg-Marquardt.

    Each step solves ``(J^T J + lambda I) d = -J^T r``. A step is accepted
    when it lowers the SSE, after which lambda is multiplied by
    ``cfg.decrease``; otherwise lambda is multiplied by ``cfg.increase``.

    Args:
        residual: Returns the residual vector at ``theta``.
        jacobian: Returns ``dr/dtheta`` (rows = residuals) at ``theta``.
        theta0 (array_like): Starting point.
        cfg (LmConfig): Optimizer settings.

    Returns:
        LmResult: Best parameters, their SSE and the SSE of every accepted
        iterate (starting with ``theta0``).

    Raises:
        TrainingInitError: If the residuals at ``theta0`` are not finite.
        SingularSystemError: If the damped normal equations cannot be solved.
    """

    theta = np.array(theta0, dtype=float)
    r = np.asarray(residual(theta), dtype=float)
    sse = _sse(r)
    if not np.isfinite(sse):
        raise exceptions.TrainingInitError("Residuals are not finite at the starting point")

    history = [sse]
    lam = cfg.damping
    converged = False
    iterations = 0
    J = None

    while iterations < cfg.max_iter:
        if sse == 0.0:
            converged = True
            break
        if J is None:
            J = np.asarray(jacobian(theta), dtype=float)
            if J.shape != (r.size, theta.size):
                raise exceptions.InputShapeError(
                    f"Jacobian shape {J.shape} does not match ({r.size}, {theta.size})"
                )
            JtJ = J.T @ J
            g = J.T @ r
        iterations += 1

        A = JtJ + lam * np.eye(theta.size)
        try:
            step = scipy.linalg.solve(A, -g, assume_a="sym")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise exceptions.SingularSystemError(f"Damped LM system is singular: {exc}")

        candidate = theta + step
        r_new = np.asarray(residual(candidate), dtype=float)
        sse_new = _sse(r_new)

        if np.isfinite(sse_new) and sse_new < sse:
            decrease = (sse - sse_new) / sse
            theta, r, sse = candidate, r_new, sse_new
            history.append(sse)
            J = None
            lam = max(lam * cfg.decrease, 1e-15)
            logger.debug("LM iter %d accepted: sse=%.6g lambda=%.1e", iterations, sse, lam)
            if decrease < cfg.tol:
                converged = True
                break
        else:
            lam *= cfg.increase
            logger.debug("LM iter %d rejected: lambda=%.1e", iterations, lam)
            if lam > cfg.max_damping:
                converged = True
                break

    return LmResult(theta, sse, history, iterations, converged)
