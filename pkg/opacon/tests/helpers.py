import numpy as np

from opacon.neural_core import Mlp
from opacon.sysid import DEFAULT_SPECS, ChannelScaler, SubModel, assemble_engine_model

EPS = 1e-3
H = 1e-5

SCALERS = {
    "T": ChannelScaler(50.0, 15.0),
    "R": ChannelScaler(2000.0, 500.0),
    "P": ChannelScaler(180.0, 30.0),
    "mdot": ChannelScaler(6.0, 2.0),
    "Op": ChannelScaler(20.0, 10.0),
}


def central_difference(f, x, h=H):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def linear_net(coeffs, bias=0.0, eps=EPS):
    """One-unit network whose output is ``coeffs . x + bias`` up to O(eps^2)."""
    coeffs = np.asarray(coeffs, dtype=float)
    weights = np.concatenate([eps * coeffs, [0.0, 4.0 / eps, -2.0 / eps + bias]])
    return Mlp(coeffs.size, 1, weights)


def linear_submodel(channel, coeffs):
    spec = DEFAULT_SPECS[channel]
    names = [channel] + [c for c, _ in spec.inputs]
    return SubModel(linear_net(coeffs), spec, {n: SCALERS[n] for n in names})


def linear_engine_model(
    speed=(0.9, 0.0, 0.1),
    pressure=(0.5, 0.5),
    airflow=(0.5, 0.25, 0.25),
    opacity=(0.5, 0.5, 0.0, 0.0),
):
    """
    Engine model that is linear in normalized units.

    With the default coefficients every channel settles at the normalized
    pump position, so ``T = 50`` gives ``R = 2000`` and ``Op = 20``.
    """

    return assemble_engine_model(
        linear_submodel("R", speed),
        linear_submodel("P", pressure),
        linear_submodel("mdot", airflow),
        linear_submodel("Op", opacity),
    )


def settled_history(model, T=50.0):
    """Histories at the fixed point of :func:`linear_engine_model` for ``T``."""
    m = model.init_length
    tn = SCALERS["T"].normalize(T)
    history = {c: [float(SCALERS[c].denormalize(tn))] * m for c in ("R", "P", "mdot", "Op")}
    history["T"] = [float(T)] * m
    return history
