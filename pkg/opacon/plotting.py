"""Speed and opacity figures of closed-loop runs, drawn on the Agg backend."""

import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)


def _label(run):
    return "run" if run.eta_op is None else f"eta_op = {run.eta_op:g}"


def plot_runs(runs, out_prefix):
    """
    Speed and opacity against time, one line per run.

    Writes ``<out_prefix>_speed.png`` and ``<out_prefix>_opacity.png`` and
    returns their paths. The references are taken from the first run.
    """

    if not runs:
        return []
    reference = runs[0].frame
    paths = []
    for channel, ref, unit, suffix in (
        ("R", "R_ref", "rpm", "speed"),
        ("Op", "Op_ref", "%", "opacity"),
    ):
        fig, ax = plt.subplots(figsize=(9, 4))
        ax.plot(reference["t"], reference[ref], "k--", linewidth=1, label=ref)
        for run in runs:
            ax.plot(run.frame["t"], run.frame[channel], linewidth=1, label=_label(run))
        ax.set_xlabel("time [s]")
        ax.set_ylabel(f"{channel} [{unit}]")
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best")
        fig.tight_layout()
        path = f"{out_prefix}_{suffix}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        logger.info("Wrote %s", path)
        paths.append(path)
    return paths
