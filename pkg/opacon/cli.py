"""
Command-line front end.

Commands run the pipeline one stage at a time::

    opacon gen-data --out log.csv
    opacon identify --data log.csv --out model/
    opacon select --data log.csv --channel opacity --out fpe.csv
    opacon train-controller --model model/ --eta 0.2 --out ctrl-0.2/
    opacon simulate --model model/ --controller ctrl-0.2/ --out run-0.2.csv
    opacon report --runs run-0.csv --runs run-0.2.csv --out summary.csv

Exit codes: 0 success, 1 sweep monotonicity violated (``report``),
2 invalid input, 3 numerical fault.
"""

import dataclasses
import logging
import os

import click
import numpy as np
import pandas as pd
import yaml

from opacon import exceptions
from opacon.closed_loop import (
    METRICS,
    ModelTarget,
    PlantTarget,
    build_profile,
    check_sweep,
    load_run,
    run_closed_loop,
    save_run,
    steady_opacity,
)
from opacon.config import load_config, override
from opacon.engine_surrogate import generate_excitation, load_log, save_log, simulate_plant
from opacon.neurocontrol import CriterionWeights, load_controller, save_controller, train_controller
from opacon.plotting import plot_runs
from opacon.sysid import (
    ENGINE_CHANNELS,
    ROLES,
    identify_engine,
    load_engine_model,
    order_grid,
    save_engine_model,
    select_structure,
    validate_engine_model,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CHANNEL_BY_ROLE = {role: channel for channel, role in ROLES.items()}
CONTROLLER_FILE = "controller.yaml"


class PipelineGroup(click.Group):
    """Maps package errors onto exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except exceptions.ValidationError as exc:
            click.echo(f"Error: {exc}", err=True)
            ctx.exit(2)
        except exceptions.NumericalFault as exc:
            click.echo(f"Numerical fault: {exc}", err=True)
            ctx.exit(3)


def _csv_header(config, **extra):
    return {"config-digest": config.digest, **extra}


def _yaml_header(config, **extra):
    return {"config_digest": config.digest, **extra}


def _profile(config, model=None):
    p = config.profile
    opacity_map = None
    if p.mode == "steady-map":
        if model is None:
            raise exceptions.ProfileError("steady-map mode needs an engine model (--model)")
        levels = {level for _, level in p.steps}
        opacity_map = steady_opacity(model, levels, config.controller.training.settle_steps)
    return build_profile(p.steps, p.mode, config.plant.ts, p.duration, p.ceiling, opacity_map)


@click.group(cls=PipelineGroup)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="YAML run configuration (default: the packaged configuration).",
)
@click.option("--verbose", "-v", is_flag=True, help="Log debug messages.")
@click.pass_context
def main(ctx, config_path, verbose):
    """Neural modelling and opacity-constrained speed control of a diesel engine."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)
    ctx.obj = load_config(config_path)


@main.command("gen-data")
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Output log CSV.")
@click.option("--samples", "-n", type=int, default=None, help="Override the excitation length.")
@click.option("--seed", type=int, default=None, help="Override the excitation and noise seeds.")
@click.pass_obj
def gen_data(config, out, samples, seed):
    """Excite the surrogate plant and write the measured log."""
    config = override(config, "excitation", n_samples=samples, seed=seed)
    config = override(config, "plant", seed=seed)
    e = config.excitation
    T_seq = generate_excitation(
        e.kind, e.n_samples, e.seed, e.low, e.high, e.n_levels, e.min_hold, e.max_hold
    )
    log = simulate_plant(config.plant, T_seq)
    save_log(log, out, _csv_header(config, seed=config.plant.seed))

    click.echo(f"Wrote {len(log)} samples to {out}")
    for name, values in log.channels().items():
        click.echo(f"  {name:>6}: [{values.min():10.3f}, {values.max():10.3f}]")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="Log CSV.")
@click.option(
    "--validation",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Separate validation log (default: hold out the end of --data).",
)
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Model directory.")
@click.option("--restarts", type=int, default=None, help="Override the restart count.")
@click.pass_obj
def identify(config, data, validation, out, restarts):
    """Fit the four output-error sub-models and validate the composite model."""
    config = override(config, "identification", restarts=restarts)
    ident = config.identification
    log = load_log(data)
    if validation is None:
        train, test = log.split(ident.train_fraction)
    else:
        train, test = log, load_log(validation)

    specs, hidden = ident.specs()
    model = identify_engine(train, specs, hidden, ident.lm, ident.restarts)
    save_engine_model(model, out, _yaml_header(config))

    scores = validate_engine_model(model, test)
    table = pd.DataFrame(
        [{"channel": c, "nrmse_percent": scores[c]} for c in ENGINE_CHANNELS],
        columns=["channel", "nrmse_percent"],
    )
    path = os.path.join(out, "validation.csv")
    with open(path, "w", newline="") as fh:
        for key, value in _csv_header(config).items():
            fh.write(f"# {key}: {value}\n")
        table.to_csv(fh, index=False, float_format="%.6g")

    click.echo(f"Wrote engine model to {out}")
    for channel in ENGINE_CHANNELS:
        click.echo(f"  {channel:>4} NRMSE: {scores[channel]:7.2f} %")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="Log CSV.")
@click.option("--channel", required=True, type=click.Choice(sorted(CHANNEL_BY_ROLE)), help="Sub-model to select.")
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="FPE report CSV.")
@click.pass_obj
def select(config, data, channel, out):
    """Two-phase FPE search over lag orders and hidden units."""
    sel = config.selection
    log = load_log(data)
    specs, _ = config.identification.specs()
    orders = order_grid(specs[CHANNEL_BY_ROLE[channel]], sel.output_orders, sel.input_orders)
    report, _ = select_structure(
        log, orders, sel.nodes, config.identification.lm, sel.phase1_nodes, config.identification.restarts
    )
    report.save(out, _csv_header(config, channel=channel))
    best = report.selected
    click.echo(f"Selected {best.spec.label} with {best.n_hidden} hidden units (FPE {best.fpe:.6g})")


@main.command("train-controller")
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--eta", type=float, default=0.0, show_default=True, help="Opacity weight eta_op.")
@click.option("--epochs", type=int, default=None, help="Override the epoch count.")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Controller directory.")
@click.pass_obj
def train_controller_cmd(config, model_dir, eta, epochs, out):
    """Train the controller through the identified engine model."""
    config = override(config, "controller", training=_training(config, epochs))
    model = load_engine_model(model_dir)
    profile = _profile(config, model)
    controller, epoch_log = train_controller(
        model, profile, CriterionWeights(1.0, eta), config.controller.training
    )

    os.makedirs(out, exist_ok=True)
    save_controller(controller, os.path.join(out, CONTROLLER_FILE), _yaml_header(config, eta_op=eta))
    path = os.path.join(out, "training.csv")
    with open(path, "w", newline="") as fh:
        for key, value in _csv_header(config, **{"eta-op": eta}).items():
            fh.write(f"# {key}: {value}\n")
        pd.DataFrame(epoch_log, columns=["epoch", "J", "J_train", "rmse_speed", "max_opacity", "eta_op"]).to_csv(
            fh, index=False, float_format="%.17g"
        )
    click.echo(f"Wrote controller to {out} after {len(epoch_log)} epochs")


def _training(config, epochs):
    training = config.controller.training
    return training if epochs is None else dataclasses.replace(training, epochs=epochs)


def _controller_file(path):
    return os.path.join(path, CONTROLLER_FILE) if os.path.isdir(path) else path


def _controller_eta(path):
    with open(path) as fh:
        eta = (yaml.safe_load(fh) or {}).get("eta_op")
    return None if eta is None else float(eta)


@main.command()
@click.option("--model", "model_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--plant", is_flag=True, help="Run against the surrogate plant instead of the model.")
@click.option("--controller", "controller_path", required=True, type=click.Path(exists=True))
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Run CSV.")
@click.option("--metrics", "metrics_path", type=click.Path(dir_okay=False), default=None,
              help="Metrics JSON (default: next to --out).")
@click.option("--plot", "plot_prefix", default=None, help="Write speed/opacity figures with this prefix.")
@click.pass_obj
def simulate(config, model_dir, plant, controller_path, out, metrics_path, plot_prefix):
    """Run a trained controller in closed loop."""
    if not plant and model_dir is None:
        raise exceptions.ConfigError("simulate needs --model or --plant")
    model = load_engine_model(model_dir) if model_dir else None
    path = _controller_file(controller_path)
    controller = load_controller(path)
    profile = _profile(config, model)

    if plant:
        target = PlantTarget(config.plant)
    else:
        target = ModelTarget(model, config.plant.ts, config.controller.training.settle_steps)
    result = run_closed_loop(target, controller, profile, eta_op=_controller_eta(path))

    metrics_path = metrics_path or os.path.splitext(out)[0] + ".json"
    save_run(result, out, _csv_header(config, target="plant" if plant else "model"), metrics_path)
    if plot_prefix:
        plot_runs([result], plot_prefix)
    click.echo(f"Wrote run to {out} and metrics to {metrics_path}")
    for name in METRICS:
        click.echo(f"  {name:>15}: {result.metrics[name]:.4f}")


@main.command()
@click.option("--runs", "run_paths", required=True, multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Summary CSV.")
@click.option("--plot", "plot_prefix", default=None, help="Write sweep figures with this prefix.")
@click.pass_context
def report(ctx, run_paths, out, plot_prefix):
    """Tabulate run metrics across opacity weights and check the sweep trend."""
    config = ctx.obj
    runs = [load_run(path) for path in run_paths]
    table = pd.DataFrame(
        [{"run": path, "eta_op": run.eta_op, **run.metrics} for path, run in zip(run_paths, runs)],
        columns=["run", "eta_op"] + list(METRICS),
    ).sort_values("eta_op", kind="stable")
    with open(out, "w", newline="") as fh:
        for key, value in _csv_header(config).items():
            fh.write(f"# {key}: {value}\n")
        table.to_csv(fh, index=False, float_format="%.6g")
    if plot_prefix:
        plot_runs(sorted(runs, key=lambda r: np.inf if r.eta_op is None else r.eta_op), plot_prefix)

    click.echo(table.drop(columns="run").to_string(index=False))
    violations = check_sweep([(run.eta_op, run.metrics) for run in runs if run.eta_op is not None])
    for message in violations:
        click.echo(f"Sweep violation: {message}", err=True)
    if violations:
        ctx.exit(1)
