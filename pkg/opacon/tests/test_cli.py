import os
import tempfile
from unittest import TestCase

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from opacon.cli import main
from opacon.closed_loop import RunResult, build_profile, compute_metrics, save_run
from opacon.engine_surrogate import PlantParams, load_log, save_log, simulate_plant
from opacon.neurocontrol import Controller, save_controller

from .helpers import linear_engine_model


def write_run(path, eta, offset, opacity):
    profile = build_profile(((0.0, 1500.0), (3.0, 2500.0)), duration=6.0)
    n = len(profile)
    frame = pd.DataFrame(
        {
            "k": np.arange(n),
            "t": profile.t,
            "U": np.full(n, 50.0),
            "R_ref": profile.r_ref,
            "R": profile.r_ref + offset,
            "P": np.full(n, 180.0),
            "mdot": np.full(n, 6.0),
            "Op_ref": profile.op_ref,
            "Op": np.full(n, opacity),
        }
    )
    save_run(RunResult(frame, compute_metrics(frame, profile), eta), path)


class CliTest(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.runner = CliRunner()

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def test_gen_data_writes_log(self):
        out = self.path("log.csv")
        result = self.runner.invoke(main, ["gen-data", "--out", out, "--samples", "200", "--seed", "3"])

        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(len(load_log(out)), 200)
        with open(out) as fh:
            first, second = fh.readline().strip(), fh.readline().strip()
        self.assertRegex(first, r"^# config-digest: [0-9a-f]{16}$")
        self.assertEqual(second, "# seed: 3")

    def test_gen_data_is_reproducible(self):
        args = ["gen-data", "--samples", "150", "--seed", "5", "--out"]
        self.runner.invoke(main, args + [self.path("a.csv")])
        self.runner.invoke(main, args + [self.path("b.csv")])

        with open(self.path("a.csv")) as a, open(self.path("b.csv")) as b:
            self.assertEqual(a.read(), b.read())

    def test_invalid_excitation_exits_with_input_error(self):
        result = self.runner.invoke(main, ["gen-data", "--out", self.path("short.csv"), "--samples", "20"])

        self.assertEqual(result.exit_code, 2)

    def test_identify_on_too_short_log_exits_with_input_error(self):
        data = self.path("tiny.csv")
        save_log(simulate_plant(PlantParams(seed=2), np.full(10, 50.0)), data)
        result = self.runner.invoke(main, ["identify", "--data", data, "--out", self.path("tiny-model")])

        self.assertEqual(result.exit_code, 2)

    def test_simulate_needs_a_target(self):
        path = self.path("controller.yaml")
        save_controller(Controller.for_model(linear_engine_model(), n_hidden=2), path)
        result = self.runner.invoke(main, ["simulate", "--controller", path, "--out", self.path("run.csv")])

        self.assertEqual(result.exit_code, 2)

    def test_report_on_monotone_sweep(self):
        write_run(self.path("run-0.csv"), 0.0, 10.0, 30.0)
        write_run(self.path("run-0.8.csv"), 0.8, 50.0, 10.0)
        out = self.path("summary.csv")
        result = self.runner.invoke(
            main, ["report", "--runs", self.path("run-0.8.csv"), "--runs", self.path("run-0.csv"), "--out", out]
        )

        self.assertEqual(result.exit_code, 0, result.output)
        summary = pd.read_csv(out, comment="#")
        self.assertEqual(summary["eta_op"].tolist(), [0.0, 0.8])
        self.assertEqual(summary["max_opacity"].tolist(), [30.0, 10.0])

    def test_report_flags_sweep_violation(self):
        write_run(self.path("bad-0.csv"), 0.0, 50.0, 10.0)
        write_run(self.path("bad-0.8.csv"), 0.8, 10.0, 30.0)
        result = self.runner.invoke(
            main,
            ["report", "--runs", self.path("bad-0.csv"), "--runs", self.path("bad-0.8.csv"), "--out", self.path("s.csv")],
        )

        self.assertEqual(result.exit_code, 1)

    def test_missing_run_file_is_a_usage_error(self):
        result = self.runner.invoke(main, ["report", "--runs", self.path("nope.csv"), "--out", self.path("x.csv")])

        self.assertEqual(result.exit_code, 2)


@pytest.mark.slow
class PipelineTest(TestCase):
    def test_full_pipeline_on_default_config(self):
        runner = CliRunner()
        with tempfile.TemporaryDirectory() as tmp:

            def run(*args):
                result = runner.invoke(main, list(args))
                self.assertEqual(result.exit_code, 0, f"{args[0]}: {result.output}")

            def at(name):
                return os.path.join(tmp, name)

            run("gen-data", "--out", at("log.csv"))
            run("identify", "--data", at("log.csv"), "--out", at("model"))
            self.assertTrue(os.path.exists(at("model/manifest.yaml")))
            self.assertTrue(os.path.exists(at("model/validation.csv")))

            runs = []
            for eta in ("0", "0.2", "0.8"):
                ctrl = at(f"ctrl-{eta}")
                run("train-controller", "--model", at("model"), "--eta", eta, "--out", ctrl)
                self.assertTrue(os.path.exists(os.path.join(ctrl, "training.csv")))
                runs.append(at(f"run-{eta}.csv"))
                run("simulate", "--model", at("model"), "--controller", ctrl, "--out", runs[-1])
                self.assertTrue(os.path.exists(at(f"run-{eta}.json")))

            run("report", *(arg for path in runs for arg in ("--runs", path)), "--out", at("summary.csv"))
            summary = pd.read_csv(at("summary.csv"), comment="#")
            self.assertEqual(summary["eta_op"].tolist(), [0.0, 0.2, 0.8])
