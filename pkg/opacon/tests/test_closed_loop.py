import json
import math
import os
import tempfile
from unittest import TestCase

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logit

from opacon import exceptions
from opacon.closed_loop import (
    RUN_COLUMNS,
    ModelTarget,
    Observation,
    PlantTarget,
    ReferenceProfile,
    build_profile,
    check_sweep,
    compute_metrics,
    load_run,
    run_closed_loop,
    save_run,
    steady_opacity,
    sweep_eta,
)
from opacon.engine_surrogate import PlantParams, generate_excitation, simulate_plant
from opacon.neural_core import LmConfig
from opacon.neurocontrol import Controller, TrainingConfig
from opacon.plotting import plot_runs
from opacon.sysid import identify_engine

from .helpers import SCALERS, linear_engine_model, linear_net


class LogitTarget:
    """Speed that follows ``2000 + 500 * logit(T / 100)`` one sample later."""

    ts = 0.1

    def __init__(self, fail_at=None):
        self.fail_at = fail_at

    def reset(self, r_start, n_samples):
        self.R = [float(r_start)]

    def observe(self, k):
        R_prev = self.R[k - 1] if k else self.R[k]
        return Observation(self.R[k], R_prev, 10.0, 180.0, 6.0, 10.0)

    def apply(self, k, T):
        if k == self.fail_at:
            raise exceptions.PlantFaultError("Engine state became non-finite")
        self.R.append(2000.0 + 500.0 * float(logit(T / 100.0)))


def passthrough_controller():
    """Controller whose raw output is the normalized next speed reference."""
    return Controller(linear_net([1.0, 0.0, 0.0, 0.0, 0.0]), 4, SCALERS["R"], SCALERS["Op"])


class ProfileTest(TestCase):
    def test_default_profile(self):
        profile = build_profile()

        self.assertEqual(len(profile), 600)
        self.assertEqual(profile.mode, "ceiling")
        np.testing.assert_array_equal(profile.step_indices(), [150, 300, 450])
        self.assertEqual(profile.r_ref[0], 1200.0)
        self.assertEqual(profile.r_ref[150], 2000.0)
        self.assertEqual(profile.r_ref[-1], 1600.0)
        np.testing.assert_array_equal(profile.op_ref, 15.0)
        self.assertEqual(profile.levels(), [1200.0, 1600.0, 2000.0, 2800.0])

    def test_steady_map_profile(self):
        opacity_map = {1200.0: 5.0, 2000.0: 10.0, 2800.0: 20.0, 1600.0: 8.0}
        profile = build_profile(op_ref_mode="steady-map", opacity_map=opacity_map)

        self.assertEqual(profile.op_ref[0], 5.0)
        self.assertEqual(profile.op_ref[150], 10.0)
        self.assertEqual(profile.op_ref[599], 8.0)

    def test_raises_exception_on_invalid_steps(self):
        with self.assertRaises(exceptions.ProfileError):
            build_profile(((1.0, 2000.0),))
        with self.assertRaises(exceptions.ProfileError):
            build_profile(((0.0, 2000.0), (10.0, 2500.0), (5.0, 1500.0)))
        with self.assertRaises(exceptions.ProfileError):
            build_profile(((0.0, 2000.0), (70.0, 2500.0)))
        with self.assertRaises(exceptions.ProfileError):
            build_profile(((0.0, 7000.0),))
        with self.assertRaises(exceptions.ProfileError):
            build_profile(ts=0.0)
        with self.assertRaises(exceptions.ProfileError):
            build_profile(op_ref_mode="tracking")

    def test_raises_exception_on_missing_opacity_map_entry(self):
        with self.assertRaises(exceptions.ProfileError):
            build_profile(op_ref_mode="steady-map")
        with self.assertRaises(exceptions.ProfileError):
            build_profile(op_ref_mode="steady-map", opacity_map={1200.0: 5.0})

    def test_raises_exception_on_invalid_opacity_constraint(self):
        with self.assertRaises(exceptions.ProfileError):
            ReferenceProfile(0.1, [2000.0, 2000.0], [15.0, 120.0])
        with self.assertRaises(exceptions.ProfileError):
            ReferenceProfile(0.1, [2000.0], [15.0])


class MetricsTest(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.profile = ReferenceProfile(2.0, [1000, 1000, 2000, 2000, 2000], [15.0] * 5)

    def test_hand_computed_metrics(self):
        metrics = compute_metrics(
            {"R": [1000, 1100, 1500, 1900, 2000], "Op": [10, 20, 30, 10, 5]},
            self.profile,
        )

        self.assertAlmostEqual(metrics["rmse_speed"], math.sqrt(54000.0))
        self.assertAlmostEqual(metrics["rmse_transient"], 300.0)
        self.assertEqual(metrics["max_opacity"], 30.0)
        self.assertAlmostEqual(metrics["opacity_excess"], 40.0)

    def test_perfect_tracking_below_ceiling(self):
        metrics = compute_metrics({"R": self.profile.r_ref, "Op": [1, 2, 3, 4, 5]}, self.profile)

        self.assertEqual(metrics["rmse_speed"], 0.0)
        self.assertEqual(metrics["rmse_transient"], 0.0)
        self.assertEqual(metrics["opacity_excess"], 0.0)

    def test_constant_offset(self):
        profile = build_profile(((0.0, 1500.0), (5.0, 2500.0)), duration=10.0)
        metrics = compute_metrics({"R": profile.r_ref + 50.0, "Op": np.zeros(len(profile))}, profile)

        self.assertAlmostEqual(metrics["rmse_speed"], 50.0)
        self.assertAlmostEqual(metrics["rmse_transient"], 50.0)

    def test_profile_without_steps_has_no_transient_error(self):
        profile = ReferenceProfile(0.1, [2000.0] * 10, [15.0] * 10)
        metrics = compute_metrics({"R": np.full(10, 2100.0), "Op": np.full(10, 10.0)}, profile)

        self.assertEqual(metrics["rmse_transient"], 0.0)
        self.assertAlmostEqual(metrics["rmse_speed"], 100.0)

    def test_raises_exception_on_length_mismatch(self):
        with self.assertRaises(exceptions.InputShapeError):
            compute_metrics({"R": [1000, 1000], "Op": [1, 1]}, self.profile)

    @given(
        st.floats(-500.0, 500.0),
        st.lists(st.floats(-200.0, 200.0), min_size=40, max_size=40),
    )
    def test_speed_errors_are_shift_invariant(self, shift, errors):
        r_ref = np.concatenate([np.full(20, 2000.0), np.full(20, 2500.0)])
        R = r_ref + np.array(errors)
        base = compute_metrics({"R": R, "Op": np.zeros(40)}, ReferenceProfile(0.1, r_ref, np.full(40, 15.0)))
        moved = compute_metrics(
            {"R": R + shift, "Op": np.zeros(40)},
            ReferenceProfile(0.1, r_ref + shift, np.full(40, 15.0)),
        )

        self.assertAlmostEqual(moved["rmse_speed"], base["rmse_speed"], delta=1e-8)
        self.assertAlmostEqual(moved["rmse_transient"], base["rmse_transient"], delta=1e-8)


class RunClosedLoopTest(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.profile = build_profile(((0.0, 1500.0), (3.0, 2500.0), (6.0, 1800.0)), duration=10.0)
        cls.result = run_closed_loop(LogitTarget(), passthrough_controller(), cls.profile, eta_op=0.2)

    def test_inverse_plant_tracks_reference(self):
        self.assertLess(self.result.metrics["rmse_speed"], 1e-3)
        self.assertEqual(self.result.metrics["opacity_excess"], 0.0)

    def test_run_frame(self):
        frame = self.result.frame

        self.assertEqual(tuple(frame.columns), RUN_COLUMNS)
        self.assertEqual(len(frame), len(self.profile))
        self.assertTrue(((frame["U"] > 0) & (frame["U"] < 100)).all())
        np.testing.assert_allclose(frame["t"], self.profile.t)
        self.assertEqual(self.result.eta_op, 0.2)

    def test_raises_exception_on_sample_time_mismatch(self):
        target = LogitTarget()
        target.ts = 0.2
        with self.assertRaises(exceptions.ProfileError):
            run_closed_loop(target, passthrough_controller(), self.profile)

    def test_fault_names_the_step(self):
        with self.assertRaises(exceptions.SimulationFaultError) as ctx:
            run_closed_loop(LogitTarget(fail_at=7), passthrough_controller(), self.profile)

        self.assertEqual(ctx.exception.step, 7)


class TargetTest(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = linear_engine_model()
        cls.controller = Controller.for_model(cls.model, n_hidden=3, seed=1)
        cls.profile = build_profile(((0.0, 2000.0), (2.0, 2300.0)), duration=5.0)

    def test_model_run_is_reproducible(self):
        first = run_closed_loop(ModelTarget(self.model, settle_steps=200), self.controller, self.profile)
        second = run_closed_loop(ModelTarget(self.model, settle_steps=200), self.controller, self.profile)

        pd.testing.assert_frame_equal(first.frame, second.frame)
        self.assertAlmostEqual(first.frame["R"].iloc[0], 2000.0, delta=2.0)

    def test_plant_run_starts_at_reference(self):
        result = run_closed_loop(PlantTarget(PlantParams().noiseless()), self.controller, self.profile)

        self.assertTrue(np.all(np.isfinite(result.frame.to_numpy())))
        self.assertAlmostEqual(result.frame["R"].iloc[0], 2000.0, delta=10.0)

    def test_steady_opacity_follows_the_operating_point(self):
        opacity = steady_opacity(self.model, [2000.0, 2300.0], settle_steps=200)

        self.assertAlmostEqual(opacity[2000.0], 20.0, delta=0.1)
        self.assertAlmostEqual(opacity[2300.0], 26.0, delta=0.1)


class RunFileTest(TestCase):
    @classmethod
    def setUpClass(cls):
        profile = build_profile(((0.0, 1500.0), (3.0, 2500.0)), duration=6.0)
        cls.result = run_closed_loop(LogitTarget(), passthrough_controller(), profile, eta_op=0.2)

    def test_saved_run_loads_back(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.csv")
            metrics_path = os.path.join(tmp, "metrics.json")
            save_run(self.result, path, {"config-digest": "abc"}, metrics_path)
            loaded = load_run(path)
            with open(path) as fh:
                head = [fh.readline().strip() for _ in range(2)]
            with open(metrics_path) as fh:
                document = json.load(fh)

        self.assertEqual(head, ["# config-digest: abc", "# eta-op: 0.2"])
        self.assertEqual(loaded.eta_op, 0.2)
        np.testing.assert_array_equal(
            loaded.frame[list(RUN_COLUMNS)].to_numpy(dtype=float),
            self.result.frame[list(RUN_COLUMNS)].to_numpy(dtype=float),
        )
        for name, value in self.result.metrics.items():
            self.assertAlmostEqual(loaded.metrics[name], value, places=9)
        self.assertEqual(document["config_digest"], "abc")
        self.assertEqual(document["eta_op"], 0.2)
        self.assertAlmostEqual(document["rmse_speed"], self.result.metrics["rmse_speed"])

    def test_raises_exception_on_missing_column(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bad.csv")
            self.result.frame.drop(columns=["Op_ref"]).to_csv(path, index=False)
            with self.assertRaises(exceptions.LogFormatError):
                load_run(path)


class CheckSweepTest(TestCase):
    def metrics(self, max_opacity, rmse_transient):
        return {"max_opacity": max_opacity, "rmse_transient": rmse_transient}

    def test_monotone_sweep_passes(self):
        rows = [(0.8, self.metrics(20.0, 90.0)), (0.0, self.metrics(35.0, 40.0)), (0.2, self.metrics(28.0, 60.0))]

        self.assertEqual(check_sweep(rows), [])

    def test_violations_are_reported(self):
        rows = [(0.0, self.metrics(35.0, 40.0)), (0.2, self.metrics(38.0, 30.0))]
        violations = check_sweep(rows)

        self.assertEqual(len(violations), 2)
        self.assertIn("max_opacity", violations[0])
        self.assertIn("rmse_transient", violations[1])


class PlotRunsTest(TestCase):
    def test_writes_speed_and_opacity_figures(self):
        profile = build_profile(((0.0, 1500.0), (3.0, 2500.0)), duration=6.0)
        result = run_closed_loop(LogitTarget(), passthrough_controller(), profile, eta_op=0.2)
        with tempfile.TemporaryDirectory() as tmp:
            paths = plot_runs([result], os.path.join(tmp, "sweep"))

            self.assertEqual([os.path.basename(p) for p in paths], ["sweep_speed.png", "sweep_opacity.png"])
            self.assertTrue(all(os.path.getsize(p) > 0 for p in paths))

    def test_no_runs_no_figures(self):
        self.assertEqual(plot_runs([], "unused"), [])


@pytest.mark.slow
class OpacityWeightSweepTest(TestCase):
    @classmethod
    def setUpClass(cls):
        T_seq = generate_excitation("aprbs", 2000, seed=1, low=35, high=75, min_hold=20, max_hold=150)
        log = simulate_plant(PlantParams(seed=0), T_seq)
        model = identify_engine(log, cfg=LmConfig(max_iter=300), restarts=3)
        cls.profile = build_profile()
        cls.results = sweep_eta(model, cls.profile, (0.0, 0.2, 0.8), TrainingConfig())

    def test_speed_tracking_without_opacity_weight(self):
        eta, _, run = self.results[0]
        span = max(self.profile.levels()) - min(self.profile.levels())

        self.assertEqual(eta, 0.0)
        self.assertLess(run.metrics["rmse_speed"], 0.03 * span)

    def test_opacity_weight_trades_tracking_for_smoke(self):
        self.assertEqual(check_sweep([(eta, run.metrics) for eta, _, run in self.results]), [])

    def test_heaviest_opacity_weight_cuts_the_smoke_peak(self):
        peaks = {eta: run.metrics["max_opacity"] for eta, _, run in self.results}

        self.assertLessEqual(peaks[0.8], 0.8 * peaks[0.0])
