import json
import math
import os
import sys
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, ROOT)
sys.path.insert(0, os.path.join(ROOT, "lib"))

import config
from scene import (
    ArrayConfig,
    ClientNode,
    ConfigurationError,
    InfeasibleGeometryError,
    InvalidInputError,
    NoIntersectionError,
    OutOfFieldError,
    Scenario,
    ScenarioConfig,
    angle_of,
    load_scenario_config,
    sample_scenario,
    steering_matrix,
    steering_vector,
    triangulate,
)

UP = (0.0, 1.0)


class TestSteering(unittest.TestCase):
    def test_broadside_is_all_ones(self):
        assert_allclose(steering_vector(0.0, 4, 0.5), np.ones(4))

    def test_thirty_degrees_quarter_turns(self):
        assert_allclose(steering_vector(math.pi / 6, 4, 0.5), [1, 1j, -1, -1j], atol=1e-12)

    def test_single_element(self):
        assert_allclose(steering_vector(0.7, 1), [1.0])

    def test_unit_modulus(self):
        a = steering_vector(0.3, 8, 0.5)
        assert_allclose(np.abs(a), np.ones(8))

    def test_nan_angle_rejected(self):
        with self.assertRaises(InvalidInputError):
            steering_vector(float("nan"), 4)

    def test_matrix_columns_match_vectors(self):
        angles = [-0.4, 0.0, 0.9]
        a = steering_matrix(angles, 4, 0.5)
        self.assertEqual(a.shape, (4, 3))
        for k, angle in enumerate(angles):
            assert_allclose(a[:, k], steering_vector(angle, 4, 0.5))


class TestAngles(unittest.TestCase):
    def test_straight_ahead_is_zero(self):
        self.assertAlmostEqual(angle_of((0, 0), UP, (0, 5)), 0.0)

    def test_positive_side_is_clockwise_of_boresight(self):
        self.assertAlmostEqual(angle_of((0, 0), UP, (5, 5)), math.pi / 4)
        self.assertAlmostEqual(angle_of((0, 0), UP, (-5, 5)), -math.pi / 4)

    def test_behind_array_is_out_of_field(self):
        with self.assertRaises(OutOfFieldError):
            angle_of((0, 0), UP, (0, -3))

    def test_endfire_is_out_of_field(self):
        with self.assertRaises(OutOfFieldError):
            angle_of((0, 0), UP, (3, 0))

    def test_coincident_target_rejected(self):
        with self.assertRaises(InvalidInputError):
            angle_of((1, 1), UP, (1, 1))


class TestTriangulate(unittest.TestCase):
    def test_recovers_midpoint(self):
        p = triangulate(math.pi / 4, (0, 0), -math.pi / 4, (10, 0), (UP, UP))
        assert_allclose(p, [5.0, 5.0], atol=1e-12)

    def test_inverts_angle_of(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            target = (rng.uniform(0.5, 9.5), rng.uniform(5, 15))
            aod = angle_of((0, 0), UP, target)
            aoa = angle_of((10, 0), UP, target)
            assert_allclose(triangulate(aod, (0, 0), aoa, (10, 0), (UP, UP)), target, atol=1e-9)

    def test_parallel_rays(self):
        with self.assertRaises(NoIntersectionError):
            triangulate(0.0, (0, 0), 0.0, (10, 0), (UP, UP))

    def test_diverging_rays(self):
        # AP looks left, PWR looks right: the rays only meet behind the arrays
        with self.assertRaises(NoIntersectionError):
            triangulate(-0.5, (0, 0), 0.5, (10, 0), (UP, UP))


class TestArrayConfig(unittest.TestCase):
    def test_rejects_zero_elements(self):
        with self.assertRaises(ConfigurationError):
            ArrayConfig(0)

    def test_rejects_non_unit_boresight(self):
        with self.assertRaises(ConfigurationError):
            ArrayConfig(4, 0.5, (0.0, 2.0))

    def test_client_k_factor_must_be_non_negative(self):
        with self.assertRaises(ConfigurationError):
            ClientNode((1, 6), ArrayConfig(4), 3, -1.0)
        ClientNode((1, 6), ArrayConfig(4), 3, math.inf)


class TestSampleScenario(unittest.TestCase):
    def test_constraints_hold(self):
        cfg = ScenarioConfig(q=16)
        for seed in range(20):
            scn = sample_scenario(cfg, np.random.default_rng(seed))
            pos = scn.positions()
            xmin, xmax, ymin, ymax = cfg.coverage
            self.assertEqual(pos.shape, (cfg.k_targets, 2))
            self.assertTrue(np.all((pos[:, 0] > xmin) & (pos[:, 0] < xmax)))
            self.assertTrue(np.all((pos[:, 1] > ymin) & (pos[:, 1] < ymax)))
            gaps = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
            self.assertGreaterEqual(np.min(gaps[np.triu_indices(len(pos), 1)]), cfg.min_separation)
            self.assertEqual(list(scn.client_mask()), [True, True, False])
            self.assertEqual(scn.num_clients, cfg.c_clients)

    def test_same_seed_same_scenario(self):
        cfg = ScenarioConfig(q=16)
        a = sample_scenario(cfg, np.random.default_rng(11))
        b = sample_scenario(cfg, np.random.default_rng(11))
        assert_allclose(a.positions(), b.positions())

    def test_client_boresight_faces_the_ap(self):
        cfg = ScenarioConfig(q=16)
        scn = sample_scenario(cfg, np.random.default_rng(5))
        for c in scn.clients:
            to_ap = -np.asarray(c.position) / np.linalg.norm(c.position)
            cos = float(np.dot(to_ap, c.array.boresight))
            self.assertGreaterEqual(cos, math.cos(math.radians(config.client_boresight_jitter_deg)) - 1e-9)

    def test_infeasible_separation(self):
        cfg = ScenarioConfig(q=16, coverage=(4.0, 5.0, 9.0, 10.0), k_targets=3, min_separation=3.0)
        saved = config.scenario_max_attempts
        config.scenario_max_attempts = 200
        try:
            with self.assertRaises(InfeasibleGeometryError):
                sample_scenario(cfg, np.random.default_rng(0))
        finally:
            config.scenario_max_attempts = saved

    def test_more_clients_than_targets_rejected(self):
        with self.assertRaises(ConfigurationError):
            ScenarioConfig(k_targets=1, c_clients=2)

    def test_json_round_trip(self):
        scn = sample_scenario(ScenarioConfig(q=16), np.random.default_rng(2))
        back = Scenario.loads(scn.dumps())
        assert_allclose(back.positions(), scn.positions())
        self.assertEqual(back.clients[0].array.boresight, scn.clients[0].array.boresight)
        self.assertEqual(back.num_subcarriers, 16)


class TestLoadScenarioConfig(unittest.TestCase):
    def test_missing_keys_take_defaults(self):
        with tempfile.TemporaryDirectory() as td:
            path = os.path.join(td, "s.json")
            with open(path, "w") as f:
                json.dump({"k_targets": 2, "c_clients": 1, "ricean_k_factor": 6.0}, f)
            cfg = load_scenario_config(path)
        self.assertEqual(cfg.k_targets, 2)
        self.assertEqual(cfg.ricean_k_factor, 6.0)
        self.assertEqual(cfg.q, config.num_subcarriers)

    def test_unknown_key_is_an_error(self):
        with tempfile.TemporaryDirectory() as td:
            path = os.path.join(td, "s.json")
            with open(path, "w") as f:
                json.dump({"k_targets": 2, "colour": "blue"}, f)
            with self.assertRaises(ConfigurationError):
                load_scenario_config(path)

    def test_missing_file(self):
        with self.assertRaises(ConfigurationError):
            load_scenario_config("/nonexistent/scenario.json")

    def test_shipped_scenarios_load(self):
        for name in ("default.json", "quick.json", "single-client-los.json"):
            cfg = load_scenario_config(os.path.join(ROOT, "storage", "scenarios", name))
            self.assertGreaterEqual(cfg.k_targets, cfg.c_clients)
        self.assertEqual(load_scenario_config(os.path.join(ROOT, "storage", "scenarios", "quick.json")).seed, 7)


if __name__ == "__main__":
    unittest.main()
