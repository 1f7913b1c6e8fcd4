import math
import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, ROOT)
sys.path.insert(0, os.path.join(ROOT, "lib"))

from bff import approx_covariance, build_bff
from channel import (CsiTensor, joint_steering_vector, observe_csi, synth_comm_channel,
                     synth_radar_channel, vectorize_csi)
from estimator import (
    METHODS,
    CovarianceSet,
    EstimatorConfigurationError,
    NO_GATE,
    EstimatorError,
    PreEstimate,
    SearchConfig,
    associate,
    localize_hybrid_as,
    localize_music_bff,
    localize_music_map,
    localize_music_ndp,
    localize_ndp_as,
    loglik_client,
    loglik_radar,
    loglik_radar_residual,
    music_2d,
    music_client,
    position_grid,
    pre_estimate,
    radar_sample_cov,
)
from scene import ArrayConfig, ClientNode, Geometry, Scenario, Target, steering_vector

COVERAGE = (0.0, 10.0, 5.0, 15.0)
GEOMETRY = Geometry((0.0, 0.0), (10.0, 0.0), ArrayConfig(4), ArrayConfig(4), COVERAGE)


def facing_ap(p):
    d = -np.asarray(p, dtype=float)
    d /= np.linalg.norm(d)
    return (float(d[0]), float(d[1]))


def make_scenario(points, n_clients, q=16, k_factor=math.inf):
    clients = [ClientNode(tuple(p), ArrayConfig(4, 0.5, facing_ap(p)), 3, k_factor)
               for p in points[:n_clients]]
    targets = [Target(tuple(p), i < n_clients) for i, p in enumerate(points)]
    return Scenario((0.0, 0.0), (10.0, 0.0), ArrayConfig(4), ArrayConfig(4), clients, targets,
                    q, 78.125e3, COVERAGE)


def noiseless_covs(scn, seed=0):
    rng = np.random.default_rng(seed)
    radar = synth_radar_channel(scn, rng)
    client_covs = []
    for u in range(scn.num_clients):
        comm = synth_comm_channel(scn, u, rng)
        client_covs.append(approx_covariance(build_bff(CsiTensor(comm.matrices, 0.0))))
    r = radar_sample_cov(CsiTensor(radar.matrices, 0.0))
    return CovarianceSet(r, client_covs, 0.0, 0.0, scn.num_subcarriers, 4, 4, 4)


def exact_pre_estimate(points, heights=None):
    points = np.asarray(points, dtype=float)
    aod, aoa = GEOMETRY.radar_angles(points)
    k = len(points)
    heights = np.arange(k, 0, -1, dtype=float) if heights is None else np.asarray(heights, dtype=float)
    return PreEstimate(aod, aoa, heights, np.full(k, -1), np.full(k, np.nan), np.array([]),
                       np.zeros((16, 0), dtype=complex))


def brute_force_pair(r, grid, n=4):
    '''exhaustive maximum of Tr(P R) over every pair of grid positions'''
    aod, aoa = GEOMETRY.radar_angles(grid)
    a = joint_steering_vector(aod, aoa, n, n)
    m = a.shape[0]
    c = np.conj(a.T) @ r @ a
    g = np.conj(a.T) @ a
    diag = np.real(np.diag(c))
    det = m * m - np.abs(g) ** 2
    num = m * (diag[:, None] + diag[None, :]) - 2 * np.real(g * c.T)
    with np.errstate(divide='ignore', invalid='ignore'):
        tr = np.where(det > 1e-9, num / det, -np.inf)
    i, j = np.unravel_index(int(np.argmax(tr)), tr.shape)
    return tr[i, j], grid[i], grid[j]


class TestCovariance(unittest.TestCase):
    def test_radar_cov_is_hermitian_low_rank(self):
        scn = make_scenario([(3.0, 8.0), (6.0, 11.0)], 0)
        covs = noiseless_covs(scn)
        r = covs.radar_cov
        assert_allclose(r, np.conj(r.T))
        self.assertEqual(np.linalg.matrix_rank(r, tol=1e-9 * np.linalg.norm(r)), 2)

    def test_noiseless_variance_floor(self):
        covs = CovarianceSet(np.eye(16), [], 0.0, 0.0, 4, 4, 4, 4)
        self.assertEqual(covs.effective_variances(), (1.0, 1.0))


class TestMusic(unittest.TestCase):
    def test_noiseless_peaks_are_within_one_grid_step(self):
        points = [(3.0, 8.0), (6.0, 11.0), (8.0, 6.0)]
        scn = make_scenario(points, 0, q=32)
        covs = noiseless_covs(scn)
        peaks = music_2d(covs.radar_cov, 3, 4, 4)
        self.assertFalse(peaks.degenerate)
        self.assertEqual(peaks.noise_subspace.shape, (16, 13))
        aod, aoa = GEOMETRY.radar_angles(np.array(points))
        step = math.radians(0.5) + 1e-9
        for k in range(3):
            d = np.abs(peaks.aod - aod[k]) + np.abs(peaks.aoa - aoa[k])
            j = int(np.argmin(d))
            self.assertLessEqual(abs(peaks.aod[j] - aod[k]), step)
            self.assertLessEqual(abs(peaks.aoa[j] - aoa[k]), step)

    def test_heights_descend(self):
        scn = make_scenario([(3.0, 8.0), (6.0, 11.0)], 0)
        peaks = music_2d(noiseless_covs(scn).radar_cov, 2, 4, 4)
        self.assertGreaterEqual(peaks.heights[0], peaks.heights[1])

    def test_k_out_of_range(self):
        with self.assertRaises(EstimatorConfigurationError):
            music_2d(np.eye(16), 16, 4, 4)

    def test_identity_covariance_is_degenerate(self):
        for k in (1, 2, 3):
            peaks = music_2d(np.eye(16, dtype=complex), k, 4, 4)
            self.assertTrue(peaks.degenerate)
            self.assertEqual(len(peaks.aod), k)

    def test_client_peak(self):
        aod = math.radians(23.4)
        a = steering_vector(aod, 4)
        peak = music_client(np.outer(a, np.conj(a)))
        self.assertFalse(peak.degenerate)
        self.assertLessEqual(abs(peak.aod - aod), math.radians(0.25))

    def test_client_peak_ignores_scale(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
        r = x @ np.conj(x.T)
        ref = music_client(r)
        for c in (2.0 ** -20, 0.25, 8.0, 2.0 ** 17):
            self.assertEqual(music_client(c * r).aod, ref.aod)

    def test_flat_client_spectrum(self):
        peak = music_client(np.eye(4))
        self.assertTrue(peak.degenerate)
        self.assertAlmostEqual(peak.aod, math.radians(-80.0))


class TestAssociate(unittest.TestCase):
    def test_pairs_nearest(self):
        a = associate([0.1, 0.5], [0.52, 0.11, -0.3])
        self.assertEqual(a.pairs, {0: 1, 1: 0})

    def test_minimum_total_cost_not_greedy(self):
        a = associate([0.1, 0.0], [0.09, 0.2])
        self.assertEqual(a.pairs, {0: 1, 1: 0})
        self.assertAlmostEqual(a.total_cost, 0.19)

    def test_gate(self):
        self.assertEqual(associate([0.1], [0.5], gate=math.radians(10)).pairs, {})
        self.assertEqual(associate([0.1], [0.5], gate=None).pairs, {0: 0})

    def test_second_aod_inside_gate_drops_the_pair(self):
        gate = math.radians(10)
        a = associate([0.30], [0.31, 0.38, -0.5], gate=gate)
        self.assertEqual(a.pairs, {})
        a = associate([0.30, -0.49], [0.31, 0.38, -0.5], gate=gate)
        self.assertEqual(a.pairs, {1: 2})
        self.assertEqual(associate([0.30], [0.31, 0.38], gate=None).pairs, {0: 0})
        self.assertEqual(associate([0.30], [0.31, 0.38], gate=NO_GATE).pairs, {0: 0})

    def test_no_clients(self):
        self.assertEqual(associate([], [0.1, 0.2]).pairs, {})

    def test_more_clients_than_targets(self):
        with self.assertRaises(EstimatorError):
            associate([0.1, 0.2], [0.1])


class TestLikelihood(unittest.TestCase):
    def test_trace_and_residual_forms_agree(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            k = int(rng.integers(1, 4))
            points = np.column_stack([rng.uniform(1, 9, k), rng.uniform(6, 14, k)])
            scn = make_scenario([tuple(p) for p in points], 0)
            radar = synth_radar_channel(scn, rng)
            csi = observe_csi(radar.matrices, 5.0, rng)
            r = radar_sample_cov(csi)
            sigma2 = csi.noise_variance
            energy = np.sum(np.abs(vectorize_csi(csi.estimates)) ** 2)
            trace, resid = [], []
            for _ in range(50):
                aod = rng.uniform(-1.2, 1.2, k)
                aoa = rng.uniform(-1.2, 1.2, k)
                trace.append(loglik_radar(aod, aoa, r, sigma2, 16, 4, 4).value)
                resid.append(loglik_radar_residual(aod, aoa, csi, sigma2, 4, 4))
            trace, resid = np.array(trace), np.array(resid)
            self.assertEqual(int(np.argmax(trace)), int(np.argmax(resid)))
            assert_allclose(trace - resid, energy / (2 * sigma2), rtol=1e-9)

    def test_coincident_angles_are_regularized(self):
        scn = make_scenario([(4.0, 9.0)], 0)
        r = noiseless_covs(scn).radar_cov
        aod, aoa = GEOMETRY.radar_angles(np.array([[4.0, 9.0]]))
        single = loglik_radar(aod, aoa, r, 1.0, 16, 4, 4)
        double = loglik_radar(np.repeat(aod, 2), np.repeat(aoa, 2), r, 1.0, 16, 4, 4)
        self.assertFalse(single.degenerate)
        self.assertTrue(double.degenerate)
        self.assertAlmostEqual(double.value / single.value, 1.0, places=6)

    def test_client_term_only_adds_information(self):
        rng = np.random.default_rng(12)
        points = [(3.0, 8.0), (7.0, 12.0)]
        scn = make_scenario(points, 1, q=32, k_factor=15.0)
        radar = synth_radar_channel(scn, rng)
        csi = observe_csi(radar.matrices, 10.0, rng)
        comm = synth_comm_channel(scn, 0, rng)
        comm_csi = observe_csi(comm.matrices, 10.0, rng)
        r_u = approx_covariance(build_bff(comm_csi, comm_csi.noise_variance))
        r = radar_sample_cov(csi)
        aod, aoa = GEOMETRY.radar_angles(np.array(points))
        ndp = loglik_radar(aod, aoa, r, csi.noise_variance, 32, 4, 4).value
        hybrid = ndp + loglik_client(aod[0], r_u, comm_csi.noise_variance, 32, 4)
        self.assertGreaterEqual(hybrid, ndp)

    def test_client_term(self):
        a = steering_vector(0.4, 4)
        value = loglik_client(0.4, np.outer(a, np.conj(a)), 2.0, 16, 4)
        self.assertAlmostEqual(value, 16 * 4 / 4.0 * 16 / 4)


class TestPreEstimate(unittest.TestCase):
    def test_clients_associate_with_their_echoes(self):
        points = [(2.0, 9.0), (8.0, 6.0), (8.0, 12.0)]
        scn = make_scenario(points, 2, q=32)
        preest = pre_estimate(noiseless_covs(scn), 3)
        los = scn.angle_set().client_los_aod
        for u in range(2):
            targets = np.flatnonzero(preest.client_of_target == u)
            self.assertEqual(len(targets), 1)
            t = targets[0]
            self.assertLessEqual(abs(preest.radar_aod[t] - los[u]), math.radians(1.0))
            self.assertLessEqual(abs(preest.client_aod[t] - los[u]), math.radians(0.5))
        self.assertEqual(int(np.sum(preest.associated)), 2)

    def test_gate_argument(self):
        # client AoDs 20.6 and 53.1 deg, the third echo at 28.6 deg sits
        # inside the gate of the first client
        points = [(3.0, 8.0), (8.0, 6.0), (6.0, 11.0)]
        covs = noiseless_covs(make_scenario(points, 2, q=32))
        default = pre_estimate(covs, 3)
        self.assertEqual(int(np.sum(default.associated)), 1)
        open_gate = pre_estimate(covs, 3, gate=NO_GATE)
        self.assertEqual(int(np.sum(open_gate.associated)), 2)
        with self.assertRaises(EstimatorConfigurationError):
            pre_estimate(covs, 3, gate=math.nan)

    def test_without_association(self):
        preest = exact_pre_estimate([(3.0, 8.0)])
        preest.client_of_target[0] = 0
        cleared = preest.without_association()
        self.assertFalse(cleared.associated.any())
        self.assertTrue(preest.associated.all())


class TestAlternatingSummation(unittest.TestCase):
    def test_noiseless_single_client(self):
        truth = np.array([4.3, 9.2])
        scn = make_scenario([tuple(truth)], 1)
        covs = noiseless_covs(scn)
        preest = pre_estimate(covs, 1)
        self.assertTrue(preest.associated[0])
        for fn in (localize_hybrid_as, localize_ndp_as):
            result = fn(preest, covs, GEOMETRY)
            self.assertLessEqual(float(np.linalg.norm(result.positions[0] - truth)), 0.1)
            self.assertTrue(result.valid.all())
        self.assertTrue(localize_hybrid_as(preest, covs, GEOMETRY).associated[0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(20)
        search = SearchConfig(coarse_step=0.5, refine_step=None)
        grid = position_grid(COVERAGE, 0.5)
        inner = grid[(grid[:, 0] >= 1) & (grid[:, 0] <= 9) & (grid[:, 1] >= 6) & (grid[:, 1] <= 14)]
        matched = 0
        for trial in range(100):
            while True:
                p = inner[rng.choice(len(inner), 2, replace=False)]
                if np.linalg.norm(p[0] - p[1]) >= 2.0:
                    break
            scn = make_scenario([tuple(x) for x in p], 0)
            covs = noiseless_covs(scn, seed=trial)
            best, _, _ = brute_force_pair(covs.radar_cov, grid)
            result = localize_ndp_as(exact_pre_estimate(p), covs, GEOMETRY, search)
            aod, aoa = GEOMETRY.radar_angles(result.positions)
            ours = loglik_radar(aod, aoa, covs.radar_cov, 1.0, 16, 4, 4).value / (16 / 2.0)
            if ours >= best * (1 - 1e-6):
                matched += 1
        self.assertGreaterEqual(matched, 95)

    def test_hybrid_equals_ndp_without_association(self):
        p = [(3.0, 8.0), (7.0, 12.0)]
        scn = make_scenario(p, 0)
        covs = noiseless_covs(scn)
        preest = exact_pre_estimate([(3.2, 8.1), (6.8, 12.2)])
        a = localize_hybrid_as(preest, covs, GEOMETRY)
        b = localize_ndp_as(preest, covs, GEOMETRY)
        assert_allclose(a.positions, b.positions)
        assert_allclose(a.objective, b.objective)
        self.assertEqual(a.method, "hybrid_as")
        self.assertEqual(b.method, "ndp_as")

    def test_permutation_equivariant(self):
        p = [(3.0, 8.0), (7.0, 12.0)]
        covs = noiseless_covs(make_scenario(p, 0))
        preest = exact_pre_estimate([(3.2, 8.1), (6.8, 12.2)], heights=[5.0, 2.0])
        a = localize_ndp_as(preest, covs, GEOMETRY)
        b = localize_ndp_as(preest.permuted([1, 0]), covs, GEOMETRY)
        assert_allclose(b.positions, a.positions[::-1])

    def test_coincident_pre_estimates_flagged(self):
        covs = noiseless_covs(make_scenario([(3.0, 8.0), (7.0, 12.0)], 0))
        preest = exact_pre_estimate([(5.0, 10.0), (5.0, 10.0)])
        result = localize_ndp_as(preest, covs, GEOMETRY, SearchConfig(refine_step=None))
        self.assertTrue(result.degenerate.all())

    def test_uninformative_radar_follows_the_client(self):
        client_aod = math.radians(25.0)
        a = steering_vector(client_aod, 4)
        covs = CovarianceSet(np.eye(16, dtype=complex), [np.outer(a, np.conj(a))], 1.0, 1.0, 16, 4, 4, 4)
        preest = exact_pre_estimate([(5.0, 10.0)])
        preest.client_of_target[0] = 0
        preest.client_aod[0] = client_aod
        result = localize_hybrid_as(preest, covs, GEOMETRY)
        aod, _ = GEOMETRY.radar_angles(result.positions)
        self.assertLessEqual(abs(aod[0] - client_aod), math.radians(1.0))

    def test_single_pass(self):
        covs = noiseless_covs(make_scenario([(3.0, 8.0), (7.0, 12.0)], 0))
        preest = exact_pre_estimate([(3.2, 8.1), (6.8, 12.2)])
        result = localize_ndp_as(preest, covs, GEOMETRY, SearchConfig(single_pass=True))
        self.assertEqual(result.passes, 1)

    def test_bad_search_config(self):
        with self.assertRaises(EstimatorConfigurationError):
            SearchConfig(coarse_step=0.0)
        with self.assertRaises(EstimatorConfigurationError):
            position_grid((5.0, 4.0, 0.0, 1.0), 0.25)


class TestBaselines(unittest.TestCase):
    def test_music_ndp_triangulates(self):
        truth = np.array([[3.0, 8.0], [6.5, 12.5]])
        result = localize_music_ndp(exact_pre_estimate(truth), GEOMETRY)
        assert_allclose(result.positions, truth, atol=1e-9)
        self.assertFalse(result.associated.any())

    def test_music_bff_uses_client_aod(self):
        preest = exact_pre_estimate([(3.0, 8.0)])
        true_aod = preest.radar_aod[0]
        preest.radar_aod[0] += 0.05
        preest.client_of_target[0] = 0
        preest.client_aod[0] = true_aod
        result = localize_music_bff(preest, GEOMETRY)
        assert_allclose(result.positions[0], [3.0, 8.0], atol=1e-9)
        self.assertTrue(result.associated[0])

    def test_parallel_rays_are_invalid(self):
        preest = PreEstimate(np.array([0.0]), np.array([0.0]), np.array([1.0]), np.array([-1]),
                             np.array([np.nan]), np.array([]), np.zeros((16, 0), dtype=complex))
        result = localize_music_ndp(preest, GEOMETRY)
        self.assertFalse(result.valid[0])
        self.assertTrue(result.degenerate[0])

    def test_music_map(self):
        truth = np.array([[3.1, 8.2], [6.9, 12.3]])
        scn = make_scenario([tuple(p) for p in truth], 1, q=32)
        covs = noiseless_covs(scn)
        result = localize_music_map(pre_estimate(covs, 2), covs, GEOMETRY)
        for t in truth:
            self.assertLessEqual(float(np.min(np.linalg.norm(result.positions - t, axis=1))), 0.2)

    def test_registry(self):
        self.assertEqual(sorted(METHODS), ["hybrid_as", "music_bff", "music_map", "music_ndp", "ndp_as"])


if __name__ == "__main__":
    unittest.main()
