import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import gammaln
from scipy.stats import norm, poisson

from scripts.tracking import (BearingsOnlyModel, SensorScan, association_hypotheses, bearing,
                              circular_array, joint_multitarget_log_likelihood,
                              joint_multitarget_parts, multisensor_pda_log_likelihood,
                              multisensor_pda_parts, triangulate, two_step_initialization)
from scripts.utils import CombinatorialLimit, make_rng

from .conftest import fd_gradient, fd_jacobian

RING = 200.0


def ring_scan(detections, pd=0.8, lam=0.5, r=4.0):
    return SensorScan([0.0], np.asarray(detections, dtype=float)[:, None], pd, lam, RING,
                      [[r]], period=RING)


def joint_oracle(detections, positions, pd, lam, r):
    """Direct sum over every partial injective assignment of targets to detections."""
    m, nt = len(detections), len(positions)
    eta = 1.0 / RING
    total = 0.0
    for assignment in itertools.product(range(-1, m), repeat=nt):
        used = [a for a in assignment if a >= 0]
        if len(used) != len(set(used)):
            continue
        d = len(used)
        p = poisson.pmf(m - d, lam) * pd ** d * (1 - pd) ** (nt - d) * eta ** (m - d)
        for i, a in enumerate(assignment):
            if a >= 0:
                nu = (detections[a] - positions[i] + RING / 2) % RING - RING / 2
                p *= norm.pdf(nu, scale=np.sqrt(r))
        total += p
    return np.log(total) - gammaln(nt + 1)


def bearing_scans(sensors, target, detections_per_sensor=None):
    scans = []
    for j, s in enumerate(sensors):
        theta = bearing(np.asarray(target, dtype=float), s)
        dets = [theta] if detections_per_sensor is None else detections_per_sensor[j]
        scans.append(SensorScan(s, np.asarray(dets)[:, None], 0.8, 1.0, 2 * np.pi,
                                [[np.deg2rad(10.0) ** 2]], period=2 * np.pi))
    return scans


class TestSensorScan:
    def test_residual_wraps(self):
        scan = SensorScan([0, 0], np.zeros((0, 1)), 0.9, 1.0, 2 * np.pi, [[0.01]], period=2 * np.pi)
        assert_allclose(scan.residual(np.pi - 0.1, -np.pi + 0.1), -0.2, atol=1e-12)

    def test_clutter_density(self):
        assert ring_scan([1.0], lam=2.0).clutter_density == pytest.approx(2.0 / RING)

    def test_invalid_detection_probability(self):
        with pytest.raises(ValueError):
            ring_scan([1.0], pd=1.5)


class TestJointMultitarget:
    @pytest.mark.parametrize('nt,m', [(1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (3, 3)])
    def test_matches_enumeration_oracle(self, nt, m):
        rng = make_rng(nt * 10 + m)
        positions = rng.uniform(0, RING, nt)
        detections = np.mod(positions[rng.integers(0, nt, m)] + rng.normal(0, 2, m), RING)
        scan = ring_scan(detections)
        x = np.concatenate([positions, np.zeros(nt)])
        out = joint_multitarget_log_likelihood(scan, x, nt)
        assert_allclose(out, joint_oracle(detections, positions, 0.8, 0.5, 4.0), rtol=0, atol=1e-10)

    def test_hypothesis_count(self):
        assign, n_det = association_hypotheses(2, 2)
        assert len(assign) == 7
        assert sorted(n_det.tolist()) == [0, 1, 1, 1, 1, 2, 2]

    def test_gradient_and_hessian(self):
        scan = ring_scan([10.0, 52.0, 180.0])
        x = np.array([11.0, 50.0, 1.0, 2.0])
        _, g, H, info = joint_multitarget_parts(scan, x[None], 2)
        g_fd = fd_gradient(lambda z: joint_multitarget_log_likelihood(scan, z[None], 2)[0], x)
        H_fd = fd_jacobian(lambda z: joint_multitarget_parts(scan, z[None], 2)[1][0], x)
        assert_allclose(g[0], g_fd, rtol=1e-4, atol=1e-8)
        assert_allclose(H[0], H_fd, rtol=1e-4, atol=1e-8)
        assert np.all(np.linalg.eigvalsh(info[0]) >= -1e-12)

    def test_detection_order_invariance(self):
        x = np.array([[11.0, 50.0, 1.0, 2.0], [120.0, 15.0, 0.0, -1.0]])
        a = joint_multitarget_parts(ring_scan([10.0, 52.0, 180.0]), x, 2)
        b = joint_multitarget_parts(ring_scan([180.0, 10.0, 52.0]), x, 2)
        for u, v in zip(a[:3], b[:3]):
            assert_allclose(u, v, rtol=1e-10, atol=1e-10)

    def test_combinatorial_limit(self):
        scan = ring_scan(np.arange(6) * 10.0)
        with pytest.raises(CombinatorialLimit):
            joint_multitarget_log_likelihood(scan, np.zeros(18), 9)
        with pytest.raises(CombinatorialLimit):
            joint_multitarget_log_likelihood(scan, np.zeros(8), 4, max_hypotheses=100)


class TestPda:
    sensors = circular_array(3, 100.0)

    def test_single_sensor_closed_form(self):
        scan = bearing_scans(self.sensors[:1], [10.0, 5.0], [[0.3, -1.0]])[0]
        x = np.array([10.0, 5.0, 0.0, 0.0])
        theta = bearing(x, scan.position)
        r = scan.obs_cov[0, 0]
        nu = (scan.detections[:, 0] - theta + np.pi) % (2 * np.pi) - np.pi
        inner = scan.clutter_density * 0.2 + np.sum(0.8 * norm.pdf(nu, scale=np.sqrt(r)))
        expected = (np.log(inner) - 2 * np.log(2 * np.pi) + 2 * np.log(1.0) - 1.0 - gammaln(3))
        assert_allclose(multisensor_pda_log_likelihood(scan, x), expected)

    def test_gradient_and_hessian(self):
        scans = bearing_scans(self.sensors, [10.0, 5.0], [[0.3, -2.9], [2.0], []])
        x = np.array([12.0, 4.0, 1.0, -1.0])
        _, g, H, _ = multisensor_pda_parts(scans, x[None])
        g_fd = fd_gradient(lambda z: multisensor_pda_log_likelihood(scans, z[None])[0], x)
        H_fd = fd_jacobian(lambda z: multisensor_pda_parts(scans, z[None])[1][0], x)
        assert_allclose(g[0], g_fd, rtol=1e-4, atol=1e-8)
        assert_allclose(H[0], H_fd, rtol=1e-4, atol=1e-8)

    def test_detection_order_invariance(self):
        scans = bearing_scans(self.sensors, [10.0, 5.0], [[0.3, -2.9, 1.1], [2.0], []])
        shuffled = bearing_scans(self.sensors, [10.0, 5.0], [[1.1, 0.3, -2.9], [2.0], []])
        x = np.array([[12.0, 4.0, 1.0, -1.0], [-30.0, 60.0, 0.0, 2.0], [5.0, -5.0, 3.0, 0.5]])
        for a, b in zip(multisensor_pda_parts(scans, x)[:3], multisensor_pda_parts(shuffled, x)[:3]):
            assert_allclose(a, b, rtol=1e-10, atol=1e-10)


class TestBearingsOnly:
    def test_sensors_on_circle(self):
        sensors = circular_array(4, 1000.0)
        assert_allclose(np.hypot(*sensors.T), 1000.0)

    def test_observation_structure(self):
        model = BearingsOnlyModel(circular_array(5, 1000.0))
        scans = model.sample_observation(np.array([0.0, 0.0, 5.0, 0.0]), make_rng(3))
        assert len(scans) == 5
        assert len(model.measurement_blocks(scans)) == 5
        assert all(np.all(np.abs(s.detections) <= np.pi) for s in scans)

    def test_triangulation_of_exact_bearings(self):
        model = BearingsOnlyModel(circular_array(4, 1000.0))
        target = [120.0, -40.0]
        pos, cov = triangulate(model, bearing_scans(model.sensors, target))
        assert_allclose(pos, target, atol=1e-3)
        assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_two_step_initialization(self):
        model = BearingsOnlyModel(circular_array(4, 1000.0), dt=2.0)
        first = bearing_scans(model.sensors, [100.0, 0.0])
        second = bearing_scans(model.sensors, [110.0, 6.0])
        prior = two_step_initialization(model, first, second)
        assert_allclose(prior.mean, [110.0, 6.0, 5.0, 3.0], atol=2e-3)
        assert np.all(np.linalg.eigvalsh(prior.cov) > 0)
