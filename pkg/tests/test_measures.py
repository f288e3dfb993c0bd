import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfgsolver.errors import LengthMismatch
from mfgsolver.lattice import StepSizes, build_lattice, control_grid, \
    dp_backward_sweep
from mfgsolver.measures import (EmpiricalMeasure, MeasurePath, average_update,
                                fixed_point_gap, induced_measure,
                                systematic_resample, w2_stop_threshold,
                                wasserstein2)
from mfgsolver.problems import LqParams, lq_problem, mfg2d_problem


class TestEmpiricalMeasure:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            EmpiricalMeasure(np.zeros((2, 1)), np.array([0.5, 0.6]))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            EmpiricalMeasure(np.zeros((2, 1)), np.array([1.0]))

    def test_mean(self):
        m = EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([0.25, 0.75]))
        assert m.mean()[0] == pytest.approx(0.75)

    def test_from_points_uniform(self):
        m = EmpiricalMeasure.from_points(np.arange(4.0)[:, None])
        np.testing.assert_allclose(m.weights, 0.25)


class TestResample:
    def test_preserves_uniform_cloud(self):
        pts = np.arange(8.0)[:, None]
        m = EmpiricalMeasure.from_points(pts)
        r = systematic_resample(m, 8)
        np.testing.assert_array_equal(np.sort(r.particles, axis=0), pts)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        m = EmpiricalMeasure(rng.normal(size=(10, 2)),
                             rng.dirichlet(np.ones(10)))
        a = systematic_resample(m, 6)
        b = systematic_resample(m, 6)
        np.testing.assert_array_equal(a.particles, b.particles)

    def test_point_mass_resamples_to_itself(self):
        m = EmpiricalMeasure.point_mass([1.0, 2.0])
        r = systematic_resample(m, 5)
        assert np.all(r.particles == np.array([1.0, 2.0]))


class TestAverageUpdate:
    def test_k1_returns_new(self):
        a = MeasurePath.constant(EmpiricalMeasure.point_mass([0.0]), 2)
        b = MeasurePath.constant(EmpiricalMeasure.point_mass([1.0]), 2)
        out = average_update(a, b, 1)
        assert out[0].mean()[0] == pytest.approx(1.0)

    @given(k=st.integers(2, 50))
    @settings(max_examples=20, deadline=None)
    def test_mean_is_convex_combination(self, k):
        a = MeasurePath.constant(EmpiricalMeasure.point_mass([0.0]), 1)
        b = MeasurePath.constant(EmpiricalMeasure.point_mass([1.0]), 1)
        out = average_update(a, b, k)
        assert out[0].mean()[0] == pytest.approx(1.0 / k)
        assert out[0].weights.sum() == pytest.approx(1.0)

    def test_length_mismatch(self):
        a = MeasurePath.constant(EmpiricalMeasure.point_mass([0.0]), 1)
        b = MeasurePath.constant(EmpiricalMeasure.point_mass([0.0]), 2)
        with pytest.raises(LengthMismatch):
            average_update(a, b, 2)


def brute_force_w2(a, b):
    best = np.inf
    for perm in itertools.permutations(range(len(a))):
        cost = np.mean(np.sum((a - b[list(perm)]) ** 2, axis=1))
        best = min(best, cost)
    return float(np.sqrt(best))


class TestWasserstein:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 7))
            d = int(rng.integers(1, 4))
            a = rng.normal(size=(n, d))
            b = rng.normal(size=(n, d))
            w = wasserstein2(EmpiricalMeasure.from_points(a),
                             EmpiricalMeasure.from_points(b))
            assert w == pytest.approx(brute_force_w2(a, b), abs=1e-12)

    def test_identity(self):
        m = EmpiricalMeasure.from_points(np.random.default_rng(1)
                                         .normal(size=(5, 2)))
        assert wasserstein2(m, m) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(data=st.data())
    def test_metric_axioms(self, data):
        rng = np.random.default_rng(data.draw(st.integers(0, 10 ** 6)))
        clouds = [EmpiricalMeasure.from_points(rng.normal(size=(4, 2)))
                  for _ in range(3)]
        dab = wasserstein2(clouds[0], clouds[1])
        dba = wasserstein2(clouds[1], clouds[0])
        dbc = wasserstein2(clouds[1], clouds[2])
        dac = wasserstein2(clouds[0], clouds[2])
        assert dab == pytest.approx(dba, abs=1e-12)
        assert dac <= dab + dbc + 1e-9
        assert dab >= 0.0

    def test_translation_shift(self):
        pts = np.random.default_rng(2).normal(size=(6, 1))
        a = EmpiricalMeasure.from_points(pts)
        b = EmpiricalMeasure.from_points(pts + 3.0)
        assert wasserstein2(a, b) == pytest.approx(3.0, abs=1e-12)

    def test_threshold(self):
        assert w2_stop_threshold(0.5, 0.2) == pytest.approx(0.08)
        with pytest.raises(ValueError):
            w2_stop_threshold(1.0, 0.2)

    def test_gap_over_path(self):
        a = MeasurePath.constant(EmpiricalMeasure.point_mass([0.0]), 2)
        b = MeasurePath([EmpiricalMeasure.point_mass([0.0]),
                         EmpiricalMeasure.point_mass([2.0]),
                         EmpiricalMeasure.point_mass([1.0])])
        assert fixed_point_gap(a, b) == pytest.approx(4.0)


@pytest.fixture(scope="module")
def setup():
    problem = lq_problem(LqParams())
    steps = StepSizes.for_horizon(1.0, 0.2, 0.01)
    lat = build_lattice(problem, steps)
    m0 = MeasurePath.constant(EmpiricalMeasure.point_mass([0.5]),
                              steps.n_time)
    _, field = dp_backward_sweep(problem, lat, steps, m0,
                                 control_grid(problem, 9))
    return problem, steps, lat, m0, field


class TestInducedMeasure:
    def test_deterministic(self, setup):
        problem, steps, lat, m0, field = setup
        a = induced_measure(problem, lat, steps, field, m0, 200, seed=5)
        b = induced_measure(problem, lat, steps, field, m0, 200, seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.particles, y.particles)

    def test_supported_on_lattice(self, setup):
        problem, steps, lat, m0, field = setup
        path = induced_measure(problem, lat, steps, field, m0, 100, seed=1)
        assert len(path) == steps.n_time + 1
        for sl in path:
            idx = lat.indices_of(sl.particles)
            np.testing.assert_allclose(lat.points[idx], sl.particles,
                                       atol=1e-12)

    def test_mean_attracted_to_population_mean(self, setup):
        # optimal LQ control pulls states toward the frozen mean 0.5
        problem, steps, lat, m0, field = setup
        path = induced_measure(problem, lat, steps, field, m0, 2000, seed=2)
        assert abs(path[-1].mean()[0] - 0.5) < 0.1
