import math

import numpy as np
import pytest
from scipy.special import expit

from adatrans.errors import BadCategory, ShapeMismatch
from adatrans.synth import (DiscrepancySpec, PopVectors, SynthParams, TwinsSimSpec,
                            generate_population, make_multisource, default_params,
                            target_vectors, twins_partition_sizes, twins_simulate,
                            twins_standin_table)


class TestGeneratePopulation:
    def test_default_params(self):
        p = default_params(0)
        assert (p.sigma_z, p.sigma_y, p.b0, p.c0, p.d0) == (math.sqrt(8), math.sqrt(2), 0.5, 0.7, 2.0)
        pop = generate_population(p, target_vectors(), 1000, 1)
        assert pop.x.shape == (1000, 30)
        assert set(np.unique(pop.x)) <= {0.0, 1.0}

    def test_target_vectors(self):
        v = target_vectors()
        np.testing.assert_array_equal(v.b1, [1.1, 1.7])
        np.testing.assert_array_equal(v.c1, [1.5, 1.8])
        np.testing.assert_array_equal(v.d1, [1.5, 2.8])

    def test_observed_is_selected_outcome(self):
        pop = generate_population(default_params(1), target_vectors(), 500, 3)
        np.testing.assert_array_equal(pop.y, np.where(pop.w == 1, pop.y1_true, pop.y0_true))

    def test_symmetric_construction_zero_effect(self):
        p = default_params(2)
        p = SynthParams(a0=p.a0, a1=p.a1, c0=0.7, d0=0.7)
        zero = PopVectors(np.zeros(2), np.zeros(2), np.zeros(2))
        n = 20000
        pop = generate_population(p, zero, n, 5)
        diff = pop.y1_true - pop.y0_true
        assert abs(diff.mean()) < 4 * p.sigma_y / math.sqrt(n)

    def test_deterministic(self):
        a = generate_population(default_params(3), target_vectors(), 100, 9)
        b = generate_population(default_params(3), target_vectors(), 100, 9)
        assert a.equals(b)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            generate_population(default_params(0), PopVectors(np.zeros(3), np.zeros(2), np.zeros(2)), 5, 0)

    def test_proxy_marginal_mc(self):
        # independent oracle: E_z[phi(a0 + z a1)] by fresh Monte Carlo
        p = default_params(4, d_x=3)
        n = 100_000
        pop = generate_population(p, target_vectors(), n, 6)
        z = np.random.default_rng(123).normal(0, p.sigma_z, size=(n, 2))
        q = expit(p.a0 + z @ p.a1.T)
        emp, ref = pop.x.mean(0), q.mean(0)
        se = np.sqrt(emp * (1 - emp) / n + q.var(0) / n)
        assert np.all(np.abs(emp - ref) < 3 * se)


class TestMultisource:
    def test_four_sources(self):
        data = make_multisource(default_params(0), None, DiscrepancySpec((2.0, 1.5, 1.0, 0.5)), 0)
        assert data.m == 4 and all(s.n == 1000 for s in data.sources)

    def test_zero_delta_same_distribution(self):
        data = make_multisource(default_params(5, n_per_pop=4000), None, DiscrepancySpec((0.0,)), 5)
        a, b = data.target.y, data.sources[0].y
        se = math.sqrt(a.var() / a.size + b.var() / b.size)
        assert abs(a.mean() - b.mean()) < 4 * se

    def test_no_sources(self):
        assert make_multisource(default_params(0, n_per_pop=10), None, DiscrepancySpec(()), 0).m == 0

    def test_adding_source_keeps_earlier(self):
        a = make_multisource(default_params(6, n_per_pop=30), None, DiscrepancySpec((1.0,)), 6)
        b = make_multisource(default_params(6, n_per_pop=30), None, DiscrepancySpec((1.0, 2.0)), 6)
        assert a.target.equals(b.target) and a.sources[0].equals(b.sources[0])

    def test_shift_applied(self):
        v = target_vectors().shifted(0.5)
        np.testing.assert_allclose(v.c1, [2.0, 2.3])

    def test_nonfinite_delta(self):
        with pytest.raises(ValueError):
            DiscrepancySpec((float("inf"),))


class TestTwins:
    def test_partition_sizes(self):
        assert twins_partition_sizes(4821, TwinsSimSpec()) == (3921, 900)

    def test_standin_shapes(self):
        data = twins_simulate(twins_standin_table(), TwinsSimSpec(delta_s=1.0), 0)
        assert (data.target.n, data.sources[0].n, data.d_x) == (900, 3921, 30)
        np.testing.assert_array_equal(data.target.x.sum(1), 3.0)

    def test_half_treated_at_zero_logit(self):
        n = 20000
        rec = {"gestat10": np.ones(n), "y0": np.zeros(n), "y1": np.ones(n)}
        data = twins_simulate(rec, TwinsSimSpec(b_t=0.2), 3)
        w = np.concatenate([p.w for p in data.populations])
        assert abs(w.mean() - 0.5) < 4 * math.sqrt(0.25 / n)

    def test_deterministic(self):
        t = twins_standin_table(500)
        a = twins_simulate(t, TwinsSimSpec(), 4)
        b = twins_simulate(t, TwinsSimSpec(), 4)
        assert a.equals(b)

    def test_bad_category(self):
        with pytest.raises(BadCategory):
            twins_simulate({"gestat10": np.array([0.0, 10.0]), "y0": np.zeros(2), "y1": np.zeros(2)},
                           TwinsSimSpec(), 0)
