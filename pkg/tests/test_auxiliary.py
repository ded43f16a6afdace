import math

import numpy as np
import pytest

from adatrans.auxiliary import (AuxConfig, Standardiser, _GLM, _fit_glm, fit_outcome,
                                fit_propensity, predict_outcome, predict_propensity,
                                sample_outcome, sample_treatment)
from adatrans.data import MultiSourceDataset, PopulationData
from adatrans.errors import DegenerateTreatment, DimMismatch
from adatrans.kernels import L2_DELTA, TransferFactors, sqdist

from conftest import binary_outcome, small_multisource, toy_outcome, toy_propensity

FAST = AuxConfig(anchor_budget=40, max_iter=300)


def _glm(seed, bernoulli, n_pops=3, n=12):
    rng = np.random.default_rng(seed)
    tags = np.sort(rng.integers(0, n_pops, n))
    tags[0] = 0
    w = rng.integers(0, 2, n).astype(float)
    t = rng.integers(0, 2, n).astype(float) if bernoulli else rng.normal(size=n)
    return _GLM(rng.normal(size=(n, 3)), tags, n_pops, t, [1 - w, w], bernoulli,
                np.arange(0, n, 2))


class TestGLMGradient:
    @pytest.mark.parametrize("bernoulli", [False, True])
    def test_finite_difference(self, bernoulli):
        glm = _glm(1, bernoulli)
        rng = np.random.default_rng(2)
        fac = TransferFactors(L2_DELTA, 3)
        prm = {"beta0": rng.normal(size=6), "beta1": rng.normal(size=6),
               "log_ls": np.array(0.2), "logits": rng.normal(size=fac.n_free)}
        _, g = glm.evaluate(prm, fac, 0.7)
        h = 1e-6
        for k, v in prm.items():
            flat = np.array(v, dtype=float).reshape(-1)
            for i in range(flat.size):
                vals = []
                for s in (h, -h):
                    a = flat.copy()
                    a[i] += s
                    vals.append(glm.evaluate({**prm, k: a.reshape(np.shape(v))}, fac, 0.7, grad=False)[0])
                fd = (vals[0] - vals[1]) / (2 * h)
                gi = np.reshape(g[k], -1)[i]
                assert abs(fd - gi) / max(abs(fd), abs(gi), 1e-3) < 1e-5, (k, i)


class TestRidgeOracle:
    def test_matches_closed_form(self):
        # every point is an anchor, one population: kernel ridge with K (K + 2 gamma I)^-1 t
        rng = np.random.default_rng(3)
        n, gamma, ell = 15, 0.5, 1.3
        x = rng.normal(size=(n, 2))
        t = np.sin(x[:, 0]) + 0.1 * rng.normal(size=n)
        glm = _GLM(x, np.zeros(n, dtype=int), 1, t, [np.ones(n)], False, np.arange(n))
        cfg = AuxConfig(gamma=gamma, lr=0.05, max_iter=20000, tol=1e-14)
        fac = TransferFactors.pinned(L2_DELTA, 1, 1.0)
        prm, _, _ = _fit_glm(glm, fac, cfg, ell)
        K = np.exp(-0.5 * sqdist(x, x) / ell ** 2)
        ref = K @ np.linalg.solve(K + 2 * gamma * np.eye(n), t)
        np.testing.assert_allclose(K @ prm["beta0"], ref, atol=1e-4)


@pytest.fixture(scope="module")
def model():
    return fit_outcome(small_multisource(5, d_x=4, n_t=40, n_s=30), FAST, seed=1)


class TestOutcome:
    def test_predict_key(self, model):
        out = predict_outcome(np.zeros((2, 4)), 1, model)
        assert set(out) == {"mean"} and out["mean"].shape == (2,)

    def test_delta_in_unit_interval(self, model):
        M = model.delta.matrix()
        assert M.shape == (3, 3) and np.all((M >= 0) & (M <= 1))

    def test_sample_moments_mc(self):
        m = toy_outcome(beta0=(0.8,), beta1=(-0.4,), sigma=0.6)
        m.y_loc, m.y_scale = 1.0, 2.0
        x = np.zeros((200_000, 2))
        y = sample_outcome(x, 0, m, 4)
        se = 2.0 * 0.6 / math.sqrt(x.shape[0])
        assert abs(y.mean() - (1.0 + 2.0 * 0.8)) < 4 * se
        assert y.std() == pytest.approx(1.2, rel=1e-2)

    def test_binary_sample_frequency(self):
        m = toy_outcome(beta0=(0.0,), beta1=(1.2,), binary=True)
        x = np.zeros((100_000, 2))
        p = predict_outcome(x[:1], 1, m)["prob"][0]
        freq = sample_outcome(x, 1, m, 5).mean()
        assert abs(freq - p) < 4 * math.sqrt(p * (1 - p) / x.shape[0])

    def test_none_is_target_only(self):
        data = small_multisource(6, d_x=4, n_t=30, n_s=20)
        a = fit_outcome(data, FAST, "none", seed=2)
        b = fit_outcome(data.target_only(), FAST, "adaptive", seed=2)
        np.testing.assert_array_equal(a.beta_g0, b.beta_g0)
        np.testing.assert_array_equal(a.beta_g1, b.beta_g1)

    def test_binary_outcome_fit(self):
        m = fit_outcome(binary_outcome(small_multisource(7, d_x=4, n_t=30, n_s=20)), FAST, seed=0)
        p = predict_outcome(np.ones((3, 4)), 0, m)["prob"]
        assert np.all((p > 0) & (p < 1))

    def test_residual_scale_positive(self, model):
        assert model.sigma_y_tilde > 0

    def test_dim_mismatch(self, model):
        with pytest.raises(DimMismatch):
            model.predict(np.zeros((1, 3)), 0)


class TestPropensity:
    def test_sample_frequency(self):
        m = toy_propensity(beta=(-0.9,))
        x = np.zeros((100_000, 2))
        p = predict_propensity(x[:1], m)[0]
        assert p == pytest.approx(1 / (1 + math.exp(0.9)), abs=1e-14)
        freq = sample_treatment(x, m, 6).mean()
        assert abs(freq - p) < 4 * math.sqrt(p * (1 - p) / x.shape[0])

    def test_degenerate_treatment(self):
        data = small_multisource(8, d_x=3, n_t=10, n_s=5, deltas=())
        t = data.target
        flat = PopulationData(t.pop_id, t.x, np.ones(t.n), t.y, t.schema)
        with pytest.raises(DegenerateTreatment):
            fit_propensity(MultiSourceDataset(flat, ()), FAST)

    def test_tracks_treatment_rate(self):
        # with proxies carrying no information the fit is near the base rate
        rng = np.random.default_rng(9)
        n = 400
        data = small_multisource(9, d_x=2, n_t=n, n_s=1, deltas=())
        t = data.target
        w = (rng.uniform(size=n) < 0.3).astype(float)
        pop = PopulationData(t.pop_id, np.zeros((n, 2)), w, t.y, t.schema)
        m = fit_propensity(MultiSourceDataset(pop, ()), AuxConfig(anchor_budget=5, max_iter=3000,
                                                                  gamma=1e-3, lr=0.05))
        assert m.predict(np.zeros((1, 2)))[0] == pytest.approx(w.mean(), abs=2e-3)


class TestStandardiser:
    def test_constant_column(self):
        x = np.column_stack([np.ones(5), np.arange(5.0)])
        s = Standardiser.fit(x)
        z = s(x)
        np.testing.assert_array_equal(z[:, 0], 0.0)
        assert z[:, 1].std() == pytest.approx(1.0)
