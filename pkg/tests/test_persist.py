import json

import numpy as np
import pytest

from adatrans.errors import ModelSchemaMismatch
from adatrans.estimator import estimate_ate
from adatrans.harness import fit_models
from adatrans.config import ExperimentConfig
from adatrans.persist import load_models, save_models

from conftest import enumeration_toy, small_multisource


class TestRoundTrip:
    def test_toy_models(self, tmp_path):
        models, _, _ = enumeration_toy()
        save_models(models, tmp_path / "m.npz")
        back = load_models(tmp_path / "m.npz")
        X = np.array([[0.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(estimate_ate(X, back, S=50).ite, estimate_ate(X, models, S=50).ite)
        assert back.confounder.structural == models.confounder.structural

    def test_fitted_models(self, tmp_path):
        data = small_multisource(3, d_x=4, n_t=30, n_s=20)
        cfg = ExperimentConfig(mode="synthetic-1src", n_samples=1, restarts=1, max_iter=30,
                               anchor_budget=40, q_anchor_budget=30, aux_anchor_budget=30,
                               aux_max_iter=30, n_mc=20)
        models = fit_models(data, data.target, cfg, "adaptive", 0)
        save_models(models, tmp_path / "f.npz")
        back = load_models(tmp_path / "f.npz")
        np.testing.assert_array_equal(back.confounder.factors.matrix(), models.confounder.factors.matrix())
        np.testing.assert_array_equal(back.outcome.delta.matrix(), models.outcome.delta.matrix())
        X = data.target.x[:4]
        np.testing.assert_array_equal(estimate_ate(X, back, S=20).ite, estimate_ate(X, models, S=20).ite)

    def test_rejects_unknown_format(self, tmp_path):
        models, _, _ = enumeration_toy()
        path = tmp_path / "m.npz"
        save_models(models, path)
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays["__meta__"].tobytes())
        meta["format"] = 99
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)
        with pytest.raises(ModelSchemaMismatch):
            load_models(path)
