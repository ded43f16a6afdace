import numpy as np
import pytest

from adatrans.data import (DataSchema, MultiSourceDataset, OutcomeKind, PopulationData,
                           SplitSpec, load_dataset, load_manifest, read_kv, save_dataset,
                           split_target, stack, validate, write_kv, write_population_csv)
from adatrans.errors import EmptyPopulation, SchemaMismatch, ShapeMismatch, SplitTooLarge
from adatrans.synth import DiscrepancySpec, make_multisource, default_params


def _pop(pid, n, d_x=3, seed=0, kind=OutcomeKind.CONTINUOUS):
    rng = np.random.default_rng(seed)
    x = (rng.uniform(size=(n, d_x)) < 0.5).astype(float)
    w = (rng.uniform(size=n) < 0.5).astype(float)
    y = rng.normal(size=n) if kind is OutcomeKind.CONTINUOUS else (rng.uniform(size=n) < 0.3) * 1.0
    return PopulationData(pid, x, w, y, DataSchema.all_binary(d_x, kind))


class TestPopulationData:
    def test_shapes_checked(self):
        schema = DataSchema.all_binary(2)
        with pytest.raises(ShapeMismatch):
            PopulationData("t", np.zeros((3, 2)), np.zeros(2), np.zeros(3), schema)
        with pytest.raises(ShapeMismatch):
            PopulationData("t", np.zeros((3, 2)), np.zeros(3), np.zeros(3), schema, y0_true=np.zeros(3))

    def test_arrays_read_only(self):
        pop = _pop("t", 4)
        with pytest.raises(ValueError):
            pop.x[0, 0] = 5.0

    def test_subset_keeps_truth(self):
        p = make_multisource(default_params(0, n_per_pop=10), None, DiscrepancySpec(()), 0).target
        s = p.subset([1, 3])
        np.testing.assert_array_equal(s.mu0_true, p.mu0_true[[1, 3]])
        np.testing.assert_array_equal(s.y1_true, p.y1_true[[1, 3]])

    def test_truth_pair_prefers_means(self):
        p = make_multisource(default_params(0, n_per_pop=10), None, DiscrepancySpec(()), 0).target
        np.testing.assert_array_equal(p.truth_pair()[0], p.mu0_true)
        np.testing.assert_array_equal(p.truth_pair("sampled")[1], p.y1_true)


class TestValidate:
    def test_generator_output_clean(self):
        data = make_multisource(default_params(1, n_per_pop=50), None, DiscrepancySpec((1.0,)), 1)
        assert validate(data, check_identity=True).ok

    def test_nan_outcome_one_finding(self):
        t = _pop("t", 6)
        y = t.y.copy()
        y[4] = np.nan
        report = validate(MultiSourceDataset(t.with_outcomes(y)))
        assert len(report) == 1
        f = report.findings[0]
        assert (f.kind, f.row, f.column) == ("NonFinite", 4, "y")

    def test_dim_mismatch(self):
        report = validate(MultiSourceDataset(_pop("t", 5, d_x=3), (_pop("s", 5, d_x=4),)))
        assert report.kinds().count("DimMismatch") == 1

    def test_non_binary_treatment(self):
        t = _pop("t", 5)
        w = t.w.copy()
        w[2] = 2.0
        bad = PopulationData("t", t.x, w, t.y, t.schema)
        assert validate(MultiSourceDataset(bad)).kinds() == ["NonBinary"]

    def test_duplicate_ids(self):
        report = validate(MultiSourceDataset(_pop("t", 3), (_pop("t", 3, seed=1),)))
        assert "DuplicatePopId" in report.kinds()


class TestCsvRoundTrip:
    def test_bitwise(self, tmp_path):
        data = make_multisource(default_params(2, n_per_pop=40), None, DiscrepancySpec((0.5, 1.0)), 2)
        manifest = save_dataset(data, tmp_path / "d")
        back = load_manifest(manifest)
        assert back.equals(data)
        assert back.pop_ids == ["t", "s1", "s2"]

    def test_example_sizes(self, tmp_path):
        data = make_multisource(default_params(3, n_per_pop=1000), None, DiscrepancySpec((0.0,)), 3,
                                n_target=50)
        back = load_manifest(save_dataset(data, tmp_path))
        assert (back.m, back.d_x, back.target.n) == (1, 30, 50)

    def test_bad_treatment_value(self, tmp_path):
        t = _pop("t", 4)
        w = t.w.copy()
        w[0] = 2.0
        write_population_csv(PopulationData("t", t.x, w, t.y, t.schema), tmp_path / "t.csv")
        with pytest.raises(ValueError):
            load_dataset({"t": str(tmp_path / "t.csv")}, t.schema, "t")

    def test_empty_source(self, tmp_path):
        t = _pop("t", 4)
        write_population_csv(t, tmp_path / "t.csv")
        (tmp_path / "s.csv").write_text("x0,x1,x2,w,y\n")
        with pytest.raises(EmptyPopulation):
            load_dataset({"t": str(tmp_path / "t.csv"), "s": str(tmp_path / "s.csv")}, t.schema, "t")

    def test_header_mismatch(self, tmp_path):
        t = _pop("t", 4)
        write_population_csv(t, tmp_path / "t.csv")
        with pytest.raises(SchemaMismatch):
            load_dataset({"t": str(tmp_path / "t.csv")}, DataSchema.all_binary(5), "t")

    def test_kv_round_trip(self, tmp_path):
        write_kv(tmp_path / "m.txt", {"a": 1, "b": "x = y"})
        assert read_kv(tmp_path / "m.txt") == {"a": "1", "b": "x = y"}


class TestSplit:
    @pytest.fixture
    def data(self):
        return make_multisource(default_params(4, n_per_pop=1000), None, DiscrepancySpec((1.0,)), 4)

    def test_sizes_and_repeat(self, data):
        a = split_target(data, SplitSpec(50, 100, 850, seed=7))
        b = split_target(data, SplitSpec(50, 100, 850, seed=7))
        assert [a[k].target.n for k in ("train", "val", "test")] == [50, 100, 850]
        for k in a:
            assert a[k].equals(b[k])

    def test_disjoint_and_sources_on_train(self, data):
        parts = split_target(data, SplitSpec(50, 100, 850, seed=7))
        keys = [set(map(bytes, (np.c_[p.target.x, p.target.y]))) for p in parts.values()]
        assert sum(len(k) for k in keys) == len(set.union(*keys))
        assert parts["train"].m == 1 and parts["val"].m == 0 and parts["test"].m == 0

    def test_seed_changes_train(self, data):
        a = split_target(data, SplitSpec(50, 100, 850, seed=1))["train"].target
        b = split_target(data, SplitSpec(50, 100, 850, seed=2))["train"].target
        assert not a.equals(b)

    def test_boundary(self, data):
        parts = split_target(data, SplitSpec(0, 0, 1000))
        assert parts["train"].target.n == 0 and parts["test"].target.n == 1000

    def test_too_large(self, data):
        with pytest.raises(SplitTooLarge):
            split_target(data, SplitSpec(600, 600, 0))


def test_stack_orders_target_first():
    data = MultiSourceDataset(_pop("t", 3), (_pop("s", 2, seed=1),))
    st = stack(data)
    np.testing.assert_array_equal(st.pop, [0, 0, 0, 1, 1])
    assert st.sizes == (3, 2)
