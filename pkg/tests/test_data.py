import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlcl.data import (
    Dataset,
    SchemaError,
    augment,
    gen_hierarchical,
    gen_multilabel,
    load_csv,
    stratified_split,
    stratified_subsample,
    two_views,
    write_csv,
)


class TestHierarchical:
    def test_single_class(self):
        ds = gen_hierarchical(1, 1, 5, 3, seed=0)
        assert np.all(ds.levels == ds.levels[0])

    def test_structure(self):
        ds = gen_hierarchical(4, 5, 50, 8, seed=0)
        assert len(ds) == 1000
        assert ds.cardinalities == (20, 4)
        assert np.unique(ds.levels[:, 0]).size == 20
        for sub in range(20):
            assert np.unique(ds.levels[ds.levels[:, 0] == sub, 1]).size == 1
        assert np.all(np.bincount(ds.levels[:, 0]) == 50)

    def test_deterministic(self):
        a = gen_hierarchical(3, 2, 10, 4, seed=9)
        b = gen_hierarchical(3, 2, 10, 4, seed=9)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.levels, b.levels)
        c = gen_hierarchical(3, 2, 10, 4, seed=10)
        assert not np.array_equal(a.features, c.features)

    def test_spread_ordering(self):
        ds = gen_hierarchical(4, 5, 200, 16, seed=1)
        centers = np.array([ds.features[ds.levels[:, 0] == s].mean(axis=0) for s in range(20)])
        within = np.mean([ds.features[ds.levels[:, 0] == s].std(axis=0).mean() for s in range(20)])
        parent = np.arange(20) // 5
        same = [np.linalg.norm(centers[a] - centers[b])
                for a, b in itertools.combinations(range(20), 2) if parent[a] == parent[b]]
        diff = [np.linalg.norm(centers[a] - centers[b])
                for a, b in itertools.combinations(range(20), 2) if parent[a] != parent[b]]
        assert within < np.mean(same) < np.mean(diff)

    def test_shared_super_centers(self):
        a = gen_hierarchical(3, 2, 5, 4, seed=0)
        b = gen_hierarchical(3, 2, 5, 4, seed=1, super_centers=a.meta["super_centers"])
        assert np.array_equal(a.meta["super_centers"], b.meta["super_centers"])
        assert not np.array_equal(a.meta["sub_centers"], b.meta["sub_centers"])

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
    @settings(max_examples=25)
    def test_hierarchy_is_a_function(self, S, M, seed):
        ds = gen_hierarchical(S, M, 3, 2, seed=seed)
        for sub in np.unique(ds.levels[:, 0]):
            assert np.unique(ds.levels[ds.levels[:, 0] == sub, 1]).size == 1


class TestMultilabel:
    def test_identical_labels_identical_features(self):
        ds = gen_multilabel(3, 3, 200, 5, noise=0.0, seed=0)
        _, first, inverse = np.unique(ds.levels, axis=0, return_index=True, return_inverse=True)
        assert np.allclose(ds.features, ds.features[first][inverse.ravel()], atol=0)

    def test_construction_identity(self):
        ds = gen_multilabel(7, 3, 400, 10, noise=0.0, seed=1)
        dirs = ds.meta["directions"]
        for i, j in itertools.combinations(range(80), 2):
            diff = ds.levels[i] - ds.levels[j]
            if np.count_nonzero(diff) == 1:
                l = int(np.flatnonzero(diff)[0])
                expected = abs(diff[l]) * np.linalg.norm(dirs[l])
                assert np.linalg.norm(ds.features[i] - ds.features[j]) == pytest.approx(expected, abs=1e-12)

    def test_uniform_marginals(self):
        ds = gen_multilabel(4, 3, 30000, 4, seed=2)
        for l in range(4):
            assert np.allclose(np.bincount(ds.levels[:, l], minlength=3) / 30000, 1 / 3, atol=0.01)

    def test_correlation_creates_overlap(self):
        indep = gen_multilabel(7, 3, 2000, 4, correlation=0.0, seed=3)
        corr = gen_multilabel(7, 3, 2000, 4, correlation=0.5, seed=3)
        agree = lambda ds: np.mean(ds.levels[0::2] == ds.levels[1::2])
        assert agree(corr) > agree(indep)

    def test_distance_non_increasing_in_overlap(self):
        # unit steps at k levels: distance grows with k, Jaccard shrinks with k
        ds = gen_multilabel(7, 3, 1, 12, noise=0.0, seed=4)
        dirs = ds.meta["directions"]
        base = np.zeros(7, dtype=int)
        dists = []
        for k in range(8):
            other = base.copy()
            other[:k] = 1
            dists.append(np.linalg.norm((other - base) @ dirs))
        jac = [(7 - k) / (7 + k) for k in range(8)]
        order = np.argsort(jac)[::-1]
        assert np.all(np.diff(np.array(dists)[order]) >= -1e-12)


class TestAugment:
    def test_identity(self, rng):
        x = rng.standard_normal((4, 3))
        assert np.array_equal(augment(x, 0.0, 0.0, rng), x)

    def test_dropout_rate(self, rng):
        out = augment(np.ones((200, 100)), 0.0, 0.25, rng)
        assert np.mean(out == 0.0) == pytest.approx(0.25, abs=0.01)

    def test_views_interleaved(self, rng):
        x = np.array([[0.0, 0.0], [100.0, 100.0]])
        v = two_views(x, 0.1, 0.0, rng)
        assert v.shape == (4, 2)
        assert np.all(np.abs(v[:2]) < 5) and np.all(v[2:] > 95)

    def test_input_untouched(self, rng):
        x = np.ones((5, 4))
        augment(x, 0.5, 0.5, rng)
        assert np.all(x == 1.0)


class TestSplits:
    def test_stratified_split_covers_classes(self, rng):
        y = np.repeat(np.arange(5), 10)
        tr, te = stratified_split(y, 0.2, rng)
        assert np.intersect1d(tr, te).size == 0 and tr.size + te.size == 50
        assert np.all(np.bincount(y[te]) == 2)

    def test_subsample_even(self, rng):
        y = np.repeat(np.arange(4), 20)
        idx = stratified_subsample(y, 10, rng)
        counts = np.bincount(y[idx])
        assert idx.size == 10 and counts.max() - counts.min() <= 1

    def test_subsample_too_small(self, rng):
        with pytest.raises(ValueError):
            stratified_subsample(np.arange(4), 2, rng)


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = gen_hierarchical(2, 3, 4, 5, seed=0)
        write_csv(ds, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv")
        assert np.abs(back.features - ds.features).max() <= 1e-12
        assert np.array_equal(back.levels, ds.levels)
        assert back.cardinalities == ds.cardinalities

    def test_missing_label_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f_0,f_1\n1.0,2.0\n")
        with pytest.raises(SchemaError, match="level_0"):
            load_csv(p)

    def test_single_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f_0,level_0\n0.5,1\n")
        ds = load_csv(p)
        assert len(ds) == 1 and ds.features[0, 0] == 0.5 and ds.levels[0, 0] == 1

    def test_bad_cell_located(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f_0,level_0\n0.5,1\nabc,0\n")
        with pytest.raises(SchemaError, match="line 3, column f_0"):
            load_csv(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f_0,level_0\n0.5\n")
        with pytest.raises(SchemaError, match="line 2"):
            load_csv(p)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]), np.array([[0]]), (2,))
