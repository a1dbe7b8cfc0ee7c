import numpy as np
import pytest

from dcg.data import (
    DatasetFormatError,
    InvalidMaskError,
    MissingnessSpec,
    MultiViewDataset,
    apply_missingness,
    generate_synthetic,
    load_dataset,
    minibatches,
    paired_indices,
    save_dataset,
)


def _complete(n=4, dims=(3, 3), seed=0):
    rng = np.random.default_rng(seed)
    views = tuple(rng.standard_normal((n, d)) for d in dims)
    mask = np.ones((n, len(dims)), dtype=bool)
    return MultiViewDataset(views=views, mask=mask)


class TestMultiViewDataset:
    def test_row_count_mismatch_rejected(self):
        views = (np.zeros((4, 3)), np.zeros((5, 3)))
        with pytest.raises(DatasetFormatError):
            MultiViewDataset(views=views, mask=np.ones((4, 2), dtype=bool))

    def test_all_false_mask_row_rejected(self):
        mask = np.ones((4, 2), dtype=bool)
        mask[2] = False
        with pytest.raises(InvalidMaskError):
            MultiViewDataset(views=(np.zeros((4, 3)), np.zeros((4, 3))), mask=mask)

    def test_labels_must_match_length_and_have_two_classes(self):
        views = (np.zeros((4, 3)),)
        mask = np.ones((4, 1), dtype=bool)
        with pytest.raises(DatasetFormatError):
            MultiViewDataset(views=views, mask=mask, labels=np.array([0, 1, 0]))
        with pytest.raises(DatasetFormatError):
            MultiViewDataset(views=views, mask=mask, labels=np.zeros(4, dtype=int))

    def test_properties(self):
        ds = _complete(n=6, dims=(3, 5))
        assert ds.n_samples == 6
        assert ds.n_views == 2
        assert ds.view_dims == (3, 5)
        assert ds.is_complete()


class TestLoadDataset:
    def test_two_views_no_mask_defaults_complete(self, tmp_path):
        rng = np.random.default_rng(0)
        for v in range(2):
            np.savetxt(tmp_path / f"view_{v}.csv", rng.standard_normal((4, 3)), delimiter=",")
        ds = load_dataset(tmp_path)
        assert ds.n_samples == 4
        assert ds.n_views == 2
        assert ds.mask.all()

    def test_all_zero_mask_row_rejected(self, tmp_path):
        for v in range(2):
            np.savetxt(tmp_path / f"view_{v}.csv", np.ones((3, 2)), delimiter=",")
        (tmp_path / "mask.csv").write_text("1,1\n0,0\n1,0\n")
        with pytest.raises(InvalidMaskError):
            load_dataset(tmp_path)

    def test_row_count_mismatch_rejected(self, tmp_path):
        np.savetxt(tmp_path / "view_0.csv", np.ones((3, 2)), delimiter=",")
        np.savetxt(tmp_path / "view_1.csv", np.ones((4, 2)), delimiter=",")
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path)

    def test_non_numeric_cell_reports_file_and_line(self, tmp_path):
        (tmp_path / "view_0.csv").write_text("1.0,2.0\n3.0,oops\n")
        with pytest.raises(DatasetFormatError, match=r"view_0\.csv:2"):
            load_dataset(tmp_path)

    def test_labels_and_mask_round_trip(self, tmp_path):
        ds = generate_synthetic(5, 2, [3, 4], sep=4.0, noise=0.5, seed=7)
        ds = apply_missingness(ds, MissingnessSpec(rate=0.2, seed=1))
        save_dataset(ds, tmp_path / "out")
        back = load_dataset(tmp_path / "out")
        assert back.n_views == ds.n_views
        np.testing.assert_array_equal(back.mask, ds.mask)
        np.testing.assert_array_equal(back.labels, ds.labels)
        for a, b in zip(back.views, ds.views):
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestGenerateSynthetic:
    def test_shape_and_balanced_labels(self):
        ds = generate_synthetic(200, 3, [5, 5], sep=6.0, noise=0.5, seed=0)
        assert ds.n_samples == 600
        assert ds.n_views == 2
        assert ds.mask.all()
        counts = np.bincount(ds.labels)
        np.testing.assert_array_equal(counts, [200, 200, 200])

    def test_deterministic_under_seed(self):
        a = generate_synthetic(10, 3, [5, 5], sep=6.0, noise=0.5, seed=0)
        b = generate_synthetic(10, 3, [5, 5], sep=6.0, noise=0.5, seed=0)
        for x, y in zip(a.views, b.views):
            np.testing.assert_array_equal(x, y)
        c = generate_synthetic(10, 3, [5, 5], sep=6.0, noise=0.5, seed=1)
        assert not np.array_equal(a.views[0], c.views[0])

    def test_argument_errors(self):
        with pytest.raises(ValueError):
            generate_synthetic(5, 1, [3, 3], sep=1.0, noise=0.5, seed=0)
        with pytest.raises(ValueError):
            generate_synthetic(5, 2, [3, 3], sep=-1.0, noise=0.5, seed=0)
        with pytest.raises(ValueError):
            generate_synthetic(5, 2, [3, 3], sep=1.0, noise=0.0, seed=0)

    def test_single_view_kmeans_separability(self):
        # oracle: vanilla k-means on one view alone already resolves the clusters
        from sklearn.cluster import KMeans

        from dcg.metrics import clustering_accuracy

        ds = generate_synthetic(200, 3, [5, 5], sep=6.0, noise=0.5, seed=0)
        pred = KMeans(n_clusters=3, n_init=10, random_state=0).fit_predict(ds.views[0])
        assert clustering_accuracy(ds.labels, pred) >= 0.95


class TestApplyMissingness:
    def test_rate_zero_identity(self):
        ds = _complete()
        out = apply_missingness(ds, MissingnessSpec(rate=0.0, seed=0))
        np.testing.assert_array_equal(out.mask, ds.mask)

    def test_exact_counts_small(self):
        ds = _complete(n=10, dims=(3, 3))
        out = apply_missingness(ds, MissingnessSpec(rate=0.3, seed=0))
        per_row_false = (~out.mask).sum(axis=1)
        assert (per_row_false <= 1).all()
        assert (per_row_false == 1).sum() == 3
        assert (per_row_false == 0).sum() == 7

    def test_present_count_conservation(self):
        ds = generate_synthetic(300, 2, [4, 4], sep=4.0, noise=0.5, seed=3)
        out = apply_missingness(ds, MissingnessSpec(rate=0.7, seed=5))
        m = int(round(0.7 * 600))
        present = out.mask.sum(axis=0)
        assert (present >= 600 - m).all() and (present <= 600).all()
        assert present.sum() == 2 * 600 - m

    def test_deleted_cells_zero_filled_and_others_untouched(self):
        ds = _complete(n=20, dims=(3, 4), seed=2)
        out = apply_missingness(ds, MissingnessSpec(rate=0.5, seed=0))
        for v in range(2):
            gone = ~out.mask[:, v]
            assert np.all(out.views[v][gone] == 0.0)
            np.testing.assert_array_equal(out.views[v][~gone], ds.views[v][~gone])

    def test_incomplete_input_rejected(self):
        ds = _complete(n=10)
        out = apply_missingness(ds, MissingnessSpec(rate=0.3, seed=0))
        with pytest.raises(ValueError):
            apply_missingness(out, MissingnessSpec(rate=0.1, seed=0))

    def test_deterministic(self):
        ds = _complete(n=50, dims=(3, 3))
        a = apply_missingness(ds, MissingnessSpec(rate=0.4, seed=9))
        b = apply_missingness(ds, MissingnessSpec(rate=0.4, seed=9))
        np.testing.assert_array_equal(a.mask, b.mask)


class TestPairedIndices:
    def test_complete_dataset_all_rows(self):
        ds = _complete(n=4)
        assert set(paired_indices(ds).indices.tolist()) == {0, 1, 2, 3}

    def test_pattern(self):
        mask = np.array([[1, 1], [1, 0], [0, 1], [1, 1]], dtype=bool)
        ds = MultiViewDataset(views=(np.zeros((4, 2)), np.zeros((4, 2))), mask=mask)
        assert paired_indices(ds).indices.tolist() == [0, 3]

    def test_count_after_missingness(self):
        ds = generate_synthetic(300, 2, [4, 4], sep=4.0, noise=0.5, seed=0)
        out = apply_missingness(ds, MissingnessSpec(rate=0.3, seed=1))
        assert len(paired_indices(out)) == 600 - 180


class TestMinibatches:
    def test_sizes(self):
        ds = _complete(n=5)
        sizes = [len(b) for b in minibatches(ds, batch=2, seed=0, epoch=0)]
        assert sizes == [2, 2, 1]

    def test_deterministic_per_seed_epoch(self):
        ds = _complete(n=32)
        a = minibatches(ds, batch=8, seed=3, epoch=5)
        b = minibatches(ds, batch=8, seed=3, epoch=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        c = minibatches(ds, batch=8, seed=3, epoch=6)
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    def test_partition_property(self):
        ds = _complete(n=33)
        batches = minibatches(ds, batch=10, seed=1, epoch=2)
        flat = np.concatenate(batches)
        assert sorted(flat.tolist()) == list(range(33))

    def test_argument_errors(self):
        ds = _complete(n=5)
        with pytest.raises(ValueError):
            minibatches(ds, batch=0, seed=0, epoch=0)
        with pytest.raises(ValueError):
            minibatches(ds, batch=6, seed=0, epoch=0)
