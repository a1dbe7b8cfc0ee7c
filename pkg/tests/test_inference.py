import csv

import numpy as np
import pytest
import torch

from dcg.data import MissingnessSpec, MultiViewDataset, apply_missingness, generate_synthetic
from dcg.diffusion import make_schedule
from dcg.inference import (
    NonFiniteModelError,
    export_embeddings,
    export_labels,
    impute_and_cluster,
)
from dcg.networks import NetworkSpec, encode, init_params


def tiny_setup(rate=0.3, seed=0):
    ds = generate_synthetic(10, 2, [4, 3], sep=5.0, noise=0.5, seed=seed)
    if rate > 0:
        ds = apply_missingness(ds, MissingnessSpec(rate=rate, seed=seed))
    spec = NetworkSpec(
        view_dims=(4, 3),
        k=2,
        latent_dim=3,
        hidden_sizes_ae=(8,),
        hidden_sizes_denoiser=(8, 4, 8),
        time_embed_dim=4,
        fusion_hidden=(5, 4, 3),
    )
    params = init_params(spec, seed=seed)
    return ds, spec, params


SCHED = make_schedule(5)


class TestImputeAndCluster:
    def test_shapes_and_invariants(self):
        ds, spec, params = tiny_setup()
        res = impute_and_cluster(params, SCHED, ds, t_ext=8)
        n, k, d, v = ds.n_samples, spec.k, spec.latent_dim, ds.n_views
        assert res.labels.shape == (n,) and res.labels.dtype == np.int64
        assert res.fused_assignments.shape == (n, k)
        np.testing.assert_allclose(res.fused_assignments.sum(axis=1), 1.0, atol=1e-5)
        assert len(res.per_view_assignments) == v
        for q in res.per_view_assignments:
            assert q.shape == (n, k)
            np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-5)
        assert res.fused_embedding.shape == (n, d)
        assert len(res.recovered_latents) == v
        for z in res.recovered_latents:
            assert z.shape == (n, d)
            assert np.isfinite(z).all()

    def test_labels_are_row_argmax(self):
        ds, _, params = tiny_setup()
        res = impute_and_cluster(params, SCHED, ds, t_ext=8)
        np.testing.assert_array_equal(res.labels, res.fused_assignments.argmax(axis=1))

    def test_tied_assignments_pick_smallest_index(self):
        ds, _, params = tiny_setup(rate=0.0)
        with torch.no_grad():
            params.module.classifier.weight.zero_()
            params.module.classifier.bias.zero_()
        res = impute_and_cluster(params, SCHED, ds, t_ext=5)
        np.testing.assert_allclose(res.fused_assignments, 0.5, atol=1e-7)
        assert (res.labels == 0).all()

    def test_complete_dataset_recovery_is_encoder_output(self):
        ds, _, params = tiny_setup(rate=0.0)
        res = impute_and_cluster(params, SCHED, ds, t_ext=8)
        for v in range(ds.n_views):
            with torch.no_grad():
                expect = encode(params, v, ds.views[v]).numpy()
            np.testing.assert_array_equal(res.recovered_latents[v], expect)

    def test_available_entries_pass_through_unchanged(self):
        ds, _, params = tiny_setup(rate=0.4)
        assert not ds.is_complete()
        res = impute_and_cluster(params, SCHED, ds, t_ext=8)
        for v in range(ds.n_views):
            avail = np.flatnonzero(ds.mask[:, v])
            with torch.no_grad():
                expect = encode(params, v, ds.views[v][avail]).numpy()
            np.testing.assert_array_equal(res.recovered_latents[v][avail], expect)

    def test_missing_entries_are_filled_and_finite(self):
        ds, _, params = tiny_setup(rate=0.4)
        res = impute_and_cluster(params, SCHED, ds, t_ext=8)
        miss_total = int((~ds.mask).sum())
        assert miss_total > 0
        for v in range(ds.n_views):
            miss = np.flatnonzero(~ds.mask[:, v])
            if miss.size:
                assert np.isfinite(res.recovered_latents[v][miss]).all()
                assert np.abs(res.recovered_latents[v][miss]).sum() > 0

    def test_deterministic(self):
        ds, _, params = tiny_setup()
        a = impute_and_cluster(params, SCHED, ds, t_ext=8)
        b = impute_and_cluster(params, SCHED, ds, t_ext=8)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.fused_assignments, b.fused_assignments)
        np.testing.assert_array_equal(a.fused_embedding, b.fused_embedding)
        for za, zb in zip(a.recovered_latents, b.recovered_latents):
            np.testing.assert_array_equal(za, zb)

    def test_never_mutates_params(self):
        ds, _, params = tiny_setup()
        before = {k: v.copy() for k, v in params.named_tensors().items()}
        impute_and_cluster(params, SCHED, ds, t_ext=8)
        after = params.named_tensors()
        assert set(before) == set(after)
        for name in before:
            np.testing.assert_array_equal(before[name], after[name])

    def test_row_permutation_permutes_labels(self):
        ds, _, params = tiny_setup(rate=0.4, seed=3)
        perm = np.random.default_rng(7).permutation(ds.n_samples)
        ds_perm = MultiViewDataset(
            views=tuple(v[perm] for v in ds.views),
            mask=ds.mask[perm],
            labels=ds.labels[perm],
        )
        a = impute_and_cluster(params, SCHED, ds, t_ext=8)
        b = impute_and_cluster(params, SCHED, ds_perm, t_ext=8)
        np.testing.assert_array_equal(b.labels, a.labels[perm])
        np.testing.assert_allclose(
            b.fused_embedding, a.fused_embedding[perm], rtol=1e-5, atol=1e-6
        )

    def test_extrapolated_horizon_beyond_training_T(self):
        ds, _, params = tiny_setup(rate=0.4)
        res = impute_and_cluster(params, SCHED, ds, t_ext=2 * SCHED.T)
        assert np.isfinite(res.fused_assignments).all()

    def test_nan_classifier_raises(self):
        ds, _, params = tiny_setup(rate=0.0)
        with torch.no_grad():
            params.module.classifier.weight.fill_(float("nan"))
        with pytest.raises(NonFiniteModelError, match="fused"):
            impute_and_cluster(params, SCHED, ds, t_ext=5)

    def test_nan_denoiser_raises_when_views_missing(self):
        ds, _, params = tiny_setup(rate=0.4)
        with torch.no_grad():
            for p in params.module.denoisers[0].parameters():
                p.fill_(float("nan"))
        with pytest.raises(NonFiniteModelError, match="view"):
            impute_and_cluster(params, SCHED, ds, t_ext=8)


class TestExport:
    def test_embeddings_round_trip(self, tmp_path):
        ds, spec, params = tiny_setup()
        res = impute_and_cluster(params, SCHED, ds, t_ext=8)
        path = tmp_path / "emb.csv"
        export_embeddings(res, path, true_labels=ds.labels)
        with path.open() as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == ds.n_samples + 1
        assert rows[0] == ["index", "pred_label", "true_label"] + [
            f"z{i}" for i in range(spec.latent_dim)
        ]
        body = np.array([[float(x) for x in r] for r in rows[1:]])
        np.testing.assert_array_equal(body[:, 0], np.arange(ds.n_samples))
        np.testing.assert_array_equal(body[:, 1].astype(np.int64), res.labels)
        np.testing.assert_array_equal(body[:, 2].astype(np.int64), ds.labels)
        np.testing.assert_allclose(
            body[:, 3:], res.fused_embedding.astype(np.float64), rtol=0, atol=1e-6
        )

    def test_embeddings_without_truth_write_minus_one(self, tmp_path):
        ds, _, params = tiny_setup()
        res = impute_and_cluster(params, SCHED, ds, t_ext=8)
        path = tmp_path / "emb.csv"
        export_embeddings(res, path)
        body = np.loadtxt(path, delimiter=",", skiprows=1)
        assert (body[:, 2] == -1).all()

    def test_embeddings_truth_length_mismatch(self, tmp_path):
        ds, _, params = tiny_setup()
        res = impute_and_cluster(params, SCHED, ds, t_ext=8)
        with pytest.raises(ValueError, match="length"):
            export_embeddings(res, tmp_path / "emb.csv", true_labels=ds.labels[:-1])

    def test_labels_one_column(self, tmp_path):
        ds, _, params = tiny_setup()
        res = impute_and_cluster(params, SCHED, ds, t_ext=8)
        path = tmp_path / "labels.csv"
        export_labels(res, path)
        got = np.loadtxt(path, delimiter=",", dtype=np.int64)
        np.testing.assert_array_equal(got, res.labels)
        assert len(path.read_text().strip().splitlines()) == ds.n_samples
