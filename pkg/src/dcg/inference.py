"""Post-training pipeline: full reverse-diffusion recovery of missing views,
fusion, classification, and export of labels and embeddings."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import MultiViewDataset
from .diffusion import DiffusionSchedule, recover_missing
from .networks import ModelParams, classify, encode, fuse


class NonFiniteModelError(RuntimeError):
    """Raised when inference encounters NaN or infinite model outputs."""


@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray
    fused_assignments: np.ndarray
    per_view_assignments: tuple[np.ndarray, ...]
    fused_embedding: np.ndarray
    recovered_latents: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "per_view_assignments", tuple(self.per_view_assignments))
        object.__setattr__(self, "recovered_latents", tuple(self.recovered_latents))


def impute_and_cluster(
    params: ModelParams,
    sched: DiffusionSchedule,
    ds: MultiViewDataset,
    t_ext: int,
    seed: int = 0,
) -> ClusterResult:
    """Recover every missing latent by reverse diffusion from t_ext, fuse, and
    classify. Deterministic; never mutates params. Argmax ties break toward
    the smallest cluster index."""
    with torch.no_grad():
        latents = []
        for v in range(ds.n_views):
            z = torch.zeros((ds.n_samples, params.spec.latent_dim), dtype=params.dtype)
            avail = np.flatnonzero(ds.mask[:, v])
            if avail.size:
                z[torch.as_tensor(avail)] = encode(params, v, ds.views[v][avail])
            latents.append(z)
        recovered = recover_missing(params, sched, latents, ds.mask, t_ext, seed=seed)
        for v, z in enumerate(recovered):
            if not torch.isfinite(z).all():
                raise NonFiniteModelError(f"recovered latents for view {v} are not finite")
        h, _ = fuse(params, recovered)
        q_fused = classify(params, h)
        q_views = [classify(params, z) for z in recovered]
    if not torch.isfinite(q_fused).all():
        raise NonFiniteModelError("fused assignments are not finite")
    fused = q_fused.numpy()
    # np.argmax picks the first maximal entry, i.e. the smallest cluster index
    labels = fused.argmax(axis=1)
    return ClusterResult(
        labels=labels,
        fused_assignments=fused,
        per_view_assignments=tuple(q.numpy() for q in q_views),
        fused_embedding=h.numpy(),
        recovered_latents=tuple(z.numpy() for z in recovered),
    )


def export_embeddings(result: ClusterResult, path: str | Path, true_labels=None) -> None:
    """Write one CSV row per sample: index, predicted label, true label (or -1),
    then the fused-embedding coordinates."""
    path = Path(path)
    n, d = result.fused_embedding.shape
    truth = np.full(n, -1, dtype=np.int64) if true_labels is None else np.asarray(true_labels)
    if truth.shape != (n,):
        raise ValueError(f"true_labels must have length {n}, got {truth.shape}")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "pred_label", "true_label"] + [f"z{i}" for i in range(d)])
        for i in range(n):
            writer.writerow(
                [i, int(result.labels[i]), int(truth[i])]
                + [f"{x:.17g}" for x in result.fused_embedding[i]]
            )


def export_labels(result: ClusterResult, path: str | Path) -> None:
    """Write predicted labels as a one-column CSV without header."""
    np.savetxt(Path(path), result.labels[:, None], fmt="%d", delimiter=",")
