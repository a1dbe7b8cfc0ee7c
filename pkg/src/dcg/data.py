"""Multi-view dataset loading, synthesis, corruption, and minibatching.

A dataset is a list of per-view feature matrices sharing a common row count,
an optional integer label vector, and a boolean availability mask with one
column per view. Missing cells of the view matrices are stored as zeros, but
the mask is the single source of truth: consumers must never read a row of a
view whose mask entry is false.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetFormatError(ValueError):
    """Raised when dataset files are malformed or mutually inconsistent."""


class InvalidMaskError(ValueError):
    """Raised when a mask row leaves a sample with no available view."""


def _rng(*entropy: int) -> np.random.Generator:
    # SeedSequence wants non-negative ints; fold sign bits away deterministically.
    return np.random.default_rng(np.random.SeedSequence([e & 0xFFFFFFFF for e in entropy]))


@dataclass(frozen=True)
class MultiViewDataset:
    """Per-view feature matrices with an availability mask and optional labels."""

    views: tuple[np.ndarray, ...]
    mask: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        views = tuple(np.asarray(v, dtype=np.float64) for v in self.views)
        object.__setattr__(self, "views", views)
        if not views:
            raise DatasetFormatError("dataset needs at least one view")
        n = views[0].shape[0]
        for v, x in enumerate(views):
            if x.ndim != 2:
                raise DatasetFormatError(f"view {v} is not a matrix (ndim={x.ndim})")
            if x.shape[0] != n:
                raise DatasetFormatError(
                    f"view {v} has {x.shape[0]} rows, expected {n}"
                )
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", mask)
        if mask.shape != (n, len(views)):
            raise DatasetFormatError(
                f"mask shape {mask.shape} does not match (n_samples, n_views)=({n}, {len(views)})"
            )
        if n > 0 and not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise InvalidMaskError(f"sample {bad} has no available view")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            object.__setattr__(self, "labels", labels)
            if labels.shape != (n,):
                raise DatasetFormatError(
                    f"labels length {labels.shape} does not match n_samples={n}"
                )
            if len(np.unique(labels)) < 2:
                raise DatasetFormatError("labels must contain at least 2 distinct values")

    @property
    def n_samples(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def view_dims(self) -> tuple[int, ...]:
        return tuple(v.shape[1] for v in self.views)

    @property
    def n_clusters(self) -> int | None:
        return None if self.labels is None else len(np.unique(self.labels))

    def is_complete(self) -> bool:
        return bool(self.mask.all())


@dataclass(frozen=True)
class MissingnessSpec:
    """Fraction of samples to corrupt (one deleted view each) and the RNG seed."""

    rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"missing rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class PairedIndexSet:
    """Row indices whose samples are observed in every view."""

    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def _read_matrix(path: Path) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DatasetFormatError(
                    f"{path.name}:{lineno}: expected {width} columns, found {len(cells)}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: non-numeric cell ({exc})") from exc
    if not rows:
        raise DatasetFormatError(f"{path.name}: file is empty")
    return np.asarray(rows, dtype=np.float64)


def load_dataset(path: str | Path) -> MultiViewDataset:
    """Load a dataset directory of ``view_<v>.csv`` files.

    Optional ``labels.csv`` (one integer per line) and ``mask.csv`` (N rows of
    0/1 flags, one column per view) are picked up when present; the mask
    defaults to all-available. CSV files are headerless and comma-separated.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetFormatError(f"{root}: not a directory")
    view_files = sorted(root.glob("view_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not view_files:
        raise DatasetFormatError(f"{root}: no view_<v>.csv files found")
    expected = [root / f"view_{v}.csv" for v in range(len(view_files))]
    if view_files != expected:
        raise DatasetFormatError(f"{root}: view files must be numbered view_0.csv..view_{len(view_files)-1}.csv")
    views = [_read_matrix(p) for p in view_files]
    n = views[0].shape[0]
    for p, x in zip(view_files, views):
        if x.shape[0] != n:
            raise DatasetFormatError(f"{p.name}: {x.shape[0]} rows, expected {n} (from view_0.csv)")

    labels = None
    labels_path = root / "labels.csv"
    if labels_path.exists():
        raw = _read_matrix(labels_path)
        if raw.shape[1] != 1:
            raise DatasetFormatError("labels.csv must have exactly one column")
        if not np.all(raw == np.round(raw)):
            raise DatasetFormatError("labels.csv must contain integers")
        labels = raw[:, 0].astype(np.int64)

    mask_path = root / "mask.csv"
    if mask_path.exists():
        raw = _read_matrix(mask_path)
        if not np.isin(raw, (0.0, 1.0)).all():
            raise DatasetFormatError("mask.csv entries must be exactly 0 or 1")
        mask = raw.astype(bool)
    else:
        mask = np.ones((n, len(views)), dtype=bool)

    ds = MultiViewDataset(views=tuple(views), mask=mask, labels=labels, name=root.name)
    # zero out any cells the mask marks absent so stored values match the convention
    return _zero_masked(ds)


def _zero_masked(ds: MultiViewDataset) -> MultiViewDataset:
    if ds.is_complete():
        return ds
    views = []
    for v, x in enumerate(ds.views):
        x = x.copy()
        x[~ds.mask[:, v], :] = 0.0
        views.append(x)
    return MultiViewDataset(views=tuple(views), mask=ds.mask, labels=ds.labels, name=ds.name)


def save_dataset(ds: MultiViewDataset, path: str | Path) -> None:
    """Write a dataset back out in the directory layout read by load_dataset."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for v, x in enumerate(ds.views):
        np.savetxt(root / f"view_{v}.csv", x, delimiter=",", fmt="%.17g")
    if ds.labels is not None:
        np.savetxt(root / "labels.csv", ds.labels[:, None], delimiter=",", fmt="%d")
    if not ds.is_complete():
        np.savetxt(root / "mask.csv", ds.mask.astype(int), delimiter=",", fmt="%d")


def generate_synthetic(
    n_per_cluster: int,
    k: int,
    dims: list[int],
    sep: float,
    noise: float,
    seed: int,
) -> MultiViewDataset:
    """Sample a complete, labelled multi-view dataset of Gaussian clusters.

    Shared cluster centers are drawn once and pushed through an independent
    random linear map per view, then isotropic noise of scale ``noise`` is
    added. ``sep`` scales the center spread. Deterministic under ``seed``.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if any(d < 2 for d in dims):
        raise ValueError(f"all view dims must be >= 2, got {dims}")
    if sep <= 0:
        raise ValueError(f"sep must be positive, got {sep}")
    if noise <= 0:
        raise ValueError(f"noise must be positive, got {noise}")
    rng = _rng(seed)
    n = n_per_cluster * k
    source_dim = max(2, k)
    centers = sep * rng.standard_normal((k, source_dim))
    labels = np.repeat(np.arange(k), n_per_cluster)
    views = []
    for d in dims:
        proj = rng.standard_normal((source_dim, d)) / np.sqrt(source_dim)
        views.append(centers[labels] @ proj + noise * rng.standard_normal((n, d)))
    mask = np.ones((n, len(dims)), dtype=bool)
    return MultiViewDataset(views=tuple(views), mask=mask, labels=labels, name="synthetic")


def apply_missingness(ds: MultiViewDataset, spec: MissingnessSpec) -> MultiViewDataset:
    """Delete exactly one uniformly chosen view from round(rate*N) samples.

    Requires a complete dataset. Deleted cells are zero-filled; the returned
    mask records them as absent.
    """
    if not ds.is_complete():
        raise ValueError("apply_missingness requires a complete dataset")
    n, n_views = ds.n_samples, ds.n_views
    m = int(round(spec.rate * n))
    if not 0 <= m < n:
        raise ValueError(f"rate {spec.rate} corrupts {m} of {n} samples; need 0 <= m < N")
    if m == 0:
        return ds
    rng = _rng(spec.seed)
    rows = rng.choice(n, size=m, replace=False)
    deleted = rng.integers(0, n_views, size=m)
    mask = ds.mask.copy()
    mask[rows, deleted] = False
    out = MultiViewDataset(views=ds.views, mask=mask, labels=ds.labels, name=ds.name)
    return _zero_masked(out)


def paired_indices(ds: MultiViewDataset) -> PairedIndexSet:
    """Rows observed in all views; the only rows usable for cross-view alignment."""
    return PairedIndexSet(indices=np.flatnonzero(ds.mask.all(axis=1)))


def minibatches(ds: MultiViewDataset, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled partition of row indices into batches, deterministic in (seed, epoch)."""
    n = ds.n_samples
    if batch < 1:
        raise ValueError(f"batch size must be >= 1, got {batch}")
    if batch > n:
        raise ValueError(f"batch size {batch} exceeds dataset size {n}")
    perm = _rng(seed, epoch).permutation(n)
    return [perm[i : i + batch] for i in range(0, n, batch)]
