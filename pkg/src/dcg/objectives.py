"""Loss functions: masked reconstruction, feature- and category-level
contrastive alignment, cluster-level mutual information, assignment
sharpening, KL self-training, and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .networks import ModelParams, decode


class DegenerateBatchError(ValueError):
    """Raised when a contrastive loss has too few samples to form negatives."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    tau_f: float = 0.2
    tau_c: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("tau_f", "tau_c"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    diff: float
    gcl: float
    mi: float
    ccl: float
    ent: float
    kl: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "recon": self.recon,
            "diff": self.diff,
            "gcl": self.gcl,
            "mi": self.mi,
            "ccl": self.ccl,
            "ent": self.ent,
            "kl": self.kl,
            "total": self.total,
        }


def recon_loss(params: ModelParams, xs, zs, mask: np.ndarray) -> torch.Tensor:
    """Masked autoencoding error.

    Sums squared reconstruction error over available (sample, view) pairs and
    divides by the number of such pairs. xs holds the raw per-view inputs for
    the batch; zs the corresponding latents; mask the batch rows of the
    availability mask.
    """
    mask = np.asarray(mask, dtype=bool)
    total = None
    count = 0
    for v, (x, z) in enumerate(zip(xs, zs)):
        avail = np.flatnonzero(mask[:, v])
        if avail.size == 0:
            continue
        idx = torch.as_tensor(avail)
        x = torch.as_tensor(np.asarray(x), dtype=params.dtype) if not isinstance(x, torch.Tensor) else x
        err = ((decode(params, v, z[idx]) - x[idx]) ** 2).sum()
        total = err if total is None else total + err
        count += avail.size
    if total is None:
        raise ValueError("recon_loss needs at least one available (sample, view) pair")
    return total / count


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity between rows of a and rows of b."""
    a = a / a.norm(dim=1, keepdim=True).clamp_min(1e-12)
    b = b / b.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return a @ b.T


def _ntxent_pair(anchor: torch.Tensor, other: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean NT-Xent loss over anchors, positives on the diagonal.

    Negatives for anchor i are every row of `other` plus every row j != i of
    `anchor` itself (2P - 1 denominator terms after excluding the self pair).
    """
    p = anchor.shape[0]
    if p < 2:
        raise DegenerateBatchError(f"NT-Xent needs >= 2 samples, got {p}")
    cross = torch.exp(_cosine(anchor, other) / tau)
    within = torch.exp(_cosine(anchor, anchor) / tau)
    pos = cross.diagonal()
    denom = cross.sum(dim=1) + within.sum(dim=1) - within.diagonal()
    return -torch.log(pos / denom).mean()


def feature_contrastive(z_gen: torch.Tensor, zs_real, m: int, tau_f: float) -> torch.Tensor:
    """Instance-level alignment of a generated view against the real views.

    z_gen holds generated latents for view m over the paired rows; zs_real the
    real latents of every view over the same rows. For each other view n the
    positive pair is (gen_i, real_i); both orderings of each view pair are
    averaged with the conventional 1/2.
    """
    if z_gen.shape[0] < 2:
        raise DegenerateBatchError(f"feature_contrastive needs >= 2 paired samples, got {z_gen.shape[0]}")
    total = None
    for n, z_real in enumerate(zs_real):
        if n == m:
            continue
        pair = 0.5 * (_ntxent_pair(z_gen, z_real, tau_f) + _ntxent_pair(z_real, z_gen, tau_f))
        total = pair if total is None else total + pair
    if total is None:
        raise ValueError("feature_contrastive needs at least one other view")
    return total


def _check_row_stochastic(q: torch.Tensor, name: str, atol: float = 1e-5) -> None:
    if q.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {tuple(q.shape)}")
    if (q < -atol).any() or (q.sum(dim=1) - 1.0).abs().max() > atol:
        raise ValueError(f"{name} rows must be nonnegative and sum to 1")


def mutual_info_loss(q_h: torch.Tensor, q_v: torch.Tensor) -> torch.Tensor:
    """Negative mutual information of the cluster-level joint distribution.

    The joint is the normalized cross product of the two soft-assignment
    matrices, symmetrized. Returns a value in [-log K, 0]; minimizing it
    maximizes the shared cluster information.
    """
    _check_row_stochastic(q_h, "q_h")
    _check_row_stochastic(q_v, "q_v")
    if q_h.shape != q_v.shape:
        raise ValueError(f"shape mismatch {tuple(q_h.shape)} vs {tuple(q_v.shape)}")
    n = q_h.shape[0]
    joint = (q_h.T @ q_v) / n
    joint = 0.5 * (joint + joint.T)
    row = joint.sum(dim=1, keepdim=True)
    col = joint.sum(dim=0, keepdim=True)
    ratio = joint / (row * col)
    mi = torch.where(joint > 0, joint * torch.log(ratio.clamp_min(1e-300)), joint.new_zeros(())).sum()
    return -mi


def category_contrastive(qs, tau_c: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Column-space contrastive loss across views plus an entropy regularizer.

    Treats each assignment matrix's K columns as cluster prototypes; for every
    ordered view pair, column j of one view is pulled toward column j of the
    other and pushed from the remaining 2K - 2 columns. The regularizer sums
    s log s over per-view column means, discouraging collapsed clusters.
    Returns (contrastive part, regularizer part).
    """
    if len(qs) < 2:
        raise ValueError(f"category_contrastive needs >= 2 views, got {len(qs)}")
    shape = qs[0].shape
    for i, q in enumerate(qs):
        _check_row_stochastic(q, f"qs[{i}]")
        if q.shape != shape:
            raise ValueError("assignment matrices must share a shape")
    contrast = None
    for a in range(len(qs)):
        for b in range(len(qs)):
            if a == b:
                continue
            pair = _ntxent_pair(qs[a].T, qs[b].T, tau_c)
            contrast = pair if contrast is None else contrast + pair
    contrast = 0.5 * contrast
    ent = None
    for q in qs:
        s = q.mean(dim=0)
        term = (s * torch.log(s.clamp_min(1e-300))).sum()
        ent = term if ent is None else ent + term
    return contrast, ent


def sharpen_targets(q_fused: torch.Tensor, q_v: torch.Tensor) -> torch.Tensor:
    """Self-training targets: elementwise max of the two assignments, then
    per-row square-and-renormalize. Never increases row entropy."""
    if q_fused.shape != q_v.shape:
        raise ValueError(f"shape mismatch {tuple(q_fused.shape)} vs {tuple(q_v.shape)}")
    q = torch.maximum(q_fused, q_v)
    sq = q * q
    denom = sq.sum(dim=1, keepdim=True)
    if (denom == 0).any():
        raise ValueError("a row collapsed to all zeros; cannot sharpen")
    return sq / denom


def kl_self_training(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(P || Q) between row-stochastic targets and assignments, summed over
    all entries with the 0 log 0 = 0 convention."""
    _check_row_stochastic(p, "p")
    _check_row_stochastic(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    support = p > 0
    if (q.detach()[support] <= 0).any():
        raise ValueError("q is 0 where p > 0; KL divergence is infinite")
    terms = torch.where(support, p * (torch.log(p.clamp_min(1e-300)) - torch.log(q.clamp_min(1e-300))), p.new_zeros(()))
    return terms.sum()


def total_loss(
    recon, diff, gcl, mi, ccl, ent, kl, weights: LossWeights
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the seven components and its per-component report."""
    zero = torch.zeros(())

    def t(x):
        return x if isinstance(x, torch.Tensor) else zero + float(x)

    recon, diff, gcl, mi, ccl, ent, kl = map(t, (recon, diff, gcl, mi, ccl, ent, kl))
    total = (
        recon
        + weights.lambda1 * (diff + gcl)
        + weights.lambda2 * mi
        + weights.lambda3 * (ccl + ent + kl)
    )
    parts = {k: float(v.detach()) for k, v in
             dict(recon=recon, diff=diff, gcl=gcl, mi=mi, ccl=ccl, ent=ent, kl=kl).items()}
    # recompute the reported total from the recorded parts so the breakdown's
    # weighted-sum identity holds exactly even under 32-bit training
    reported = (
        parts["recon"]
        + weights.lambda1 * (parts["diff"] + parts["gcl"])
        + weights.lambda2 * parts["mi"]
        + weights.lambda3 * (parts["ccl"] + parts["ent"] + parts["kl"])
    )
    return total, LossBreakdown(total=reported, **parts)
