"""Latent-space denoising diffusion: noise schedule, closed-form forward
corruption, training loss, one-step clean estimates, iterative reverse
sampling, and recovery of missing views from available ones.

The reverse chain may run from a horizon longer than the training horizon T;
schedule coefficients are then clamped at index T while the true step number
still feeds the periodic time embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .networks import ModelParams, denoise


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear noise schedule and its derived per-step coefficients.

    Vectors are indexed 0..T-1 for steps 1..T. sigmas[0] is 0 by the
    convention alpha_bar at step 0 equals 1, making the final reverse step
    deterministic.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "sigmas"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.T < 1 or any(
            getattr(self, n).shape != (self.T,) for n in ("betas", "alphas", "alpha_bars", "sigmas")
        ):
            raise ValueError("schedule vectors must all have length T >= 1")
        if not (self.betas > 0).all() or not (self.betas < 1).all():
            raise ValueError("betas must lie in (0, 1)")
        if not (np.diff(self.alpha_bars) < 0).all() and self.T > 1:
            raise ValueError("alpha_bars must be strictly decreasing")

    def coeffs_at(self, t: int) -> tuple[float, float, float, float]:
        """(beta, alpha, alpha_bar, sigma) for step t, clamped at T for t > T."""
        if t < 1:
            raise ValueError(f"diffusion step must be >= 1, got {t}")
        i = min(t, self.T) - 1
        return (
            float(self.betas[i]),
            float(self.alphas[i]),
            float(self.alpha_bars[i]),
            float(self.sigmas[i]),
        )


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta spacing from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt((1.0 - alpha_bars_prev) / (1.0 - alpha_bars) * betas)
    return DiffusionSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigmas=sigmas)


def _as_tensor(x, like: torch.Tensor | None = None, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or (like.dtype if like is not None else None))


def forward_sample(sched: DiffusionSchedule, z0, t: int, eps) -> torch.Tensor:
    """Closed-form corruption: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must be in 1..{sched.T}, got {t}")
    z0 = _as_tensor(z0)
    eps = _as_tensor(eps, dtype=z0.dtype)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    abar = sched.alpha_bars[t - 1]
    return float(np.sqrt(abar)) * z0 + float(np.sqrt(1.0 - abar)) * eps


def estimate_x0(sched: DiffusionSchedule, z_t, t: int, eps_hat) -> torch.Tensor:
    """Invert the forward corruption given a noise estimate: one-step clean guess."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must be in 1..{sched.T}, got {t}")
    z_t = _as_tensor(z_t)
    eps_hat = _as_tensor(eps_hat, dtype=z_t.dtype)
    abar = sched.alpha_bars[t - 1]
    return (z_t - float(np.sqrt(1.0 - abar)) * eps_hat) / float(np.sqrt(abar))


def diffusion_loss(
    params: ModelParams,
    sched: DiffusionSchedule,
    z0_views: list[torch.Tensor | None],
    generator: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction loss summed over views.

    For each view's batch of clean latents, per-sample steps are drawn uniform
    in 1..T and standard-normal noise is injected; the loss is the mean over
    samples of the squared error between true and predicted noise, summed over
    latent coordinates. Views passed as None (or empty) are skipped.
    """
    total = None
    for v, z0 in enumerate(z0_views):
        if z0 is None or z0.shape[0] == 0:
            continue
        b = z0.shape[0]
        t = torch.randint(1, sched.T + 1, (b,), generator=generator)
        eps = torch.empty_like(z0).normal_(generator=generator)
        abar = torch.as_tensor(sched.alpha_bars, dtype=z0.dtype)[t - 1].unsqueeze(1)
        z_t = torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
        eps_hat = denoise(params, v, z_t, t)
        view_loss = ((eps - eps_hat) ** 2).sum(dim=1).mean()
        total = view_loss if total is None else total + view_loss
    if total is None:
        raise ValueError("diffusion_loss needs at least one non-empty view batch")
    return total


def _predict_noise(params, v: int, z_t: torch.Tensor, t: int) -> torch.Tensor:
    if isinstance(params, ModelParams):
        return denoise(params, v, z_t, t)
    if callable(params):
        return params(v, z_t, t)
    raise TypeError(f"params must be ModelParams or a callable predictor, got {type(params)}")


def reverse_step(
    params,
    sched: DiffusionSchedule,
    v: int,
    z_t: torch.Tensor,
    t: int,
    xi: torch.Tensor | None,
) -> torch.Tensor:
    """One reverse-denoising update from step t to t-1 with view v's denoiser.

    Schedule coefficients are clamped at T for extrapolated steps t > T; the
    unclamped t still reaches the denoiser's time embedding. xi is the
    caller-supplied standard-normal draw (ignored at t=1 where sigma is 0);
    None means no noise. params may also be a bare noise-predictor callable
    (v, z_t, t) -> eps_hat, which is how oracle tests drive the chain.
    """
    z_t = _as_tensor(z_t)
    _, alpha, abar, sigma = sched.coeffs_at(t)
    eps_hat = _predict_noise(params, v, z_t, t)
    mean = (z_t - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if xi is None or sigma == 0.0:
        return mean
    xi = _as_tensor(xi, dtype=z_t.dtype)
    if xi.shape != z_t.shape:
        raise ValueError(f"xi shape {tuple(xi.shape)} != z shape {tuple(z_t.shape)}")
    return mean + sigma * xi


def sample_chain(
    params,
    sched: DiffusionSchedule,
    v: int,
    z_start: torch.Tensor,
    t_start: int,
    xi_draw=None,
) -> torch.Tensor:
    """Run the reverse chain from step t_start down to 1.

    xi_draw(t, shape) supplies the per-step noise; None runs the deterministic
    mean chain.
    """
    if t_start < 1:
        raise ValueError(f"t_start must be >= 1, got {t_start}")
    z = z_start
    for t in range(t_start, 0, -1):
        xi = None if xi_draw is None else xi_draw(t, z.shape)
        z = reverse_step(params, sched, v, z, t, xi)
    return z


def recover_missing(
    params: ModelParams,
    sched: DiffusionSchedule,
    latents: list[torch.Tensor],
    mask: np.ndarray,
    t_ext: int,
    seed: int = 0,
) -> list[torch.Tensor]:
    """Fill missing per-view latents by cross-view reverse diffusion.

    For each missing (sample, view m) pair, every available view j's latent
    seeds a deterministic reverse chain through view m's denoiser from t_ext
    down to 1; the chain outputs are averaged over the available views.
    Available entries pass through untouched. Runs under no_grad; the chain
    itself is noise-free, so the result is deterministic.
    """
    if t_ext < 1:
        raise ValueError(f"t_ext must be >= 1, got {t_ext}")
    mask = np.asarray(mask, dtype=bool)
    n_views = len(latents)
    if mask.shape[1] != n_views:
        raise ValueError(f"mask has {mask.shape[1]} view columns, expected {n_views}")
    if not mask.any(axis=1).all():
        raise ValueError("every sample needs at least one available view")
    if mask.all():
        return [z.clone() for z in latents]

    out = [z.clone() for z in latents]
    with torch.no_grad():
        for m in range(n_views):
            miss = np.flatnonzero(~mask[:, m])
            if miss.size == 0:
                continue
            acc = torch.zeros((miss.size, latents[m].shape[1]), dtype=latents[m].dtype)
            counts = torch.zeros(miss.size, dtype=latents[m].dtype)
            for j in range(n_views):
                if j == m:
                    continue
                donor_rows = mask[miss, j]
                if not donor_rows.any():
                    continue
                rows = miss[donor_rows]
                z = sample_chain(params, sched, m, latents[j][rows], t_ext)
                idx = torch.as_tensor(np.flatnonzero(donor_rows))
                acc.index_add_(0, idx, z)
                counts.index_add_(0, idx, torch.ones(len(rows), dtype=counts.dtype))
            if (counts == 0).any():
                raise ValueError(f"view {m}: some missing samples have no donor view")
            out[m][miss] = acc / counts.unsqueeze(1)
    return out
