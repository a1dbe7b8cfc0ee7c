"""Trainable components: per-view autoencoders, time-conditioned denoisers,
a shared softmax classifier, and the attention fusion network.

All forward operations are deterministic given (params, inputs). Parameters
live in torch modules grouped by role; initialization is seed-controlled so
equal seeds give bitwise-equal parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


class ShapeError(ValueError):
    """Raised when an input matrix does not match the network's expectation."""


_ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "gelu": torch.nn.functional.gelu,
    "elu": torch.nn.functional.elu,
}


@dataclass(frozen=True)
class NetworkSpec:
    """Hyperparameters fixing every parameter shape in the model."""

    view_dims: tuple[int, ...]
    k: int
    latent_dim: int = 10
    hidden_sizes_ae: tuple[int, ...] = (500, 500, 2000)
    hidden_sizes_denoiser: tuple[int, ...] = (256, 128, 256)
    time_embed_dim: int = 16
    fusion_hidden: tuple[int, int, int] = (256, 128, 64)
    delta: float = 10.0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "view_dims", tuple(int(d) for d in self.view_dims))
        object.__setattr__(self, "hidden_sizes_ae", tuple(int(d) for d in self.hidden_sizes_ae))
        object.__setattr__(
            self, "hidden_sizes_denoiser", tuple(int(d) for d in self.hidden_sizes_denoiser)
        )
        object.__setattr__(self, "fusion_hidden", tuple(int(d) for d in self.fusion_hidden))
        if not self.view_dims:
            raise ValueError("need at least one view")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.latent_dim < 2:
            raise ValueError(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.time_embed_dim <= 0 or self.time_embed_dim % 2 != 0:
            raise ValueError(f"time_embed_dim must be a positive even int, got {self.time_embed_dim}")
        if len(self.fusion_hidden) != 3:
            raise ValueError(f"fusion_hidden must list 3 widths, got {self.fusion_hidden}")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(_ACTIVATIONS)}")

    @property
    def n_views(self) -> int:
        return len(self.view_dims)


def time_embedding(t, d_pe: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Sinusoidal positional encoding of diffusion step t.

    Components interleave sin(t / 10000^(2i/d)) and cos(t / 10000^((2i+1)/d)).
    Accepts a scalar step or a 1-D batch of steps; defined for arbitrarily
    large t, which is what lets inference extrapolate past the training horizon.
    """
    if d_pe <= 0 or d_pe % 2 != 0:
        raise ValueError(f"d_pe must be a positive even int, got {d_pe}")
    t = torch.as_tensor(t, dtype=dtype, device=device)
    if t.ndim > 1:
        raise ValueError(f"t must be scalar or 1-D, got shape {tuple(t.shape)}")
    half = torch.arange(d_pe // 2, dtype=dtype, device=device)
    sin_freq = torch.pow(10000.0, -2.0 * half / d_pe)
    cos_freq = torch.pow(10000.0, -(2.0 * half + 1.0) / d_pe)
    out_shape = t.shape + (d_pe,)
    out = torch.empty(out_shape, dtype=dtype, device=device)
    out[..., 0::2] = torch.sin(t[..., None] * sin_freq)
    out[..., 1::2] = torch.cos(t[..., None] * cos_freq)
    return out


def _mlp(dims: list[int], activation: str, final_linear: bool = True) -> nn.Sequential:
    act_cls = {"relu": nn.ReLU, "tanh": nn.Tanh, "gelu": nn.GELU, "elu": nn.ELU}[activation]
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2 or not final_linear:
            layers.append(act_cls())
    return nn.Sequential(*layers)


class _Denoiser(nn.Module):
    """Residual MLP noise predictor with time embedding concatenated to every block.

    Mirrored hidden widths (e.g. d -> 256 -> 128 -> 256 -> d) get additive skip
    connections between equal-width layers, a 1-D stand-in for a U-shaped net.
    """

    def __init__(self, d: int, widths: tuple[int, ...], d_pe: int, activation: str):
        super().__init__()
        self.widths = widths
        self.act = _ACTIVATIONS[activation]
        blocks = []
        prev = d
        for w in widths:
            blocks.append(nn.Linear(prev + d_pe, w))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Linear(prev + d_pe, d)

    def forward(self, z: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        n = len(self.widths)
        h = z
        skips: list[torch.Tensor] = []
        for i, lin in enumerate(self.blocks):
            h = self.act(lin(torch.cat([h, emb], dim=1)))
            mirror = n - 1 - i
            if mirror < i and self.widths[mirror] == self.widths[i]:
                h = h + skips[mirror]
            skips.append(h)
        return self.out(torch.cat([h, emb], dim=1))


class ModelParams:
    """All trainable parameters grouped by role, plus the spec that shaped them."""

    def __init__(self, spec: NetworkSpec, precision: int = 32):
        if precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {precision}")
        self.spec = spec
        self.precision = precision
        self.dtype = torch.float32 if precision == 32 else torch.float64
        d, d_pe, act = spec.latent_dim, spec.time_embed_dim, spec.activation
        root = nn.Module()
        # the parameter-free LayerNorm pins every latent to the sqrt(d) shell,
        # so the diffusion forward marginals and the latent manifold share one
        # scale and the reverse chain never walks off the trained region
        root.encoders = nn.ModuleList(
            nn.Sequential(
                _mlp([dv, *spec.hidden_sizes_ae, d], act),
                nn.LayerNorm(d, elementwise_affine=False),
            )
            for dv in spec.view_dims
        )
        root.decoders = nn.ModuleList(
            _mlp([d, *reversed(spec.hidden_sizes_ae), dv], act) for dv in spec.view_dims
        )
        root.denoisers = nn.ModuleList(
            _Denoiser(d, spec.hidden_sizes_denoiser, d_pe, act) for _ in spec.view_dims
        )
        root.classifier = nn.Linear(d, spec.k)
        root.fusion = _mlp([spec.n_views * d, *spec.fusion_hidden, spec.n_views], act)
        root.to(self.dtype)
        self.module = root

    def parameters(self):
        return self.module.parameters()

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Role-qualified name -> numpy array snapshot of every parameter."""
        return {name: p.detach().cpu().numpy().copy() for name, p in self.module.named_parameters()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        own = dict(self.module.named_parameters())
        if set(own) != set(tensors):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise ValueError(f"parameter name mismatch: missing={missing}, unexpected={extra}")
        with torch.no_grad():
            for name, p in own.items():
                arr = np.asarray(tensors[name])
                if arr.shape != tuple(p.shape):
                    raise ShapeError(f"{name}: expected shape {tuple(p.shape)}, got {arr.shape}")
                p.copy_(torch.from_numpy(arr.astype(p.detach().numpy().dtype, copy=False)))


def init_params(spec: NetworkSpec, seed: int = 0, precision: int = 32) -> ModelParams:
    """Build the model with uniform fan-in-scaled init, deterministic in seed."""
    params = ModelParams(spec, precision=precision)
    gen = torch.Generator()
    gen.manual_seed(int(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x6E657473]).generate_state(1)[0]))
    with torch.no_grad():
        for mod in params.module.modules():
            if isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                mod.weight.uniform_(-bound, bound, generator=gen)
                mod.bias.uniform_(-bound, bound, generator=gen)
    return params


def _as_tensor(x, dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def encode(params: ModelParams, v: int, x) -> torch.Tensor:
    """Per-view encoder forward pass: B x D_v -> B x d."""
    x = _as_tensor(x, params.dtype)
    dv = params.spec.view_dims[v]
    if x.ndim != 2 or x.shape[1] != dv:
        raise ShapeError(f"encode view {v}: expected B x {dv}, got {tuple(x.shape)}")
    return params.module.encoders[v](x)


def decode(params: ModelParams, v: int, z) -> torch.Tensor:
    """Per-view decoder forward pass: B x d -> B x D_v."""
    z = _as_tensor(z, params.dtype)
    d = params.spec.latent_dim
    if z.ndim != 2 or z.shape[1] != d:
        raise ShapeError(f"decode view {v}: expected B x {d}, got {tuple(z.shape)}")
    return params.module.decoders[v](z)


def denoise(params: ModelParams, v: int, z_t, t) -> torch.Tensor:
    """Predict the noise in z_t at diffusion step t with view v's denoiser.

    t may be a scalar step or a length-B vector of per-sample steps; any step
    >= 1 is accepted, including steps beyond the training horizon.
    """
    z_t = _as_tensor(z_t, params.dtype)
    d = params.spec.latent_dim
    if z_t.ndim != 2 or z_t.shape[1] != d:
        raise ShapeError(f"denoise view {v}: expected B x {d}, got {tuple(z_t.shape)}")
    t_arr = torch.as_tensor(t)
    if (t_arr < 1).any():
        raise ValueError(f"diffusion step must be >= 1, got {t}")
    emb = time_embedding(t_arr, params.spec.time_embed_dim, dtype=params.dtype)
    if emb.ndim == 1:
        emb = emb.expand(z_t.shape[0], -1)
    elif emb.shape[0] != z_t.shape[0]:
        raise ShapeError(f"denoise view {v}: {z_t.shape[0]} rows but {emb.shape[0]} steps")
    return params.module.denoisers[v](z_t, emb)


def classify(params: ModelParams, z) -> torch.Tensor:
    """Shared classifier: B x d -> row-stochastic B x K soft assignments."""
    z = _as_tensor(z, params.dtype)
    d = params.spec.latent_dim
    if z.ndim != 2 or z.shape[1] != d:
        raise ShapeError(f"classify: expected B x {d}, got {tuple(z.shape)}")
    return torch.softmax(params.module.classifier(z), dim=1)


def fuse(params: ModelParams, zs) -> tuple[torch.Tensor, torch.Tensor]:
    """Attention fusion of per-view latents into one representation.

    A shared MLP scores the concatenated latents, scores pass through a
    sigmoid, are averaged over the batch, tempered by 1/delta, and softmaxed
    into a single view-weight vector w; H = sum_v w_v Z^v.
    """
    spec = params.spec
    zs = [_as_tensor(z, params.dtype) for z in zs]
    if len(zs) != spec.n_views:
        raise ShapeError(f"fuse: expected {spec.n_views} views, got {len(zs)}")
    b, d = zs[0].shape
    for v, z in enumerate(zs):
        if z.shape != (b, d):
            raise ShapeError(f"fuse view {v}: expected {(b, d)}, got {tuple(z.shape)}")
    if d != spec.latent_dim:
        raise ShapeError(f"fuse: expected latent dim {spec.latent_dim}, got {d}")
    if b == 0:
        w = torch.full((spec.n_views,), 1.0 / spec.n_views, dtype=params.dtype)
        return zs[0].clone(), w
    scores = torch.sigmoid(params.module.fusion(torch.cat(zs, dim=1)))
    w = torch.softmax(scores.mean(dim=0) / spec.delta, dim=0)
    h = sum(w[v] * zs[v] for v in range(spec.n_views))
    return h, w
