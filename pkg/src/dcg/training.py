"""End-to-end optimization: autoencoder warm-up, the joint training loop over
all loss components, and versioned checkpointing with exact resume."""

from __future__ import annotations

import io
import json
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import MultiViewDataset, _rng, minibatches, paired_indices
from .diffusion import DiffusionSchedule, diffusion_loss, estimate_x0, forward_sample, make_schedule
from .metrics import evaluate
from .networks import ModelParams, NetworkSpec, classify, denoise, encode, fuse, init_params
from .objectives import (
    LossBreakdown,
    LossWeights,
    category_contrastive,
    feature_contrastive,
    kl_self_training,
    mutual_info_loss,
    recon_loss,
    sharpen_targets,
    total_loss,
)

CHECKPOINT_VERSION = 1

ABLATABLE = ("diff", "gcl", "mi", "ccl", "kl")

# distinct RNG stream tags so warm-up and joint training never share draws
_TAG_PRETRAIN = 1
_TAG_FIT = 2


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


class CheckpointError(RuntimeError):
    """Raised for unreadable, truncated, or version-mismatched checkpoints."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    pretrain_epochs: int = 100
    batch: int = 256
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    T: int = 50
    t_ext: int = 100
    precision: int = 32
    grad_clip: float = 0.0
    head_warmup: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.pretrain_epochs < 0:
            raise ValueError(f"pretrain_epochs must be >= 0, got {self.pretrain_epochs}")
        if self.batch < 2:
            raise ValueError(f"batch must be >= 2, got {self.batch}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.T < 1 or self.t_ext < 1:
            raise ValueError("T and t_ext must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.grad_clip < 0:
            raise ValueError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.head_warmup < 0:
            raise ValueError(f"head_warmup must be >= 0, got {self.head_warmup}")


@dataclass
class TrainReport:
    history: list[LossBreakdown] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def _epoch_generator(seed: int, tag: int, epoch: int) -> torch.Generator:
    state = np.random.SeedSequence([seed & 0xFFFFFFFF, tag, epoch]).generate_state(1, np.uint64)
    gen = torch.Generator()
    gen.manual_seed(int(state[0] & 0x7FFFFFFFFFFFFFFF))
    return gen


def make_optimizer(cfg: TrainConfig, parameters) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(parameters, lr=cfg.learning_rate)
    return torch.optim.SGD(parameters, lr=cfg.learning_rate)


def _batch_views(ds: MultiViewDataset, idx: np.ndarray, dtype) -> list[torch.Tensor]:
    return [torch.as_tensor(ds.views[v][idx], dtype=dtype) for v in range(ds.n_views)]


def _encode_available(
    params: ModelParams, xs: list[torch.Tensor], mask_b: np.ndarray
) -> list[torch.Tensor]:
    """Encode only mask-available rows; absent rows stay zero and carry no grad."""
    out = []
    for v, x in enumerate(xs):
        avail = np.flatnonzero(mask_b[:, v])
        z = torch.zeros((x.shape[0], params.spec.latent_dim), dtype=params.dtype)
        if avail.size:
            idx = torch.as_tensor(avail)
            z = z.index_copy(0, idx, encode(params, v, x[idx]))
        out.append(z)
    return out


def _impute_one_step(
    params: ModelParams,
    sched: DiffusionSchedule,
    zs: list[torch.Tensor],
    mask_b: np.ndarray,
) -> list[torch.Tensor]:
    """Fill missing latents with the cheap surrogate of full recovery: treat
    each available donor view's latent as the target view's state at step T,
    denoise once, invert the forward map, and average over donors."""
    if mask_b.all():
        return zs
    n_views = len(zs)
    out = list(zs)
    for m in range(n_views):
        miss = np.flatnonzero(~mask_b[:, m])
        if miss.size == 0:
            continue
        acc = torch.zeros((miss.size, zs[m].shape[1]), dtype=zs[m].dtype)
        counts = torch.zeros(miss.size, dtype=zs[m].dtype)
        for j in range(n_views):
            if j == m:
                continue
            donors = mask_b[miss, j]
            if not donors.any():
                continue
            rows = torch.as_tensor(miss[donors])
            z_j = zs[j][rows]
            z_hat = estimate_x0(sched, z_j, sched.T, denoise(params, m, z_j, sched.T))
            local = torch.as_tensor(np.flatnonzero(donors))
            acc = acc.index_add(0, local, z_hat)
            counts = counts.index_add(0, local, torch.ones(len(rows), dtype=counts.dtype))
        if (counts == 0).any():
            raise ValueError(f"view {m}: missing rows without any donor view")
        filled = acc / counts.unsqueeze(1)
        out[m] = out[m].index_copy(0, torch.as_tensor(miss), filled)
    return out


def _quick_assignments(
    params: ModelParams, sched: DiffusionSchedule, ds: MultiViewDataset
) -> tuple[torch.Tensor, list[torch.Tensor], torch.Tensor]:
    """Whole-dataset fused and per-view soft assignments using the training-time
    one-step imputation (cheap validation pass, not the full recovery)."""
    with torch.no_grad():
        xs = _batch_views(ds, np.arange(ds.n_samples), params.dtype)
        zs = _encode_available(params, xs, ds.mask)
        zs = _impute_one_step(params, sched, zs, ds.mask)
        h, _ = fuse(params, zs)
        return classify(params, h), [classify(params, z) for z in zs], h


def _kmeans(x: np.ndarray, k: int, seed: int, restarts: int = 10, iters: int = 100):
    """Deterministic Lloyd k-means with k-means++ seeding; the best of
    `restarts` runs by inertia. Returns (centroids, assignments)."""
    rng = _rng(seed, 0x4B4D45)
    best = None
    for _ in range(restarts):
        centroids = np.empty((k, x.shape[1]))
        centroids[0] = x[rng.integers(len(x))]
        d2 = ((x - centroids[0]) ** 2).sum(axis=1)
        for j in range(1, k):
            total = d2.sum()
            probs = d2 / total if total > 0 else np.full(len(x), 1.0 / len(x))
            centroids[j] = x[rng.choice(len(x), p=probs)]
            d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
        assign = None
        for _ in range(iters):
            dists = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=2)
            new_assign = dists.argmin(axis=1)
            if assign is not None and (new_assign == assign).all():
                break
            assign = new_assign
            for j in range(k):
                rows = x[assign == j]
                centroids[j] = rows.mean(axis=0) if len(rows) else x[dists.min(axis=1).argmax()]
        inertia = ((x - centroids[assign]) ** 2).sum()
        if best is None or inertia < best[0]:
            best = (inertia, centroids.copy(), assign.copy())
    return best[1], best[2]


def _init_head_from_kmeans(
    params: ModelParams, sched: DiffusionSchedule, ds: MultiViewDataset, cfg: TrainConfig
) -> None:
    """Warm-start the shared classifier as the posterior of an isotropic
    Gaussian mixture fitted by k-means on the current fused latents, so
    self-training starts from a sensible partition instead of a random head."""
    _, _, h = _quick_assignments(params, sched, ds)
    x = h.numpy().astype(np.float64)
    centroids, assign = _kmeans(x, params.spec.k, cfg.seed)
    sigma2 = max(((x - centroids[assign]) ** 2).sum(axis=1).mean() / x.shape[1], 1e-12)
    weight = centroids / sigma2
    bias = -(centroids**2).sum(axis=1) / (2.0 * sigma2)
    # keep the head confident but never saturated: bound the per-row logit
    # spread so every softmax entry stays strictly positive in float32
    logits = x @ weight.T + bias
    gap = (logits.max(axis=1) - logits.min(axis=1)).max()
    scale = max(1.0, gap / 12.0)
    with torch.no_grad():
        params.module.classifier.weight.copy_(torch.as_tensor(weight / scale, dtype=params.dtype))
        params.module.classifier.bias.copy_(torch.as_tensor(bias / scale, dtype=params.dtype))


def _first_nonfinite(breakdown: LossBreakdown) -> str | None:
    for name, value in breakdown.as_dict().items():
        if name != "total" and not np.isfinite(value):
            return name
    return None if np.isfinite(breakdown.total) else "total"


def pretrain_autoencoders(
    params: ModelParams, ds: MultiViewDataset, cfg: TrainConfig
) -> TrainReport:
    """Warm-up: optimize masked reconstruction alone for cfg.pretrain_epochs."""
    report = TrainReport()
    if cfg.pretrain_epochs == 0:
        return report
    ae_params = list(params.module.encoders.parameters()) + list(
        params.module.decoders.parameters()
    )
    opt = make_optimizer(cfg, ae_params)
    for epoch in range(cfg.pretrain_epochs):
        start = time.perf_counter()
        epoch_loss = 0.0
        for idx in minibatches(ds, min(cfg.batch, ds.n_samples), cfg.seed ^ 0x5245, epoch):
            xs = _batch_views(ds, idx, params.dtype)
            zs = _encode_available(params, xs, ds.mask[idx])
            loss = recon_loss(params, xs, zs, ds.mask[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        value = epoch_loss / ds.n_samples
        if not np.isfinite(value):
            raise DivergenceError(f"pretrain epoch {epoch}: reconstruction loss became non-finite")
        report.history.append(
            LossBreakdown(recon=value, diff=0, gcl=0, mi=0, ccl=0, ent=0, kl=0, total=value)
        )
        report.seconds.append(time.perf_counter() - start)
    return report


def fit(
    params: ModelParams,
    ds: MultiViewDataset,
    cfg: TrainConfig,
    sched: DiffusionSchedule | None = None,
    ablate: frozenset[str] | set[str] = frozenset(),
    start_epoch: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
) -> TrainReport:
    """Jointly optimize every loss component for epochs start_epoch..cfg.epochs-1.

    ablate names loss components ("diff", "gcl", "mi", "ccl", "kl") that are
    skipped entirely and reported as 0. The first cfg.head_warmup epochs train
    representation terms only (recon/diff/gcl); at the warmup boundary the
    classifier is warm-started from k-means on the fused latents, after which
    the assignment losses (mi/ccl/kl) join in. head_warmup=0 disables staging.
    Passing start_epoch plus an optimizer restored from a checkpoint resumes a
    run exactly (per-epoch RNG streams are derived from (seed, epoch), so an
    epoch-boundary restart loses nothing); the caller keeps the optimizer
    handle for checkpointing.
    """
    unknown = set(ablate) - set(ABLATABLE)
    if unknown:
        raise ValueError(f"unknown ablation flags {sorted(unknown)}; valid: {ABLATABLE}")
    if len(paired_indices(ds)) == 0:
        raise ValueError("fit needs a nonempty paired subset (rows with all views)")
    if sched is None:
        sched = make_schedule(cfg.T)
    w = cfg.weights
    opt = optimizer if optimizer is not None else make_optimizer(cfg, params.module.parameters())
    report = TrainReport()
    batch = min(cfg.batch, ds.n_samples)

    for epoch in range(start_epoch, cfg.epochs):
        start = time.perf_counter()
        if epoch == cfg.head_warmup and cfg.head_warmup > 0 and (w.lambda2 > 0 or w.lambda3 > 0):
            _init_head_from_kmeans(params, sched, ds, cfg)
        head_on = epoch >= cfg.head_warmup
        gen = _epoch_generator(cfg.seed, _TAG_FIT, epoch)
        sums = dict.fromkeys(("recon", "diff", "gcl", "mi", "ccl", "ent", "kl", "total"), 0.0)
        for step, idx in enumerate(minibatches(ds, batch, cfg.seed, epoch)):
            mask_b = ds.mask[idx]
            xs = _batch_views(ds, idx, params.dtype)
            zs = _encode_available(params, xs, mask_b)

            recon = recon_loss(params, xs, zs, mask_b)

            diff = 0.0
            if "diff" not in ablate and w.lambda1 > 0:
                z0_views = []
                for v in range(ds.n_views):
                    avail = np.flatnonzero(mask_b[:, v])
                    z0_views.append(zs[v][torch.as_tensor(avail)] if avail.size else None)
                diff = diffusion_loss(params, sched, z0_views, gen)

            paired_b = np.flatnonzero(mask_b.all(axis=1))
            gcl = 0.0
            if "gcl" not in ablate and w.lambda1 > 0 and paired_b.size >= 2:
                pidx = torch.as_tensor(paired_b)
                z_paired = [zs[v][pidx] for v in range(ds.n_views)]
                # sample the generation step over the full inference horizon,
                # not just the schedule length: steps beyond T reuse the
                # step-T coefficients but exercise the time embeddings the
                # extrapolated reverse chain will query, which otherwise
                # reach the denoiser untrained
                t_gen = int(torch.randint(1, max(sched.T, cfg.t_ext) + 1, (1,), generator=gen))
                t_coef = min(t_gen, sched.T)
                for m in range(ds.n_views):
                    # two one-step generations of view m, both contrasted
                    # against the real latents of the other views:
                    #   self  - noise the real view-m latent and denoise it,
                    #           which drags the view latent spaces into a
                    #           shared geometry through the encoders;
                    #   cross - noise a donor view's latent and denoise it
                    #           with view m's denoiser, training the noise
                    #           predictor on the donor-seeded states the
                    #           recovery chain walks through. Noising the
                    #           seed matters: on a clean donor the loss is
                    #           minimized by predicting zero noise, which
                    #           silently breaks the reverse chain.
                    eps = torch.randn(z_paired[m].shape, generator=gen, dtype=params.dtype)
                    x_t = forward_sample(sched, z_paired[m], t_coef, eps)
                    z_self = estimate_x0(sched, x_t, t_coef, denoise(params, m, x_t, t_gen))
                    cross_parts = []
                    for j in range(ds.n_views):
                        if j == m:
                            continue
                        x_j = forward_sample(sched, z_paired[j], t_coef, eps)
                        cross_parts.append(
                            estimate_x0(sched, x_j, t_coef, denoise(params, m, x_j, t_gen))
                        )
                    z_cross = sum(cross_parts) / len(cross_parts)
                    term = 0.5 * (
                        feature_contrastive(z_self, z_paired, m, w.tau_f)
                        + feature_contrastive(z_cross, z_paired, m, w.tau_f)
                    )
                    gcl = term if isinstance(gcl, float) else gcl + term

            use_mi = head_on and "mi" not in ablate and w.lambda2 > 0
            use_ccl = head_on and "ccl" not in ablate and w.lambda3 > 0
            use_kl = head_on and "kl" not in ablate and w.lambda3 > 0
            mi, ccl, ent, kl = 0.0, 0.0, 0.0, 0.0
            if use_mi or use_ccl or use_kl:
                zs_full = _impute_one_step(params, sched, zs, mask_b)
                h, _ = fuse(params, zs_full)
                q_fused = classify(params, h)
                q_views = [classify(params, z) for z in zs_full]

            if use_mi:
                for q_v in q_views:
                    term = mutual_info_loss(q_fused, q_v)
                    mi = term if isinstance(mi, float) else mi + term

            if use_ccl:
                ccl, ent = category_contrastive(q_views, w.tau_c)

            if use_kl:
                stacked = torch.stack(q_views + [q_fused])
                p_fused = sharpen_targets(stacked.amax(dim=0), q_fused).detach()
                kl = kl_self_training(p_fused, q_fused)
                for q_v in q_views:
                    p_v = sharpen_targets(q_fused, q_v).detach()
                    kl = kl + kl_self_training(p_v, q_v)

            total, breakdown = total_loss(recon, diff, gcl, mi, ccl, ent, kl, w)
            bad = _first_nonfinite(breakdown)
            if bad is not None:
                raise DivergenceError(
                    f"epoch {epoch} step {step}: loss component '{bad}' became non-finite"
                )
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params.module.parameters(), cfg.grad_clip)
            opt.step()
            for name, value in breakdown.as_dict().items():
                sums[name] += value * len(idx)

        report.history.append(
            LossBreakdown(**{k: v / ds.n_samples for k, v in sums.items()})
        )
        if ds.labels is not None:
            q_fused, _, _ = _quick_assignments(params, sched, ds)
            pred = q_fused.argmax(dim=1).numpy()
            rep = evaluate(pred, ds.labels)
            report.metrics.append({"acc": rep.acc, "nmi": rep.nmi, "ari": rep.ari})
        report.seconds.append(time.perf_counter() - start)
    return report


def _weights_to_dict(w: LossWeights) -> dict:
    return asdict(w)


def _config_to_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["weights"] = _weights_to_dict(cfg.weights)
    return out


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    return TrainConfig(**d)


def save_checkpoint(
    params: ModelParams,
    cfg: TrainConfig,
    path: str | Path,
    optimizer: torch.optim.Optimizer | None = None,
    epochs_done: int = 0,
) -> None:
    """Write a versioned container: JSON meta (network spec, train config,
    bookkeeping) plus every parameter and optimizer tensor as a named array."""
    arrays: dict[str, np.ndarray] = {}
    for name, arr in params.named_tensors().items():
        arrays[f"param/{name}"] = arr
    opt_groups = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_groups = state["param_groups"]
        for pid, slots in state["state"].items():
            for key, value in slots.items():
                arrays[f"opt/{pid}/{key}"] = (
                    value.detach().cpu().numpy() if isinstance(value, torch.Tensor)
                    else np.asarray(value)
                )
    meta = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(params.spec),
        "train_config": _config_to_dict(cfg),
        "precision": params.precision,
        "epochs_done": int(epochs_done),
        "optimizer_groups": opt_groups,
        "dtype": "<f4" if params.precision == 32 else "<f8",
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8).copy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with io.BytesIO() as buf:
        np.savez(buf, **arrays)
        path.write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    params: ModelParams
    cfg: TrainConfig
    optimizer_state: dict | None
    epochs_done: int

    def __iter__(self):
        # allows `params, cfg = load_checkpoint(path)`
        return iter((self.params, self.cfg))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Restore parameters bitwise and configs value-exactly from save_checkpoint."""
    try:
        with np.load(path, allow_pickle=False) as data:
            if "meta" not in data:
                raise CheckpointError(f"{path}: not a checkpoint (missing meta)")
            meta = json.loads(bytes(data["meta"].tobytes()).decode("utf-8"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: checkpoint version {meta.get('version')} unsupported "
                    f"(expected {CHECKPOINT_VERSION})"
                )
            spec = NetworkSpec(**meta["spec"])
            cfg = _config_from_dict(meta["train_config"])
            params = ModelParams(spec, precision=meta["precision"])
            tensors = {
                name[len("param/"):]: data[name]
                for name in data.files
                if name.startswith("param/")
            }
            params.load_tensors(tensors)
            optimizer_state = None
            if meta.get("optimizer_groups") is not None:
                state: dict[int, dict] = {}
                for name in data.files:
                    if not name.startswith("opt/"):
                        continue
                    _, pid, key = name.split("/", 2)
                    arr = data[name]
                    state.setdefault(int(pid), {})[key] = (
                        torch.from_numpy(arr.copy()) if arr.ndim else torch.tensor(arr.item())
                    )
                optimizer_state = {
                    "state": state,
                    "param_groups": meta["optimizer_groups"],
                }
    except (zipfile.BadZipFile, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint ({exc})") from exc
    return Checkpoint(
        params=params,
        cfg=cfg,
        optimizer_state=optimizer_state,
        epochs_done=int(meta["epochs_done"]),
    )


def restore_optimizer(
    cfg: TrainConfig, params: ModelParams, state: dict
) -> torch.optim.Optimizer:
    """Rebuild the optimizer for params and load a checkpointed state dict."""
    opt = make_optimizer(cfg, params.module.parameters())
    opt.load_state_dict(state)
    return opt


def train_full(
    params: ModelParams,
    ds: MultiViewDataset,
    cfg: TrainConfig,
    ablate: frozenset[str] | set[str] = frozenset(),
) -> tuple[TrainReport, TrainReport, DiffusionSchedule]:
    """Convenience pipeline: warm-up then joint training; returns both reports
    and the schedule used."""
    sched = make_schedule(cfg.T)
    pre = pretrain_autoencoders(params, ds, cfg)
    main = fit(params, ds, cfg, sched=sched, ablate=ablate)
    return pre, main, sched
