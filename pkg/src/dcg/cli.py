"""Experiment driver: flat-text configs, repeated seeded runs with CSV
reporting, and missing-rate x extrapolation-horizon sweeps.

Config files are flat `key = value` lines with dotted section prefixes
(`train.epochs = 200`); values are JSON literals. Unknown keys are hard
errors. Every artifact an invocation writes is a pure function of the
resolved config, so re-running an experiment reproduces its CSVs exactly.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    DatasetFormatError,
    InvalidMaskError,
    MissingnessSpec,
    MultiViewDataset,
    apply_missingness,
    generate_synthetic,
    load_dataset,
)
from .diffusion import make_schedule
from .inference import NonFiniteModelError, export_embeddings, export_labels, impute_and_cluster
from .metrics import evaluate
from .networks import NetworkSpec, init_params
from .objectives import LossWeights
from .training import (
    ABLATABLE,
    CheckpointError,
    DivergenceError,
    TrainConfig,
    TrainReport,
    load_checkpoint,
    save_checkpoint,
    train_full,
)


class ConfigError(ValueError):
    """Raised for malformed config text, unknown keys, or invalid settings."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Settings for a generated mixture dataset used instead of files on disk."""

    n_per_cluster: int = 200
    clusters: int = 3
    dims: tuple[int, ...] = (5, 5)
    sep: float = 6.0
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


@dataclass(frozen=True)
class NetworkOptions:
    """Architecture knobs exposed to configs; view dims always come from the
    dataset and k falls back to the number of label classes."""

    k: int | None = None
    latent_dim: int = 10
    hidden_sizes_ae: tuple[int, ...] = (500, 500, 2000)
    hidden_sizes_denoiser: tuple[int, ...] = (256, 128, 256)
    time_embed_dim: int = 16
    fusion_hidden: tuple[int, int, int] = (256, 128, 64)
    delta: float = 10.0
    activation: str = "relu"

    def __post_init__(self):
        for name in ("hidden_sizes_ae", "hidden_sizes_denoiser", "fusion_hidden"):
            object.__setattr__(self, name, tuple(int(d) for d in getattr(self, name)))


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: Path
    train: TrainConfig = TrainConfig()
    missing: MissingnessSpec = MissingnessSpec(rate=0.0)
    network: NetworkOptions = NetworkOptions()
    synthetic: SyntheticSpec | None = None
    dataset_path: str | None = None
    ablate: frozenset[str] = frozenset()
    repeats: int = 1
    resume: bool = False

    def __post_init__(self):
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        object.__setattr__(self, "ablate", frozenset(self.ablate))
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        bad = sorted(self.ablate - set(ABLATABLE))
        if bad:
            raise ConfigError(f"unknown ablation flags {bad}; valid flags: {list(ABLATABLE)}")
        if (self.dataset_path is None) == (self.synthetic is None):
            raise ConfigError("config needs exactly one of dataset.path or dataset.synthetic.*")


def parse_config_text(text: str) -> dict[str, object]:
    """Parse `key = value` lines (JSON values, # comments) into a flat dict."""
    flat: dict[str, object] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw.strip()!r}")
        if key in flat:
            raise ConfigError(f"line {ln}: duplicate config key: {key}")
        try:
            flat[key] = json.loads(value)
        except json.JSONDecodeError:
            raise ConfigError(f"line {ln}: value of {key} is not a JSON literal: {value!r}") from None
    return flat


def _allowed_keys() -> set[str]:
    allowed = {"out", "repeats", "ablate", "dataset.path"}
    allowed |= {f"dataset.synthetic.{f.name}" for f in fields(SyntheticSpec)}
    allowed |= {f"missing.{f.name}" for f in fields(MissingnessSpec)}
    allowed |= {f"network.{f.name}" for f in fields(NetworkOptions)}
    allowed |= {f"train.{f.name}" for f in fields(TrainConfig) if f.name != "weights"}
    allowed |= {f"train.weights.{f.name}" for f in fields(LossWeights)}
    return allowed


def _tupled(value):
    return tuple(value) if isinstance(value, list) else value


def _section(flat: dict, prefix: str) -> dict:
    return {
        key[len(prefix):]: _tupled(value)
        for key, value in flat.items()
        if key.startswith(prefix) and "." not in key[len(prefix):]
    }


def _construct(cls, kwargs: dict, section: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def build_experiment_config(
    flat: dict,
    out: str | None = None,
    seed: int | None = None,
    ablate: frozenset[str] | None = None,
    resume: bool = False,
) -> ExperimentConfig:
    """Turn a flat key dict plus command-line overrides into a validated config."""
    allowed = _allowed_keys()
    for key in flat:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {key}")

    syn_kwargs = _section(flat, "dataset.synthetic.")
    synthetic = _construct(SyntheticSpec, syn_kwargs, "dataset.synthetic") if syn_kwargs else None
    missing_kwargs = {"rate": 0.0, **_section(flat, "missing.")}
    missing = _construct(MissingnessSpec, missing_kwargs, "missing")
    network = _construct(NetworkOptions, _section(flat, "network."), "network")

    train_kwargs = _section(flat, "train.")
    weight_kwargs = _section(flat, "train.weights.")
    if weight_kwargs:
        train_kwargs["weights"] = _construct(LossWeights, weight_kwargs, "train.weights")
    if seed is not None:
        train_kwargs["seed"] = seed
    train = _construct(TrainConfig, train_kwargs, "train")

    if ablate is None:
        raw = flat.get("ablate", [])
        if not isinstance(raw, (list, tuple)) or not all(isinstance(a, str) for a in raw):
            raise ConfigError(f"ablate must be a list of strings, got {raw!r}")
        ablate = frozenset(raw)
    out_dir = out if out is not None else flat.get("out", "runs/dcg")
    if not isinstance(out_dir, (str, Path)):
        raise ConfigError(f"out must be a string path, got {out_dir!r}")
    repeats = flat.get("repeats", 1)
    if not isinstance(repeats, int) or isinstance(repeats, bool):
        raise ConfigError(f"repeats must be an integer, got {repeats!r}")
    dataset_path = flat.get("dataset.path")
    if dataset_path is not None and not isinstance(dataset_path, str):
        raise ConfigError(f"dataset.path must be a string, got {dataset_path!r}")
    return ExperimentConfig(
        out_dir=Path(out_dir),
        train=train,
        missing=missing,
        network=network,
        synthetic=synthetic,
        dataset_path=dataset_path,
        ablate=frozenset(ablate),
        repeats=repeats,
        resume=resume,
    )


def freeze_config(config: ExperimentConfig) -> str:
    """Render the fully resolved config back to flat-key text (re-parseable)."""
    flat: dict[str, object] = {}
    if config.dataset_path is not None:
        flat["dataset.path"] = config.dataset_path
    if config.synthetic is not None:
        for f in fields(SyntheticSpec):
            flat[f"dataset.synthetic.{f.name}"] = getattr(config.synthetic, f.name)
    for f in fields(MissingnessSpec):
        flat[f"missing.{f.name}"] = getattr(config.missing, f.name)
    for f in fields(NetworkOptions):
        value = getattr(config.network, f.name)
        if f.name == "k" and value is None:
            continue
        flat[f"network.{f.name}"] = value
    for f in fields(TrainConfig):
        if f.name == "weights":
            continue
        flat[f"train.{f.name}"] = getattr(config.train, f.name)
    for f in fields(LossWeights):
        flat[f"train.weights.{f.name}"] = getattr(config.train.weights, f.name)
    flat["ablate"] = sorted(config.ablate)
    flat["out"] = str(config.out_dir)
    flat["repeats"] = config.repeats

    def jsonable(v):
        return list(v) if isinstance(v, tuple) else v

    return "".join(f"{k} = {json.dumps(jsonable(v))}\n" for k, v in sorted(flat.items()))


def _base_dataset(config: ExperimentConfig) -> MultiViewDataset:
    if config.synthetic is not None:
        s = config.synthetic
        return generate_synthetic(
            s.n_per_cluster, s.clusters, list(s.dims), sep=s.sep, noise=s.noise, seed=s.seed
        )
    return load_dataset(config.dataset_path)


def resolve_dataset(config: ExperimentConfig, rate: float | None = None) -> MultiViewDataset:
    """Materialize the configured dataset and apply the missing-view corruption."""
    ds = _base_dataset(config)
    r = config.missing.rate if rate is None else rate
    if r > 0:
        if not ds.is_complete():
            raise ConfigError("cannot apply missing.rate: dataset already has missing views")
        ds = apply_missingness(ds, MissingnessSpec(rate=r, seed=config.missing.seed))
    if ds.labels is None:
        raise ConfigError("dataset has no labels.csv; experiments need ground truth to score")
    return ds


def resolve_network(config: ExperimentConfig, ds: MultiViewDataset) -> NetworkSpec:
    k = config.network.k if config.network.k is not None else ds.n_clusters
    kwargs = {
        f.name: getattr(config.network, f.name) for f in fields(NetworkOptions) if f.name != "k"
    }
    return _construct(
        lambda **kw: NetworkSpec(view_dims=ds.view_dims, k=k, **kw), kwargs, "network"
    )


_LOG_FIELDS = ("recon", "diff", "gcl", "mi", "ccl", "ent", "kl", "total")


def _write_run_log(path: Path, pre: TrainReport, main_report: TrainReport) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["phase", "epoch"] + list(_LOG_FIELDS) + ["acc", "nmi", "ari"])
        for phase, report in (("pretrain", pre), ("train", main_report)):
            for i, bd in enumerate(report.history):
                row = [phase, i + 1]
                row += [f"{getattr(bd, name):.10g}" for name in _LOG_FIELDS]
                if i < len(report.metrics):
                    m = report.metrics[i]
                    row += [f"{m['acc']:.6f}", f"{m['nmi']:.6f}", f"{m['ari']:.6f}"]
                else:
                    row += ["", "", ""]
                writer.writerow(row)


def _combine_run_logs(out: Path, run_dirs: list[Path]) -> None:
    with (out / "train_log.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header_written = False
        for r, run_dir in enumerate(run_dirs):
            with (run_dir / "train_log.csv").open(newline="", encoding="utf-8") as src:
                reader = csv.reader(src)
                header = next(reader)
                if not header_written:
                    writer.writerow(["run"] + header)
                    header_written = True
                for row in reader:
                    writer.writerow([r] + row)


def _metric_row(seed: int, acc: float, nmi: float, ari: float) -> dict:
    return {"seed": seed, "acc": acc, "nmi": nmi, "ari": ari}


def _single_run(
    config: ExperimentConfig, ds: MultiViewDataset, spec: NetworkSpec, r: int, run_dir: Path
) -> dict:
    run_seed = config.train.seed + r
    cache = run_dir / "result.json"
    if config.resume and cache.exists():
        saved = json.loads(cache.read_text(encoding="utf-8"))
        if saved.get("seed") == run_seed:
            return saved
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_r = replace(config.train, seed=run_seed)
    params = init_params(spec, seed=run_seed, precision=cfg_r.precision)
    pre, main_report, sched = train_full(params, ds, cfg_r, ablate=config.ablate)
    result = impute_and_cluster(params, sched, ds, cfg_r.t_ext, seed=run_seed)
    rep = evaluate(result.labels, ds.labels)
    _write_run_log(run_dir / "train_log.csv", pre, main_report)
    export_labels(result, run_dir / "labels.csv")
    export_embeddings(result, run_dir / "embeddings.csv", true_labels=ds.labels)
    save_checkpoint(params, cfg_r, run_dir / "model.npz", epochs_done=cfg_r.epochs)
    row = _metric_row(run_seed, rep.acc, rep.nmi, rep.ari)
    cache.write_text(json.dumps(row), encoding="utf-8")
    return row


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_results(path: Path, rows: list[dict], base_seed: int) -> None:
    accs = np.array([r["acc"] for r in rows])
    nmis = np.array([r["nmi"] for r in rows])
    aris = np.array([r["ari"] for r in rows])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "seed", "acc", "nmi", "ari", "acc_std", "nmi_std", "ari_std"])
        for i, row in enumerate(rows):
            writer.writerow(
                [i, row["seed"], _fmt(row["acc"]), _fmt(row["nmi"]), _fmt(row["ari"]), "", "", ""]
            )
        writer.writerow(
            ["summary", base_seed, _fmt(accs.mean()), _fmt(nmis.mean()), _fmt(aris.mean()),
             _fmt(accs.std()), _fmt(nmis.std()), _fmt(aris.std())]
        )


def run(config: ExperimentConfig) -> Path:
    """Train `repeats` seeded models on one dataset realization; write
    results.csv, train_log.csv, and per-run labels/embeddings/model files."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(freeze_config(config), encoding="utf-8")
    ds = resolve_dataset(config)
    spec = resolve_network(config, ds)
    run_dirs = [out / f"run_{r:02d}" for r in range(config.repeats)]
    rows = [_single_run(config, ds, spec, r, run_dirs[r]) for r in range(config.repeats)]
    _write_results(out / "results.csv", rows, config.train.seed)
    _combine_run_logs(out, run_dirs)
    return out / "results.csv"


def _sweep_cell(
    config: ExperimentConfig,
    ds_rate: MultiViewDataset,
    spec: NetworkSpec,
    rate: float,
    r: int,
    t_exts: list[int],
    out: Path,
) -> list[dict]:
    """Train one model for (rate, repeat) and score it at every horizon."""
    run_seed = config.train.seed + r
    run_dir = out / f"rate_{rate:g}" / f"run_{r:02d}"
    cache = run_dir / "result.json"
    if config.resume and cache.exists():
        saved = json.loads(cache.read_text(encoding="utf-8"))
        if saved.get("seed") == run_seed and all(str(t) in saved["rows"] for t in t_exts):
            return [saved["rows"][str(t)] for t in t_exts]

    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_r = replace(config.train, seed=run_seed)
    model_path = run_dir / "model.npz"
    params = None
    if config.resume and model_path.exists():
        try:
            ck = load_checkpoint(model_path)
            if ck.cfg == cfg_r and ck.params.spec == spec:
                params = ck.params
        except CheckpointError:
            params = None
    if params is None:
        params = init_params(spec, seed=run_seed, precision=cfg_r.precision)
        pre, main_report, sched = train_full(params, ds_rate, cfg_r, ablate=config.ablate)
        _write_run_log(run_dir / "train_log.csv", pre, main_report)
        save_checkpoint(params, cfg_r, model_path, epochs_done=cfg_r.epochs)
    else:
        sched = make_schedule(cfg_r.T)

    rows: dict[str, dict] = {}
    for t_ext in t_exts:
        result = impute_and_cluster(params, sched, ds_rate, t_ext, seed=run_seed)
        rep = evaluate(result.labels, ds_rate.labels)
        export_labels(result, run_dir / f"labels_t{t_ext}.csv")
        rows[str(t_ext)] = {
            "rate": rate, "t_ext": t_ext, "run": r,
            **_metric_row(run_seed, rep.acc, rep.nmi, rep.ari),
        }
    cache.write_text(json.dumps({"seed": run_seed, "rows": rows}), encoding="utf-8")
    return [rows[str(t)] for t in t_exts]


def sweep(config: ExperimentConfig, rates: list[float], t_exts: list[int]) -> Path:
    """Cross missing rates with reverse-chain horizons. Each (rate, repeat)
    trains exactly one model from scratch; horizons vary only at inference."""
    if not rates:
        raise ConfigError("sweep needs at least one missing rate")
    if not t_exts:
        raise ConfigError("sweep needs at least one extrapolation horizon")
    for rate in rates:
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"sweep rate must be in [0, 1), got {rate}")
    for t_ext in t_exts:
        if t_ext < 1:
            raise ConfigError(f"sweep horizon must be >= 1, got {t_ext}")

    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(freeze_config(config), encoding="utf-8")
    (out / "sweep.resolved").write_text(
        f"rates = {json.dumps(rates)}\nt_exts = {json.dumps(t_exts)}\n", encoding="utf-8"
    )
    base = _base_dataset(config)
    if not base.is_complete():
        raise ConfigError("sweep needs a complete dataset so each rate can be applied to it")
    if base.labels is None:
        raise ConfigError("dataset has no labels.csv; experiments need ground truth to score")

    detail: list[dict] = []
    for rate in rates:
        if rate > 0:
            ds_rate = apply_missingness(base, MissingnessSpec(rate=rate, seed=config.missing.seed))
        else:
            ds_rate = base
        spec = resolve_network(config, ds_rate)
        for r in range(config.repeats):
            detail.extend(_sweep_cell(config, ds_rate, spec, rate, r, t_exts, out))

    with (out / "sweep_runs.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rate", "t_ext", "run", "seed", "acc", "nmi", "ari"])
        for row in detail:
            writer.writerow(
                [f"{row['rate']:g}", row["t_ext"], row["run"], row["seed"],
                 _fmt(row["acc"]), _fmt(row["nmi"]), _fmt(row["ari"])]
            )

    with (out / "sweep_summary.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["rate", "t_ext", "acc_mean", "acc_std", "nmi_mean", "nmi_std", "ari_mean", "ari_std"]
        )
        for rate in rates:
            for t_ext in t_exts:
                block = [r for r in detail if r["rate"] == rate and r["t_ext"] == t_ext]
                cells = [f"{rate:g}", t_ext]
                for name in ("acc", "nmi", "ari"):
                    vals = np.array([b[name] for b in block])
                    cells += [_fmt(vals.mean()), _fmt(vals.std())]
                writer.writerow(cells)
    return out / "sweep_summary.csv"


def _parse_ablate(text: str) -> frozenset[str]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    return frozenset(names)


def _parse_number_list(text: str, flag: str, cast) -> list:
    try:
        return [cast(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", type=Path, help="path to a flat key = value config file")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
    p.add_argument("--ablate", default=None, metavar="TERMS",
                   help=f"comma-separated loss terms to disable, from {','.join(ABLATABLE)}")
    p.add_argument("--resume", action="store_true",
                   help="reuse completed runs found in the output directory (default: restart)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcg",
        description="Incomplete multi-view clustering with diffusion-based view recovery.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="train repeated seeds and report clustering metrics")
    _add_common_flags(p_run)
    p_sweep = sub.add_parser("sweep", help="cross missing rates with inference horizons")
    _add_common_flags(p_sweep)
    p_sweep.add_argument("--rates", required=True, help="comma-separated missing rates")
    p_sweep.add_argument("--text", required=True, metavar="HORIZONS",
                         help="comma-separated reverse-chain start steps")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        ablate = _parse_ablate(args.ablate) if args.ablate is not None else None
        config = build_experiment_config(
            parse_config_text(text),
            out=args.out, seed=args.seed, ablate=ablate, resume=args.resume,
        )
        if args.command == "run":
            path = run(config)
        else:
            rates = _parse_number_list(args.rates, "--rates", float)
            t_exts = _parse_number_list(args.text, "--text", int)
            path = sweep(config, rates, t_exts)
    except (ConfigError, DatasetFormatError, InvalidMaskError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, DivergenceError, CheckpointError, NonFiniteModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"results written to {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
