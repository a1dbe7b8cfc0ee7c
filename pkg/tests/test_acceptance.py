"""End-to-end quality gates for the whole pipeline.

Each test below is one gate with its numeric tolerance spelled out in the
assertion, so `pytest -v` on this file reads as a pass/fail scoreboard:

  1. the fast oracle suites (diffusion algebra, metrics, losses, gradients)
     all pass in under a minute;
  2. on a synthetic benchmark with 30% of rows missing a view, the trained
     model's fused clustering averages ACC >= 0.90 and NMI >= 0.75 over three
     seeds, within a five-minute budget;
  3. turning off the diffusion and generation-contrastive losses costs at
     least 3 accuracy points, i.e. the generative recovery path is doing
     real work;
  4. stretching the inference-time reverse chain past the trained schedule
     does not hurt: accuracy within 0.01 and cluster compactness within 5%;
  5. (optional, skipped when the data is absent) a real multi-view benchmark
     reaches ACC >= 0.70 inside fifteen minutes;
  6. running the same experiment config through the CLI twice yields
     byte-identical results.

The three full and three ablated trainings are shared across gates through
module-scoped fixtures, so this file costs roughly one training sweep, not
one per test.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import dcg.cli as cli
from dcg.data import MissingnessSpec, apply_missingness, generate_synthetic, load_dataset
from dcg.diffusion import make_schedule
from dcg.inference import impute_and_cluster
from dcg.metrics import clustering_accuracy, compactness, evaluate
from dcg.networks import NetworkSpec, init_params
from dcg.training import TrainConfig, fit, pretrain_autoencoders

REPO_ROOT = Path(__file__).resolve().parents[1]

SEEDS = (0, 1, 2)
MISSING_RATE = 0.3

ORACLE_BUDGET_S = 60.0
TRAIN_BUDGET_S = 300.0
BENCH_BUDGET_S = 900.0

MIN_COMPLETE_KMEANS_ACC = 0.95
MIN_MEAN_ACC = 0.90
MIN_MEAN_NMI = 0.75
MIN_ABLATION_DROP = 0.03
HORIZON_ACC_SLACK = 0.01
HORIZON_COMPACTNESS_RATIO = 1.05
MIN_BENCH_ACC = 0.70

BENCH_DIR = REPO_ROOT / "data" / "handwritten"


def _train_and_score(ds, seed, ablate=frozenset()):
    """Train one model end to end and score its fused clustering."""
    cfg = TrainConfig(seed=seed)
    spec = NetworkSpec(view_dims=ds.view_dims, k=ds.n_clusters)
    params = init_params(spec, seed=seed)
    sched = make_schedule(cfg.T)
    pretrain_autoencoders(params, ds, cfg)
    fit(params, ds, cfg, sched=sched, ablate=ablate)
    result = impute_and_cluster(params, sched, ds, cfg.t_ext)
    report = evaluate(result.labels, ds.labels)
    return params, sched, report


@pytest.fixture(scope="module")
def acceptance_data():
    complete = generate_synthetic(
        n_per_cluster=200, k=3, dims=[5, 5], sep=6.0, noise=0.5, seed=0
    )
    incomplete = apply_missingness(complete, MissingnessSpec(rate=MISSING_RATE, seed=0))
    return complete, incomplete


@pytest.fixture(scope="module")
def full_runs(acceptance_data):
    _, ds = acceptance_data
    start = time.perf_counter()
    runs = [_train_and_score(ds, seed) for seed in SEEDS]
    return runs, time.perf_counter() - start


@pytest.fixture(scope="module")
def ablated_reports(acceptance_data):
    _, ds = acceptance_data
    return [_train_and_score(ds, seed, frozenset({"diff", "gcl"}))[2] for seed in SEEDS]


def test_oracle_suites_pass_quickly():
    """The independent-oracle unit suites all pass in under a minute."""
    files = [
        "tests/test_diffusion.py",
        "tests/test_metrics.py",
        "tests/test_objectives.py",
        "tests/test_networks.py",
    ]
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", *files],
        cwd=REPO_ROOT,
        capture_output=True,
        text=True,
    )
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, f"oracle suites failed:\n{proc.stdout}\n{proc.stderr}"
    assert elapsed < ORACLE_BUDGET_S, (
        f"oracle suites took {elapsed:.1f}s, budget is {ORACLE_BUDGET_S:.0f}s"
    )


def test_synthetic_benchmark_quality(acceptance_data, full_runs):
    """Three-seed mean fused ACC >= 0.90 and NMI >= 0.75 within five minutes,
    on a dataset where plain k-means on the complete views scores >= 0.95."""
    complete, _ = acceptance_data
    from sklearn.cluster import KMeans

    stacked = np.concatenate(complete.views, axis=1)
    km = KMeans(n_clusters=complete.n_clusters, n_init=10, random_state=0).fit(stacked)
    oracle_acc = clustering_accuracy(km.labels_, complete.labels)
    assert oracle_acc >= MIN_COMPLETE_KMEANS_ACC, (
        f"benchmark sanity check: k-means on complete data scores {oracle_acc:.3f}, "
        f"below {MIN_COMPLETE_KMEANS_ACC:.2f}; the dataset itself is too hard"
    )

    runs, elapsed = full_runs
    mean_acc = float(np.mean([r.acc for _, _, r in runs]))
    mean_nmi = float(np.mean([r.nmi for _, _, r in runs]))
    assert mean_acc >= MIN_MEAN_ACC, (
        f"mean fused ACC over seeds {SEEDS} is {mean_acc:.4f}, need >= {MIN_MEAN_ACC:.2f}"
    )
    assert mean_nmi >= MIN_MEAN_NMI, (
        f"mean fused NMI over seeds {SEEDS} is {mean_nmi:.4f}, need >= {MIN_MEAN_NMI:.2f}"
    )
    assert elapsed < TRAIN_BUDGET_S, (
        f"three-seed train+infer took {elapsed:.1f}s, budget is {TRAIN_BUDGET_S:.0f}s"
    )


def test_generation_losses_carry_accuracy(full_runs, ablated_reports):
    """Disabling the denoiser and generation-contrastive losses must cost at
    least 3 accuracy points on average."""
    runs, _ = full_runs
    full_acc = float(np.mean([r.acc for _, _, r in runs]))
    ablated_acc = float(np.mean([r.acc for r in ablated_reports]))
    drop = full_acc - ablated_acc
    assert drop >= MIN_ABLATION_DROP, (
        f"ablating diff+gcl drops mean ACC by {drop:.4f} "
        f"({full_acc:.4f} -> {ablated_acc:.4f}), need a drop >= {MIN_ABLATION_DROP:.2f}"
    )


def test_extended_horizon_is_not_worse(acceptance_data, full_runs):
    """Doubling the inference horizon past the trained schedule keeps accuracy
    within 0.01 and cluster compactness within a factor of 1.05."""
    _, ds = acceptance_data
    runs, _ = full_runs
    params, sched, _ = runs[0]
    scores = {}
    for t_ext in (sched.T, 2 * sched.T):
        result = impute_and_cluster(params, sched, ds, t_ext)
        latents = np.concatenate(result.recovered_latents, axis=1)
        scores[t_ext] = (
            clustering_accuracy(result.labels, ds.labels),
            compactness(latents, result.labels),
        )
    acc_base, comp_base = scores[sched.T]
    acc_ext, comp_ext = scores[2 * sched.T]
    assert acc_ext >= acc_base - HORIZON_ACC_SLACK, (
        f"ACC at horizon {2 * sched.T} is {acc_ext:.4f}, more than "
        f"{HORIZON_ACC_SLACK:.2f} below the {acc_base:.4f} scored at {sched.T}"
    )
    assert comp_ext <= comp_base * HORIZON_COMPACTNESS_RATIO, (
        f"compactness at horizon {2 * sched.T} is {comp_ext:.6f}, above "
        f"{HORIZON_COMPACTNESS_RATIO:.2f}x the {comp_base:.6f} scored at {sched.T}"
    )


@pytest.mark.skipif(not BENCH_DIR.is_dir(), reason=f"benchmark data not present at {BENCH_DIR}")
def test_real_benchmark_when_available():
    """On the handwritten-digits multi-view benchmark with 30% missingness,
    one training run reaches ACC >= 0.70 inside fifteen minutes."""
    ds = load_dataset(BENCH_DIR)
    if ds.labels is None:
        pytest.skip(f"{BENCH_DIR} has no labels.csv to score against")
    incomplete = apply_missingness(ds, MissingnessSpec(rate=MISSING_RATE, seed=0))
    start = time.perf_counter()
    _, _, report = _train_and_score(incomplete, seed=0)
    elapsed = time.perf_counter() - start
    assert report.acc >= MIN_BENCH_ACC, (
        f"benchmark ACC is {report.acc:.4f}, need >= {MIN_BENCH_ACC:.2f}"
    )
    assert elapsed < BENCH_BUDGET_S, (
        f"benchmark run took {elapsed:.1f}s, budget is {BENCH_BUDGET_S:.0f}s"
    )


def test_cli_run_is_deterministic(tmp_path):
    """Two CLI runs of the same config produce byte-identical results.csv."""
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "dataset.synthetic.n_per_cluster = 40\n"
        "dataset.synthetic.clusters = 3\n"
        "dataset.synthetic.dims = [5, 5]\n"
        "dataset.synthetic.sep = 6.0\n"
        "dataset.synthetic.noise = 0.5\n"
        "missing.rate = 0.3\n"
        "network.latent_dim = 6\n"
        "network.hidden_sizes_ae = [32]\n"
        "network.hidden_sizes_denoiser = [16, 8, 16]\n"
        "network.time_embed_dim = 4\n"
        "network.fusion_hidden = [16, 8, 8]\n"
        "train.epochs = 6\n"
        "train.pretrain_epochs = 4\n"
        "train.batch = 64\n"
        "train.T = 5\n"
        "train.t_ext = 8\n"
        "train.head_warmup = 2\n"
        "repeats = 2\n"
    )
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        rc = cli.main(["run", str(cfg), "--out", str(out)])
        assert rc == 0, f"CLI run into {out} exited with {rc}"
        outputs.append((out / "results.csv").read_bytes())
    assert outputs[0] == outputs[1], "two identical CLI runs disagree in results.csv"
