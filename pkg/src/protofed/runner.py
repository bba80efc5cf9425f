"""Experiment execution and run artifacts.

For every (strategy, delta, seed) cell: build or load the cached dataset,
train the centralized reference, run the simulation, and write rounds.csv,
summary.json and plot-ready smoothed series. Cells are independent and can
run in parallel worker processes; each cell writes only into its own
directory.
"""
from __future__ import annotations

import hashlib
import json
import multiprocessing
import time
import traceback
from pathlib import Path

import numpy as np

from . import metrics
from .config import ExperimentManifest, strategy_config
from .data import (
    FederatedDataset,
    build_dataset,
    gen_blob_pool,
    load_dataset,
    load_idx,
    save_dataset,
)
from .engine import SimConfig, run_simulation, train_centralized
from .metrics import RoundRecord, ffd, moving_average
from .nn import ModelSpec, ParamSet

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
    from contextlib import nullcontext

    def threadpool_limits(*_args, **_kwargs):
        return nullcontext()

CSV_COLUMNS = ("t", "accuracy", "loss", "grad_dissimilarity", "amm", "mmd", "attention_entropy")


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_cache_key(manifest: ExperimentManifest) -> str:
    """Content hash of everything that determines the built dataset."""
    p = manifest.partition
    desc = {
        "scheme": p.scheme,
        "num_clients": p.num_clients,
        "total_samples": p.total_samples,
        "power_law_gamma": p.power_law_gamma,
        "min_per_client": p.min_per_client,
        "seed": p.seed,
        "phi1": p.phi1,
        "phi2": p.phi2,
        "shards_per_client": p.shards_per_client,
        "alpha": p.alpha,
    }
    if manifest.pool is not None:
        pool = manifest.pool
        if pool.kind == "idx":
            desc["pool"] = {
                "kind": "idx",
                "images_sha256": _file_sha256(pool.idx_images),
                "labels_sha256": _file_sha256(pool.idx_labels),
            }
        else:
            desc["pool"] = {
                "kind": "blobs",
                "classes": pool.blob_classes,
                "samples": pool.blob_samples,
                "side": pool.blob_side,
                "noise": pool.blob_noise,
                "seed": pool.blob_seed,
            }
    canonical = json.dumps(desc, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _load_pool(manifest: ExperimentManifest):
    pool = manifest.pool
    if pool is None:
        return None
    if pool.kind == "idx":
        return load_idx(pool.idx_images, pool.idx_labels)
    images, labels = gen_blob_pool(
        pool.blob_classes, pool.blob_samples, pool.blob_side, pool.blob_noise, pool.blob_seed
    )
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def prepare_dataset(manifest: ExperimentManifest, cache_root) -> FederatedDataset:
    """Build the manifest's dataset, hitting the content-addressed cache
    when an identical spec was built before."""
    cache_dir = Path(cache_root) / f"dataset_{dataset_cache_key(manifest)}"
    if (cache_dir / "meta.json").exists():
        return load_dataset(cache_dir)
    dataset = build_dataset(manifest.partition, _load_pool(manifest))
    save_dataset(dataset, cache_dir)
    return dataset


def cell_name(strategy: str, delta: float, seed: int) -> str:
    return f"{strategy}_d{delta:g}_s{seed}"


def _format_cell_value(value) -> str:
    if value is None:
        return ""
    return f"{value:.6g}"


def rounds_csv_text(records: list[RoundRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in records:
        lines.append(
            ",".join(
                [
                    str(r.t),
                    _format_cell_value(r.accuracy),
                    _format_cell_value(r.loss),
                    _format_cell_value(r.grad_dissimilarity),
                    _format_cell_value(r.amm),
                    _format_cell_value(r.mmd),
                    _format_cell_value(r.attention_entropy),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _write_plotdata(records: list[RoundRecord], window_frac: float, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("accuracy", "loss", "grad_dissimilarity", "amm", "mmd", "attention_entropy"):
        points = [(r.t, getattr(r, name)) for r in records if getattr(r, name) is not None]
        if not points:
            continue
        smoothed = moving_average([v for _, v in points], window_frac)
        lines = ["round,value"]
        lines.extend(f"{t},{v:.6g}" for (t, _), v in zip(points, smoothed))
        (directory / f"{name}.csv").write_text("\n".join(lines) + "\n")


def _smoothed_final(records: list[RoundRecord], name: str, window_frac: float):
    """Final value of the trailing moving average over the metric's
    evaluated points (published final numbers are read off smoothed
    curves, which also suppresses round-to-round oscillation)."""
    values = [getattr(r, name) for r in records if getattr(r, name) is not None]
    if not values:
        return None
    return moving_average(values, window_frac)[-1]


def run_cell(
    strategy_name: str,
    delta: float,
    seed: int,
    manifest: ExperimentManifest,
    dataset: FederatedDataset,
    centralized: ParamSet | None,
    cell_dir: Path,
) -> dict:
    """Run one (strategy, delta, seed) simulation and write its artifacts."""
    start = time.perf_counter()
    strategy, sampling = strategy_config(strategy_name, manifest.run.prox_mu)
    model = ModelSpec(dataset.input_dim, manifest.hidden, dataset.num_classes, activation=manifest.activation)
    config = SimConfig(
        model=model,
        strategy=strategy,
        rounds=manifest.run.rounds,
        local_epochs=manifest.run.local_epochs,
        clients_per_round=manifest.run.clients_per_round,
        lr=manifest.run.lr,
        batch_size=manifest.run.batch_size,
        delta=delta,
        seed=seed,
        eval_every=manifest.run.eval_every,
        mmd_every=manifest.run.mmd_every,
        moving_avg_window_frac=manifest.run.moving_avg_window_frac,
        sampling=sampling,
        mmd_reference_points=manifest.run.mmd_reference_points,
    )
    records, _final = run_simulation(config, dataset, centralized_params=centralized)
    cell_dir.mkdir(parents=True, exist_ok=True)
    (cell_dir / "rounds.csv").write_text(rounds_csv_text(records))
    frac = manifest.run.moving_avg_window_frac
    _write_plotdata(records, frac, cell_dir / "plotdata")
    summary = {
        "strategy": strategy_name,
        "delta": delta,
        "seed": seed,
        "final_accuracy": _smoothed_final(records, "accuracy", frac),
        "final_loss": _smoothed_final(records, "loss", frac),
        "final_amm": _smoothed_final(records, "amm", frac),
        "final_mmd": _smoothed_final(records, "mmd", frac),
        "ffd_vs_fedavg": None,
        "wall_time_s": time.perf_counter() - start,
    }
    (cell_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


_WORKER_CTX: dict = {}


def _worker_run(args) -> tuple[str, str, str]:
    strategy_name, delta, seed = args
    ctx = _WORKER_CTX
    name = cell_name(strategy_name, delta, seed)
    cell_dir = Path(ctx["output_dir"]) / "cells" / name
    try:
        with threadpool_limits(1):
            run_cell(
                strategy_name,
                delta,
                seed,
                ctx["manifest"],
                ctx["dataset"],
                ctx["centralized"].get(seed),
                cell_dir,
            )
        return name, "ok", ""
    except Exception:
        cell_dir.mkdir(parents=True, exist_ok=True)
        err = traceback.format_exc()
        (cell_dir / "error.txt").write_text(err)
        return name, "error", err


def _fill_ffd(output_dir: Path) -> None:
    """Attach FFD-vs-FedAvg to every summary whose (delta, seed) has a
    FedAvg cell with a positive final MMD."""
    summaries = {}
    for path in sorted(output_dir.glob("cells/*/summary.json")):
        summaries[path] = json.loads(path.read_text())
    baselines = {
        (s["delta"], s["seed"]): s["final_mmd"]
        for s in summaries.values()
        if s["strategy"] == "fedavg"
    }
    for path, s in summaries.items():
        if s["strategy"] == "fedavg":
            continue
        base = baselines.get((s["delta"], s["seed"]))
        if base is not None and base > 0 and s["final_mmd"] is not None:
            s["ffd_vs_fedavg"] = ffd(s["final_mmd"], base)
            path.write_text(json.dumps(s, indent=2) + "\n")


def run_experiment(
    manifest: ExperimentManifest,
    threads: int = 1,
    cells_filter: str | None = None,
    seed_override: int | None = None,
    output_dir: str | None = None,
) -> int:
    """Execute every cell of the manifest; returns a process exit status.

    Completed cells are preserved even when later cells fail. Worker
    processes pin their BLAS pools to one thread so results do not depend
    on --threads.
    """
    out = Path(output_dir if output_dir is not None else manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [seed_override] if seed_override is not None else manifest.seeds
    cells = [(s, d, seed) for (s, d) in manifest.cells for seed in seeds]
    if cells_filter:
        cells = [c for c in cells if cells_filter in cell_name(*c)]
        if not cells:
            print(f"no cells match filter {cells_filter!r}")
            return 1

    try:
        dataset = prepare_dataset(manifest, out / "cache")
    except Exception as exc:
        print(f"dataset construction failed: {exc}")
        return 1

    model = ModelSpec(dataset.input_dim, manifest.hidden, dataset.num_classes, activation=manifest.activation)
    centralized: dict[int, ParamSet] = {}
    if manifest.run.centralized_epochs > 0:
        central_stats = {}
        with threadpool_limits(1):
            for seed in sorted(set(seeds)):
                centralized[seed] = train_centralized(
                    dataset,
                    model,
                    manifest.run.centralized_epochs,
                    manifest.run.lr,
                    manifest.run.batch_size,
                    seed,
                )
                acc = metrics.accuracy(centralized[seed], model, dataset)
                loss = metrics.train_loss(centralized[seed], model, dataset)
                central_stats[str(seed)] = {"accuracy": acc, "loss": loss}
                print(f"centralized reference (seed {seed}): accuracy {acc:.4f}")
        (out / "centralized.json").write_text(json.dumps(central_stats, indent=2) + "\n")

    _WORKER_CTX.update(
        manifest=manifest,
        dataset=dataset,
        centralized=centralized,
        output_dir=str(out),
    )
    failures = []
    if threads > 1 and len(cells) > 1:
        with multiprocessing.get_context("fork").Pool(threads) as pool:
            results = pool.map(_worker_run, cells)
    else:
        results = [_worker_run(c) for c in cells]
    for name, status, err in results:
        if status == "ok":
            print(f"cell {name}: ok")
        else:
            failures.append(name)
            print(f"cell {name}: FAILED\n{err}")
    _fill_ffd(out)
    if failures:
        print(f"{len(failures)} cell(s) failed: {', '.join(failures)}")
        return 1
    return 0


def _sample_std(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def load_summaries(output_dir) -> list[dict]:
    return [
        json.loads(path.read_text())
        for path in sorted(Path(output_dir).glob("cells/*/summary.json"))
    ]


def report(output_dir) -> str:
    """Aggregate run summaries into per-delta and across-delta tables.

    Accuracies are percentages; the across-delta spread is the sample
    (n-1) standard deviation. Also writes report.csv next to the cells.
    """
    output_dir = Path(output_dir)
    summaries = load_summaries(output_dir)
    if not summaries:
        return f"no runs found under {output_dir}\n"

    strategies = sorted({s["strategy"] for s in summaries})
    deltas = sorted({s["delta"] for s in summaries})
    lines = []

    def fmt_row(cells_, widths):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells_, widths)).rstrip()

    w1 = [18] + [9] * len(deltas) + [14]
    lines.append("final accuracy (%) by straggler fraction")
    lines.append(fmt_row(["strategy"] + [f"d={d:g}" for d in deltas] + ["avg +- std"], w1))
    for strat in strategies:
        row = [strat]
        accs = []
        for d in deltas:
            vals = [
                s["final_accuracy"] * 100.0
                for s in summaries
                if s["strategy"] == strat and s["delta"] == d and s["final_accuracy"] is not None
            ]
            if vals:
                accs.extend(vals)
                row.append(f"{np.mean(vals):.1f}")
            else:
                row.append("-")
        row.append(f"{np.mean(accs):.1f} +- {_sample_std(accs):.1f}" if accs else "-")
        lines.append(fmt_row(row, w1))

    lines.append("")
    lines.append("across-delta summary (mean +- sample std of final metrics)")
    w2 = [18, 14, 14, 10, 9]
    lines.append(fmt_row(["strategy", "acc (%)", "loss", "amm", "ffd (%)"], w2))
    for strat in strategies:
        rows = [s for s in summaries if s["strategy"] == strat]
        accs = [s["final_accuracy"] * 100.0 for s in rows if s["final_accuracy"] is not None]
        losses = [s["final_loss"] for s in rows if s["final_loss"] is not None]
        amms = [s["final_amm"] for s in rows if s["final_amm"] is not None]
        ffds = [s["ffd_vs_fedavg"] for s in rows if s.get("ffd_vs_fedavg") is not None]
        cells_ = [strat]
        cells_.append(f"{np.mean(accs):.1f} +- {_sample_std(accs):.1f}" if accs else "-")
        cells_.append(f"{np.mean(losses):.2f} +- {_sample_std(losses):.2f}" if losses else "-")
        cells_.append(f"{np.mean(amms):.3g}" if amms else "-")
        cells_.append(f"{np.mean(ffds):.1f}" if ffds else "-")
        lines.append(fmt_row(cells_, w2))

    csv_lines = ["strategy,delta,seed,final_accuracy,final_loss,final_amm,final_mmd,ffd_vs_fedavg,wall_time_s"]
    for s in summaries:
        csv_lines.append(
            ",".join(
                [
                    s["strategy"],
                    f"{s['delta']:g}",
                    str(s["seed"]),
                    _format_cell_value(s["final_accuracy"]),
                    _format_cell_value(s["final_loss"]),
                    _format_cell_value(s["final_amm"]),
                    _format_cell_value(s["final_mmd"]),
                    _format_cell_value(s.get("ffd_vs_fedavg")),
                    _format_cell_value(s["wall_time_s"]),
                ]
            )
        )
    (output_dir / "report.csv").write_text("\n".join(csv_lines) + "\n")
    return "\n".join(lines) + "\n"
