"""Four-configuration benchmark harness: single / single+dwt /
multispectral / multispectral+dwt over scene directories and seeds.

Cells are independent (scene, config, seed) training runs; a failing cell
is recorded and never disturbs the others. Results aggregate into a
per-run CSV and a seed-averaged markdown table."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from multiprocessing import get_context

from .config import Stage, TrainConfig
from .metrics import MetricsRow, evaluate, metrics_markdown_table, write_metrics_csv
from .scene import load_scene, select_train_views
from .trainer import train

__all__ = ["BenchmarkPlan", "CONFIG_PRESETS", "preset_config", "run_benchmark"]

CONFIG_PRESETS = ("single", "single+dwt", "multi", "multi+dwt")


def preset_config(label: str, iterations: int, seed: int) -> TrainConfig:
    """Map a benchmark column to a training configuration. The no-DWT
    variants run photometric-only; +dwt enables the full staged frequency
    supervision; multi* add the NIR branch and cross-spectral densify gate."""
    if label not in CONFIG_PRESETS:
        raise ValueError(f"unknown config preset {label!r}")
    multispectral = label.startswith("multi")
    if label.endswith("+dwt"):
        return TrainConfig(iterations=iterations, seed=seed,
                           multispectral=multispectral)
    return TrainConfig(iterations=iterations, seed=seed,
                       multispectral=multispectral,
                       alpha=0.0, beta=0.0,
                       stage_schedule=(Stage(0, ("l1", "ssim")),))


@dataclass(frozen=True)
class BenchmarkPlan:
    scene_dirs: tuple[str, ...]
    configs: tuple[str, ...] = CONFIG_PRESETS
    seeds: tuple[int, ...] = (0,)
    n_train_views: int = 3
    output_dir: str = "benchmark_out"
    iterations: int = 3000
    workers: int = 1

    def __post_init__(self):
        if not self.configs:
            raise ValueError("configs must be non-empty")
        unknown = set(self.configs) - set(CONFIG_PRESETS)
        if unknown:
            raise ValueError(f"unknown configs: {sorted(unknown)}")
        if not self.scene_dirs:
            raise ValueError("at least one scene directory required")

    def cells(self) -> list[tuple[str, str, int]]:
        return [(s, c, seed) for s in self.scene_dirs for c in self.configs
                for seed in self.seeds]


def _run_cell(args: tuple) -> tuple[tuple[str, str, int], list[MetricsRow], str]:
    scene_dir, label, seed, n_train, out_root, iterations = args
    key = (os.path.basename(os.path.normpath(scene_dir)), label, seed)
    try:
        config = preset_config(label, iterations, seed)
        scene = load_scene(scene_dir, multispectral=config.multispectral)
        scene = select_train_views(scene, n_train, "uniform")
        cell_dir = os.path.join(out_root, key[0], label, f"seed{seed}")
        ckpt, _rows = train(scene, config, cell_dir)
        rows = evaluate(ckpt, scene, label=label, n_views_train=n_train,
                        seed=seed, background=config.background)
        write_metrics_csv(rows, os.path.join(cell_dir, "metrics.csv"))
        return key, rows, "ok"
    except Exception as exc:  # cell isolation: report, never propagate
        return key, [], f"failed: {type(exc).__name__}: {exc}"


@dataclass
class BenchmarkResult:
    rows: list[MetricsRow] = field(default_factory=list)
    statuses: dict = field(default_factory=dict)
    csv_path: str = ""
    markdown_path: str = ""


RESULT_HEADER = ("scene", "label", "modality", "psnr", "ssim",
                 "n_views_train", "seed", "lpips", "status")


def run_benchmark(plan: BenchmarkPlan) -> BenchmarkResult:
    os.makedirs(plan.output_dir, exist_ok=True)
    jobs = [(s, c, seed, plan.n_train_views, plan.output_dir, plan.iterations)
            for (s, c, seed) in plan.cells()]
    if plan.workers > 1:
        with get_context("spawn").Pool(plan.workers) as pool:
            outcomes = pool.map(_run_cell, jobs)
    else:
        outcomes = [_run_cell(j) for j in jobs]

    result = BenchmarkResult()
    for key, rows, status in outcomes:
        result.statuses[key] = status
        result.rows.extend(rows)
    result.rows.sort(key=lambda r: (r.scene, r.label, r.seed, r.modality))

    csv_path = os.path.join(plan.output_dir, "results.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RESULT_HEADER)
        for r in result.rows:
            writer.writerow([r.scene, r.label, r.modality, repr(r.psnr),
                             repr(r.ssim), r.n_views_train, r.seed, "", "ok"])
        for key in sorted(result.statuses):
            status = result.statuses[key]
            if status != "ok":
                writer.writerow([key[0], key[1], "", "", "",
                                 plan.n_train_views, key[2], "", status])
    result.csv_path = csv_path

    # seed-averaged table, one pseudo-row per (scene, label, modality)
    groups: dict[tuple[str, str, str], list[MetricsRow]] = {}
    for r in result.rows:
        groups.setdefault((r.scene, r.label, r.modality), []).append(r)
    mean_rows = [
        MetricsRow(scene=s, label=lab, modality=mod,
                   psnr=sum(g.psnr for g in grp) / len(grp),
                   ssim=sum(g.ssim for g in grp) / len(grp),
                   n_views_train=plan.n_train_views, seed=-1)
        for (s, lab, mod), grp in sorted(groups.items())
    ]
    md_path = os.path.join(plan.output_dir, "results.md")
    with open(md_path, "w") as f:
        f.write(metrics_markdown_table(mean_rows, labels=list(plan.configs)))
    result.markdown_path = md_path
    return result
