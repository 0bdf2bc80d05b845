"""Image-quality metrics and held-out evaluation over scene splits."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .losses import ssim_index
from .renderer import GaussianCloud, load_checkpoint, rasterize
from .scene import Scene

__all__ = ["MetricsRow", "psnr", "ssim", "evaluate", "write_metrics_csv",
           "metrics_markdown_table"]

PSNR_CAP = 100.0


@dataclass(frozen=True)
class MetricsRow:
    scene: str
    label: str
    modality: str        # rgb | nir | mean
    psnr: float
    ssim: float
    n_views_train: int
    seed: int

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0 + 1e-9:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """-10 log10(MSE) on unit dynamic range, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM; the exact kernel the SSIM loss uses (shared code)."""
    return ssim_index(a, b)


def evaluate(checkpoint: GaussianCloud | str | os.PathLike, scene: Scene,
             label: str = "", n_views_train: int | None = None,
             seed: int = 0, background: float = 0.0,
             modalities: tuple[str, ...] | None = None) -> list[MetricsRow]:
    """Render every test view and average PSNR/SSIM across them.

    One row per modality plus an unweighted `mean` row. Asking for a
    modality the checkpoint cannot shade raises.
    """
    cloud = checkpoint if isinstance(checkpoint, GaussianCloud) \
        else load_checkpoint(checkpoint)
    if not scene.test_ids:
        raise ValueError("scene has an empty test split")
    if modalities is None:
        modalities = ("rgb", "nir") if (cloud.has_nir and scene.has_nir) else ("rgb",)
    for mod in modalities:
        if mod == "nir" and not cloud.has_nir:
            raise ValueError("checkpoint has no NIR appearance")
        if mod == "nir" and not scene.has_nir:
            raise ValueError("scene has no NIR ground truth")
    if n_views_train is None:
        n_views_train = len(scene.train_ids)

    per_modality: dict[str, tuple[float, float]] = {}
    for mod in modalities:
        psnrs, ssims = [], []
        for vid in scene.test_ids:
            k = scene.view_index(vid)
            cam = scene.cameras[k]
            gt = scene.rgb_images[k] if mod == "rgb" else scene.nir_images[k]
            out = rasterize(cloud, cam, mod, background)
            psnrs.append(psnr(out.color, gt))
            ssims.append(ssim(out.color, gt))
        per_modality[mod] = (float(np.mean(psnrs)), float(np.mean(ssims)))

    rows = [MetricsRow(scene=scene.name, label=label, modality=mod,
                       psnr=p, ssim=s, n_views_train=n_views_train, seed=seed)
            for mod, (p, s) in per_modality.items()]
    rows.append(MetricsRow(
        scene=scene.name, label=label, modality="mean",
        psnr=float(np.mean([r.psnr for r in rows])),
        ssim=float(np.mean([r.ssim for r in rows])),
        n_views_train=n_views_train, seed=seed))
    return rows


CSV_HEADER = ("scene", "label", "modality", "psnr", "ssim",
              "n_views_train", "seed", "lpips")


def write_metrics_csv(rows: list[MetricsRow], path: str | os.PathLike) -> None:
    """The lpips column is emitted empty for table-format compatibility."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.scene, r.label, r.modality, repr(r.psnr),
                             repr(r.ssim), r.n_views_train, r.seed, ""])


def metrics_markdown_table(rows: list[MetricsRow],
                           labels: list[str] | None = None) -> str:
    """Scenes as rows, configuration labels as column groups of
    PSNR / SSIM / LPIPS (LPIPS left blank)."""
    if labels is None:
        labels = sorted({r.label for r in rows})
    scenes = sorted({r.scene for r in rows})
    picked: dict[tuple[str, str], MetricsRow] = {}
    for r in rows:
        key = (r.scene, r.label)
        if key not in picked or (picked[key].modality != "mean"
                                 and r.modality == "mean"):
            picked[key] = r
    header = "| Scene | " + " | ".join(
        f"{lab} PSNR | {lab} SSIM | {lab} LPIPS" for lab in labels) + " |"
    sep = "|" + "---|" * (1 + 3 * len(labels))
    lines = [header, sep]
    for scene in scenes:
        cells = [scene]
        for lab in labels:
            r = picked.get((scene, lab))
            if r is None:
                cells += ["-", "-", "-"]
            else:
                cells += [f"{r.psnr:.2f}", f"{r.ssim:.4f}", ""]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
