"""Training objectives: L1, SSIM, global and patch-wise Haar-subband losses,
their staged composite, and the dual-modality combination.

Every loss returns its scalar value together with the analytic gradient
w.r.t. the rendered image, so the rasterizer adjoint can be chained
directly. Subband losses reduce with a per-subband mean so the weights are
resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .wavelet import dwt2, dwt2_adjoint, dwt2_multi, pyramid_adjoint

if TYPE_CHECKING:
    from .config import TrainConfig

__all__ = [
    "SubbandWeights",
    "LFEnergyMap",
    "PatchSet",
    "LossReport",
    "l1_loss",
    "ssim_loss",
    "ssim_index",
    "global_dwt_loss",
    "lf_energy_map",
    "select_patches",
    "patch_dwt_loss",
    "total_loss",
    "multispectral_loss",
]

LF_EPS = 1e-8

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class SubbandWeights:
    """Per-subband weights for one decomposition level. The HH band carries
    a near-zero default to keep noisy diagonal detail out of the objective."""

    w_ll: float = 1.0
    w_lh: float = 0.5
    w_hl: float = 0.5
    w_hh: float = 0.0

    def __post_init__(self):
        for name in ("w_ll", "w_lh", "w_hl", "w_hh"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {"ll": self.w_ll, "lh": self.w_lh, "hl": self.w_hl, "hh": self.w_hh}


@dataclass(frozen=True)
class LFEnergyMap:
    """Half-resolution low-frequency dominance ratio in [0, 1]."""

    values: np.ndarray
    source_size: tuple[int, int]


@dataclass(frozen=True)
class PatchSet:
    """Non-overlapping full-resolution patches chosen for local refinement."""

    patch_size: int
    patches: tuple[tuple[int, int], ...]

    @property
    def count(self) -> int:
        return len(self.patches)


@dataclass
class LossReport:
    """Raw component values plus the effective multipliers that combined
    them into `total`; `grad` is d(total)/d(render)."""

    l1: float = 0.0
    ssim: float = 0.0
    gdwt: float = 0.0
    pdwt: float = 0.0
    total: float = 0.0
    grad: np.ndarray | None = None
    weights: dict[str, float] = field(default_factory=dict)
    rgb: "LossReport | None" = None
    nir: "LossReport | None" = None
    grad_nir: np.ndarray | None = None


def _check_pair(render: np.ndarray, gt: np.ndarray):
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise ValueError(f"shape mismatch: render {render.shape} vs gt {gt.shape}")
    return render, gt


def l1_loss(render: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error; subgradient 0 at exact ties."""
    render, gt = _check_pair(render, gt)
    diff = render - gt
    n = diff.size
    return float(np.mean(np.abs(diff))), np.sign(diff) / n


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _filter_valid(x: np.ndarray) -> np.ndarray:
    half = SSIM_WINDOW // 2
    y = correlate1d(x, _KERNEL, axis=0, mode="constant")
    y = correlate1d(y, _KERNEL, axis=1, mode="constant")
    return y[half:-half, half:-half]


def _filter_valid_adjoint(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    half = SSIM_WINDOW // 2
    full = np.zeros(shape, dtype=np.float64)
    full[half:-half, half:-half] = g
    full = correlate1d(full, _KERNEL, axis=0, mode="constant")
    full = correlate1d(full, _KERNEL, axis=1, mode="constant")
    return full


def _ssim_channel(x: np.ndarray, y: np.ndarray):
    """SSIM map (valid region) plus the intermediates the adjoint needs."""
    ux = _filter_valid(x)
    uy = _filter_valid(y)
    uxx = _filter_valid(x * x)
    uyy = _filter_valid(y * y)
    uxy = _filter_valid(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    a1 = 2 * ux * uy + SSIM_C1
    a2 = 2 * vxy + SSIM_C2
    b1 = ux * ux + uy * uy + SSIM_C1
    b2 = vx + vy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    return smap, (ux, uy, a1, a2, b1, b2)


def _as_channels(img: np.ndarray) -> np.ndarray:
    return img[:, :, None] if img.ndim == 2 else img


def ssim_index(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), unit dynamic range,
    per channel and averaged."""
    a, b = _check_pair(a, b)
    a3, b3 = _as_channels(a), _as_channels(b)
    if min(a3.shape[0], a3.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    vals = [np.mean(_ssim_channel(a3[:, :, c], b3[:, :, c])[0])
            for c in range(a3.shape[2])]
    return float(np.mean(vals))


def ssim_loss(render: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - mean SSIM with an analytic gradient w.r.t. the render."""
    render, gt = _check_pair(render, gt)
    r3, g3 = _as_channels(render), _as_channels(gt)
    h, w, C = r3.shape
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    half = SSIM_WINDOW // 2
    p = (h - 2 * half) * (w - 2 * half) * C
    grad = np.zeros_like(r3)
    value = 0.0
    for c in range(C):
        x, y = r3[:, :, c], g3[:, :, c]
        smap, (ux, uy, a1, a2, b1, b2) = _ssim_channel(x, y)
        value += np.sum(smap)
        # loss = 1 - mean(smap): backprop -1/p through the SSIM map
        gs = np.full_like(smap, -1.0 / p)
        bb = b1 * b2
        ga1 = gs * a2 / bb
        ga2 = gs * a1 / bb
        gb1 = -gs * smap / b1
        gb2 = -gs * smap / b2
        gvxy = 2 * ga2
        gvx = gb2
        gux = 2 * uy * ga1 + 2 * ux * gb1 - 2 * ux * gvx - uy * gvxy
        grad[:, :, c] = (_filter_valid_adjoint(gux, (h, w))
                         + 2 * x * _filter_valid_adjoint(gvx, (h, w))
                         + y * _filter_valid_adjoint(gvxy, (h, w)))
    loss = 1.0 - value / p
    if render.ndim == 2:
        grad = grad[:, :, 0]
    return float(loss), grad


def _resolve_weights(weights, levels: int) -> list[SubbandWeights]:
    if isinstance(weights, SubbandWeights):
        return [weights] * levels
    weights = list(weights)
    if len(weights) == 1:
        return weights * levels
    if len(weights) != levels:
        raise ValueError(f"need 1 or {levels} weight sets, got {len(weights)}")
    return weights


def global_dwt_loss(render: np.ndarray, gt: np.ndarray,
                    weights: SubbandWeights | Sequence[SubbandWeights] = SubbandWeights(),
                    levels: int = 1) -> tuple[float, np.ndarray]:
    """Weighted per-subband mean-L1 between the Haar pyramids of render
    and ground truth, backpropagated through the linear transform."""
    render, gt = _check_pair(render, gt)
    per_level = _resolve_weights(weights, levels)
    pyr_r = dwt2_multi(render, levels)
    pyr_g = dwt2_multi(gt, levels)
    value = 0.0
    level_grads = []
    for lw, sub_r, sub_g in zip(per_level, pyr_r.levels, pyr_g.levels):
        grads = {}
        for name, wgt in lw.as_dict().items():
            diff = sub_r.bands()[name] - sub_g.bands()[name]
            if wgt != 0.0:
                value += wgt * np.mean(np.abs(diff))
            grads[name] = (wgt / diff.size) * np.sign(diff)
        level_grads.append(grads)
    grad = pyramid_adjoint(level_grads, pyr_r)
    return float(value), grad


def lf_energy_map(image: np.ndarray) -> LFEnergyMap:
    """Low-frequency dominance per half-resolution location:
    |LL| / (|LL| + |LH| + |HL| + |HH| + eps), channel magnitudes summed."""
    image = np.asarray(image, dtype=np.float64)
    sub = dwt2(image)
    planes = {k: np.abs(v) for k, v in sub.bands().items()}
    if image.ndim == 3:
        planes = {k: v.sum(axis=2) for k, v in planes.items()}
    num = planes["ll"]
    den = num + planes["lh"] + planes["hl"] + planes["hh"] + LF_EPS
    return LFEnergyMap(values=num / den, source_size=image.shape[:2])


def select_patches(lf_map: LFEnergyMap, patch_size: int,
                   percentile: float) -> PatchSet:
    """Tile the full-resolution grid and keep patches whose mean map value
    sits at or below the requested quantile (ties included; the minimum
    patch is always selected)."""
    if not 0.0 < percentile < 1.0:
        raise ValueError(f"percentile must be in (0, 1), got {percentile}")
    if patch_size % 2 != 0:
        raise ValueError("patch_size must be even")
    h, w = lf_map.source_size
    if patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} exceeds image {h}x{w}")
    s = patch_size
    coords = [(r, c) for r in range(0, h - s + 1, s) for c in range(0, w - s + 1, s)]
    means = np.array([lf_map.values[r // 2:(r + s) // 2, c // 2:(c + s) // 2].mean()
                      for r, c in coords])
    threshold = np.quantile(means, percentile)
    keep = [coords[k] for k in range(len(coords)) if means[k] <= threshold]
    if not keep:  # np.quantile >= min(means), so this never triggers
        keep = [coords[int(np.argmin(means))]]
    return PatchSet(patch_size=s, patches=tuple(keep))


def patch_dwt_loss(render: np.ndarray, gt: np.ndarray,
                   patches: PatchSet) -> tuple[float, np.ndarray]:
    """Mean-L1 over the LH and HL bands of each selected patch, averaged
    over patches. The gradient is exactly zero outside the patches."""
    render, gt = _check_pair(render, gt)
    if patches.count == 0:
        raise ValueError("empty patch set (selection bug, not zero loss)")
    s = patches.patch_size
    value = 0.0
    grad = np.zeros_like(render)
    for r, c in patches.patches:
        pr = render[r:r + s, c:c + s]
        pg = gt[r:r + s, c:c + s]
        if pr.shape[:2] != (s, s):
            raise ValueError(f"patch at ({r}, {c}) leaves the image")
        sub_r, sub_g = dwt2(pr), dwt2(pg)
        grads = {}
        for name in ("lh", "hl"):
            diff = sub_r.bands()[name] - sub_g.bands()[name]
            value += np.mean(np.abs(diff))
            grads[name] = np.sign(diff) / diff.size
        grad[r:r + s, c:c + s] = dwt2_adjoint(grads, (s, s))
    np_count = patches.count
    return float(value / np_count), grad / np_count


def _stage_patches(render: np.ndarray, config: "TrainConfig") -> PatchSet:
    return select_patches(lf_energy_map(render), config.patch_size,
                          config.percentile)


def total_loss(render: np.ndarray, gt: np.ndarray, config: "TrainConfig",
               iteration: int, patches: PatchSet | None = None) -> LossReport:
    """Staged composite objective.

    Component values are reported raw (0.0 when the stage disables them);
    `weights` records the effective multipliers, so
    total == sum(weights[k] * component_k) holds exactly. Patch selection
    for the local term is computed from the current render when no
    pre-selected `patches` are passed.
    """
    render, gt = _check_pair(render, gt)
    stage = config.stage_at(iteration)
    report = LossReport()
    grad = np.zeros_like(render)

    w = {
        "l1": 1.0 if "l1" in stage.terms else 0.0,
        "ssim": config.ssim_weight if "ssim" in stage.terms else 0.0,
        "gdwt": config.alpha if "gdwt" in stage.terms else 0.0,
        "pdwt": config.beta if "pdwt" in stage.terms else 0.0,
    }
    report.weights = w

    if w["l1"] != 0.0:
        report.l1, g = l1_loss(render, gt)
        grad += w["l1"] * g
    if w["ssim"] != 0.0:
        report.ssim, g = ssim_loss(render, gt)
        grad += w["ssim"] * g
    if w["gdwt"] != 0.0:
        report.gdwt, g = global_dwt_loss(render, gt, stage.subband_weights,
                                         config.dwt_levels)
        grad += w["gdwt"] * g
    if w["pdwt"] != 0.0:
        if patches is None:
            patches = _stage_patches(render, config)
        report.pdwt, g = patch_dwt_loss(render, gt, patches)
        grad += w["pdwt"] * g

    report.total = (w["l1"] * report.l1 + w["ssim"] * report.ssim
                    + w["gdwt"] * report.gdwt + w["pdwt"] * report.pdwt)
    report.grad = grad
    return report


def multispectral_loss(rgb_render: np.ndarray, rgb_gt: np.ndarray,
                       nir_render: np.ndarray, nir_gt: np.ndarray,
                       config: "TrainConfig", iteration: int,
                       rgb_patches: PatchSet | None = None,
                       nir_patches: PatchSet | None = None) -> LossReport:
    """RGB objective plus lambda_nir times the NIR objective, gradients
    reported per modality."""
    rgb_rep = total_loss(rgb_render, rgb_gt, config, iteration, rgb_patches)
    nir_rep = total_loss(nir_render, nir_gt, config, iteration, nir_patches)
    lam = config.lambda_nir
    combined = LossReport(
        l1=rgb_rep.l1 + lam * nir_rep.l1,
        ssim=rgb_rep.ssim + lam * nir_rep.ssim,
        gdwt=rgb_rep.gdwt + lam * nir_rep.gdwt,
        pdwt=rgb_rep.pdwt + lam * nir_rep.pdwt,
        total=rgb_rep.total + lam * nir_rep.total,
        grad=rgb_rep.grad,
        grad_nir=lam * nir_rep.grad,
        weights=dict(rgb_rep.weights),
        rgb=rgb_rep,
        nir=nir_rep,
    )
    return combined
