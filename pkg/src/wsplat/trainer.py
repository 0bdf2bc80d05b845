"""Optimization loop: Adam over splat parameter groups, staged frequency
supervision, residual-gated densification/pruning, and joint dual-modality
training over shared geometry."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit as sigmoid

from .config import TrainConfig
from .losses import PatchSet, lf_energy_map, multispectral_loss, select_patches, total_loss
from .renderer import GaussianCloud, rasterize, rasterize_backward, save_checkpoint
from .scene import Scene

__all__ = [
    "OptimizerState",
    "ResidualMask",
    "TrainingDivergedError",
    "init_cloud",
    "adam_step",
    "residual_mask",
    "densify_and_prune",
    "run_training",
    "train",
]

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-15
SPLIT_SCALE_SHRINK = 1.6
OPACITY_INIT = 0.1

PARAM_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits",
                "rgb_colors", "nir_intensities")

LOG_HEADER = ("iter", "l1", "ssim", "gdwt", "pdwt", "total",
              "n_gaussians", "train_psnr")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ResidualMask:
    """Per-pixel photometric residual in [0, 1] for one training view."""

    values: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("residual mask contains non-finite values")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def _params_of(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    params = {
        "positions": cloud.positions,
        "log_scales": cloud.log_scales,
        "rotations": cloud.rotations,
        "opacity_logits": cloud.opacity_logits,
        "rgb_colors": cloud.rgb_colors,
    }
    if cloud.has_nir:
        params["nir_intensities"] = cloud.nir_intensities
    return params


def _cloud_of(params: dict[str, np.ndarray]) -> GaussianCloud:
    return GaussianCloud(
        positions=params["positions"],
        log_scales=params["log_scales"],
        rotations=params["rotations"],
        opacity_logits=params["opacity_logits"],
        rgb_colors=params["rgb_colors"],
        nir_intensities=params.get("nir_intensities"),
    )


def _scene_center(scene: Scene) -> tuple[np.ndarray, float]:
    """Least-squares intersection of the cameras' optical axes, with a
    radius from the camera distances; used for random init."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    centers = []
    for cam in scene.cameras:
        R = cam.rotation
        d = R.T @ np.array([0.0, 0.0, 1.0])
        o = cam.center
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ o
        centers.append(o)
    centers = np.array(centers)
    try:
        center = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        center = centers.mean(axis=0)
    radius = float(np.mean(np.linalg.norm(centers - center, axis=1)))
    return center, radius


def _luminance(colors: np.ndarray) -> np.ndarray:
    return colors @ np.array([0.299, 0.587, 0.114])


def init_cloud(scene: Scene, config: TrainConfig,
               rng: np.random.Generator | None = None) -> GaussianCloud:
    """One splat per init point; random in-frustum cube when none given.

    Scales come from the mean distance to the 3 nearest init points
    (config default when there are no neighbors), opacity starts at 0.1,
    rotations at identity. NIR intensity, when the multispectral branch is
    active, starts at the luminance of the point color.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    ms_active = (config.multispectral and scene.has_nir
                 and config.lambda_nir > 0)
    if config.multispectral and not scene.has_nir:
        raise ValueError("multispectral config on a scene without NIR images")

    if scene.init_points is not None and len(scene.init_points) > 0:
        positions = np.array(scene.init_points, dtype=np.float64)
        colors = np.clip(np.array(scene.init_colors, dtype=np.float64), 0.0, 1.0)
    else:
        center, radius = _scene_center(scene)
        half = 0.4 * radius
        positions = center + rng.uniform(-half, half, (config.fallback_points, 3))
        colors = rng.uniform(0.2, 0.8, (config.fallback_points, 3))

    n = positions.shape[0]
    if n > 1:
        k = min(4, n)
        dists, _ = cKDTree(positions).query(positions, k=k)
        mean_dist = dists[:, 1:].mean(axis=1)
        scales = np.clip(mean_dist, 1e-6, None)
    else:
        scales = np.full(n, config.init_scale)
    log_scales = np.repeat(np.log(scales)[:, None], 3, axis=1)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity_logits = np.full(n, np.log(OPACITY_INIT / (1 - OPACITY_INIT)))
    return GaussianCloud(
        positions=positions, log_scales=log_scales, rotations=rotations,
        opacity_logits=opacity_logits, rgb_colors=colors,
        nir_intensities=_luminance(colors) if ms_active else None,
    )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, lrs: dict[str, float]
              ) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected adaptive-moment update; quaternions are renormalized
    afterwards. Functional: returns fresh arrays."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"{key}: grad shape {g.shape} vs param {p.shape}")
        m = ADAM_B1 * state.m[key] + (1 - ADAM_B1) * g
        v = ADAM_B2 * state.v[key] + (1 - ADAM_B2) * g * g
        m_hat = m / (1 - ADAM_B1**t)
        v_hat = v / (1 - ADAM_B2**t)
        new_params[key] = p - lrs[key] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[key], new_v[key] = m, v
    if "rotations" in new_params:
        q = new_params["rotations"]
        new_params["rotations"] = q / np.linalg.norm(q, axis=1, keepdims=True)
    return new_params, OptimizerState(m=new_m, v=new_v, step=t)


def residual_mask(rgb_render: np.ndarray, rgb_gt: np.ndarray,
                  nir_render: np.ndarray | None = None,
                  nir_gt: np.ndarray | None = None) -> ResidualMask:
    """Element-wise max of the per-modality photometric residuals."""
    if rgb_render.shape != rgb_gt.shape:
        raise ValueError("rgb shapes differ")
    rgb_res = np.abs(rgb_render - rgb_gt)
    if rgb_res.ndim == 3:
        rgb_res = rgb_res.mean(axis=2)
    if nir_render is None:
        return ResidualMask(values=rgb_res)
    if nir_render.shape != nir_gt.shape:
        raise ValueError("nir shapes differ")
    nir_res = np.abs(nir_render - nir_gt)
    if nir_res.ndim == 3:
        nir_res = nir_res.mean(axis=2)
    if nir_res.shape != rgb_res.shape:
        raise ValueError("modality resolutions differ")
    return ResidualMask(values=np.maximum(rgb_res, nir_res))


def _residual_gate(cloud: GaussianCloud, masks: dict[int, ResidualMask],
                   cameras: dict[int, "Camera"], percentile: float) -> np.ndarray:
    """True for splats whose projection lands in the top residual region of
    at least one training view. A percentile of 1.0 opens the gate fully."""
    from .renderer import project

    if percentile >= 1.0:
        return np.ones(cloud.n, dtype=bool)
    gate = np.zeros(cloud.n, dtype=bool)
    for vid, mask in masks.items():
        cam = cameras[vid]
        proj = project(cloud, cam)
        thresh = np.quantile(mask.values, 1.0 - percentile)
        # a zero residual is never a densification target, even when the
        # quantile collapses to 0 on an almost-perfect view
        region = (mask.values >= thresh) & (mask.values > 0.0)
        xs = np.round(proj.mean2d[:, 0]).astype(int)
        ys = np.round(proj.mean2d[:, 1]).astype(int)
        inside = (proj.valid & (xs >= 0) & (xs < cam.width)
                  & (ys >= 0) & (ys < cam.height))
        hit = np.zeros(cloud.n, dtype=bool)
        hit[inside] = region[ys[inside], xs[inside]]
        gate |= hit
    return gate


def densify_and_prune(params: dict[str, np.ndarray], state: OptimizerState,
                      grad_norm_mean: np.ndarray,
                      masks: dict[int, ResidualMask],
                      cameras: dict[int, "Camera"],
                      config: TrainConfig,
                      rng: np.random.Generator) -> tuple[dict, OptimizerState, dict]:
    """Clone/split high-gradient splats gated by the cross-spectral residual
    mask, then prune washed-out or oversized splats. Optimizer moments are
    remapped (zeros for newborn splats)."""
    dc = config.densify
    cloud = _cloud_of(params)
    n = cloud.n
    gate = _residual_gate(cloud, masks, cameras, dc.residual_percentile)
    candidates = (grad_norm_mean > dc.grad_threshold) & gate
    s_max = np.exp(cloud.log_scales).max(axis=1)
    clone_mask = candidates & (s_max < dc.split_threshold)
    split_mask = candidates & ~(s_max < dc.split_threshold)

    n_new = int(clone_mask.sum()) + int(split_mask.sum())
    if n > 0 and n + n_new > dc.max_gaussians:
        clone_mask = np.zeros(n, dtype=bool)
        split_mask = np.zeros(n, dtype=bool)
        n_new = 0

    pieces = {k: [p] for k, p in params.items()}
    moment_pieces = {k: ([state.m[k]], [state.v[k]]) for k in params}

    def append(rows: dict[str, np.ndarray]):
        for k in params:
            pieces[k].append(rows[k])
            moment_pieces[k][0].append(np.zeros_like(rows[k]))
            moment_pieces[k][1].append(np.zeros_like(rows[k]))

    n_clone = int(clone_mask.sum())
    if n_clone:
        scales = np.exp(params["log_scales"][clone_mask])
        jitter = rng.standard_normal((n_clone, 3)) * 0.1 * scales
        rows = {k: params[k][clone_mask].copy() for k in params}
        rows["positions"] = rows["positions"] + jitter
        append(rows)

    n_split = int(split_mask.sum())
    if n_split:
        from .renderer import _quat_rotmats

        Rq, _, _ = _quat_rotmats(params["rotations"][split_mask])
        scales = np.exp(params["log_scales"][split_mask])
        for _child in range(2):
            z = rng.standard_normal((n_split, 3))
            offsets = np.einsum("nij,nj->ni", Rq, scales * z)
            rows = {k: params[k][split_mask].copy() for k in params}
            rows["positions"] = rows["positions"] + offsets
            rows["log_scales"] = rows["log_scales"] - np.log(SPLIT_SCALE_SHRINK)
            append(rows)

    merged = {k: np.concatenate(v, axis=0) for k, v in pieces.items()}
    m_all = {k: np.concatenate(moment_pieces[k][0], axis=0) for k in params}
    v_all = {k: np.concatenate(moment_pieces[k][1], axis=0) for k in params}

    # split parents are replaced by their children
    keep = np.ones(merged["positions"].shape[0], dtype=bool)
    keep[:n] = ~split_mask

    # prune: transparent or oversized
    opacity = sigmoid(merged["opacity_logits"])
    too_big = np.exp(merged["log_scales"]).max(axis=1) > dc.prune_scale
    keep &= (opacity >= dc.prune_opacity) & ~too_big

    n_pruned = int(np.sum(~keep))
    merged = {k: v[keep] for k, v in merged.items()}
    m_all = {k: v[keep] for k, v in m_all.items()}
    v_all = {k: v[keep] for k, v in v_all.items()}
    new_state = OptimizerState(m=m_all, v=v_all, step=state.step)
    stats = {"cloned": n_clone, "split": n_split, "pruned": n_pruned,
             "n_after": merged["positions"].shape[0]}
    return merged, new_state, stats


def _train_psnr(render: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((render - gt) ** 2))
    if mse == 0.0:
        return 100.0
    return min(100.0, -10.0 * np.log10(mse))


@dataclass
class _PatchCache:
    entries: dict = field(default_factory=dict)

    def get(self, key, iteration, interval, render, config) -> PatchSet:
        hit = self.entries.get(key)
        if hit is not None and iteration % interval != 0:
            return hit
        patches = select_patches(lf_energy_map(render), config.patch_size,
                                 config.percentile)
        self.entries[key] = patches
        return patches


def run_training(scene: Scene, config: TrainConfig,
                 dump_dir: str | None = None,
                 initial_cloud: GaussianCloud | None = None
                 ) -> tuple[GaussianCloud, list[dict]]:
    """Train in memory; returns the final cloud and per-iteration log rows.

    `initial_cloud` replaces the point-based initialization (warm starts,
    fixed-point checks)."""
    if config.multispectral and not scene.has_nir:
        raise ValueError("multispectral config on a scene without NIR images")
    ms = config.multispectral and scene.has_nir and config.lambda_nir > 0

    rng = np.random.default_rng(config.seed)
    cloud = initial_cloud if initial_cloud is not None \
        else init_cloud(scene, config, rng)
    params = _params_of(cloud)
    state = OptimizerState.for_params(params)

    train_ids = list(scene.train_ids) or [c.view_id for c in scene.cameras]
    cam_by_id = {c.view_id: c for c in scene.cameras}
    rgb_by_id = {c.view_id: img for c, img in zip(scene.cameras, scene.rgb_images)}
    nir_by_id = {}
    if scene.has_nir:
        nir_by_id = {c.view_id: img
                     for c, img in zip(scene.cameras, scene.nir_images)}

    d = config.densify
    densify_start = int(d.start_fraction * config.iterations)
    densify_stop = int(d.stop_fraction * config.iterations)

    n = params["positions"].shape[0]
    grad_sum = np.zeros(n)
    grad_cnt = np.zeros(n)
    caches = _PatchCache()
    rows: list[dict] = []

    for it in range(config.iterations):
        vid = train_ids[it % len(train_ids)]
        cam = cam_by_id[vid]
        gt_rgb = rgb_by_id[vid]
        cloud = _cloud_of(params)

        rgb_out = rasterize(cloud, cam, "rgb", config.background)
        stage = config.stage_at(it)
        need_patches = "pdwt" in stage.terms and config.beta > 0

        if ms:
            nir_out = rasterize(cloud, cam, "nir", config.background)
            rgb_patches = nir_patches = None
            if need_patches:
                rgb_patches = caches.get((vid, "rgb"), it,
                                         config.patch_refresh_interval,
                                         rgb_out.color, config)
                nir_patches = caches.get((vid, "nir"), it,
                                         config.patch_refresh_interval,
                                         nir_out.color, config)
            report = multispectral_loss(rgb_out.color, gt_rgb, nir_out.color,
                                        nir_by_id[vid], config, it,
                                        rgb_patches, nir_patches)
        else:
            patches = None
            if need_patches:
                patches = caches.get((vid, "rgb"), it,
                                     config.patch_refresh_interval,
                                     rgb_out.color, config)
            report = total_loss(rgb_out.color, gt_rgb, config, it, patches)

        if not np.isfinite(report.total):
            diag = {"iteration": it, "view": vid, "l1": report.l1,
                    "ssim": report.ssim, "gdwt": report.gdwt,
                    "pdwt": report.pdwt, "n_gaussians": cloud.n}
            if dump_dir:
                os.makedirs(dump_dir, exist_ok=True)
                with open(os.path.join(dump_dir, "diverged.json"), "w") as f:
                    json.dump(diag, f, indent=2)
            raise TrainingDivergedError(f"non-finite loss at iteration {it}: {diag}")

        g_rgb = rasterize_backward(cloud, cam, "rgb", report.grad, rgb_out)
        grads = {
            "positions": g_rgb.positions,
            "log_scales": g_rgb.log_scales,
            "rotations": g_rgb.rotations,
            "opacity_logits": g_rgb.opacity_logits,
            "rgb_colors": g_rgb.colors,
        }
        mean2d_grad = g_rgb.mean2d
        if ms:
            g_nir = rasterize_backward(cloud, cam, "nir", report.grad_nir, nir_out)
            grads["positions"] = grads["positions"] + g_nir.positions
            grads["log_scales"] = grads["log_scales"] + g_nir.log_scales
            grads["rotations"] = grads["rotations"] + g_nir.rotations
            grads["opacity_logits"] = grads["opacity_logits"] + g_nir.opacity_logits
            grads["nir_intensities"] = g_nir.colors
            mean2d_grad = mean2d_grad + g_nir.mean2d
        elif "nir_intensities" in params:
            grads["nir_intensities"] = np.zeros_like(params["nir_intensities"])

        contributed = np.array(sorted({rec[0] for rec in rgb_out.ctx.records}),
                               dtype=int)
        if contributed.size:
            norms = np.linalg.norm(mean2d_grad[contributed], axis=1)
            grad_sum[contributed] += norms
            grad_cnt[contributed] += 1

        lrs = {
            "positions": config.position_lr_at(it),
            "log_scales": config.lr_scale,
            "rotations": config.lr_rotation,
            "opacity_logits": config.lr_opacity,
            "rgb_colors": config.lr_color,
            "nir_intensities": config.lr_color,
        }
        params, state = adam_step(params, grads, state, lrs)

        rows.append({
            "iter": it, "l1": report.l1, "ssim": report.ssim,
            "gdwt": report.gdwt, "pdwt": report.pdwt, "total": report.total,
            "n_gaussians": params["positions"].shape[0],
            "train_psnr": _train_psnr(rgb_out.color, gt_rgb),
        })

        step = it + 1
        if (d.interval > 0 and step % d.interval == 0
                and densify_start <= step <= densify_stop):
            cloud = _cloud_of(params)
            masks = {}
            for tvid in train_ids:
                tcam = cam_by_id[tvid]
                r_out = rasterize(cloud, tcam, "rgb", config.background)
                if ms:
                    n_out = rasterize(cloud, tcam, "nir", config.background)
                    masks[tvid] = residual_mask(r_out.color, rgb_by_id[tvid],
                                                n_out.color, nir_by_id[tvid])
                else:
                    masks[tvid] = residual_mask(r_out.color, rgb_by_id[tvid])
            grad_mean = grad_sum / np.maximum(grad_cnt, 1.0)
            params, state, _stats = densify_and_prune(
                params, state, grad_mean, masks, cam_by_id, config, rng)
            n_now = params["positions"].shape[0]
            grad_sum = np.zeros(n_now)
            grad_cnt = np.zeros(n_now)

    return _cloud_of(params), rows


def write_log(rows: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for row in rows:
            writer.writerow([row["iter"], repr(row["l1"]), repr(row["ssim"]),
                             repr(row["gdwt"]), repr(row["pdwt"]),
                             repr(row["total"]), row["n_gaussians"],
                             repr(row["train_psnr"])])


def train(scene: Scene, config: TrainConfig, out_dir: str | os.PathLike
          ) -> tuple[str, list[dict]]:
    """Train and persist: checkpoint (+config sidecar) and the loss log."""
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    cloud, rows = run_training(scene, config, dump_dir=out_dir)
    ckpt = os.path.join(out_dir, "checkpoint.wspl")
    save_checkpoint(cloud, ckpt, config_json=config.to_json_dict())
    write_log(rows, os.path.join(out_dir, "log.csv"))
    return ckpt, rows
