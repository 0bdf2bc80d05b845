"""Differentiable CPU rasterizer for anisotropic 3D Gaussians.

Forward: EWA-style projection (pinhole + local affine covariance
transport), front-to-back alpha compositing with per-pixel early stop.
Backward: exact adjoint of the forward chain, so analytic gradients match
finite differences of the rendered function itself.

A splat's screen footprint is the 3-sigma level set of its projected
Gaussian; weights outside it are defined as zero. The axis-aligned
bounding box used for rasterization strictly contains that level set,
which makes the bounding-box optimization lossless.

Geometry (position, scale, rotation, opacity) is shared across
modalities; `rgb` shades with per-splat colors, `nir` with per-splat
scalar intensities. Two-pass multispectral rendering therefore produces
bit-identical alpha/depth maps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit as sigmoid

from .camera import Camera

__all__ = [
    "GaussianCloud",
    "Projected2D",
    "RenderOutput",
    "ParamGrads",
    "StaleForwardError",
    "project",
    "rasterize",
    "rasterize_backward",
    "render_multispectral",
    "save_checkpoint",
    "load_checkpoint",
]

NEAR_PLANE = 0.01
COV2D_REG = 0.3          # pixel^2, added to the projected covariance diagonal
ALPHA_CAP = 0.99
MAX_MAHAL_SQ = 9.0       # 3-sigma support cutoff
FRUSTUM_MARGIN = 0.3     # keep splats projecting within 1.3x image bounds

CHECKPOINT_MAGIC = b"WSPL"
CHECKPOINT_VERSION = 1


class StaleForwardError(RuntimeError):
    """Backward was called with a cloud/camera that no longer matches the
    cached forward pass."""


@dataclass(frozen=True)
class GaussianCloud:
    """Structure-of-arrays splat soup: shared geometry, per-modality shading."""

    positions: np.ndarray       # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    rotations: np.ndarray       # (N, 4) unit quaternions (w, x, y, z)
    opacity_logits: np.ndarray  # (N,)
    rgb_colors: np.ndarray      # (N, 3), clamped to [0, 1] at shading
    nir_intensities: np.ndarray | None = None  # (N,)

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
            "opacity_logits": (n,), "rgb_colors": (n, 3),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ValueError(f"{name}: expected shape {want}, got {arr.shape}")
        if self.nir_intensities is not None and self.nir_intensities.shape != (n,):
            raise ValueError("nir_intensities must be (N,)")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def has_nir(self) -> bool:
        return self.nir_intensities is not None

    def normalized(self) -> "GaussianCloud":
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return replace(self, rotations=self.rotations / norms)


@dataclass(frozen=True)
class Projected2D:
    """Screen-space splats, vectorized over the cloud."""

    mean2d: np.ndarray   # (N, 2) pixel coordinates
    cov2d: np.ndarray    # (N, 2, 2) regularized screen covariance
    depth: np.ndarray    # (N,) camera-space z
    valid: np.ndarray    # (N,) bool


@dataclass
class _ForwardCtx:
    cloud: GaussianCloud
    camera: Camera
    modality: str
    background: np.ndarray
    colors: np.ndarray          # (N, C) clamped shading values
    colors_raw: np.ndarray      # (N, C) pre-clamp
    order: np.ndarray
    records: list
    final_T: np.ndarray
    proj: dict
    transmittance_floor: float


@dataclass
class RenderOutput:
    color: np.ndarray   # (H, W, 3) for rgb, (H, W) for nir
    alpha: np.ndarray   # (H, W) accumulated opacity in [0, 1]
    depth: np.ndarray   # (H, W) opacity-weighted depth
    ctx: _ForwardCtx = field(repr=False)


@dataclass
class ParamGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray          # (N, 3) for rgb, (N,) for nir
    mean2d: np.ndarray          # (N, 2) screen-space positional gradient


def _quat_rotmats(quats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch rotation matrices; returns (R, normalized quats, raw norms)."""
    norms = np.linalg.norm(quats, axis=1)
    q = quats / norms[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((quats.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R, q, norms


def _rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """dR_ij/dq_k for normalized quaternions, shape (N, 3, 3, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    D = np.empty((q.shape[0], 3, 3, 4))
    # columns: d/dw, d/dx, d/dy, d/dz
    D[:, 0, 0] = 2 * np.stack([zero, zero, -2 * y, -2 * z], axis=-1)
    D[:, 0, 1] = 2 * np.stack([-z, y, x, -w], axis=-1)
    D[:, 0, 2] = 2 * np.stack([y, z, w, x], axis=-1)
    D[:, 1, 0] = 2 * np.stack([z, y, x, w], axis=-1)
    D[:, 1, 1] = 2 * np.stack([zero, -2 * x, zero, -2 * z], axis=-1)
    D[:, 1, 2] = 2 * np.stack([-x, -w, z, y], axis=-1)
    D[:, 2, 0] = 2 * np.stack([-y, z, -w, x], axis=-1)
    D[:, 2, 1] = 2 * np.stack([x, w, z, y], axis=-1)
    D[:, 2, 2] = 2 * np.stack([zero, -2 * x, -2 * y, zero], axis=-1)
    return D


def _project_full(cloud: GaussianCloud, camera: Camera) -> dict:
    W = camera.rotation
    p_cam = cloud.positions @ W.T + camera.t
    z = p_cam[:, 2]
    valid = z > NEAR_PLANE
    z_safe = np.where(valid, z, 1.0)

    mean2d = np.empty((cloud.n, 2))
    mean2d[:, 0] = camera.fx * p_cam[:, 0] / z_safe + camera.cx
    mean2d[:, 1] = camera.fy * p_cam[:, 1] / z_safe + camera.cy
    m = FRUSTUM_MARGIN
    valid &= (mean2d[:, 0] >= -m * camera.width) & (mean2d[:, 0] <= (1 + m) * camera.width)
    valid &= (mean2d[:, 1] >= -m * camera.height) & (mean2d[:, 1] <= (1 + m) * camera.height)

    Rq, qn, qnorms = _quat_rotmats(cloud.rotations)
    s = np.exp(cloud.log_scales)
    M3 = Rq * s[:, None, :]
    Sigma = M3 @ np.transpose(M3, (0, 2, 1))

    J = np.zeros((cloud.n, 2, 3))
    J[:, 0, 0] = camera.fx / z_safe
    J[:, 0, 2] = -camera.fx * p_cam[:, 0] / z_safe**2
    J[:, 1, 1] = camera.fy / z_safe
    J[:, 1, 2] = -camera.fy * p_cam[:, 1] / z_safe**2
    M = J @ W
    cov = M @ Sigma @ np.transpose(M, (0, 2, 1))
    a = cov[:, 0, 0] + COV2D_REG
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + COV2D_REG
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)

    return {
        "p_cam": p_cam, "z_safe": z_safe, "mean2d": mean2d, "valid": valid,
        "Rq": Rq, "qn": qn, "qnorms": qnorms, "s": s, "M3": M3, "Sigma": Sigma,
        "J": J, "M": M, "W": W, "cov2d": np.stack([a, b, c], axis=-1),
        "det": det, "conic": conic,
    }


def project(cloud: GaussianCloud, camera: Camera) -> Projected2D:
    """Screen-space means, covariances and culling flags for every splat."""
    p = _project_full(cloud, camera)
    a, b, c = p["cov2d"][:, 0], p["cov2d"][:, 1], p["cov2d"][:, 2]
    cov = np.empty((cloud.n, 2, 2))
    cov[:, 0, 0] = a
    cov[:, 0, 1] = cov[:, 1, 0] = b
    cov[:, 1, 1] = c
    return Projected2D(mean2d=p["mean2d"], cov2d=cov,
                       depth=p["p_cam"][:, 2], valid=p["valid"])


def _shading(cloud: GaussianCloud, modality: str) -> tuple[np.ndarray, np.ndarray]:
    if modality == "rgb":
        raw = cloud.rgb_colors
    elif modality == "nir":
        if cloud.nir_intensities is None:
            raise ValueError("cloud has no NIR appearance")
        raw = cloud.nir_intensities[:, None]
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return np.clip(raw, 0.0, 1.0), raw


def rasterize(cloud: GaussianCloud, camera: Camera, modality: str = "rgb",
              background: float | np.ndarray = 0.0,
              transmittance_floor: float = 1e-4,
              use_bbox: bool = True) -> RenderOutput:
    """Alpha-composite the cloud front to back.

    Splats are depth-sorted (stable, ties by index). Per pixel:
    g = exp(-0.5 * d^T conic d) inside the 3-sigma support (0 outside),
    alpha = min(0.99, sigmoid(opacity) * g); compositing stops once the
    transmittance drops below `transmittance_floor`.
    """
    H, Wd = camera.height, camera.width
    colors, colors_raw = _shading(cloud, modality)
    C = colors.shape[1]
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64).reshape(-1),
                         (C,)).copy()
    proj = _project_full(cloud, camera)
    depth = proj["p_cam"][:, 2]
    idx = np.nonzero(proj["valid"])[0]
    order = idx[np.argsort(depth[idx], kind="stable")]

    T = np.ones((H, Wd))
    color_acc = np.zeros((H, Wd, C))
    alpha_acc = np.zeros((H, Wd))
    depth_acc = np.zeros((H, Wd))
    op = sigmoid(cloud.opacity_logits)
    records = []

    for i in order:
        mx, my = proj["mean2d"][i]
        a2, _, c2 = proj["cov2d"][i]
        rx, ry = 3.0 * np.sqrt(a2), 3.0 * np.sqrt(c2)
        if use_bbox:
            x0 = max(0, int(np.floor(mx - rx)))
            x1 = min(Wd, int(np.ceil(mx + rx)) + 1)
            y0 = max(0, int(np.floor(my - ry)))
            y1 = min(H, int(np.ceil(my + ry)) + 1)
        else:
            x0, x1, y0, y1 = 0, Wd, 0, H
        if x0 >= x1 or y0 >= y1:
            continue
        dx = np.arange(x0, x1, dtype=np.float64) - mx
        dy = np.arange(y0, y1, dtype=np.float64) - my
        A, B, Cc = proj["conic"][i]
        q = (A * dx**2)[None, :] + (Cc * dy**2)[:, None] \
            + (2.0 * B) * dy[:, None] * dx[None, :]
        g = np.where(q <= MAX_MAHAL_SQ, np.exp(-0.5 * q), 0.0)
        a = np.minimum(ALPHA_CAP, op[i] * g)
        Tl = T[y0:y1, x0:x1]
        mask = (Tl > transmittance_floor) & (g > 0.0)
        if not mask.any():
            continue
        a_eff = np.where(mask, a, 0.0)
        w_px = Tl * a_eff
        color_acc[y0:y1, x0:x1] += w_px[:, :, None] * colors[i]
        alpha_acc[y0:y1, x0:x1] += w_px
        depth_acc[y0:y1, x0:x1] += w_px * depth[i]
        T[y0:y1, x0:x1] = Tl * (1.0 - a_eff)
        records.append((int(i), y0, y1, x0, x1, a_eff, mask))
        if not (T > transmittance_floor).any():
            break

    color = color_acc + bg * (1.0 - alpha_acc)[:, :, None]
    if modality == "nir":
        color = color[:, :, 0]
    ctx = _ForwardCtx(cloud=cloud, camera=camera, modality=modality,
                      background=bg, colors=colors, colors_raw=colors_raw,
                      order=order, records=records, final_T=T, proj=proj,
                      transmittance_floor=transmittance_floor)
    return RenderOutput(color=color, alpha=alpha_acc, depth=depth_acc, ctx=ctx)


def _check_ctx(ctx: _ForwardCtx, cloud: GaussianCloud, camera: Camera,
               modality: str) -> None:
    if ctx.modality != modality:
        raise StaleForwardError(
            f"forward was rendered as {ctx.modality!r}, backward asked for {modality!r}")
    if ctx.cloud is not cloud:
        same = (
            cloud.n == ctx.cloud.n
            and np.array_equal(cloud.positions, ctx.cloud.positions)
            and np.array_equal(cloud.log_scales, ctx.cloud.log_scales)
            and np.array_equal(cloud.rotations, ctx.cloud.rotations)
            and np.array_equal(cloud.opacity_logits, ctx.cloud.opacity_logits)
            and np.array_equal(cloud.rgb_colors, ctx.cloud.rgb_colors)
        )
        if not same:
            raise StaleForwardError("cloud changed since the forward pass")
    if camera is not ctx.camera and not (
            np.array_equal(camera.quat, ctx.camera.quat)
            and np.array_equal(camera.t, ctx.camera.t)
            and (camera.fx, camera.fy, camera.cx, camera.cy)
            == (ctx.camera.fx, ctx.camera.fy, ctx.camera.cx, ctx.camera.cy)):
        raise StaleForwardError("camera changed since the forward pass")


def rasterize_backward(cloud: GaussianCloud, camera: Camera, modality: str,
                       grad_color: np.ndarray,
                       forward: RenderOutput) -> ParamGrads:
    """Exact adjoint of `rasterize` w.r.t. all splat parameters.

    `grad_color` is the loss gradient w.r.t. the rendered image, shaped
    like `forward.color`. Requires the matching forward pass.
    """
    ctx = forward.ctx
    _check_ctx(ctx, cloud, camera, modality)
    proj = ctx.proj
    n = cloud.n
    colors = ctx.colors
    C = colors.shape[1]
    G = np.asarray(grad_color, dtype=np.float64)
    if G.ndim == 2:
        G = G[:, :, None]
    if G.shape[2] != C:
        raise ValueError(f"grad_color has {G.shape[2]} channels, render has {C}")

    op = sigmoid(cloud.opacity_logits)
    g_colors = np.zeros((n, C))
    g_opacity = np.zeros(n)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))

    S = np.broadcast_to(ctx.background, G.shape).copy()
    T_run = ctx.final_T.copy()
    conic = proj["conic"]
    mean2d = proj["mean2d"]

    for i, y0, y1, x0, x1, a_eff, mask in reversed(ctx.records):
        Gl = G[y0:y1, x0:x1]
        Sl = S[y0:y1, x0:x1]
        Ti = T_run[y0:y1, x0:x1] / (1.0 - a_eff)
        w_px = Ti * a_eff
        g_colors[i] += np.einsum("hwc,hw->c", Gl, w_px)
        diff = colors[i] - Sl
        grad_a = np.einsum("hwc,hwc->hw", Gl, diff) * Ti * mask

        open_mask = mask & (a_eff < ALPHA_CAP)
        g = np.where(open_mask, a_eff / op[i], 0.0)
        grad_g = grad_a * op[i] * open_mask
        g_opacity[i] += float(np.sum(grad_a * g * (op[i] * (1.0 - op[i]))))
        grad_q = -0.5 * g * grad_g

        dx = np.arange(x0, x1, dtype=np.float64) - mean2d[i, 0]
        dy = np.arange(y0, y1, dtype=np.float64) - mean2d[i, 1]
        A, B, Cc = conic[i]
        qx = 2.0 * A * dx[None, :] + 2.0 * B * dy[:, None]
        qy = 2.0 * B * dx[None, :] + 2.0 * Cc * dy[:, None]
        g_mean2d[i, 0] += -np.sum(grad_q * qx)
        g_mean2d[i, 1] += -np.sum(grad_q * qy)
        g_conic[i, 0] += np.sum(grad_q * dx[None, :] ** 2)
        g_conic[i, 1] += np.sum(grad_q * 2.0 * dx[None, :] * dy[:, None])
        g_conic[i, 2] += np.sum(grad_q * dy[:, None] ** 2)

        S[y0:y1, x0:x1] = a_eff[:, :, None] * colors[i] + (1.0 - a_eff)[:, :, None] * Sl
        T_run[y0:y1, x0:x1] = Ti

    # conic -> cov2d (2x2 inverse with (a, b, c) upper-tri storage)
    a, b, c = proj["cov2d"][:, 0], proj["cov2d"][:, 1], proj["cov2d"][:, 2]
    det = proj["det"]
    d2 = 1.0 / det**2
    d1 = 1.0 / det
    Jinv = np.empty((n, 3, 3))
    Jinv[:, 0, 0] = -c * c * d2
    Jinv[:, 0, 1] = 2 * b * c * d2
    Jinv[:, 0, 2] = -a * c * d2 + d1
    Jinv[:, 1, 0] = b * c * d2
    Jinv[:, 1, 1] = -2 * b * b * d2 - d1
    Jinv[:, 1, 2] = a * b * d2
    Jinv[:, 2, 0] = -a * c * d2 + d1
    Jinv[:, 2, 1] = 2 * a * b * d2
    Jinv[:, 2, 2] = -a * a * d2
    g_cov_vec = np.einsum("nij,ni->nj", Jinv, g_conic)

    Gc = np.empty((n, 2, 2))
    Gc[:, 0, 0] = g_cov_vec[:, 0]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * g_cov_vec[:, 1]
    Gc[:, 1, 1] = g_cov_vec[:, 2]

    M = proj["M"]
    Sigma = proj["Sigma"]
    MT = np.transpose(M, (0, 2, 1))
    g_Sigma = MT @ Gc @ M
    g_M = 2.0 * (Gc @ M @ Sigma)

    # M = J(p_cam) @ W
    W = proj["W"]
    g_J = g_M @ W.T
    fx, fy = camera.fx, camera.fy
    z = proj["z_safe"]
    x_c, y_c = proj["p_cam"][:, 0], proj["p_cam"][:, 1]
    g_pcam = np.zeros((n, 3))
    g_pcam[:, 0] += g_J[:, 0, 2] * (-fx / z**2)
    g_pcam[:, 1] += g_J[:, 1, 2] * (-fy / z**2)
    g_pcam[:, 2] += (g_J[:, 0, 0] * (-fx / z**2)
                     + g_J[:, 0, 2] * (2 * fx * x_c / z**3)
                     + g_J[:, 1, 1] * (-fy / z**2)
                     + g_J[:, 1, 2] * (2 * fy * y_c / z**3))
    g_pcam += np.einsum("nij,ni->nj", proj["J"], g_mean2d)
    g_positions = g_pcam @ W

    # Sigma = M3 M3^T, M3 = R(q) diag(exp(log_scales))
    M3 = proj["M3"]
    g_M3 = 2.0 * (g_Sigma @ M3)
    s = proj["s"]
    Rq = proj["Rq"]
    g_Rq = g_M3 * s[:, None, :]
    g_s = np.einsum("nij,nij->nj", g_M3, Rq)
    g_log_scales = g_s * s

    D = _rotmat_quat_jacobian(proj["qn"])
    g_qn = np.einsum("nij,nijk->nk", g_Rq, D)
    qn = proj["qn"]
    g_quat = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / proj["qnorms"][:, None]

    clamp_open = (ctx.colors_raw > 0.0) & (ctx.colors_raw < 1.0)
    g_colors = np.where(clamp_open, g_colors, 0.0)
    if modality == "nir":
        g_colors = g_colors[:, 0]

    return ParamGrads(positions=g_positions, log_scales=g_log_scales,
                      rotations=g_quat, opacity_logits=g_opacity,
                      colors=g_colors, mean2d=g_mean2d)


def render_multispectral(cloud: GaussianCloud, camera: Camera,
                         backgrounds: tuple = (0.0, 0.0),
                         transmittance_floor: float = 1e-4
                         ) -> tuple[RenderOutput, RenderOutput]:
    """Two rasterization passes over identical geometry (rgb, then nir)."""
    if not cloud.has_nir:
        raise ValueError("cloud has no NIR appearance")
    rgb = rasterize(cloud, camera, "rgb", backgrounds[0], transmittance_floor)
    nir = rasterize(cloud, camera, "nir", backgrounds[1], transmittance_floor)
    return rgb, nir


def save_checkpoint(cloud: GaussianCloud, path, config_json: dict | None = None) -> None:
    """Binary little-endian splat dump plus optional JSON config sidecar."""
    path = str(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQB", CHECKPOINT_VERSION, cloud.n,
                            1 if cloud.has_nir else 0))
        for arr in (cloud.positions, cloud.log_scales, cloud.rotations,
                    cloud.opacity_logits, cloud.rgb_colors):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if cloud.has_nir:
            f.write(np.ascontiguousarray(cloud.nir_intensities, dtype="<f4").tobytes())
    if config_json is not None:
        with open(path + ".json", "w") as f:
            json.dump(config_json, f, indent=2, sort_keys=True)
            f.write("\n")


def load_checkpoint(path) -> GaussianCloud:
    path = str(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a splat checkpoint (magic {magic!r})")
        version, n, has_nir = struct.unpack("<IQB", f.read(13))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")

        def read(shape):
            count = int(np.prod(shape))
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"{path}: truncated checkpoint")
            return np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)

        cloud = GaussianCloud(
            positions=read((n, 3)),
            log_scales=read((n, 3)),
            rotations=read((n, 4)),
            opacity_logits=read((n,)),
            rgb_colors=read((n, 3)),
            nir_intensities=read((n,)) if has_nir else None,
        )
    return cloud
