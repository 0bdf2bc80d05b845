import dataclasses

import numpy as np
import pytest
from conftest import (
    fd_render_grads,
    make_camera,
    make_cloud,
    relative_error,
    single_splat_cloud,
)

from wsplat.camera import Camera
from wsplat.renderer import (
    GaussianCloud,
    StaleForwardError,
    load_checkpoint,
    project,
    rasterize,
    rasterize_backward,
    render_multispectral,
    save_checkpoint,
)


def identity_camera(size=32, fx=40.0):
    return Camera(fx=fx, fy=fx, cx=size / 2, cy=size / 2, width=size, height=size)


# ---------------------------------------------------------------- projection

def test_on_axis_projection():
    cam = identity_camera()
    cloud = single_splat_cloud(position=(0.0, 0.0, 2.0))
    proj = project(cloud, cam)
    assert proj.valid[0]
    assert proj.mean2d[0] == pytest.approx([cam.cx, cam.cy])
    assert proj.depth[0] == pytest.approx(2.0)


def test_isotropic_cov2d():
    cam = identity_camera()
    sigma, d = 0.1, 2.0
    cloud = single_splat_cloud(position=(0.0, 0.0, d), scale=sigma)
    proj = project(cloud, cam)
    expected = (cam.fx * sigma / d) ** 2
    assert proj.cov2d[0, 0, 0] == pytest.approx(expected + 0.3, rel=1e-9)
    assert proj.cov2d[0, 1, 1] == pytest.approx(expected + 0.3, rel=1e-9)
    assert abs(proj.cov2d[0, 0, 1]) < 1e-9


def test_behind_camera_invalid():
    cam = identity_camera()
    cloud = single_splat_cloud(position=(0.0, 0.0, -1.0))
    assert not project(cloud, cam).valid[0]


def test_far_off_screen_invalid():
    cam = identity_camera()
    cloud = single_splat_cloud(position=(100.0, 0.0, 2.0))
    assert not project(cloud, cam).valid[0]


# ---------------------------------------------------------------- rasterize

def test_empty_cloud_renders_background():
    cam = identity_camera(16)
    cloud = GaussianCloud(
        positions=np.zeros((0, 3)), log_scales=np.zeros((0, 3)),
        rotations=np.zeros((0, 4)), opacity_logits=np.zeros(0),
        rgb_colors=np.zeros((0, 3)))
    out = rasterize(cloud, cam, "rgb", background=np.array([0.2, 0.4, 0.6]))
    assert np.all(out.color == np.array([0.2, 0.4, 0.6]))
    assert np.all(out.alpha == 0.0)


def test_single_splat_peak_at_projected_mean():
    cam = identity_camera()
    cloud = single_splat_cloud(position=(0.05, -0.03, 2.0), opacity_logit=8.0)
    out = rasterize(cloud, cam, "rgb", background=0.0)
    proj = project(cloud, cam)
    lum = out.color.sum(axis=2)
    peak = np.unravel_index(np.argmax(lum), lum.shape)
    assert abs(peak[1] - proj.mean2d[0, 0]) <= 1.0
    assert abs(peak[0] - proj.mean2d[0, 1]) <= 1.0


def test_opaque_splat_color_at_center():
    # splat projected exactly onto a pixel center; g=1 there, so the pixel
    # carries alpha-cap times the splat color as opacity saturates.
    cam = identity_camera()
    cloud = single_splat_cloud(position=(0.0, 0.0, 2.0), opacity_logit=12.0)
    out = rasterize(cloud, cam, "rgb", background=0.0)
    assert np.allclose(out.color[16, 16], np.array([0.8, 0.3, 0.1]) * 0.99,
                       atol=1e-4)


def test_occlusion_limit():
    # A stack of frame-covering max-opacity splats drives transmittance
    # below the stop floor, so content behind them cannot change the output.
    front = [(0.0, 0.0, 1.5)] * 3
    positions = np.array(front + [(0.0, 0.0, 2.5)])
    base = single_splat_cloud()
    cloud_both = GaussianCloud(
        positions=positions,
        log_scales=np.full((4, 3), np.log(3.0)),
        rotations=np.tile(base.rotations, (4, 1)),
        opacity_logits=np.full(4, 20.0),
        rgb_colors=np.array([[0.9, 0.1, 0.1]] * 3 + [[0.0, 1.0, 0.0]]))
    cloud_front = GaussianCloud(
        positions=positions[:3], log_scales=cloud_both.log_scales[:3],
        rotations=cloud_both.rotations[:3],
        opacity_logits=cloud_both.opacity_logits[:3],
        rgb_colors=cloud_both.rgb_colors[:3])
    cam = identity_camera()
    out_both = rasterize(cloud_both, cam, "rgb")
    out_front = rasterize(cloud_front, cam, "rgb")
    assert np.max(np.abs(out_both.color - out_front.color)) <= 1e-6


def test_compositing_conservation():
    rng = np.random.default_rng(11)
    cloud = make_cloud(8, rng)
    cam = make_camera()
    out = rasterize(cloud, cam, "rgb", transmittance_floor=0.0)
    assert np.max(np.abs(out.alpha + out.ctx.final_T - 1.0)) <= 1e-6

    out_stop = rasterize(cloud, cam, "rgb", transmittance_floor=1e-4)
    assert np.all(out_stop.alpha <= 1.0 + 1e-12)


def test_depth_order_invariance():
    rng = np.random.default_rng(12)
    cloud = make_cloud(9, rng)
    cam = make_camera()
    ref = rasterize(cloud, cam, "rgb").color
    perm = rng.permutation(9)
    shuffled = GaussianCloud(
        positions=cloud.positions[perm], log_scales=cloud.log_scales[perm],
        rotations=cloud.rotations[perm], opacity_logits=cloud.opacity_logits[perm],
        rgb_colors=cloud.rgb_colors[perm])
    assert np.max(np.abs(rasterize(shuffled, cam, "rgb").color - ref)) <= 1e-6


def test_background_composition_identity():
    # color == foreground + background * (1 - alpha), exactly
    rng = np.random.default_rng(16)
    cloud = make_cloud(6, rng)
    cam = make_camera()
    fg = rasterize(cloud, cam, "rgb", background=0.0)
    bg = np.array([0.25, 0.5, 0.75])
    out = rasterize(cloud, cam, "rgb", background=bg)
    expected = fg.color + bg * (1.0 - out.alpha)[:, :, None]
    assert np.array_equal(out.color, expected)


def test_culling_soundness():
    rng = np.random.default_rng(13)
    cloud = make_cloud(7, rng)
    cam = make_camera()
    with_bbox = rasterize(cloud, cam, "rgb", use_bbox=True).color
    without = rasterize(cloud, cam, "rgb", use_bbox=False).color
    assert np.max(np.abs(with_bbox - without)) <= 1e-4


def test_nir_requires_intensities():
    cloud = single_splat_cloud()
    with pytest.raises(ValueError):
        rasterize(cloud, make_camera(), "nir")


# ------------------------------------------------------------- multispectral

def test_multispectral_shared_geometry():
    rng = np.random.default_rng(14)
    cloud = make_cloud(10, rng, nir=True)
    cam = make_camera()
    rgb, nir = render_multispectral(cloud, cam)
    assert np.array_equal(rgb.alpha, nir.alpha)
    assert np.array_equal(rgb.depth, nir.depth)
    assert len(rgb.ctx.records) == len(nir.ctx.records)
    for ra, rb in zip(rgb.ctx.records, nir.ctx.records):
        assert ra[0] == rb[0] and ra[1:5] == rb[1:5]
        assert np.array_equal(ra[5], rb[5])
        assert np.array_equal(ra[6], rb[6])


def test_nir_zero_intensity_black():
    rng = np.random.default_rng(15)
    cloud = make_cloud(5, rng, nir=True)
    cloud = dataclasses.replace(cloud, nir_intensities=np.zeros(5))
    rgb, nir = render_multispectral(cloud, make_camera())
    assert np.all(nir.color == 0.0)
    assert nir.color.shape == (32, 32)
    assert np.max(rgb.color) > 0.0


# ------------------------------------------------------------------ backward

@pytest.mark.parametrize("modality,seed", [("rgb", 21), ("nir", 22)])
def test_backward_matches_finite_differences(modality, seed):
    rng = np.random.default_rng(seed)
    cloud = make_cloud(8, rng, nir=True)
    cam = make_camera()
    shape = (32, 32, 3) if modality == "rgb" else (32, 32)
    weights = rng.standard_normal(shape)
    out = rasterize(cloud, cam, modality, transmittance_floor=0.0)
    grads = rasterize_backward(cloud, cam, modality, weights, out)

    checks = {
        "positions": (grads.positions, 1e-2),
        "log_scales": (grads.log_scales, 1e-2),
        "rotations": (grads.rotations, 1e-2),
        "opacity_logits": (grads.opacity_logits, 1e-3),
    }
    if modality == "rgb":
        checks["rgb_colors"] = (grads.colors, 1e-3)
    else:
        checks["nir_intensities"] = (grads.colors, 1e-3)
    for field, (analytic, tol) in checks.items():
        numeric = fd_render_grads(cloud, cam, modality, weights, field)
        err = relative_error(analytic, numeric)
        assert np.max(err) <= tol, f"{field}: max rel err {np.max(err):.3e}"


def test_backward_zero_gradient():
    rng = np.random.default_rng(23)
    cloud = make_cloud(5, rng)
    cam = make_camera()
    out = rasterize(cloud, cam, "rgb")
    grads = rasterize_backward(cloud, cam, "rgb", np.zeros((32, 32, 3)), out)
    for arr in (grads.positions, grads.log_scales, grads.rotations,
                grads.opacity_logits, grads.colors, grads.mean2d):
        assert np.all(arr == 0.0)


def test_backward_color_sign():
    # target brighter than render: increasing the splat color must lower
    # an L1 loss, i.e. the gradient of the loss w.r.t. color is negative.
    cam = identity_camera()
    cloud = single_splat_cloud(position=(0.0, 0.0, 2.0), color=(0.3, 0.3, 0.3),
                               opacity_logit=2.0)
    out = rasterize(cloud, cam, "rgb")
    target = np.clip(out.color + 0.4, 0.0, 1.0)
    n = out.color.size
    grad_l1 = np.sign(out.color - target) / n
    grads = rasterize_backward(cloud, cam, "rgb", grad_l1, out)
    assert np.all(grads.colors < 0.0)


def test_backward_stale_cloud():
    rng = np.random.default_rng(24)
    cloud = make_cloud(4, rng)
    cam = make_camera()
    out = rasterize(cloud, cam, "rgb")
    moved = dataclasses.replace(cloud, positions=cloud.positions + 0.1)
    with pytest.raises(StaleForwardError):
        rasterize_backward(moved, cam, "rgb", np.zeros((32, 32, 3)), out)
    with pytest.raises(StaleForwardError):
        rasterize_backward(cloud, cam, "nir", np.zeros((32, 32)), out)


# ----------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(25)
    cloud = make_cloud(6, rng, nir=True)
    path = tmp_path / "ckpt.wspl"
    save_checkpoint(cloud, path, config_json={"seed": 1})
    back = load_checkpoint(path)
    assert back.n == 6 and back.has_nir
    for field in ("positions", "log_scales", "rotations", "opacity_logits",
                  "rgb_colors", "nir_intensities"):
        want = getattr(cloud, field).astype(np.float32).astype(np.float64)
        assert np.array_equal(getattr(back, field), want), field
    assert (tmp_path / "ckpt.wspl.json").exists()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.wspl"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_checkpoint(p)
