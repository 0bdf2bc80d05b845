import numpy as np

from wsplat.camera import Camera, look_at_pose, matrix_to_quat
from wsplat.renderer import GaussianCloud


def make_camera(size=32, dist=2.5, angle=0.0, height=0.6, focal_mult=1.1, view_id=0):
    eye = np.array([dist * np.cos(angle), dist * np.sin(angle), height])
    R, t = look_at_pose(eye, np.zeros(3))
    return Camera(fx=focal_mult * size, fy=focal_mult * size,
                  cx=size / 2.0, cy=size / 2.0, width=size, height=size,
                  quat=matrix_to_quat(R), t=t, view_id=view_id)


def make_cloud(n, rng, nir=False, opacity_range=(-1.0, 1.5)):
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianCloud(
        positions=rng.uniform(-0.4, 0.4, (n, 3)),
        log_scales=np.log(rng.uniform(0.05, 0.15, (n, 3))),
        rotations=quats,
        opacity_logits=rng.uniform(*opacity_range, n),
        rgb_colors=rng.uniform(0.1, 0.9, (n, 3)),
        nir_intensities=rng.uniform(0.1, 0.9, n) if nir else None,
    )


def single_splat_cloud(position=(0.0, 0.0, 0.0), scale=0.1, opacity_logit=3.0,
                       color=(0.8, 0.3, 0.1), nir=None):
    return GaussianCloud(
        positions=np.array([position], dtype=np.float64),
        log_scales=np.full((1, 3), np.log(scale)),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        opacity_logits=np.array([opacity_logit], dtype=np.float64),
        rgb_colors=np.array([color], dtype=np.float64),
        nir_intensities=None if nir is None else np.array([nir], dtype=np.float64),
    )


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def tie_safe_mask(render, gt, levels=0, eps=2e-3):
    """Pixels whose FD probes stay away from absolute-value kinks: the pixel
    residual itself and, for subband losses, every coefficient of the block
    column above the pixel."""
    from wsplat.wavelet import dwt2_multi

    diff = render - gt
    safe = np.abs(diff) > eps
    if levels:
        pyr = dwt2_multi(diff, levels)
        h0, w0 = diff.shape[:2]
        for k, sub in enumerate(pyr.levels):
            f = 2 ** (k + 1)
            m = np.minimum.reduce([np.abs(p) for p in
                                   (sub.ll, sub.lh, sub.hl, sub.hh)])
            up = np.repeat(np.repeat(m, f, axis=0), f, axis=1)[:h0, :w0]
            safe &= up > eps
    return safe.reshape(-1)


def fd_probe(loss_fn, render, probes, h=1e-4):
    """Central finite differences of a scalar loss at flat pixel indices."""
    grads = np.zeros(len(probes))
    flat = render.reshape(-1)
    for k, idx in enumerate(probes):
        vals = []
        for sign in (1.0, -1.0):
            pert = flat.copy()
            pert[idx] += sign * h
            vals.append(loss_fn(pert.reshape(render.shape)))
        grads[k] = (vals[0] - vals[1]) / (2 * h)
    return grads


def check_loss_gradient(loss_fn, render, seed, n_probes=60, tol=1e-3,
                        skip_near_tie=None):
    """loss_fn returns (value, grad); compares grad to FD at random probes."""
    rng = np.random.default_rng(seed)
    value, grad = loss_fn(render)
    flat_grad = grad.reshape(-1)
    probes = rng.choice(render.size, size=min(n_probes, render.size),
                        replace=False)
    if skip_near_tie is not None:
        probes = np.array([p for p in probes if skip_near_tie(p)])
        assert probes.size >= n_probes // 4, "tie filter removed too many probes"
    numeric = fd_probe(lambda r: loss_fn(r)[0], render, probes)
    err = relative_error(flat_grad[probes], numeric)
    assert np.max(err) <= tol, f"max rel err {np.max(err):.3e}"


def scalar_render_probe(cloud, camera, modality, weights):
    from wsplat.renderer import rasterize

    out = rasterize(cloud, camera, modality, transmittance_floor=0.0)
    return float(np.sum(weights * out.color))


def fd_render_grads(cloud, camera, modality, weights, field, h=1e-6):
    """Central differences of the weighted-render probe per parameter."""
    import dataclasses

    arr = getattr(cloud, field)
    grad = np.zeros_like(arr)
    flat = grad.reshape(-1)
    base = arr.copy().reshape(-1)
    for k in range(base.size):
        for sign in (1.0, -1.0):
            pert = base.copy()
            pert[k] += sign * h
            c2 = dataclasses.replace(cloud, **{field: pert.reshape(arr.shape)})
            flat[k] += sign * scalar_render_probe(c2, camera, modality, weights)
        flat[k] /= 2 * h
    return grad
