"""Few-shot reconstruction end to end.

Synthesizes a multispectral scene, trains the full staged configuration
on three views for a short budget, and reports held-out quality per
modality. A loss-curve plot and a test-view comparison land in
demos/output/training/.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from wsplat.config import TrainConfig
from wsplat.image_io import save_image
from wsplat.metrics import evaluate
from wsplat.renderer import rasterize
from wsplat.scene import SyntheticSpec, generate_synthetic_scene, select_train_views
from wsplat.trainer import run_training

out_dir = os.path.join(os.path.dirname(__file__), "output", "training")
os.makedirs(out_dir, exist_ok=True)

_, scene = generate_synthetic_scene(SyntheticSpec(
    n_gaussians=20, n_views=8, image_size=48, seed=2, multispectral=True))
scene = select_train_views(scene, 3, "uniform")
print(f"scene: {scene.n_views} views, train {scene.train_ids}, "
      f"test {scene.test_ids}")

config = TrainConfig(iterations=600, seed=2, multispectral=True)
cloud, rows = run_training(scene, config)
print(f"trained {config.iterations} iterations, "
      f"{rows[-1]['n_gaussians']} splats at the end")

for r in evaluate(cloud, scene, label="multi+dwt"):
    print(f"  held-out {r.modality}: psnr {r.psnr:.2f} dB, ssim {r.ssim:.4f}")

iters = [r["iter"] for r in rows]
fig, ax = plt.subplots(figsize=(7, 4))
for key in ("l1", "gdwt", "pdwt", "total"):
    ax.plot(iters, [r[key] for r in rows], label=key)
ax.set_xlabel("iteration")
ax.set_ylabel("loss")
ax.set_yscale("log")
ax.legend()
ax.set_title("staged frequency supervision (pdwt joins at 60%)")
fig.tight_layout()
fig.savefig(os.path.join(out_dir, "loss_curves.png"), dpi=120)

vid = scene.test_ids[0]
k = scene.view_index(vid)
render = rasterize(cloud, scene.cameras[k], "rgb", config.background).color
side_by_side = np.concatenate([scene.rgb_images[k], np.clip(render, 0, 1)], axis=1)
save_image(side_by_side, os.path.join(out_dir, f"test_view_{vid}.png"))
print(f"plots and comparison in {out_dir}")
