"""The four-configuration few-shot protocol on one synthetic scene.

Runs single / single+dwt / multi / multi+dwt over two seeds with a small
iteration budget and prints the seed-averaged table the benchmark writes.
Full artifacts (checkpoints, logs, per-cell metrics) go to
demos/output/benchmark/.
"""

import os
import tempfile

from wsplat.bench import BenchmarkPlan, run_benchmark
from wsplat.scene import SyntheticSpec, generate_synthetic_scene, save_scene

out_dir = os.path.join(os.path.dirname(__file__), "output", "benchmark")
os.makedirs(out_dir, exist_ok=True)

scene_dir = os.path.join(tempfile.gettempdir(), "wsplat_demo_scene")
_, scene = generate_synthetic_scene(SyntheticSpec(
    n_gaussians=12, n_views=6, image_size=40, seed=17, multispectral=True))
save_scene(scene, scene_dir)

plan = BenchmarkPlan(scene_dirs=(scene_dir,),
                     configs=("single", "single+dwt", "multi", "multi+dwt"),
                     seeds=(0, 1), n_train_views=3,
                     output_dir=out_dir, iterations=250)
result = run_benchmark(plan)

failed = {k: v for k, v in result.statuses.items() if v != "ok"}
print(f"{len(result.statuses)} cells ran, {len(failed)} failed")
print()
print(open(result.markdown_path).read())
print(f"per-run rows: {result.csv_path}")
