"""Simulate a small dataset, train briefly, render one view and run detection.

Runs in well under a minute; the model is far from converged, the point is
the file flow between the stages.

    python demos/quickstart.py /tmp/hsinerf_quickstart
"""

import sys
from pathlib import Path

from hsinerf import pipeline

out = Path(sys.argv[1] if len(sys.argv) > 1 else "hsinerf_quickstart")
settings = pipeline.resolve_settings({
    "scene.poses": "16", "scene.width": "16", "scene.height": "16",
    "views.train": "6", "views.eval": "3", "train.iterations": "50",
    "train.batch_rays": "256", "train.chunk": "256",
    "render.n_coarse": "16", "render.n_fine": "16",
})

frames = pipeline.cmd_simulate(settings, out / "data")
print(f"simulated {len(frames)} views")

state = pipeline.cmd_train(settings, out / "data", out / "run",
                           on_record=lambda r: r["iter"] % 10 or print(
                               f"iter {r['iter']:3d}  loss {r['loss']:.4f}"))

rows, summary = pipeline.cmd_evaluate(out / "run" / "final.ckpt", out / "data", out / "eval")
print(pipeline.format_summary(summary), end="")

cubes = pipeline.cmd_render(out / "run" / "final.ckpt", out / "render",
                            keyframes=[0, 5], n_frames=4)
pipeline.cmd_detect(cubes, out / "data" / "spectra.json", out / "detect")
print(f"rendered and scanned {len(cubes)} orbit frames under {out}")
