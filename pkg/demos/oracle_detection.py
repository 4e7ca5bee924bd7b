"""ACE on ground-truth desk views, scored against the scene's truth masks.

Shows how separable the plume is before any learning happens.

    python demos/oracle_detection.py [n_views]
"""

import sys

import numpy as np

from hsinerf import detect, pipeline
from hsinerf import scene as sl

n_views = int(sys.argv[1]) if len(sys.argv) > 1 else 16
settings = pipeline.resolve_settings()
scene = pipeline.build_scene(settings)
poses = pipeline.build_poses(settings, scene)

aucs = []
for i, pose in enumerate(poses[:n_views]):
    mask = sl.plume_truth_mask(scene, pose, settings["scene.tau_od"])
    cube = sl.render_view(scene, pose)
    res = detect.detect(cube, scene.absorption)
    if mask.any() and not mask.all():
        auc = detect.roc_auc(res.scores, mask)
        aucs.append(auc)
        tpr, fpr = detect.tpr_fpr(res.mask, mask)
        print(f"view {i:2d} {pose.half:6s} plume px {int(mask.sum()):4d}  AUC {auc:.4f}  "
              f"TPR {tpr:.2f}  FPR {fpr:.3f}")
    else:
        print(f"view {i:2d} {pose.half:6s} no visible plume")
print(f"mean AUC {np.mean(aucs):.4f} over {len(aucs)} views")
