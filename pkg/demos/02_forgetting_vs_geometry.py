"""Plain fine-tuning, anchor replay and the geometry-preserving objective, side by side.

Run: python demos/02_forgetting_vs_geometry.py [seed]
"""

import sys
from dataclasses import replace

from atlas_cl import build_atlas, evaluate_run, finetune, make_benchmark, train_teacher
from atlas_cl.experiment import ExperimentConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
cfg = ExperimentConfig.from_dict({})   # library defaults

bundle = make_benchmark(cfg.benchmark, seed)
teacher = train_teacher(bundle, replace(cfg.teacher, seed=seed))
fit = build_atlas(teacher.anchor_features, cfg.chart.n_charts, cfg.chart.rank, cfg.chart.tau_c, seed)

print(f"{'method':12s} {'old':>6s} {'new':>6s} {'hm':>6s} {'cka':>6s} {'dcor':>6s}")
for method in ("PlainFT", "ER", "SPMA-OG"):
    student, log = finetune(teacher, bundle, fit, cfg.objective, replace(cfg.finetune, seed=seed), method)
    r = evaluate_run(teacher.model, student, bundle, fit.atlas, method=method)
    print(f"{method:12s} {r.old_after:6.3f} {r.new_after:6.3f} {r.harmonic_mean:6.3f} {r.cka:6.4f} {r.dist_corr:6.4f}")

# The teacher's old-view accuracy is the ceiling every method is measured against.
print("teacher old accuracy", round(r.old_before, 3))
