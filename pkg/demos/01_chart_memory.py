"""Fit a chart atlas to teacher features and probe what it remembers.

Run: python demos/01_chart_memory.py
"""

import numpy as np

from atlas_cl import BenchmarkConfig, TrainConfig, build_atlas, make_benchmark, train_teacher
from atlas_cl.metrics import best_chart_score, support_inclusion

bundle = make_benchmark(BenchmarkConfig(), seed=7)
print("old train", bundle.old_train.inputs.shape, "anchors", bundle.anchors.inputs.shape)

teacher = train_teacher(bundle, TrainConfig(epochs=30, seed=7))
z0 = teacher.anchor_features            # (256, 32) latent anchors
fit = build_atlas(z0, n_charts=8, rank=2, tau_c=1.0, seed=7)
atlas = fit.atlas

# One low-rank Gaussian per k-means cluster.
for k, chart in enumerate(atlas.charts):
    size = np.sum(fit.assignments == k)
    print(f"chart {k}: {size:3d} anchors, factor vars {np.round(chart.factor_vars, 4)}, "
          f"resid var {chart.resid_var:.2e}")

# Soft assignments are a softmax over negative scores.
p = atlas.assign(z0[:3])
print("soft assignment of 3 anchors:\n", np.round(p, 3))

# The support test thresholds the best chart score at the anchors' 95% quantile.
print("anchors inside support:", support_inclusion(atlas, z0, z0))
new_feats = teacher.model.features(bundle.new_test.inputs)
print("new-view features inside support:", support_inclusion(atlas, z0, new_feats))
print("far probes inside support:", support_inclusion(atlas, z0, z0 + 10.0))

s = best_chart_score(atlas, z0)
print(f"best score on anchors: median {np.median(s):.2f}, max {s.max():.2f}")
