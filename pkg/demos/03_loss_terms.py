"""Watch the individual loss terms and their schedules during one fine-tuning run.

Run: python demos/03_loss_terms.py
"""

from dataclasses import replace

from atlas_cl import build_atlas, finetune, make_benchmark, train_teacher
from atlas_cl.experiment import ExperimentConfig
from atlas_cl.objective import TERMS

cfg = ExperimentConfig.from_dict({"finetune": {"epochs": 5}})
bundle = make_benchmark(cfg.benchmark, 8)
teacher = train_teacher(bundle, replace(cfg.teacher, seed=8))
fit = build_atlas(teacher.anchor_features, 8, 2, 1.0, 8)
_, rows = finetune(teacher, bundle, fit, cfg.objective, replace(cfg.finetune, seed=8), "SPMA-OG")

# Step 0: the student is the teacher, so every retention term is exactly zero.
# alpha scales the distillation-style terms and decays to 0; beta scales anchor CE.
print("step   alpha  beta  " + " ".join(f"{t:>8s}" for t in TERMS))
for row in rows[:: max(1, len(rows) // 10)] + [rows[-1]]:
    vals = " ".join(f"{row[t]:8.4f}" for t in TERMS)
    print(f"{row['step']:4d}  {row['alpha']:5.2f} {row['beta']:5.2f}  {vals}")
