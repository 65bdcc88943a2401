"""
Sync-aware duration fine-tuning
===============================

A duration predictor is first trained on the duration loss alone, then
fine-tuned with the frozen sync expert in the loop: predicted durations
spread the target's acoustic rows over the video frames (a soft, Gaussian
expansion) and the expert scores that against the source lip track. The
total objective is ``L_sync + lambda * L_dur`` with ``lambda = 10``.

Here everything is shrunk so it runs in about a minute.
"""
from dataclasses import replace

from avdub.config import ExperimentConfig
from avdub.experiments import SeedRun

cfg = ExperimentConfig()
cfg.corpus = replace(cfg.corpus, n_train=400, n_test=60)
cfg.sync_expert = replace(cfg.sync_expert, steps=1500)
cfg.translator = replace(cfg.translator, steps=300)
cfg.duration = replace(cfg.duration, pretrain_steps=800, steps=200)

run = SeedRun(cfg, seed=0)
for name in ("Source", "Dur-only", "LS+D FT", "LS FT"):
    agg = run.report(name).aggregate()
    print(f"{name:10s} LSE-D {agg['lse_d']['mean']:.4f}  LSE-C {agg['lse_c']['mean']:.4f}  "
          f"length drift {agg['length_drift']['mean']:.3f}")

curve = run.finetuned("LS+D FT").log
print("fine-tuning loss: %.4f -> %.4f" % (curve.losses[0], curve.losses[-1]))
