"""Train the tiny network briefly on toy data and score it against the mixture.

Usage: python demos/tiny_training.py [steps]   (2000 steps take about 20 min on one core)
"""

import sys
from dataclasses import replace

import numpy as np

from diffsep.data import synth_toy_dataset
from diffsep.metrics import eval_run, mixture_baseline
from diffsep.model import TINY_CONFIG
from diffsep.separate import SeparationParams
from diffsep.train import DESK_PROFILE, estimate_sigma_data, train, with_overrides

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
train_tracks = synth_toy_dataset(8, 10.0, seed=11, prefix="train")
held_out = synth_toy_dataset(2, 8.0, seed=12, prefix="held")


def progress(state, loss):
    if state.step % 100 == 0:
        print(f"step {state.step}: mean loss {np.mean(state.losses[-100:]):.3f}", flush=True)


cfg = with_overrides(DESK_PROFILE, total_steps=steps, warmup_steps=min(100, steps // 2))
sigma_data = estimate_sigma_data(train_tracks, cfg.excerpt_seconds)
print(f"measured sigma_data {sigma_data:.4f}")
state = train(train_tracks, replace(TINY_CONFIG, sigma_data=sigma_data), cfg, callback=progress)
report = eval_run(state.ema, held_out, SeparationParams(steps=7, rho=2))
print(f"held-out cSDR {report.csdr:.2f} dB, mixture baseline {mixture_baseline(held_out):.2f} dB")
