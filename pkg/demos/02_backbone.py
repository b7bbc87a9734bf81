"""Stage layout, parameter counts and one forward pass of the backbone.

    python demos/02_backbone.py
"""

import time

import numpy as np

from stimswin.swin import FULL, TINY, forward_extract, init_params, param_count, stage_plan
from stimswin.tensor import Rng, no_grad

for name, cfg in [("tiny", TINY), ("full", FULL)]:
    print(f"{name}: input {cfg.input_shape}, {param_count(cfg):,} parameters")
    for i, s in enumerate(stage_plan(cfg)):
        print(f"  stage {i + 1}: grid {s.grid}, dim {s.dim}, heads {s.heads}, window {s.window}, shift {s.shift}")

params = init_params(TINY, Rng(0))
video = np.random.default_rng(0).random((2, *TINY.input_shape), dtype=np.float32)
start = time.perf_counter()
with no_grad():
    out = forward_extract(video, params, TINY, capture=True)
print(f"tiny forward on 2 clips: {time.perf_counter() - start:.2f}s")
print(f"  feature {out.feature.shape}, logits {out.logits.shape}, last-stage attention {out.attention_taps.attn.shape}")
