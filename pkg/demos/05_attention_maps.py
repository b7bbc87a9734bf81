"""Attention masks from a briefly trained model, written as PPM overlays.

    python demos/05_attention_maps.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from stimswin.data import CLASS_NAMES, synthetic_clips
from stimswin.swin import TINY
from stimswin.training import RunConfig, clip_batch, train_one_model
from stimswin.viz import attention_masks, overlay_and_export

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("out/demo_viz")
clips = synthetic_clips(videos_per_class=20, seed=0)
cfg = RunConfig(epochs=12, warmup_epochs=3, seed=0)
params, _ = train_one_model(clips, cfg)

shown = [next(c for c in clips if c.label == k) for k in range(len(CLASS_NAMES))]
video = clip_batch(shown, cfg, False)
masks, stats = attention_masks(params, TINY, video)
for clip, frames, mask, (lo, hi) in zip(shown, video, masks, stats):
    paths = overlay_and_export(mask, np.round(frames * 255).astype(np.uint8),
                               out / f"{CLASS_NAMES[clip.label]}", normalize=False)
    # where along the clip the model looks: mean mask per frame
    profile = " ".join(f"{m:.2f}" for m in mask.mean(axis=(1, 2))[::4])
    print(f"{CLASS_NAMES[clip.label]:>10}: raw range [{lo:.4f}, {hi:.4f}], per-frame mean {profile}, "
          f"{len(paths)} frames -> {paths[0].parent}")
