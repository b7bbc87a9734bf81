"""Video-level stratified k-fold cross-validation on the synthetic dataset.

The full-size run (60 videos per class, 15 epochs) takes several minutes per mode on
one core; the default here is a quarter of the videos.

    python demos/04_cross_validation.py [videos_per_class] [epochs]
"""

import sys
import time

from stimswin.data import synthetic_clips
from stimswin.language import pseudo_embeddings
from stimswin.training import RunConfig, cross_validate

per_class = int(sys.argv[1]) if len(sys.argv) > 1 else 15
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 15
clips = synthetic_clips(videos_per_class=per_class, seed=0)
emb = pseudo_embeddings(dim=64, seed=0)

for mode in ("vst", "vst_l"):
    start = time.perf_counter()
    report = cross_validate(clips, RunConfig(mode=mode, epochs=epochs, warmup_epochs=min(3, epochs - 1)), emb)
    gap = sum(a["matched"] - a["mismatched"] for a in report.alignment) / len(report.alignment)
    print(f"{mode}: averaged top-1 {report.averaged_top1:.4f} "
          f"(folds {[round(a, 3) for a in report.fold_accuracies]}), "
          f"alignment gap {gap:.3f}, {time.perf_counter() - start:.0f}s")
