"""Train the tiny model with and without the text-embedding term on synthetic clips.

Shows the matched cosine climbing during vst_l training, and how well the held-out
features line up with their own class embedding against the other classes.

    python demos/03_language_training.py [epochs]
"""

import sys

from stimswin.data import synthetic_clips
from stimswin.language import alignment_scores, project_visual, pseudo_embeddings
from stimswin.training import RunConfig, evaluate, model_outputs, train_one_model

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 15
clips = synthetic_clips(videos_per_class=30, seed=0)
held_out = {c.video_id for c in clips if c.video_id.endswith(("_000", "_001", "_002", "_003", "_004", "_005"))}
train = [c for c in clips if c.video_id not in held_out]
test = [c for c in clips if c.video_id in held_out]
emb = pseudo_embeddings(dim=64, seed=0)
print(f"{len(train)} training clips, {len(test)} held-out clips")

for mode in ("vst", "vst_l"):
    cfg = RunConfig(mode=mode, epochs=epochs, warmup_epochs=min(3, epochs - 1), seed=0)
    params, history = train_one_model(train, cfg, emb if mode == "vst_l" else None)
    for rec in history:
        cos = f" cosine {rec['cosine']:.3f}" if "cosine" in rec else ""
        print(f"  {mode} epoch {rec['epoch']}: loss {rec['loss']:.4f} acc {rec['train_acc']:.3f}{cos}")
    report = evaluate(params, test, cfg)
    print(f"{mode}: held-out top-1 {report.top1:.3f}")
    if mode == "vst_l":
        _, feats = model_outputs(params, test, cfg)
        matched, mismatched = alignment_scores(feats @ params["proj.w"].data, [c.label for c in test], emb.matrix())
        print(f"  held-out cosine: matched {matched:.3f}, mismatched {mismatched:.3f}")
