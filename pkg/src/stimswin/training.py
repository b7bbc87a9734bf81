"""AdamW with cosine annealing, training loops, evaluation and k-fold cross-validation.

The language branch is imported lazily and only in ``vst_l`` mode, so vision-only
training and all evaluation run without :mod:`stimswin.language` present.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import AUGMENT_PRESETS, Clip, augment_clip, fit_frames
from .losses import cross_entropy_loss, total_loss
from .swin import PRESETS, ModelConfig, forward_extract, init_params
from .tensor import Rng, no_grad, zero_grad

MODES = ("vst", "vst_l")
CLIP_LENGTHS = {"tiny": 16, "full": 30}


class ConfigError(ValueError):
    """Invalid run configuration."""


class NonFiniteLoss(FloatingPointError):
    """Training produced a NaN or infinite loss."""


@dataclass
class RunConfig:
    mode: str = "vst"
    epochs: int = 100
    lr0: float = 1e-3
    warmup_epochs: int = 0
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    k: int = 5
    embeddings: str = "pseudo"
    embed_dim: int = 64
    preset: str = "tiny"
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.epochs) <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if float(self.lr0) <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if int(self.warmup_epochs) < 0:
            raise ConfigError("warmup_epochs must be non-negative")
        if int(self.k) < 2:
            raise ConfigError(f"k must be at least 2, got {self.k}")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        try:
            self.model_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model settings: {exc}") from exc

    def model_config(self) -> ModelConfig:
        base = PRESETS[self.preset]
        return dataclasses.replace(base, **self.model) if self.model else base

    @property
    def clip_len(self) -> int:
        return CLIP_LENGTHS[self.preset]

    @property
    def augment(self):
        return AUGMENT_PRESETS[self.preset]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)


# -- optimisation ------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam step with decoupled decay, applied in place.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)


def cosine_anneal_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return max(0.0, lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0)


def epoch_lr(epoch: int, config: "RunConfig") -> float:
    """Cosine-annealed rate, scaled by ``(epoch + 1) / warmup_epochs`` during warmup."""
    lr = cosine_anneal_lr(epoch, config.epochs, config.lr0)
    if epoch < config.warmup_epochs:
        lr *= (epoch + 1) / config.warmup_epochs
    return lr


# -- batching --------------------------------------------------------------------------

def clip_batch(clips: list[Clip], config: RunConfig, train: bool, rng: Rng | None = None) -> np.ndarray:
    T = config.model_config().input_shape[0]
    return np.stack([fit_frames(augment_clip(c, rng, train, config.augment), T) for c in clips])


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i:i + n]


# -- training --------------------------------------------------------------------------

def train_one_model(clips: list[Clip], config: RunConfig, embeddings=None, params: dict | None = None,
                    on_epoch=None):
    """Train on ``clips``; returns ``(params, history)``.

    ``history`` has one dict per epoch: ``epoch``, ``lr``, ``loss``, ``train_acc`` and,
    in ``vst_l`` mode, ``cosine`` (mean matched cosine of the projected features).
    ``params`` may carry pretrained backbone weights to fine-tune.
    """
    if not clips:
        raise ValueError("empty training set")
    use_text = config.mode == "vst_l"
    if use_text and embeddings is None:
        raise ValueError("vst_l mode needs class embeddings")
    mcfg = config.model_config()
    rng = Rng(config.seed)
    fresh = init_params(mcfg, rng.split("init"))
    if params is not None:
        for name, t in params.items():
            if name in fresh and t.shape == fresh[name].shape:
                fresh[name].data = np.array(t.data, dtype=np.float32)
    params = fresh
    if use_text:
        from .language import PROJECTION_KEY, cosine_contrastive_loss, init_projection, project_visual

        params[PROJECTION_KEY] = init_projection(mcfg.feature_dim, embeddings.dim, rng.split("init_projection"))
    state = OptimizerState.zeros(params)
    shuffle_rng = rng.split("shuffle")
    aug_rng = rng.split("augment")
    labels = np.array([c.label for c in clips])
    history = []
    for epoch in range(config.epochs):
        lr = epoch_lr(epoch, config)
        order = shuffle_rng.permutation(len(clips))
        loss_sum = cos_sum = 0.0
        correct = 0
        for idx in _chunks(order, config.batch_size):
            x = clip_batch([clips[i] for i in idx], config, True, aug_rng)
            y = labels[idx]
            out = forward_extract(x, params, mcfg)
            ce = cross_entropy_loss(out.logits, y)
            if use_text:
                targets = embeddings.for_labels(y)
                con = cosine_contrastive_loss(project_visual(out.feature, params[PROJECTION_KEY]), targets)
                loss = total_loss(ce, con, True)
                cos_sum -= con.item() * len(idx)
            else:
                loss = ce
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss {value} at epoch {epoch}")
            zero_grad(params)
            loss.backward()
            adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr,
                       config.weight_decay, config.betas, config.eps)
            loss_sum += value * len(idx)
            correct += int((np.argmax(out.logits.data, axis=-1) == y).sum())
        rec = {"epoch": epoch, "lr": lr, "loss": loss_sum / len(clips), "train_acc": correct / len(clips)}
        if use_text:
            rec["cosine"] = cos_sum / len(clips)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    zero_grad(params)
    return params, history


# -- evaluation ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    top1: float
    confusion: list
    n_samples: int
    video_top1: float | None = None
    video_confusion: list | None = None
    fold_accuracies: list | None = None
    alignment: dict | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    def write(self, json_path, csv_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        if csv_path is not None:
            write_confusion_csv(csv_path, self.confusion)


def write_confusion_csv(path, matrix, class_names=None) -> None:
    K = len(matrix)
    names = list(class_names) if class_names else [str(i) for i in range(K)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\pred", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *row])


def confusion_matrix(truth, pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def majority_vote(preds, num_classes: int) -> int:
    return int(np.argmax(np.bincount(np.asarray(preds, dtype=np.int64), minlength=num_classes)))


def model_outputs(params: dict, clips: list[Clip], config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Eval-path logits ``[N, K]`` and pooled features ``[N, 8C]``."""
    mcfg = config.model_config()
    logits, feats = [], []
    with no_grad():
        for batch in _chunks(clips, config.batch_size):
            out = forward_extract(clip_batch(batch, config, False), params, mcfg)
            logits.append(out.logits.data)
            feats.append(out.feature.data)
    return np.concatenate(logits), np.concatenate(feats)


def evaluate(params: dict | None, clips: list[Clip], config: RunConfig, predictor=None) -> EvalReport:
    """Clip-level top-1 and confusion matrix, plus video-level majority vote.

    ``predictor`` maps a list of clips to predicted labels and replaces the model.
    Argmax and vote ties go to the lowest class index.
    """
    if not clips:
        raise ValueError("empty evaluation set")
    K = config.model_config().num_classes
    if predictor is None:
        logits, _ = model_outputs(params, clips, config)
        pred = np.argmax(logits, axis=-1)
    else:
        pred = np.asarray(predictor(clips), dtype=np.int64)
    truth = np.array([c.label for c in clips])
    cm = confusion_matrix(truth, pred, K)
    by_video: dict[str, list] = {}
    for c, p in zip(clips, pred):
        by_video.setdefault(c.video_id, [c.label, []])[1].append(p)
    v_truth = [lab for lab, _ in by_video.values()]
    v_pred = [majority_vote(ps, K) for _, ps in by_video.values()]
    vcm = confusion_matrix(v_truth, v_pred, K)
    return EvalReport(float(np.trace(cm) / cm.sum()), cm.tolist(), len(clips),
                      float(np.trace(vcm) / vcm.sum()), vcm.tolist())


# -- cross-validation -----------------------------------------------------------------------

def kfold_split(video_labels: dict, k: int = 5, seed: int = 0) -> list[list[str]]:
    """Stratified video-level folds.

    Each class's videos are shuffled and dealt round-robin; the dealing position
    carries over between classes so total fold sizes also differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(video_labels) < k:
        raise ValueError(f"{len(video_labels)} videos cannot fill {k} folds")
    rng = Rng(seed).split("kfold")
    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for label in sorted(set(video_labels.values())):
        vids = sorted(v for v, lab in video_labels.items() if lab == label)
        for j in rng.permutation(len(vids)):
            folds[cursor % k].append(vids[j])
            cursor += 1
    return folds


def averaged_accuracy(fold_accuracies) -> float:
    """Unweighted mean of per-fold top-1 accuracies."""
    accs = list(fold_accuracies)
    return sum(accs) / len(accs)


def fold_seed(seed: int, fold: int) -> int:
    return int(Rng(seed).split("fold").split(fold).integers(0, 2 ** 62))


@dataclass
class CVReport:
    averaged_top1: float
    fold_accuracies: list
    video_averaged_top1: float
    folds: list
    histories: list
    alignment: list | None = None

    def to_json(self) -> dict:
        out = {"averaged_top1": self.averaged_top1, "fold_accuracies": self.fold_accuracies,
               "video_averaged_top1": self.video_averaged_top1,
               "folds": [f.to_json() for f in self.folds], "histories": self.histories}
        if self.alignment is not None:
            out["alignment"] = self.alignment
        return out


def _alignment(params, test, config, embeddings, seed):
    from .language import PROJECTION_KEY, alignment_scores, init_projection

    _, feats = model_outputs(params, test, config)
    P = params.get(PROJECTION_KEY)
    if P is None:
        # vision-only models are scored through the projection vst_l would have started from
        P = init_projection(config.model_config().feature_dim, embeddings.dim,
                            Rng(seed).split("init_projection"))
    matched, mismatched = alignment_scores(feats @ P.data, [c.label for c in test], embeddings.matrix())
    return {"matched": matched, "mismatched": mismatched}


def _run_fold(args):
    i, train, test, config, embeddings, on_epoch = args
    seed = fold_seed(config.seed, i)
    cfg = dataclasses.replace(config, seed=seed)
    params, history = train_one_model(train, cfg, embeddings if cfg.mode == "vst_l" else None,
                                      on_epoch=on_epoch)
    report = evaluate(params, test, cfg)
    align = _alignment(params, test, cfg, embeddings, seed) if embeddings is not None else None
    return report, history, align


def cross_validate(clips: list[Clip], config: RunConfig, embeddings=None, jobs: int = 1, on_epoch=None,
                   folds: list | None = None) -> CVReport:
    """Train on k-1 folds, test on the held-out fold, and average the fold accuracies."""
    video_labels = {}
    for c in clips:
        video_labels.setdefault(c.video_id, c.label)
    folds = folds if folds is not None else kfold_split(video_labels, config.k, config.seed)
    tasks = []
    for i, fold in enumerate(folds):
        held = set(fold)
        train = [c for c in clips if c.video_id not in held]
        test = [c for c in clips if c.video_id in held]
        tasks.append((i, train, test, config, embeddings, on_epoch if jobs == 1 else None))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    reports = [r for r, _, _ in results]
    accs = [r.top1 for r in reports]
    align = [a for _, _, a in results] if embeddings is not None else None
    return CVReport(averaged_accuracy(accs), accs, averaged_accuracy([r.video_top1 for r in reports]),
                    reports, [h for _, h, _ in results], align)

