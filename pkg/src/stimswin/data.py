"""Clip ingestion, cropping, augmentation, tensor files and synthetic stimming videos."""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .tensor import Rng

CLASS_NAMES = ("arm_flapping", "head_banging", "spinning", "hand_action")


class DataError(ValueError):
    """Malformed input data: tensor files, manifests, boxes, labels."""


# -- VTF1 tensor files ----------------------------------------------------------

_MAGIC = b"VTF1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def write_tensor_file(path, array) -> None:
    """Magic ``VTF1``, dtype byte, ndim byte, u64 LE dims, row-major LE payload."""
    arr = np.asarray(array)
    code = _CODE_OF.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype} for a tensor file")
    if arr.ndim > 255:
        raise DataError("too many dimensions for a tensor file")
    header = _MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic, not a VTF1 tensor file")
    if len(raw) < 6:
        raise DataError(f"{path}: truncated header")
    code, ndim = raw[4], raw[5]
    if code not in _CODES:
        raise DataError(f"{path}: unknown dtype byte {code}")
    end = 6 + 8 * ndim
    if len(raw) < end:
        raise DataError(f"{path}: truncated shape header")
    shape = struct.unpack(f"<{ndim}Q", raw[6:end])
    dtype = _CODES[code]
    need = math.prod(shape) * dtype.itemsize
    if len(raw) - end != need:
        raise DataError(f"{path}: payload has {len(raw) - end} bytes, expected {need}")
    return np.frombuffer(raw, dtype=dtype, offset=end).reshape(shape).astype(dtype.newbyteorder("="))


# -- resampling and cropping --------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    # Half-pixel centres; equal sizes give the identity.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (src - i0).astype(np.float32)


def resize_bilinear(frames: np.ndarray, size) -> np.ndarray:
    """Resize ``[T, H, W, C]`` frames spatially to ``size = (H', W')``."""
    frames = np.asarray(frames, dtype=np.float32)
    H, W = frames.shape[1:3]
    h2, w2 = int(size[0]), int(size[1])
    if (h2, w2) == (H, W):
        return frames.copy()
    i0, i1, wy = _axis_weights(H, h2)
    out = frames[:, i0] * (1 - wy)[None, :, None, None] + frames[:, i1] * wy[None, :, None, None]
    j0, j1, wx = _axis_weights(W, w2)
    return out[:, :, j0] * (1 - wx)[None, None, :, None] + out[:, :, j1] * wx[None, None, :, None]


def check_boxes(boxes, frame_hw, n_frames=None) -> np.ndarray:
    b = np.asarray(boxes)
    if b.ndim != 2 or b.shape[1] != 4:
        raise DataError(f"boxes must be [T, 4] (x0, y0, x1, y1), got shape {b.shape}")
    if n_frames is not None and b.shape[0] != n_frames:
        raise DataError(f"{b.shape[0]} boxes for {n_frames} frames")
    if not np.allclose(b, np.round(b)):
        raise DataError("box coordinates must be whole pixels")
    b = np.round(b).astype(np.int64)
    H, W = frame_hw
    x0, y0, x1, y1 = b.T
    if (x0 >= x1).any() or (y0 >= y1).any():
        raise DataError("degenerate box: need x0 < x1 and y0 < y1")
    if (x0 < 0).any() or (y0 < 0).any() or (x1 > W).any() or (y1 > H).any():
        raise DataError(f"box outside the {W}x{H} frame")
    return b


def crop_with_boxes(frames: np.ndarray, boxes) -> np.ndarray:
    """Crop every frame to its box, then resize all crops to the median box size."""
    frames = np.asarray(frames)
    b = check_boxes(boxes, frames.shape[1:3], frames.shape[0])
    heights = b[:, 3] - b[:, 1]
    widths = b[:, 2] - b[:, 0]
    size = (int(round(float(np.median(heights)))), int(round(float(np.median(widths)))))
    out = np.empty((frames.shape[0], *size, frames.shape[3]), dtype=np.float32)
    for t, (x0, y0, x1, y1) in enumerate(b):
        out[t] = resize_bilinear(frames[t:t + 1, y0:y1, x0:x1], size)[0]
    return out


# -- clips -----------------------------------------------------------------------------

@dataclass
class Clip:
    frames: np.ndarray
    label: int
    video_id: str
    clip_index: int
    normalized: bool = False


def segment_clips(video: np.ndarray, clip_len: int = 30, label: int = 0, video_id: str = "",
                  normalized: bool = False) -> list[Clip]:
    """Non-overlapping windows of ``clip_len`` frames; a shorter tail is dropped."""
    n = len(video) // clip_len
    return [Clip(np.array(video[i * clip_len:(i + 1) * clip_len]), label, video_id, i, normalized)
            for i in range(n)]


@dataclass(frozen=True)
class AugmentPreset:
    resize_short: int = 256
    crop: int = 224


AUGMENT_PRESETS = {"full": AugmentPreset(256, 224), "tiny": AugmentPreset(36, 32)}


def augment_clip(clip: Clip, rng: Rng | None, train: bool, preset: AugmentPreset = AugmentPreset(),
                 force_flip: bool | None = None) -> np.ndarray:
    """Resize the short side, crop (random when training, centre otherwise), flip, scale to [0, 1].

    One crop window and one flip decision are shared by every frame of the clip.
    """
    frames = np.asarray(clip.frames, dtype=np.float32)
    if not clip.normalized:
        frames = frames / np.float32(255.0)
    H, W = frames.shape[1:3]
    scale = preset.resize_short / min(H, W)
    size = (preset.resize_short, int(round(W * scale))) if H <= W else (int(round(H * scale)), preset.resize_short)
    frames = resize_bilinear(frames, size)
    H, W = size
    c = preset.crop
    if H < c or W < c:
        raise DataError(f"resized frames {H}x{W} smaller than crop {c}")
    if train:
        if rng is None:
            raise ValueError("training augmentation needs an rng")
        y0 = int(rng.integers(0, H - c + 1))
        x0 = int(rng.integers(0, W - c + 1))
        flip = rng.random() < 0.5
    else:
        y0, x0, flip = (H - c) // 2, (W - c) // 2, False
    if force_flip is not None:
        flip = force_flip
    out = frames[:, y0:y0 + c, x0:x0 + c]
    if flip:
        out = out[:, :, ::-1]
    return np.clip(np.ascontiguousarray(out), 0.0, 1.0)


def fit_frames(frames: np.ndarray, n_frames: int) -> np.ndarray:
    """Edge-pad (repeat the last frame) up to ``n_frames``; longer clips raise."""
    T = len(frames)
    if T > n_frames:
        raise DataError(f"clip has {T} frames, model takes {n_frames}")
    if T == n_frames:
        return frames
    pad = np.repeat(frames[-1:], n_frames - T, axis=0)
    return np.concatenate([frames, pad], axis=0)


# -- manifests ---------------------------------------------------------------------

def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON") from exc
            for key in ("video_id", "tensor_path", "label_name"):
                if key not in rec:
                    raise DataError(f"{path}:{lineno}: record lacks {key!r}")
            records.append(rec)
    ids = [r["video_id"] for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate video_id")
    return records


def load_manifest(path, clip_len: int = 30, class_names=CLASS_NAMES) -> list[Clip]:
    """Read every record's video, crop it when boxes are given, and cut it into clips."""
    path = Path(path)
    records = read_manifest(path)
    if not records:
        warnings.warn(f"{path}: manifest is empty", stacklevel=2)
        return []
    index = {name: i for i, name in enumerate(class_names)}
    clips: list[Clip] = []
    for rec in records:
        if rec["label_name"] not in index:
            raise DataError(f"{path}: unknown label {rec['label_name']!r} for {rec['video_id']}")
        tensor_path = Path(rec["tensor_path"])
        if not tensor_path.is_absolute():
            tensor_path = path.parent / tensor_path
        try:
            video = read_tensor_file(tensor_path)
        except OSError as exc:
            raise DataError(f"cannot read {tensor_path}: {exc}") from exc
        if video.ndim != 4 or video.shape[3] != 3:
            raise DataError(f"{tensor_path}: expected [T, H, W, 3], got {video.shape}")
        normalized = video.dtype != np.uint8
        if rec.get("boxes") is not None:
            video = crop_with_boxes(video, rec["boxes"])
        clips += segment_clips(video, clip_len, index[rec["label_name"]], rec["video_id"], normalized)
    return clips


# -- synthetic stimming motions ------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    archetype: str
    frame_size: tuple = (36, 36)
    n_frames: int = 16
    scale: float = 0.09
    period: int = 8
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.archetype not in CLASS_NAMES:
            raise DataError(f"unknown archetype {self.archetype!r}")
        if self.period < 2:
            raise DataError("period must be at least 2 frames")
        if self.noise_std < 0:
            raise DataError("noise_std must be non-negative")


def _blob(yy, xx, cy, cx, sigma):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))


def synth_generate(spec: SynthSpec) -> tuple[np.ndarray, int]:
    """Render one ``[T, H, W, 3]`` video in [0, 1] and its class index.

    Motion phase uses ``t mod period`` so noise-free videos repeat exactly.
    """
    rng = Rng(spec.seed).split("synth")
    H, W = spec.frame_size
    size = min(H, W)
    sigma = spec.scale * size
    cy = H / 2 + rng.uniform(-0.08, 0.08) * size
    cx = W / 2 + rng.uniform(-0.08, 0.08) * size
    amp = 0.25 * size
    phase0 = rng.uniform(0, 2 * np.pi)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    colour = rng.uniform(0.6, 1.0, 3)
    background = rng.uniform(0.05, 0.25)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    frames = np.empty((spec.n_frames, H, W, 3))
    for t in range(spec.n_frames):
        phi = phase0 + direction * 2 * np.pi * (t % spec.period) / spec.period
        if spec.archetype == "arm_flapping":
            mass = _blob(yy, xx, cy, cx + amp * np.sin(phi), sigma)
        elif spec.archetype == "head_banging":
            mass = _blob(yy, xx, cy + amp * np.sin(phi), cx, sigma)
        elif spec.archetype == "spinning":
            dy, dx = amp * np.sin(phi), amp * np.cos(phi)
            mass = np.maximum(_blob(yy, xx, cy + dy, cx + dx, sigma), _blob(yy, xx, cy - dy, cx - dx, sigma))
        else:
            mass = _blob(yy, xx, cy, cx, sigma) * (0.55 + 0.45 * np.cos(phi))
        frames[t] = background + (1.0 - background) * mass[..., None] * colour
    if spec.noise_std > 0:
        frames += spec.noise_std * rng.normal(frames.shape)
    return np.clip(frames, 0.0, 1.0), CLASS_NAMES.index(spec.archetype)


def synthetic_videos(videos_per_class: int = 60, n_frames: int = 16, frame_size=(36, 36),
                     noise_std: float = 0.03, seed: int = 0, class_names=CLASS_NAMES):
    """Yield ``(video_id, uint8 video, label_name, SynthSpec)`` with randomised periods."""
    rng = Rng(seed).split("synthetic_videos")
    for c, name in enumerate(class_names):
        for i in range(videos_per_class):
            lo, hi = (2, 5) if name == "hand_action" else (6, 11)
            spec = SynthSpec(name, tuple(frame_size), n_frames, float(rng.uniform(0.07, 0.11)),
                             int(rng.integers(lo, hi)), noise_std, int(rng.integers(0, 2 ** 62)))
            video, _ = synth_generate(spec)
            yield f"{name}_{i:03d}", np.round(video * 255).astype(np.uint8), name, spec


def synthetic_clips(videos_per_class: int = 60, n_frames: int = 16, clip_len: int = 16,
                    frame_size=(36, 36), noise_std: float = 0.03, seed: int = 0,
                    class_names=CLASS_NAMES) -> list[Clip]:
    """In-memory equivalent of ``generate_dataset`` followed by ``load_manifest``."""
    clips = []
    for vid, video, name, _ in synthetic_videos(videos_per_class, n_frames, frame_size, noise_std,
                                                 seed, class_names):
        clips += segment_clips(video, clip_len, class_names.index(name), vid)
    return clips


def generate_dataset(out_dir, videos_per_class: int = 60, n_frames: int = 16, frame_size=(36, 36),
                     noise_std: float = 0.03, seed: int = 0, class_names=CLASS_NAMES) -> Path:
    """Write uint8 VTF1 videos plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    records = []
    for vid, video, name, spec in synthetic_videos(videos_per_class, n_frames, frame_size, noise_std,
                                                    seed, class_names):
        rel = f"videos/{vid}.vtf"
        write_tensor_file(out / rel, video)
        records.append({"video_id": vid, "tensor_path": rel, "label_name": name,
                        "synth": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}})
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
