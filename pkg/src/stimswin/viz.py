"""Attention-map visualisation: capture, collapse, upsample, normalise, overlay, export."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .swin import AttentionRecord, ForwardOutput, ModelConfig, forward_extract
from .tensor import no_grad

__all__ = [
    "AttentionRecord",
    "capture_attention",
    "collapse_attention",
    "trilinear_resize",
    "normalize_mask",
    "attention_masks",
    "overlay_and_export",
    "write_ppm",
    "read_ppm",
]


def capture_attention(params: dict, config: ModelConfig, video) -> AttentionRecord:
    """Unshifted window attention of the last block pair in the final stage."""
    with no_grad():
        out = forward_extract(video, params, config, capture=True)
    return record_from_output(out)


def record_from_output(out: ForwardOutput) -> AttentionRecord:
    if out.attention_taps is None:
        raise ValueError("forward pass ran without capture=True; no attention recorded")
    return out.attention_taps


def collapse_attention(rec: AttentionRecord) -> np.ndarray:
    """Max over keys per query, mean over heads, windows scattered back to ``[B, t, h, w]``."""
    B, nW = rec.attn.shape[:2]
    t, h, w = rec.grid
    wt, wh, ww = rec.window
    sal = rec.attn.max(axis=-1).mean(axis=2)
    sal = sal.reshape(B, t // wt, h // wh, w // ww, wt, wh, ww)
    return sal.transpose(0, 1, 4, 2, 5, 3, 6).reshape(B, t, h, w)


def _linear_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    if n_in == 1 or n_out == 1:
        return np.repeat(a.take([0], axis=axis), n_out, axis=axis)
    # corner samples land on corners
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    frac = src - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return a.take(i0, axis=axis) * (1 - frac) + a.take(i0 + 1, axis=axis) * frac


def trilinear_resize(vol: np.ndarray, target) -> np.ndarray:
    """Separable linear resize of ``[B, t, h, w]`` to ``[B, *target]`` with aligned corners."""
    out = np.asarray(vol, dtype=np.float64)
    for axis, n in zip((1, 2, 3), target):
        if int(n) < 1:
            raise ValueError(f"target dims must be >= 1, got {tuple(target)}")
        out = _linear_axis(out, axis, int(n))
    return out


def normalize_mask(mask: np.ndarray) -> tuple[np.ndarray, float, float]:
    """``(m - min) / (max - min)``; a constant mask becomes all zeros."""
    lo, hi = float(mask.min()), float(mask.max())
    if hi <= lo:
        return np.zeros_like(mask, dtype=np.float64), lo, hi
    return (mask - lo) / (hi - lo), lo, hi


def attention_masks(params: dict, config: ModelConfig, video) -> tuple[np.ndarray, list]:
    """Per-clip normalised masks at input resolution ``[B, T, H, W]`` and their (min, max)."""
    rec = capture_attention(params, config, video)
    T, H, W, _ = config.input_shape
    up = trilinear_resize(collapse_attention(rec), (T, H, W))
    masks, stats = [], []
    for m in up:
        norm, lo, hi = normalize_mask(m)
        masks.append(norm)
        stats.append((lo, hi))
    return np.stack(masks), stats


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM export takes uint8 [H, W, 3] images")
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM is supported")
    W, H = int(fields[1]), int(fields[2])
    data = raw[pos + 1:pos + 1 + W * H * 3]
    if len(data) != W * H * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W, 3).copy()


def _to_uint8(frames) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def overlay_and_export(mask: np.ndarray, frames, out_dir, normalize: bool = True) -> list[Path]:
    """Multiply each frame by its mask and write ``frame_%04d.ppm`` plus ``overlay.json``.

    ``frames`` is ``[T, H, W, 3]`` uint8 or floats in [0, 1]; ``mask`` is ``[T, H, W]``.
    With ``normalize`` the mask is min-max scaled over the whole clip first.
    """
    mask = np.asarray(mask, dtype=np.float64)
    frames8 = _to_uint8(frames)
    if mask.shape != frames8.shape[:3]:
        raise ValueError(f"mask {mask.shape} does not align with frames {frames8.shape}")
    lo, hi = float(mask.min()), float(mask.max())
    if normalize:
        mask, lo, hi = normalize_mask(mask)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = []
    for t in range(len(frames8)):
        img = np.round(frames8[t].astype(np.float64) * mask[t][..., None]).astype(np.uint8)
        p = out / f"frame_{t:04d}.ppm"
        write_ppm(p, img)
        paths.append(p)
    (out / "overlay.json").write_text(json.dumps({"min": lo, "max": hi, "normalized": normalize,
                                                  "frames": len(paths)}))
    return paths
