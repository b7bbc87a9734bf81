"""Video Swin Transformer backbone built on :mod:`stimswin.tensor`.

Token grids are laid out ``[B, t, h, w, C]``. Each stage runs a number of
block pairs (a window-attention layer followed by a shifted-window layer);
stages 1-3 end with a 2x2 spatial patch merge that doubles the channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, asdict
from functools import lru_cache

import numpy as np

from .tensor import (
    Rng,
    Tensor,
    as_tensor,
    gelu,
    layer_norm,
    linear,
    make_tensor,
    matmul,
    no_grad,
    roll,
    softmax_lastdim,
)

# Additive logit for keys outside the query's shifted-window region.
MASK_VALUE = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (16, 32, 32, 3)
    patch_size: tuple = (2, 4, 4)
    embed_dim: int = 16
    depths: tuple = (1, 1, 2, 1)
    head_dim: int = 8
    window: tuple = (2, 4, 4)
    shift: tuple | None = None
    mlp_ratio: int = 4
    num_classes: int = 4

    def __post_init__(self):
        for name in ("input_shape", "patch_size", "depths", "window", "shift"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(int(v) for v in val))
        if self.shift is None:
            object.__setattr__(self, "shift", tuple(w // 2 for w in self.window))
        if len(self.depths) != 4:
            raise ValueError(f"depths must list 4 stages, got {self.depths}")
        if any(d < 1 for d in self.depths):
            raise ValueError("every stage needs at least one block pair")
        if len(self.input_shape) != 4 or self.input_shape[3] != 3:
            raise ValueError(f"input_shape must be (T, H, W, 3), got {self.input_shape}")
        if len(self.window) != 3 or len(self.shift) != 3 or len(self.patch_size) != 3:
            raise ValueError("patch_size, window and shift need 3 entries (t, h, w)")
        if any(s < 0 or s >= w for s, w in zip(self.shift, self.window)):
            raise ValueError(f"shift {self.shift} must be in [0, window) for window {self.window}")
        if self.embed_dim % self.head_dim:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by head_dim {self.head_dim}")
        if self.num_classes < 1 or self.mlp_ratio < 1:
            raise ValueError("num_classes and mlp_ratio must be positive")
        T, H, W, _ = self.input_shape
        pt, ph, pw = self.patch_size
        if T % pt or H % ph or W % pw:
            raise ValueError(f"input {self.input_shape} not divisible by patch {self.patch_size}")
        t, h, w = T // pt, H // ph, W // pw
        if h % 8 or w % 8:
            raise ValueError(f"token grid {h}x{w} must halve cleanly through three merges")
        stage_plan(self)

    @property
    def feature_dim(self) -> int:
        return self.embed_dim * 8

    @property
    def token_grid(self) -> tuple[int, int, int]:
        T, H, W, _ = self.input_shape
        pt, ph, pw = self.patch_size
        return T // pt, H // ph, W // pw

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class StageSpec:
    grid: tuple
    dim: int
    heads: int
    window: tuple
    shift: tuple
    mask: np.ndarray | None = field(default=None, compare=False, repr=False)


def _stage_window(grid, window, shift):
    # An axis that the configured window does not tile becomes one window.
    win, sh = [], []
    for g, w, s in zip(grid, window, shift):
        if g % w == 0 and g > w:
            win.append(w)
            sh.append(s)
        else:
            win.append(g)
            sh.append(0)
    return tuple(win), tuple(sh)


@lru_cache(maxsize=None)
def stage_plan(config: ModelConfig) -> tuple[StageSpec, ...]:
    """Per-stage token grid, width, heads, effective window, shift and mask."""
    t, h, w = config.token_grid
    dim = config.embed_dim
    out = []
    for s in range(4):
        if s:
            h, w, dim = h // 2, w // 2, dim * 2
        win, sh = _stage_window((t, h, w), config.window, config.shift)
        mask = shifted_window_mask((t, h, w), win, sh) if any(sh) else None
        out.append(StageSpec((t, h, w), dim, dim // config.head_dim, win, sh, mask))
    return tuple(out)


# -- parameters -----------------------------------------------------------------

def _layer_shapes(prefix: str, d: int, r: int) -> list[tuple[str, tuple]]:
    return [
        (prefix + "ln1.g", (d,)), (prefix + "ln1.b", (d,)),
        (prefix + "attn.wq", (d, d)), (prefix + "attn.wk", (d, d)), (prefix + "attn.wv", (d, d)),
        (prefix + "attn.wo", (d, d)), (prefix + "attn.bo", (d,)),
        (prefix + "ln2.g", (d,)), (prefix + "ln2.b", (d,)),
        (prefix + "mlp.w1", (d, r * d)), (prefix + "mlp.b1", (r * d,)),
        (prefix + "mlp.w2", (r * d, d)), (prefix + "mlp.b2", (d,)),
    ]


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map for every backbone and head parameter."""
    C = config.embed_dim
    raw = math.prod(config.patch_size) * 3
    shapes = [("patch_embed.w", (raw, C)), ("patch_embed.b", (C,))]
    for s, spec in enumerate(stage_plan(config)):
        d = spec.dim
        if s:
            shapes += [(f"merge{s}.ln.g", (2 * d,)), (f"merge{s}.ln.b", (2 * d,)),
                       (f"merge{s}.w", (2 * d, d))]
        for p in range(config.depths[s]):
            for layer in (0, 1):
                shapes += _layer_shapes(f"stage{s}.pair{p}.layer{layer}.", d, config.mlp_ratio)
    F = config.feature_dim
    shapes += [("norm.g", (F,)), ("norm.b", (F,)),
               ("head.w", (F, config.num_classes)), ("head.b", (config.num_classes,))]
    return dict(shapes)


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count.

    patch embed ``96C + C``; each layer of width d ``(4 + 2r) d^2 + (6 + r) d``;
    each merge from width d ``8 d^2 + 8 d``; final norm ``16C``; head ``8CK + K``.
    """
    C, r, K = config.embed_dim, config.mlp_ratio, config.num_classes
    raw = math.prod(config.patch_size) * 3
    total = raw * C + C
    for s, depth in enumerate(config.depths):
        d = C * 2 ** s
        total += 2 * depth * ((4 + 2 * r) * d * d + (6 + r) * d)
        if s < 3:
            total += 8 * d * d + 8 * d
    return total + 16 * C + 8 * C * K + K


def init_params(config: ModelConfig, rng: Rng, dtype="f32") -> dict[str, Tensor]:
    """Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm gains."""
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            t = make_tensor(shape, "constant", value=1.0, dtype=dtype)
        elif leaf.startswith("b"):
            t = make_tensor(shape, "zeros", dtype=dtype)
        else:
            t = make_tensor(shape, "truncated_normal", std=0.02, rng=rng, dtype=dtype)
        t.requires_grad = True
        params[name] = t
    return params


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# -- token movement ---------------------------------------------------------------

def patch_embed(video, w: Tensor, b: Tensor, patch=(2, 4, 4)) -> Tensor:
    """``[B, T, H, W, 3]`` pixels -> ``[B, T/pt, H/ph, W/pw, C]`` tokens."""
    video = as_tensor(video, w.dtype)
    B, T, H, W, ch = video.shape
    pt, ph, pw = patch
    if T % pt or H % ph or W % pw:
        raise ValueError(f"video {video.shape} not divisible by patch {tuple(patch)}")
    x = video.reshape(B, T // pt, pt, H // ph, ph, W // pw, pw, ch)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(B, T // pt, H // ph, W // pw, pt * ph * pw * ch)
    return linear(x, w, b)


def _check_tiles(grid, window):
    if any(g % w for g, w in zip(grid, window)):
        raise ValueError(f"token grid {tuple(grid)} not divisible by window {tuple(window)}")


def window_partition(x: Tensor, window) -> Tensor:
    """``[B, t, h, w, C]`` -> ``[B * nW, wt * wh * ww, C]``."""
    B, t, h, w, C = x.shape
    wt, wh, ww = window
    _check_tiles((t, h, w), window)
    x = x.reshape(B, t // wt, wt, h // wh, wh, w // ww, ww, C)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(-1, wt * wh * ww, C)


def window_reverse(windows: Tensor, window, grid) -> Tensor:
    """Inverse of :func:`window_partition`; ``grid`` is ``(B, t, h, w)``."""
    B, t, h, w = grid
    wt, wh, ww = window
    _check_tiles((t, h, w), window)
    C = windows.shape[-1]
    x = windows.reshape(B, t // wt, h // wh, w // ww, wt, wh, ww, C)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(B, t, h, w, C)


def _partition_np(a: np.ndarray, window) -> np.ndarray:
    t, h, w = a.shape[:3]
    wt, wh, ww = window
    a = a.reshape(t // wt, wt, h // wh, wh, w // ww, ww, *a.shape[3:])
    a = a.transpose(0, 2, 4, 1, 3, 5, *range(6, a.ndim))
    return a.reshape(-1, wt * wh * ww, *a.shape[6:])


def cyclic_shift(x: Tensor, shift, inverse: bool = False) -> Tensor:
    """Roll the token grid by ``-shift`` along (t, h, w); ``inverse`` rolls back."""
    sign = 1 if inverse else -1
    return roll(x, tuple(sign * s for s in shift), (1, 2, 3))


def shifted_window_mask(grid, window, shift) -> np.ndarray:
    """Additive ``[nW, n, n]`` mask separating regions that wrapped around the border."""
    _check_tiles(grid, window)
    labels = np.zeros(grid, dtype=np.int64)

    def spans(n, w, s):
        if s == 0:
            return (slice(None),)
        return slice(0, n - w), slice(n - w, n - s), slice(n - s, None)

    k = 0
    for st in spans(grid[0], window[0], shift[0]):
        for sh in spans(grid[1], window[1], shift[1]):
            for sw in spans(grid[2], window[2], shift[2]):
                labels[st, sh, sw] = k
                k += 1
    ids = _partition_np(labels, window)
    return np.where(ids[:, :, None] != ids[:, None, :], MASK_VALUE, 0.0)


# -- attention ---------------------------------------------------------------------

def window_attention(windows: Tensor, p: dict, head_dim: int, mask=None, tap: list | None = None) -> Tensor:
    """Multi-head self-attention inside each window.

    ``p`` holds ``wq``, ``wk``, ``wv`` (``[C, C]``, no bias), ``wo``/``bo`` for the
    output projection. ``mask`` is ``[nW, n, n]`` and repeats over the batch.
    ``tap``, when given, receives the post-softmax weights ``[Bw, heads, n, n]``.
    """
    Bw, n, C = windows.shape
    if C % head_dim:
        raise ValueError(f"channels {C} not divisible by head_dim {head_dim}")
    heads = C // head_dim

    def split(t):
        return t.reshape(Bw, n, heads, head_dim).permute(0, 2, 1, 3)

    q = split(linear(windows, p["wq"]))
    k = split(linear(windows, p["wk"]))
    v = split(linear(windows, p["wv"]))
    scores = matmul(q, k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    if mask is not None:
        mask = np.asarray(mask, dtype=scores.dtype)
        nW = mask.shape[0]
        if Bw % nW:
            raise ValueError(f"{Bw} windows do not repeat a mask of {nW} windows")
        scores = (scores.reshape(Bw // nW, nW, heads, n, n) + mask[None, :, None]).reshape(Bw, heads, n, n)
    attn = softmax_lastdim(scores)
    if tap is not None:
        tap.append(attn.data.copy())
    out = matmul(attn, v).permute(0, 2, 1, 3).reshape(Bw, n, C)
    return linear(out, p["wo"], p["bo"])


def swin_layer(x: Tensor, p: dict, window, shift, head_dim: int, mask=None, tap=None) -> Tensor:
    B, t, h, w, C = x.shape
    shifted = any(shift)
    y = layer_norm(x, p["ln1.g"], p["ln1.b"], LN_EPS)
    if shifted:
        y = cyclic_shift(y, shift)
    y = window_attention(window_partition(y, window), _sub(p, "attn."), head_dim, mask, tap)
    y = window_reverse(y, window, (B, t, h, w))
    if shifted:
        y = cyclic_shift(y, shift, inverse=True)
    x = x + y
    y = layer_norm(x, p["ln2.g"], p["ln2.b"], LN_EPS)
    y = linear(gelu(linear(y, p["mlp.w1"], p["mlp.b1"])), p["mlp.w2"], p["mlp.b2"])
    return x + y


def swin_block_pair(x: Tensor, p: dict, window, shift, head_dim: int, mask=None, tap=None) -> Tensor:
    """W-MSA layer then SW-MSA layer. ``p`` keys are ``layer0.*`` and ``layer1.*``."""
    x = swin_layer(x, _sub(p, "layer0."), window, (0, 0, 0), head_dim, None, tap)
    return swin_layer(x, _sub(p, "layer1."), window, shift, head_dim, mask)


def patch_merging(x: Tensor, p: dict) -> Tensor:
    """Concatenate each 2x2 spatial neighbourhood (4C), LayerNorm, project to 2C."""
    B, t, h, w, C = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"patch merging needs even spatial dims, got {h}x{w}")
    x = x.reshape(B, t, h // 2, 2, w // 2, 2, C).permute(0, 1, 2, 4, 5, 3, 6)
    x = x.reshape(B, t, h // 2, w // 2, 4 * C)
    return linear(layer_norm(x, p["ln.g"], p["ln.b"], LN_EPS), p["w"])


# -- network -------------------------------------------------------------------------

@dataclass
class AttentionRecord:
    """Window attention captured from one layer: ``attn`` is ``[B, nW, heads, n, n]``."""

    attn: np.ndarray
    grid: tuple
    window: tuple


@dataclass
class ForwardOutput:
    logits: Tensor
    feature: Tensor
    attention_taps: AttentionRecord | None = None


def forward_extract(video, params: dict, config: ModelConfig, capture: bool = False) -> ForwardOutput:
    """Run the backbone and head on ``[B, T, H, W, 3]`` frames.

    With ``capture`` the unshifted attention of the last block pair in the
    final stage is kept in ``attention_taps``.
    """
    dtype = params["patch_embed.w"].dtype
    video = as_tensor(video, dtype)
    if video.ndim != 5 or tuple(video.shape[1:]) != config.input_shape:
        raise ValueError(f"expected [B, *{config.input_shape}] input, got {video.shape}")
    B = video.shape[0]
    x = patch_embed(video, params["patch_embed.w"], params["patch_embed.b"], config.patch_size)
    tap = None
    plan = stage_plan(config)
    for s, spec in enumerate(plan):
        if s:
            x = patch_merging(x, _sub(params, f"merge{s}."))
        for pair in range(config.depths[s]):
            last = capture and s == 3 and pair == config.depths[s] - 1
            tap = [] if last else None
            x = swin_block_pair(x, _sub(params, f"stage{s}.pair{pair}."), spec.window, spec.shift,
                                config.head_dim, spec.mask, tap)
            if last:
                record = tap
    x = layer_norm(x, params["norm.g"], params["norm.b"], LN_EPS)
    feature = x.mean(axis=(1, 2, 3))
    logits = linear(feature, params["head.w"], params["head.b"])
    taps = None
    if capture:
        spec = plan[3]
        (attn,) = record
        nW = attn.shape[0] // B
        taps = AttentionRecord(attn.reshape(B, nW, *attn.shape[1:]), spec.grid, spec.window)
    return ForwardOutput(logits, feature, taps)


def predict(video, params: dict, config: ModelConfig) -> np.ndarray:
    """Argmax class per clip; ties resolve to the lowest index."""
    with no_grad():
        logits = forward_extract(video, params, config).logits.data
    return np.argmax(logits, axis=-1)


TINY = ModelConfig()
FULL = ModelConfig(input_shape=(32, 224, 224, 3), embed_dim=96, depths=(2, 2, 6, 2),
                   head_dim=32, window=(2, 4, 4))
PRESETS = {"tiny": TINY, "full": FULL}
