"""Text branch: class descriptions, frozen class embeddings and the cosine alignment loss.

Only training touches this module. The projection from visual features to
the embedding width lives here too, so a checkpoint stripped of ``proj.*``
parameters is a plain vision-only model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng, Tensor, as_tensor, make_tensor, matmul

from .data import CLASS_NAMES

COSINE_EPS = 1e-8
PROJECTION_KEY = "proj.w"


@dataclass(frozen=True)
class ClassDescription:
    class_id: int
    name: str
    text: str


_TEXTS = {
    "arm_flapping": (
        "Arm flapping is one of the stimming behaviors that involve the repetitive movement "
        "of the arms and hands. It's often used as a way to release excess energy or "
        "stimulate the senses."
    ),
    "head_banging": (
        "Head Banging is a self-injurious behavior for children with autism spectrum disorder "
        "children who are sensitive to noise are often aggressive and will hit their heads to "
        "distract themselves from the pain."
    ),
    "spinning": (
        "Spinning one’s own body may present as full body spinning. Autistic children may "
        "enjoy sitting in a chair or standing and being spun as quickly as possible."
    ),
    "hand_action": (
        "Finger flicking is a repeated movement involving fingers using an almost "
        "“snapping” motion. The repetitive motion of finger flicking close to the face "
        "lets the child know where their body is in relation to space and other objects"
    ),
}


def builtin_descriptions() -> list[ClassDescription]:
    return [ClassDescription(i, name, _TEXTS[name]) for i, name in enumerate(CLASS_NAMES)]


@dataclass(frozen=True)
class ClassEmbeddings:
    """Fixed per-class vectors; ``vectors[i]`` belongs to ``classes[i]``."""

    dim: int
    classes: tuple
    vectors: np.ndarray
    source: str = "file"

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64)
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "classes", tuple(self.classes))

    def for_labels(self, labels, class_names=CLASS_NAMES) -> np.ndarray:
        """Rows matching integer labels indexed into ``class_names``."""
        index = {name: i for i, name in enumerate(self.classes)}
        rows = [index[class_names[int(y)]] for y in np.asarray(labels).reshape(-1)]
        return self.vectors[rows]

    def matrix(self, class_names=CLASS_NAMES) -> np.ndarray:
        return self.for_labels(np.arange(len(class_names)), class_names)

    def to_json(self) -> dict:
        return {"dim": self.dim, "classes": {c: v.tolist() for c, v in zip(self.classes, self.vectors)}}


def load_embeddings(path, required_classes=None) -> ClassEmbeddings:
    """Read ``{"dim": D, "classes": {name: [floats]}}``."""
    doc = json.loads(Path(path).read_text())
    try:
        dim = int(doc["dim"])
        table = doc["classes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: embedding file needs 'dim' and 'classes'") from exc
    names, rows = [], []
    for name, vec in table.items():
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (dim,):
            raise ValueError(f"{path}: class {name!r} has {vec.size} values, expected dim {dim}")
        if not np.isfinite(vec).all():
            raise ValueError(f"{path}: class {name!r} has non-finite values")
        names.append(name)
        rows.append(vec)
    missing = sorted(set(required_classes or ()) - set(names))
    if missing:
        raise ValueError(f"{path}: no embedding for classes {missing}")
    return ClassEmbeddings(dim, tuple(names), np.stack(rows) if rows else np.zeros((0, dim)), "file")


def save_embeddings(path, emb: ClassEmbeddings) -> None:
    Path(path).write_text(json.dumps(emb.to_json()))


def pseudo_embeddings(classes=CLASS_NAMES, dim: int = 64, seed: int = 0) -> ClassEmbeddings:
    """Deterministic orthonormal stand-ins: Gaussian draws orthogonalised by Gram-Schmidt."""
    classes = tuple(classes)
    if dim < len(classes):
        raise ValueError(f"dim {dim} cannot hold {len(classes)} orthogonal class vectors")
    raw = Rng(seed).split("pseudo_embeddings").normal((len(classes), dim))
    basis = []
    for v in raw:
        for b in basis:
            v = v - (v @ b) * b
        basis.append(v / np.linalg.norm(v))
    return ClassEmbeddings(dim, classes, np.stack(basis), "pseudo")


def init_projection(feature_dim: int, dim: int, rng: Rng, dtype="f32") -> Tensor:
    return make_tensor((feature_dim, dim), "truncated_normal", std=0.02, rng=rng, dtype=dtype,
                       requires_grad=True)


def project_visual(v: Tensor, P: Tensor) -> Tensor:
    if v.ndim != 2 or P.ndim != 2 or v.shape[1] != P.shape[0]:
        raise ValueError(f"cannot project features {v.shape} with {P.shape}")
    return matmul(v, P)


def _guarded_norm(x: Tensor) -> Tensor:
    return ((x * x).sum(axis=-1) + COSINE_EPS ** 2).sqrt()


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``a.b / (|a| |b|)`` with norms ``sqrt(|x|^2 + eps^2)``."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return (a * b).sum(axis=-1) / (_guarded_norm(a) * _guarded_norm(b))


def cosine_contrastive_loss(v_proj: Tensor, l_y) -> Tensor:
    """Mean negative cosine between projected features and their class embeddings."""
    v_proj = as_tensor(v_proj)
    l_y = as_tensor(np.asarray(l_y.data if isinstance(l_y, Tensor) else l_y, dtype=v_proj.dtype))
    if v_proj.shape != l_y.shape:
        raise ValueError(f"feature {v_proj.shape} and embedding {l_y.shape} shapes differ")
    return -cosine_similarity(v_proj, l_y).mean()


def alignment_scores(v_proj: np.ndarray, labels, class_matrix: np.ndarray) -> tuple[float, float]:
    """Mean cosine to the matched class and mean cosine to every other class."""
    v = np.asarray(v_proj, dtype=np.float64)
    L = np.asarray(class_matrix, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    vn = v / np.sqrt((v * v).sum(-1, keepdims=True) + COSINE_EPS ** 2)
    ln = L / np.sqrt((L * L).sum(-1, keepdims=True) + COSINE_EPS ** 2)
    cos = vn @ ln.T
    hit = np.zeros_like(cos, dtype=bool)
    hit[np.arange(len(labels)), labels] = True
    matched = float(cos[hit].mean())
    mismatched = float(cos[~hit].mean()) if (~hit).any() else math.nan
    return matched, mismatched
