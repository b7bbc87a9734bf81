"""Classification loss and the combined training objective."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, log_softmax_lastdim


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]`` (log-sum-exp form)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, K = logits.shape
    if labels.shape[0] != B:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"labels must lie in [0, {K}), got {labels.tolist()}")
    onehot = np.zeros((B, K), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1.0
    return -(log_softmax_lastdim(logits) * onehot).sum() * (1.0 / B)


def total_loss(ce, contrastive=None, enabled: bool = True):
    """Unweighted sum of the two terms; with ``enabled=False`` only ``ce`` is returned."""
    if not enabled or contrastive is None:
        return ce
    if isinstance(ce, Tensor) or isinstance(contrastive, Tensor):
        return as_tensor(ce) + contrastive
    return ce + contrastive
