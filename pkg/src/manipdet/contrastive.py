"""Shallow cross-modal alignment: summary embeddings are projected to a small
unit sphere and pulled toward their momentum-encoded partners while being
pushed away from a queue of recent momentum projections.

The queues deliberately receive projections of *every* sample, manipulated
ones included, so inconsistent pairs end up as negatives; only pristine,
matched pairs ever serve as anchors or positives.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

log = logging.getLogger(__name__)


class ProjectionHead:
    """Affine map to the contrastive space followed by L2 normalization."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.w = nn.normal_param(rng, (d_in, d_out))
        self.b = nn.zeros_param(d_out)

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        z = nn.affine(x, self.w, self.b)
        sq = (z * z).sum(axis=-1, keepdims=True)
        if np.any(sq.data < 1e-24):
            raise ValueError("projection collapsed to zero norm; cannot normalize")
        return z / ad.sqrt(sq)


class EmbeddingQueue:
    """Fixed-capacity FIFO of unit-norm embeddings used as negatives.

    A circular write cursor overwrites the oldest entries once full. The
    manipulated flag per entry is kept for diagnostics only; the loss treats
    every entry identically.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.storage = np.zeros((capacity, dim))
        self.flags = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.length = 0

    def __len__(self):
        return self.length

    def push(self, vectors: np.ndarray, manipulated: np.ndarray | None = None) -> None:
        vectors = np.asarray(vectors)
        if vectors.ndim == 1:
            vectors = vectors[None]
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("queue entries must be unit-norm")
        if manipulated is None:
            manipulated = np.zeros(len(vectors), dtype=bool)
        n = len(vectors)
        if n > self.capacity:  # only the newest entries can survive anyway
            vectors, manipulated = vectors[-self.capacity:], manipulated[-self.capacity:]
            n = self.capacity
        pos = (self.cursor + np.arange(n)) % self.capacity
        self.storage[pos] = vectors
        self.flags[pos] = manipulated
        self.cursor = int((self.cursor + n) % self.capacity)
        self.length = min(self.capacity, self.length + n)

    def snapshot(self) -> np.ndarray:
        """Copy of the live entries; order carries no meaning for the loss."""
        return self.storage[: self.length].copy()

    @property
    def newest(self) -> np.ndarray:
        if self.length == 0:
            raise ValueError("queue is empty")
        return self.storage[(self.cursor - 1) % self.capacity].copy()


def infonce_term(anchor: Tensor, positive: np.ndarray, negatives: np.ndarray,
                 tau: float, include_positive: bool = True) -> Tensor:
    """Temperature-scaled contrastive loss, averaged over anchor rows.

    ``positive`` pairs with the anchors row-by-row and ``negatives`` holds the
    queue snapshot; both come from the momentum branch and are constants here.
    With ``include_positive`` the positive similarity joins the denominator
    (bounding the loss below by zero); disabling it reproduces the bare
    negatives-only denominator for ablation.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    negatives = np.asarray(negatives)
    if negatives.size == 0:
        raise ValueError("contrastive loss needs at least one queued negative")
    squeeze = anchor.ndim == 1
    if squeeze:
        anchor = anchor.reshape(1, -1)
    positive = np.asarray(positive).reshape(anchor.shape)

    pos_sim = (anchor * Tensor(positive)).sum(axis=-1, keepdims=True)
    neg_sim = ad.matmul(anchor, Tensor(negatives.T))
    if include_positive:
        logits = ad.concat([pos_sim, neg_sim], axis=1) * (1.0 / tau)
        logp_pos = ad.slice_(ad.log_softmax(logits), (slice(None), slice(0, 1)))
        return -logp_pos.mean()
    # literal negatives-only denominator: logsumexp(neg/tau) - pos/tau
    scaled = neg_sim * (1.0 / tau)
    shift = scaled.data.max(axis=-1, keepdims=True)
    lse = ad.log(ad.exp(scaled - Tensor(shift)).sum(axis=-1, keepdims=True)) + Tensor(shift)
    return (lse - pos_sim * (1.0 / tau)).mean()


def alignment_contrastive_loss(
    proj_img: Tensor,
    proj_txt: Tensor,
    mom_proj_img: np.ndarray,
    mom_proj_txt: np.ndarray,
    pristine: np.ndarray,
    image_queue: EmbeddingQueue,
    text_queue: EmbeddingQueue,
    tau: float,
    include_positive: bool = True,
) -> Tensor:
    """Four-way contrastive objective over the pristine pairs of a batch.

    Cross-modal terms pair each anchor with its partner's momentum projection;
    intra-modal terms pair it with its own. All four draw negatives from the
    target modality's queue. Batches without pristine pairs (or before the
    queues hold anything) contribute zero, with a warning.
    """
    pristine = np.asarray(pristine, dtype=bool)
    idx = np.flatnonzero(pristine)
    if idx.size == 0:
        log.warning("contrastive loss skipped: batch has no pristine pairs")
        return Tensor(0.0)
    if len(image_queue) == 0 or len(text_queue) == 0:
        log.warning("contrastive loss skipped: negative queues are empty")
        return Tensor(0.0)

    a_img = ad.take_rows(proj_img, idx)
    a_txt = ad.take_rows(proj_txt, idx)
    p_img = mom_proj_img[idx]
    p_txt = mom_proj_txt[idx]
    img_neg = image_queue.snapshot()
    txt_neg = text_queue.snapshot()

    v2t = infonce_term(a_img, p_txt, txt_neg, tau, include_positive)
    t2v = infonce_term(a_txt, p_img, img_neg, tau, include_positive)
    v2v = infonce_term(a_img, p_img, img_neg, tau, include_positive)
    t2t = infonce_term(a_txt, p_txt, txt_neg, tau, include_positive)
    return (v2t + t2v + v2v + t2t) * 0.25
