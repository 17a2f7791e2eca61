"""Image-side manipulation grounding.

Patch embeddings are conditioned on the caption through one cross-attention
block (image queries, text keys/values, residual), pooled into a single box
feature by a learned aggregation query over the patch tokens, and regressed
to normalized corners under an L1 + generalized-IoU objective. Samples whose
ground truth is the (0,0,0,0) null box skip the GIoU term: the L1 part alone
teaches the head to emit the null signal.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoders import EncoderOutput

MIN_AREA = 1e-12  # guards IoU/GIoU denominators for degenerate boxes


class ImageTextFusion:
    """One cross-attention block producing text-conditioned image embeddings."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        self.attn = nn.AttentionParams(rng, d_model, n_heads)

    def parameters(self) -> dict[str, Tensor]:
        return {f"attn.{k}": v for k, v in self.attn.parameters().items()}

    def __call__(self, image_out: EncoderOutput, text_out: EncoderOutput,
                 return_weights: bool = False):
        attended, weights = nn.scaled_attention(
            image_out.full, text_out.full, text_out.full, self.attn,
            key_mask=text_out.attn_mask, return_weights=True,
        )
        fused = EncoderOutput(attended + image_out.full)
        if return_weights:
            return fused, weights
        return fused


class PatchAttentionPool:
    """Single learned query attending over patch tokens to pool box evidence.

    Only the positional patch tokens participate; the summary slot is excluded
    since it carries no spatial information.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        self.agg_token = nn.normal_param(rng, (d_model,))
        self.attn = nn.AttentionParams(rng, d_model, n_heads)
        self.d_model = d_model

    def parameters(self) -> dict[str, Tensor]:
        out = {f"attn.{k}": v for k, v in self.attn.parameters().items()}
        out["agg_token"] = self.agg_token
        return out

    def __call__(self, patches: Tensor, return_weights: bool = False):
        b = patches.shape[0]
        query = Tensor(np.zeros((b, 1, self.d_model))) + self.agg_token.reshape(1, 1, -1)
        pooled, weights = nn.scaled_attention(
            query, patches, patches, self.attn, return_weights=True,
        )
        pooled = pooled.reshape(b, self.d_model)
        if return_weights:
            return pooled, weights
        return pooled


def _corners(box: Tensor):
    cols = [ad.slice_(box, (slice(None), slice(i, i + 1))) for i in range(4)]
    return cols  # x1, y1, x2, y2 as (B, 1) tensors


def order_corners(box: Tensor) -> Tensor:
    """Sort corners so x1 <= x2 and y1 <= y2 (sigmoid outputs are unordered)."""
    x1, y1, x2, y2 = _corners(box)
    return ad.concat(
        [ad.minimum(x1, x2), ad.minimum(y1, y2), ad.maximum(x1, x2), ad.maximum(y1, y2)],
        axis=1,
    )


def giou_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Generalized IoU per row of two (B, 4) corner tensors, in (-1, 1]."""
    a = order_corners(a)
    b = order_corners(b)
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)

    zero = Tensor(np.zeros((a.shape[0], 1)))
    iw = ad.maximum(ad.minimum(ax2, bx2) - ad.maximum(ax1, bx1), zero)
    ih = ad.maximum(ad.minimum(ay2, by2) - ad.maximum(ay1, by1), zero)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    iou = inter / (union + MIN_AREA)
    hull = (ad.maximum(ax2, bx2) - ad.minimum(ax1, bx1)) * (ad.maximum(ay2, by2) - ad.minimum(ay1, by1))
    out = iou - (hull - union) / (hull + MIN_AREA)
    return out.reshape(a.shape[0])


def giou(box_a, box_b) -> float:
    """GIoU of two plain corner 4-tuples (runs the differentiable route)."""
    a = Tensor(np.asarray(box_a, dtype=float).reshape(1, 4))
    b = Tensor(np.asarray(box_b, dtype=float).reshape(1, 4))
    return float(giou_tensor(a, b).data[0])


def iou(box_a, box_b) -> float:
    """Plain intersection-over-union of two corner 4-tuples."""
    ax1, ax2 = sorted((box_a[0], box_a[2]))
    ay1, ay2 = sorted((box_a[1], box_a[3]))
    bx1, bx2 = sorted((box_b[0], box_b[2]))
    by1, by2 = sorted((box_b[1], box_b[3]))
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / (union + MIN_AREA)


def box_grounding_loss(box_logits: Tensor, y_box: np.ndarray, has_box: np.ndarray) -> Tensor:
    """Mean per-sample loss: L1 over sigmoid corners, plus 1-GIoU where the
    ground truth contains a real box."""
    y_box = np.asarray(y_box, dtype=float)
    has_box = np.asarray(has_box, dtype=bool)
    b = box_logits.shape[0]
    pred = ad.sigmoid(box_logits)
    diff = pred - Tensor(y_box)
    l1_total = ad.maximum(diff, -diff).sum()

    idx = np.flatnonzero(has_box)
    if idx.size:
        pred_sel = ad.take_rows(pred, idx)
        overlap = giou_tensor(pred_sel, Tensor(y_box[idx]))
        giou_total = (Tensor(np.ones(idx.size)) - overlap).sum()
        return (l1_total + giou_total) * (1.0 / b)
    return l1_total * (1.0 / b)
