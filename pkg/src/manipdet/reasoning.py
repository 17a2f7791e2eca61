"""Deep cross-modal reasoning.

The aggregator runs the text sequence through layers that self-attend over
tokens and cross-attend into the image sequence; position 0 of its output
summarizes the pair for the binary and per-type classifiers, and the token
positions feed the per-token manipulation tagger. Token tagging is
additionally distilled against soft labels from the momentum branch.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoders import EncoderOutput


class CrossModalAggregator:
    """Text-side transformer stack with cross-attention into image embeddings.

    No final normalization: with zero-initialized output projections the stack
    reduces to the identity on the incoming text embeddings.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int,
                 d_ff: int, n_layers: int):
        self.layers = [
            nn.TransformerLayerParams(rng, d_model, n_heads, d_ff, cross_attention=True)
            for _ in range(n_layers)
        ]

    def parameters(self) -> dict[str, Tensor]:
        return nn.stack_parameters("", [(f"layers.{i}", l) for i, l in enumerate(self.layers)])

    def __call__(self, text_out: EncoderOutput, image_out: EncoderOutput) -> EncoderOutput:
        x = text_out.full
        mask = text_out.attn_mask
        for layer in self.layers:
            x = nn.transformer_layer(x, layer, context=image_out.full, self_mask=mask)
        return EncoderOutput(x, pad_mask=text_out.pad_mask)


def np_log_softmax(x: np.ndarray) -> np.ndarray:
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def token_grounding_loss(
    token_logits: Tensor,
    momentum_token_logits: np.ndarray | None,
    y_tok: np.ndarray,
    pad_mask: np.ndarray,
    alpha: float,
) -> Tensor:
    """Per-token cross-entropy blended with KL against momentum pseudo-labels.

    ``token_logits`` is (B, M, 2); pad positions are excluded from both terms.
    The momentum logits enter as constants (stop-gradient); the KL direction
    is KL[online || momentum], averaged over unmasked positions. The result is
    (1 - alpha) * cross_entropy + alpha * KL.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"distillation weight must lie in [0, 1], got {alpha}")
    pad_mask = np.asarray(pad_mask, dtype=bool)
    y_tok = np.asarray(y_tok)
    count = int(pad_mask.sum())
    if count == 0:
        raise ValueError("token grounding loss over fully padded text")
    mask = Tensor(pad_mask.astype(float))

    logp = ad.log_softmax(token_logits)
    if alpha < 1.0:
        onehot = Tensor(np.eye(2)[y_tok])
        ce = -((logp * onehot).sum(axis=-1) * mask).sum() * (1.0 / count)
        if alpha == 0.0:
            return ce
    if momentum_token_logits is None:
        raise ValueError("alpha > 0 needs momentum token logits")
    log_q = np_log_softmax(np.asarray(momentum_token_logits))
    kl = ((ad.exp(logp) * (logp - Tensor(log_q))).sum(axis=-1) * mask).sum() * (1.0 / count)
    if alpha == 1.0:
        return kl
    return ce * (1.0 - alpha) + kl * alpha


def multi_label_loss(type_logits: Tensor, y_mul: np.ndarray) -> Tensor:
    """Independent sigmoid binary cross-entropy per manipulation type.

    The four types are not mutually exclusive (mixed image+text manipulations
    exist), so a softmax over them would be wrong; each label gets its own
    binary decision and the result is the mean over labels and batch.
    """
    y = Tensor(np.asarray(y_mul, dtype=float))
    z = type_logits
    # stable elementwise softplus(z) - z*y  ==  max(z,0) - z*y + log(1+exp(-|z|))
    zero = Tensor(np.zeros(z.shape))
    absz = ad.maximum(z, -z)
    bce = ad.maximum(z, zero) - z * y + ad.log(1.0 + ad.exp(-absz))
    return bce.mean()


def binary_loss(binary_logits: Tensor, y_bin: np.ndarray) -> Tensor:
    """Two-class softmax cross-entropy on the real/fake logits."""
    y = np.asarray(y_bin, dtype=int)
    logp = ad.log_softmax(binary_logits)
    onehot = Tensor(np.eye(2)[y])
    return -(logp * onehot).sum(axis=-1).mean()
