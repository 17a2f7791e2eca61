"""Full detector: two uni-modal encoders feeding (1) projected summary
embeddings for contrastive alignment, (2) a text-conditioned patch pool for
box regression, and (3) a cross-modal aggregator whose summary drives the
binary and per-type classifiers and whose token positions drive the tagger.

A momentum twin of the encoders, projection heads, aggregator, and token head
is held alongside the online model; its parameters never require gradients
and move only through the EMA update.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import data
from .autodiff import Tensor
from .contrastive import ProjectionHead
from .encoders import ImageEncoder, TextEncoder
from .grounding import ImageTextFusion, PatchAttentionPool
from .nn import MlpHead, ema_update, stack_parameters
from .reasoning import CrossModalAggregator


@dataclasses.dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    image_layers: int = 4
    text_layers: int = 2
    agg_layers: int = 2
    d_proj: int = 32
    image_size: int = 32
    patch_size: int = 8
    max_tokens: int = 12
    vocab_size: int = len(data.VOCAB)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Layer/width preset matching the original large-scale recipe."""
        return cls(d_model=768, n_heads=12, d_ff=3072,
                   image_layers=12, text_layers=6, agg_layers=6, d_proj=256)


@dataclasses.dataclass
class ModelOutputs:
    image_out: object
    text_out: object
    proj_image: Tensor        # (B, d_proj) unit rows
    proj_text: Tensor
    box_logits: Tensor        # (B, 4), sigmoid gives corners
    type_logits: Tensor       # (B, 4) per manipulation type
    binary_logits: Tensor     # (B, 2), column 1 = fake
    token_logits: Tensor      # (B, M, 2), column 1 = manipulated
    fusion_weights: Tensor    # (B, H, 1+N, 1+M) cross-attention weights
    pool_weights: Tensor      # (B, H, 1, N) aggregation-query weights


class DetectorModel:
    """Online (gradient-trained) side of the detector."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([0xD37EC7, seed]))
        c = config
        self.image_encoder = ImageEncoder(rng, c.d_model, c.n_heads, c.d_ff,
                                          c.image_layers, c.image_size, c.patch_size)
        self.text_encoder = TextEncoder(rng, c.d_model, c.n_heads, c.d_ff,
                                        c.text_layers, c.vocab_size, c.max_tokens)
        self.proj_image = ProjectionHead(rng, c.d_model, c.d_proj)
        self.proj_text = ProjectionHead(rng, c.d_model, c.d_proj)
        self.fusion = ImageTextFusion(rng, c.d_model, c.n_heads)
        self.patch_pool = PatchAttentionPool(rng, c.d_model, c.n_heads)
        self.box_head = MlpHead(rng, c.d_model, c.d_model, 4)
        self.aggregator = CrossModalAggregator(rng, c.d_model, c.n_heads, c.d_ff, c.agg_layers)
        self.type_head = MlpHead(rng, c.d_model, c.d_model, 4)
        self.binary_head = MlpHead(rng, c.d_model, c.d_model, 2)
        self.token_head = MlpHead(rng, c.d_model, c.d_model, 2)

    def _components(self):
        return [
            ("image_encoder", self.image_encoder),
            ("text_encoder", self.text_encoder),
            ("proj_image", self.proj_image),
            ("proj_text", self.proj_text),
            ("fusion", self.fusion),
            ("patch_pool", self.patch_pool),
            ("box_head", self.box_head),
            ("aggregator", self.aggregator),
            ("type_head", self.type_head),
            ("binary_head", self.binary_head),
            ("token_head", self.token_head),
        ]

    def parameters(self) -> dict[str, Tensor]:
        return stack_parameters("", self._components())

    def momentum_tracked(self) -> dict[str, Tensor]:
        """The parameter subset mirrored by the momentum branch."""
        tracked = [
            ("image_encoder", self.image_encoder),
            ("text_encoder", self.text_encoder),
            ("proj_image", self.proj_image),
            ("proj_text", self.proj_text),
            ("aggregator", self.aggregator),
            ("token_head", self.token_head),
        ]
        return stack_parameters("", tracked)

    def forward(self, images: np.ndarray, tokens: np.ndarray, pad_mask: np.ndarray) -> ModelOutputs:
        image_out = self.image_encoder(images)
        text_out = self.text_encoder(tokens, pad_mask)
        fused, fusion_weights = self.fusion(image_out, text_out, return_weights=True)
        pooled, pool_weights = self.patch_pool(fused.seq, return_weights=True)
        agg = self.aggregator(text_out, image_out)
        return ModelOutputs(
            image_out=image_out,
            text_out=text_out,
            proj_image=self.proj_image(image_out.cls),
            proj_text=self.proj_text(text_out.cls),
            box_logits=self.box_head(pooled),
            type_logits=self.type_head(agg.cls),
            binary_logits=self.binary_head(agg.cls),
            token_logits=self.token_head(agg.seq),
            fusion_weights=fusion_weights,
            pool_weights=pool_weights,
        )


class MomentumBranch:
    """EMA-tracked twin of the six momentum components.

    Its parameters are gradient-free by construction: nothing it computes is
    ever recorded on a tape, so backward passes cannot touch it. It changes
    only through ``update``.
    """

    def __init__(self, model: DetectorModel):
        c = model.config
        rng = np.random.default_rng(0)  # placeholder values, overwritten below
        self.image_encoder = ImageEncoder(rng, c.d_model, c.n_heads, c.d_ff,
                                          c.image_layers, c.image_size, c.patch_size)
        self.text_encoder = TextEncoder(rng, c.d_model, c.n_heads, c.d_ff,
                                        c.text_layers, c.vocab_size, c.max_tokens)
        self.proj_image = ProjectionHead(rng, c.d_model, c.d_proj)
        self.proj_text = ProjectionHead(rng, c.d_model, c.d_proj)
        self.aggregator = CrossModalAggregator(rng, c.d_model, c.n_heads, c.d_ff, c.agg_layers)
        self.token_head = MlpHead(rng, c.d_model, c.d_model, 2)
        own = self.parameters()
        for name, source in model.momentum_tracked().items():
            own[name].data = source.data.copy()
            own[name].requires_grad = False

    def parameters(self) -> dict[str, Tensor]:
        tracked = [
            ("image_encoder", self.image_encoder),
            ("text_encoder", self.text_encoder),
            ("proj_image", self.proj_image),
            ("proj_text", self.proj_text),
            ("aggregator", self.aggregator),
            ("token_head", self.token_head),
        ]
        return stack_parameters("", tracked)

    def update(self, model: DetectorModel, momentum: float) -> None:
        ema_update(self.parameters(), model.momentum_tracked(), momentum)

    def forward_targets(self, images, tokens, pad_mask) -> dict[str, np.ndarray]:
        """Contrastive targets and token pseudo-label logits, as plain arrays."""
        image_out = self.image_encoder(images)
        text_out = self.text_encoder(tokens, pad_mask)
        agg = self.aggregator(text_out, image_out)
        return {
            "proj_image": self.proj_image(image_out.cls).data,
            "proj_text": self.proj_text(text_out.cls).data,
            "token_logits": self.token_head(agg.seq).data,
        }
