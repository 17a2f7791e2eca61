"""Uni-modal encoders: a patch-based image encoder and a token-based text
encoder, each a small pre-norm transformer stack producing a summary
embedding at position 0 plus per-position embeddings.

The tokenizer is a closed-vocabulary map for the procedural caption domain;
ids 0 and 1 are reserved for the summary ([CLS]) and padding ([PAD]) slots and
never appear as caption content.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

CLS_ID = 0
PAD_ID = 1
CLS_TOKEN = "[CLS]"
PAD_TOKEN = "[PAD]"


class TokenVocab:
    """Closed token-string <-> id map with reserved CLS/PAD slots."""

    def __init__(self, content_tokens):
        content_tokens = list(content_tokens)
        if len(set(content_tokens)) != len(content_tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if CLS_TOKEN in content_tokens or PAD_TOKEN in content_tokens:
            raise ValueError("reserved token names cannot be vocabulary content")
        self._token_to_id = {CLS_TOKEN: CLS_ID, PAD_TOKEN: PAD_ID}
        for i, tok in enumerate(content_tokens):
            self._token_to_id[tok] = 2 + i
        self._id_to_token = {i: t for t, i in self._token_to_id.items()}

    def __len__(self):
        return len(self._token_to_id)

    def __contains__(self, token):
        return token in self._token_to_id

    def token_to_id(self, token: str) -> int:
        try:
            return self._token_to_id[token]
        except KeyError:
            raise ValueError(f"token {token!r} not in the closed vocabulary") from None

    def id_to_token(self, idx: int) -> str:
        return self._id_to_token[idx]

    def tokenize(self, tokens, max_len: int):
        """Encode a token list into fixed-length content ids plus a pad mask.

        The [CLS] slot is *not* part of the result; encoders prepend it
        themselves, keeping per-token labels aligned with content positions.
        Sequences longer than ``max_len`` are truncated.
        """
        ids = np.full(max_len, PAD_ID, dtype=np.int64)
        mask = np.zeros(max_len, dtype=bool)
        for i, tok in enumerate(tokens[:max_len]):
            ids[i] = self.token_to_id(tok)
            mask[i] = True
        return ids, mask

    def detokenize(self, ids) -> list[str]:
        """Invert ``tokenize``: content ids back to tokens, stopping at padding."""
        out = []
        for idx in np.asarray(ids):
            if idx == PAD_ID:
                break
            out.append(self.id_to_token(int(idx)))
        return out


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut an (H, W) grid into non-overlapping patches, row-major order."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    lead = image.shape[:-2]
    x = image.reshape(lead + (gh, patch_size, gw, patch_size))
    x = np.moveaxis(x, -2, -3)
    return x.reshape(lead + (gh * gw, patch_size * patch_size))


def unpatchify(patches: np.ndarray, image_size: int, patch_size: int) -> np.ndarray:
    grid = image_size // patch_size
    lead = patches.shape[:-2]
    x = patches.reshape(lead + (grid, grid, patch_size, patch_size))
    x = np.moveaxis(x, -2, -3)
    return x.reshape(lead + (image_size, image_size))


class EncoderOutput:
    """Stack output: position 0 is the summary slot, the rest the sequence."""

    def __init__(self, full: Tensor, pad_mask: np.ndarray | None = None):
        self.full = full
        self.pad_mask = pad_mask

    @property
    def cls(self) -> Tensor:
        return ad.slice_(self.full, (slice(None), 0))

    @property
    def seq(self) -> Tensor:
        return ad.slice_(self.full, (slice(None), slice(1, None)))

    @property
    def attn_mask(self) -> np.ndarray | None:
        """Keep-mask over the full sequence (summary slot always real)."""
        if self.pad_mask is None:
            return None
        b = self.pad_mask.shape[0]
        return np.concatenate([np.ones((b, 1), dtype=bool), self.pad_mask], axis=1)


class ImageEncoder:
    """Patchify, linearly project, add learned positions, self-attend."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int,
                 d_ff: int, n_layers: int, image_size: int = 32, patch_size: int = 8):
        self.image_size = image_size
        self.patch_size = patch_size
        self.n_patches = (image_size // patch_size) ** 2
        patch_dim = patch_size * patch_size
        self.proj_w = nn.normal_param(rng, (patch_dim, d_model))
        self.proj_b = nn.zeros_param(d_model)
        self.cls_token = nn.normal_param(rng, (d_model,))
        self.pos_emb = nn.normal_param(rng, (1 + self.n_patches, d_model))
        self.layers = [nn.TransformerLayerParams(rng, d_model, n_heads, d_ff)
                       for _ in range(n_layers)]
        self.ln_g = nn.ones_param(d_model)
        self.ln_b = nn.zeros_param(d_model)
        self.d_model = d_model

    def parameters(self) -> dict[str, Tensor]:
        items = [("proj_w", self.proj_w), ("proj_b", self.proj_b),
                 ("cls_token", self.cls_token), ("pos_emb", self.pos_emb),
                 ("ln_g", self.ln_g), ("ln_b", self.ln_b)]
        items += [(f"layers.{i}", layer) for i, layer in enumerate(self.layers)]
        return nn.stack_parameters("", items)

    def __call__(self, images: np.ndarray) -> EncoderOutput:
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        b = images.shape[0]
        patches = patchify(images, self.patch_size)
        x = ad.matmul(Tensor(patches), self.proj_w) + self.proj_b
        cls_rows = Tensor(np.zeros((b, 1, self.d_model))) + self.cls_token.reshape(1, 1, -1)
        x = ad.concat([cls_rows, x], axis=1)
        x = x + self.pos_emb.reshape((1,) + self.pos_emb.shape)
        for layer in self.layers:
            x = nn.transformer_layer(x, layer)
        x = ad.layer_norm(x, self.ln_g, self.ln_b)
        return EncoderOutput(x)


class TextEncoder:
    """Token embeddings with learned positions and masked self-attention."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int,
                 d_ff: int, n_layers: int, vocab_size: int, max_tokens: int = 12):
        self.max_tokens = max_tokens
        self.tok_emb = nn.normal_param(rng, (vocab_size, d_model))
        self.pos_emb = nn.normal_param(rng, (1 + max_tokens, d_model))
        self.layers = [nn.TransformerLayerParams(rng, d_model, n_heads, d_ff)
                       for _ in range(n_layers)]
        self.ln_g = nn.ones_param(d_model)
        self.ln_b = nn.zeros_param(d_model)

    def parameters(self) -> dict[str, Tensor]:
        items = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb),
                 ("ln_g", self.ln_g), ("ln_b", self.ln_b)]
        items += [(f"layers.{i}", layer) for i, layer in enumerate(self.layers)]
        return nn.stack_parameters("", items)

    def __call__(self, ids: np.ndarray, pad_mask: np.ndarray) -> EncoderOutput:
        ids = np.asarray(ids)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if ids.ndim == 1:
            ids, pad_mask = ids[None], pad_mask[None]
        if ids.shape[1] != self.max_tokens:
            raise ValueError(f"expected {self.max_tokens} content tokens, got {ids.shape[1]}")
        b = ids.shape[0]
        full_ids = np.concatenate([np.full((b, 1), CLS_ID, dtype=ids.dtype), ids], axis=1)
        x = ad.embedding(self.tok_emb, full_ids)
        x = x + self.pos_emb.reshape((1,) + self.pos_emb.shape)
        out = EncoderOutput(x, pad_mask=pad_mask)
        mask = out.attn_mask
        for layer in self.layers:
            x = nn.transformer_layer(x, layer, self_mask=mask)
        x = ad.layer_norm(x, self.ln_g, self.ln_b)
        return EncoderOutput(x, pad_mask=pad_mask)
