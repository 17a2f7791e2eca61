"""Transformer building blocks shared by the encoders, the cross-modal
aggregator, and the prediction heads, plus the exponential-moving-average
update that maintains the momentum copies of tracked modules.

Parameters are plain ``Tensor`` leaves grouped into small container classes;
every container exposes ``parameters()`` returning a flat name->Tensor dict so
the optimizer, the EMA update, and checkpointing can treat the whole model
uniformly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_NEG, Tensor

INIT_STD = 0.02


def normal_param(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b, promoting 1-D inputs to a single row."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    out = ad.matmul(x, w) + b
    return out.reshape(out.shape[1]) if squeeze else out


class AttentionParams:
    """Query/key/value/output projections for multi-head attention."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = normal_param(rng, (d_model, d_model))
        self.wk = normal_param(rng, (d_model, d_model))
        self.wv = normal_param(rng, (d_model, d_model))
        self.wo = normal_param(rng, (d_model, d_model))
        self.bq = zeros_param(d_model)
        self.bk = zeros_param(d_model)
        self.bv = zeros_param(d_model)
        self.bo = zeros_param(d_model)

    def parameters(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    b, length, _ = x.shape
    return ad.transpose(x.reshape(b, length, n_heads, d_head), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, length, dh = x.shape
    return ad.transpose(x, (0, 2, 1, 3)).reshape(b, length, h * dh)


def key_mask_bias(mask: np.ndarray) -> np.ndarray:
    """Turn a boolean keep-mask over key positions into an additive bias."""
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 0.0, MASK_NEG)[:, None, None, :]


def scaled_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    params: AttentionParams,
    key_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention.

    Accepts (L, d) or batched (B, L, d) inputs; key/value must agree on their
    sequence length. ``key_mask`` is a boolean (B, L_k) array marking positions
    that may be attended to. Returns the output-projected result, plus the
    per-head attention weights (B, H, L_q, L_k) when ``return_weights`` is set.
    """
    squeeze = query.ndim == 2
    if squeeze:
        query, key, value = (t.reshape((1,) + t.shape) for t in (query, key, value))
    if query.shape[-1] != params.d_model or key.shape[-1] != params.d_model:
        raise ValueError(
            f"attention dims {query.shape[-1]}/{key.shape[-1]} do not match d_model {params.d_model}"
        )
    if key.shape[1] != value.shape[1]:
        raise ValueError(f"key/value lengths differ: {key.shape} vs {value.shape}")

    q = _split_heads(affine(query, params.wq, params.bq), params.n_heads, params.d_head)
    k = _split_heads(affine(key, params.wk, params.bk), params.n_heads, params.d_head)
    v = _split_heads(affine(value, params.wv, params.bv), params.n_heads, params.d_head)

    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(params.d_head))
    if key_mask is not None:
        scores = scores + Tensor(key_mask_bias(key_mask))
    weights = ad.softmax(scores)
    out = affine(_merge_heads(ad.matmul(weights, v)), params.wo, params.bo)

    if squeeze:
        out = out.reshape(out.shape[1], out.shape[2])
    if return_weights:
        return out, weights
    return out


class TransformerLayerParams:
    """One pre-norm layer: self-attention, optional cross-attention, FFN."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int,
                 d_ff: int, cross_attention: bool = False):
        self.self_attn = AttentionParams(rng, d_model, n_heads)
        self.cross_attn = AttentionParams(rng, d_model, n_heads) if cross_attention else None
        self.ln1_g, self.ln1_b = ones_param(d_model), zeros_param(d_model)
        self.ln2_g, self.ln2_b = ones_param(d_model), zeros_param(d_model)
        if cross_attention:
            self.lnc_g, self.lnc_b = ones_param(d_model), zeros_param(d_model)
        self.ffn_w1 = normal_param(rng, (d_model, d_ff))
        self.ffn_b1 = zeros_param(d_ff)
        self.ffn_w2 = normal_param(rng, (d_ff, d_model))
        self.ffn_b2 = zeros_param(d_model)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"self_attn.{k}": v for k, v in self.self_attn.parameters().items()}
        if self.cross_attn is not None:
            out.update({f"cross_attn.{k}": v for k, v in self.cross_attn.parameters().items()})
            out.update(lnc_g=self.lnc_g, lnc_b=self.lnc_b)
        out.update(
            ln1_g=self.ln1_g, ln1_b=self.ln1_b, ln2_g=self.ln2_g, ln2_b=self.ln2_b,
            ffn_w1=self.ffn_w1, ffn_b1=self.ffn_b1, ffn_w2=self.ffn_w2, ffn_b2=self.ffn_b2,
        )
        return out


def transformer_layer(
    x: Tensor,
    params: TransformerLayerParams,
    context: Tensor | None = None,
    self_mask: np.ndarray | None = None,
    context_mask: np.ndarray | None = None,
) -> Tensor:
    """Pre-norm residual layer; context is required iff the layer cross-attends."""
    if (context is None) != (params.cross_attn is None):
        raise ValueError(
            "cross-attention layer needs a context sequence"
            if params.cross_attn is not None
            else "context passed to a self-attention-only layer"
        )
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
        if context is not None:
            context = context.reshape((1,) + context.shape)

    h = ad.layer_norm(x, params.ln1_g, params.ln1_b)
    x = x + scaled_attention(h, h, h, params.self_attn, key_mask=self_mask)
    if context is not None:
        h = ad.layer_norm(x, params.lnc_g, params.lnc_b)
        x = x + scaled_attention(h, context, context, params.cross_attn, key_mask=context_mask)
    h = ad.layer_norm(x, params.ln2_g, params.ln2_b)
    x = x + affine(ad.gelu(affine(h, params.ffn_w1, params.ffn_b1)), params.ffn_w2, params.ffn_b2)

    return x.reshape(x.shape[1], x.shape[2]) if squeeze else x


class MlpHead:
    """Two affine layers with a GELU between; no activation on the output."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.w1 = normal_param(rng, (d_in, d_hidden))
        self.b1 = zeros_param(d_hidden)
        self.w2 = normal_param(rng, (d_hidden, d_out))
        self.b2 = zeros_param(d_out)
        self.d_in = d_in
        self.d_out = d_out

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"head expects last dim {self.d_in}, got {x.shape}")
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.d_in) if x.ndim != 2 else x
        out = affine(ad.gelu(affine(flat, self.w1, self.b1)), self.w2, self.b2)
        return out.reshape(lead + (self.d_out,)) if x.ndim != 2 else out


def ema_update(momentum_params: dict[str, Tensor], online_params: dict[str, Tensor], m: float) -> None:
    """In-place momentum update: each tracked value <- m*tracked + (1-m)*online.

    Both dicts must have identical key sets and shapes. ``m == 1.0`` leaves the
    momentum side bitwise untouched.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA coefficient must lie in [0, 1], got {m}")
    if momentum_params.keys() != online_params.keys():
        missing = set(momentum_params) ^ set(online_params)
        raise ValueError(f"EMA parameter sets differ on keys: {sorted(missing)[:5]}")
    if m == 1.0:
        return
    for name, target in momentum_params.items():
        source = online_params[name]
        if target.shape != source.shape:
            raise ValueError(f"EMA shape mismatch at {name}: {target.shape} vs {source.shape}")
        target.data = m * target.data + (1.0 - m) * source.data


def stack_parameters(prefix: str, items) -> dict[str, Tensor]:
    """Flatten (name, container) pairs into one dot-separated parameter dict."""
    out: dict[str, Tensor] = {}
    for name, container in items:
        params = container.parameters() if hasattr(container, "parameters") else container
        if isinstance(params, Tensor):
            out[f"{prefix}{name}"] = params
        else:
            for key, value in params.items():
                out[f"{prefix}{name}.{key}"] = value
    return out
