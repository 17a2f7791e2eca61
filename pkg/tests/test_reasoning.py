import math

import numpy as np
import pytest

from manipdet.autodiff import Tensor, finite_diff_params
from manipdet.encoders import EncoderOutput
from manipdet.reasoning import (
    CrossModalAggregator,
    binary_loss,
    multi_label_loss,
    np_log_softmax,
    token_grounding_loss,
)


def sample_outputs(rng, b=2, m=5, n=4, d=8):
    mask = np.ones((b, m - 1), dtype=bool)
    mask[:, -1] = False
    txt = EncoderOutput(Tensor(rng.normal(size=(b, m, d))), pad_mask=mask)
    img = EncoderOutput(Tensor(rng.normal(size=(b, n, d))))
    return txt, img


def test_aggregator_output_shape():
    rng = np.random.default_rng(0)
    agg = CrossModalAggregator(rng, 8, 2, 16, 2)
    txt, img = sample_outputs(rng)
    out = agg(txt, img)
    assert out.full.shape == (2, 5, 8)
    assert out.cls.shape == (2, 8) and out.seq.shape == (2, 4, 8)


def test_aggregator_residual_identity_with_zero_projections():
    rng = np.random.default_rng(1)
    agg = CrossModalAggregator(rng, 8, 2, 16, 2)
    for layer in agg.layers:
        layer.self_attn.wo.data[:] = 0.0
        layer.cross_attn.wo.data[:] = 0.0
        layer.ffn_w2.data[:] = 0.0
    txt, img = sample_outputs(rng)
    out = agg(txt, img)
    np.testing.assert_array_equal(out.full.data, txt.full.data)


def test_aggregator_gradients_pass_oracle():
    rng = np.random.default_rng(2)
    agg = CrossModalAggregator(rng, 6, 2, 8, 1)
    txt, img = sample_outputs(rng, d=6)

    def loss():
        return agg(txt, img).full.sum()

    errs = finite_diff_params(loss, agg.parameters(), coords_per_tensor=6)
    assert max(errs.values()) < 1e-4, errs


def test_token_loss_alpha_zero_is_pure_cross_entropy():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(2, 4, 2)))
    y = rng.integers(0, 2, size=(2, 4))
    mask = np.ones((2, 4), dtype=bool)
    base = token_grounding_loss(logits, None, y, mask, alpha=0.0).item()
    logp = np_log_softmax(logits.data)
    expect = -logp[np.arange(2)[:, None], np.arange(4)[None, :], y].mean()
    assert abs(base - expect) < 1e-12


def test_token_loss_kl_zero_when_distributions_match():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(2, 4, 2))
    y = np.zeros((2, 4), dtype=int)
    mask = np.ones((2, 4), dtype=bool)
    ce_only = token_grounding_loss(Tensor(logits), logits, y, mask, alpha=0.0).item()
    blended = token_grounding_loss(Tensor(logits), logits, y, mask, alpha=0.4).item()
    assert abs(blended - 0.6 * ce_only) < 1e-12


def test_token_loss_uniform_logits_is_ln2():
    logits = Tensor(np.zeros((3, 5, 2)))
    y = np.zeros((3, 5), dtype=int)
    mask = np.ones((3, 5), dtype=bool)
    loss = token_grounding_loss(logits, None, y, mask, alpha=0.0).item()
    assert abs(loss - math.log(2)) < 1e-12


def test_token_loss_kl_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(10):
        online = Tensor(rng.normal(size=(2, 3, 2)))
        mom = rng.normal(size=(2, 3, 2))
        y = rng.integers(0, 2, size=(2, 3))
        mask = np.ones((2, 3), dtype=bool)
        kl = token_grounding_loss(online, mom, y, mask, alpha=1.0).item()
        assert kl >= -1e-12


def test_token_loss_ignores_pad_positions():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(2, 4, 2))
    mom = rng.normal(size=(2, 4, 2))
    y = rng.integers(0, 2, size=(2, 4))
    mask = np.array([[True, True, False, False], [True, True, True, False]])
    base = token_grounding_loss(Tensor(logits), mom, y, mask, alpha=0.4).item()
    logits2, mom2 = logits.copy(), mom.copy()
    logits2[~mask] = rng.normal(size=(3, 2))
    mom2[~mask] = rng.normal(size=(3, 2))
    moved = token_grounding_loss(Tensor(logits2), mom2, y, mask, alpha=0.4).item()
    assert base == moved


def test_token_loss_alpha_one_independent_of_labels():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.normal(size=(2, 4, 2)))
    mom = rng.normal(size=(2, 4, 2))
    mask = np.ones((2, 4), dtype=bool)
    a = token_grounding_loss(logits, mom, np.zeros((2, 4), dtype=int), mask, alpha=1.0).item()
    b = token_grounding_loss(logits, mom, np.ones((2, 4), dtype=int), mask, alpha=1.0).item()
    assert a == b


def test_token_loss_fully_masked_rejected():
    with pytest.raises(ValueError, match="padded"):
        token_grounding_loss(Tensor(np.zeros((1, 3, 2))), None,
                             np.zeros((1, 3), dtype=int),
                             np.zeros((1, 3), dtype=bool), alpha=0.0)


def test_multi_label_loss_zero_logits_is_ln2():
    for y in ([0, 0, 0, 0], [1, 0, 1, 0], [1, 1, 1, 1]):
        loss = multi_label_loss(Tensor(np.zeros((2, 4))), np.tile(y, (2, 1))).item()
        assert abs(loss - math.log(2)) < 1e-12


def test_multi_label_loss_vanishes_with_confident_correct_logits():
    y = np.array([[1, 0, 1, 0]])
    logits = Tensor(np.where(y == 1, 50.0, -50.0))
    assert multi_label_loss(logits, y).item() < 1e-12


def test_multi_label_loss_gradient_passes_oracle():
    rng = np.random.default_rng(8)
    from manipdet import nn

    head = nn.MlpHead(rng, 6, 6, 4)
    feat = Tensor(rng.normal(size=(3, 6)))
    y = rng.integers(0, 2, size=(3, 4))

    def loss():
        return multi_label_loss(head(feat), y)

    errs = finite_diff_params(loss, head.parameters(), coords_per_tensor=8)
    assert max(errs.values()) < 1e-4, errs


def test_binary_loss_zero_logits_is_ln2():
    loss = binary_loss(Tensor(np.zeros((4, 2))), np.array([0, 1, 0, 1])).item()
    assert abs(loss - math.log(2)) < 1e-12


def test_binary_loss_vanishes_with_dominant_correct_logit():
    logits = Tensor(np.array([[40.0, -40.0], [-40.0, 40.0]]))
    assert binary_loss(logits, np.array([0, 1])).item() < 1e-12


def test_binary_loss_logit_shift_invariance():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(5, 2))
    y = rng.integers(0, 2, size=5)
    a = binary_loss(Tensor(logits), y).item()
    b = binary_loss(Tensor(logits + 7.3), y).item()
    assert abs(a - b) < 1e-9


def test_binary_loss_gradient_passes_oracle():
    rng = np.random.default_rng(10)
    from manipdet import nn

    head = nn.MlpHead(rng, 6, 6, 2)
    feat = Tensor(rng.normal(size=(4, 6)))
    y = rng.integers(0, 2, size=4)

    def loss():
        return binary_loss(head(feat), y)

    errs = finite_diff_params(loss, head.parameters(), coords_per_tensor=8)
    assert max(errs.values()) < 1e-4, errs
