import numpy as np
import pytest

from manipdet import grounding, nn
from manipdet.autodiff import Tensor, finite_diff_params
from manipdet.encoders import EncoderOutput
from manipdet.grounding import (
    ImageTextFusion,
    PatchAttentionPool,
    box_grounding_loss,
    giou,
    iou,
)


def raster_iou(box_a, box_b, n=256):
    """Grid-counting IoU oracle: cell centers inside each box."""
    xs = (np.arange(n) + 0.5) / n
    ys = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(xs, ys)

    def inside(box):
        x1, x2 = sorted((box[0], box[2]))
        y1, y2 = sorted((box[1], box[3]))
        return (gx >= x1) & (gx < x2) & (gy >= y1) & (gy < y2)

    a, b = inside(box_a), inside(box_b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def raster_giou(box_a, box_b, n=256):
    x1 = min(box_a[0], box_a[2], box_b[0], box_b[2])
    x2 = max(box_a[0], box_a[2], box_b[0], box_b[2])
    y1 = min(box_a[1], box_a[3], box_b[1], box_b[3])
    y2 = max(box_a[1], box_a[3], box_b[1], box_b[3])
    hull = (x2 - x1) * (y2 - y1)
    xs = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(xs, xs)

    def inside(box):
        bx1, bx2 = sorted((box[0], box[2]))
        by1, by2 = sorted((box[1], box[3]))
        return (gx >= bx1) & (gx < bx2) & (gy >= by1) & (gy < by2)

    a, b = inside(box_a), inside(box_b)
    union_area = np.count_nonzero(a | b) / (n * n)
    return raster_iou(box_a, box_b, n) - (hull - union_area) / hull if hull > 0 else 0.0


def small_outputs(rng, b=2, n_img=5, n_txt=4, d=8):
    img = EncoderOutput(Tensor(rng.normal(size=(b, n_img, d))))
    mask = np.ones((b, n_txt - 1), dtype=bool)
    mask[:, -1] = False
    txt = EncoderOutput(Tensor(rng.normal(size=(b, n_txt, d))), pad_mask=mask)
    return img, txt


def test_fusion_zero_output_projection_is_identity():
    rng = np.random.default_rng(0)
    fusion = ImageTextFusion(rng, 8, 2)
    fusion.attn.wo.data[:] = 0.0
    img, txt = small_outputs(rng)
    fused = fusion(img, txt)
    np.testing.assert_array_equal(fused.full.data, img.full.data)


def test_fusion_output_matches_image_length():
    rng = np.random.default_rng(1)
    fusion = ImageTextFusion(rng, 8, 2)
    img, txt = small_outputs(rng, n_img=17)
    fused, weights = fusion(img, txt, return_weights=True)
    assert fused.full.shape == (2, 17, 8)
    assert weights.shape == (2, 2, 17, 4)


def test_fusion_gradients_pass_oracle():
    rng = np.random.default_rng(2)
    fusion = ImageTextFusion(rng, 6, 2)
    img, txt = small_outputs(rng, d=6)

    def loss():
        return fusion(img, txt).full.sum()

    errs = finite_diff_params(loss, fusion.parameters(), coords_per_tensor=6)
    assert max(errs.values()) < 1e-4, errs


def identity_pool(d):
    pool = PatchAttentionPool(np.random.default_rng(3), d, 1)
    for name in ("wq", "wk", "wv", "wo"):
        getattr(pool.attn, name).data = np.eye(d)
    return pool


def test_pool_single_patch_passes_through():
    d = 4
    pool = identity_pool(d)
    patch = np.random.default_rng(4).normal(size=(1, 1, d))
    out = pool(Tensor(patch))
    np.testing.assert_allclose(out.data, patch[:, 0], atol=1e-12)


def test_pool_identical_rows_give_uniform_weights():
    d = 4
    pool = identity_pool(d)
    patches = np.tile(np.random.default_rng(5).normal(size=(1, 1, d)), (1, 6, 1))
    _, w = pool(Tensor(patches), return_weights=True)
    np.testing.assert_allclose(w.data, np.full((1, 1, 1, 6), 1 / 6), atol=1e-12)


def test_pool_invariant_to_patch_permutation():
    rng = np.random.default_rng(6)
    pool = PatchAttentionPool(rng, 8, 2)
    patches = rng.normal(size=(3, 10, 8))
    out = pool(Tensor(patches)).data
    perm = rng.permutation(10)
    out_p = pool(Tensor(patches[:, perm])).data
    np.testing.assert_allclose(out, out_p, atol=1e-12)


def test_giou_identical_boxes():
    assert abs(giou((0.1, 0.2, 0.5, 0.6), (0.1, 0.2, 0.5, 0.6)) - 1.0) < 1e-9


def test_giou_disjoint_example():
    # corners (0,0,.2,.2) vs (.8,.8,1,1): IoU 0, union .08, hull 1
    val = giou((0, 0, 0.2, 0.2), (0.8, 0.8, 1, 1))
    assert abs(val - (-0.92)) < 1e-9
    assert abs(val - raster_giou((0, 0, 0.2, 0.2), (0.8, 0.8, 1, 1))) < 0.01


def test_giou_overlap_example():
    # IoU 1/7, hull 0.5625 -> GIoU ~ -0.0794
    a, b = (0, 0, 0.5, 0.5), (0.25, 0.25, 0.75, 0.75)
    val = giou(a, b)
    assert abs(val - (1 / 7 - 0.125 / 0.5625)) < 1e-9
    assert abs(val - (-0.0794)) < 1e-4
    assert abs(val - raster_giou(a, b)) < 0.01


def test_giou_symmetry_and_translation():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = np.sort(rng.uniform(0.05, 0.6, size=4)).reshape(2, 2).T.reshape(4)
        b = np.sort(rng.uniform(0.05, 0.6, size=4)).reshape(2, 2).T.reshape(4)
        a = np.array([a[0], a[2], a[1], a[3]])
        b = np.array([b[0], b[2], b[1], b[3]])
        assert abs(giou(a, b) - giou(b, a)) < 1e-12
        shift = rng.uniform(0, 0.3)
        assert abs(giou(a + shift, b + shift) - giou(a, b)) < 1e-9


def test_giou_equals_iou_under_containment():
    outer = (0.1, 0.1, 0.9, 0.9)
    inner = (0.3, 0.3, 0.5, 0.7)
    assert abs(giou(outer, inner) - iou(outer, inner)) < 1e-9


def test_analytic_iou_matches_raster_on_random_boxes():
    rng = np.random.default_rng(8)
    for _ in range(30):
        a = rng.uniform(0, 1, size=4)
        b = rng.uniform(0, 1, size=4)
        # keep extents away from degenerate slivers the grid cannot resolve
        a[2:] = a[:2] + np.clip(a[2:] - a[:2], 0.15, None)
        b[2:] = b[:2] + np.clip(b[2:] - b[:2], 0.15, None)
        a, b = np.clip(a, 0, 1), np.clip(b, 0, 1)
        assert abs(iou(a, b) - raster_iou(a, b)) < 0.01


def inverse_sigmoid(p):
    p = np.clip(np.asarray(p, dtype=float), 1e-9, 1 - 1e-9)
    return np.log(p / (1 - p))


def test_box_loss_zero_on_exact_match():
    y = np.array([[0.25, 0.25, 0.75, 0.75]])
    logits = Tensor(inverse_sigmoid(y))
    loss = box_grounding_loss(logits, y, np.array([True]))
    assert abs(loss.item()) < 1e-7


def test_box_loss_null_target_is_l1_only():
    logits = Tensor(inverse_sigmoid(np.full((1, 4), 0.1)))
    loss = box_grounding_loss(logits, np.zeros((1, 4)), np.array([False]))
    assert abs(loss.item() - 0.4) < 1e-7


def test_box_loss_nonnegative_and_discriminates():
    rng = np.random.default_rng(9)
    for _ in range(20):
        y = np.array([[0.2, 0.3, 0.6, 0.8]])
        logits = Tensor(rng.normal(size=(1, 4)))
        val = box_grounding_loss(logits, y, np.array([True])).item()
        assert val >= 0.0
        pred = 1 / (1 + np.exp(-logits.data))
        if not np.allclose(pred, y, atol=1e-6):
            assert val > 0.0


def test_box_loss_gradients_pass_oracle():
    rng = np.random.default_rng(10)
    head = nn.MlpHead(rng, 6, 6, 4)
    feat = Tensor(rng.normal(size=(3, 6)))
    y = np.array([[0.2, 0.2, 0.6, 0.7], [0, 0, 0, 0], [0.1, 0.4, 0.5, 0.9]])
    has_box = np.array([True, False, True])

    def loss():
        return box_grounding_loss(head(feat), y, has_box)

    errs = finite_diff_params(loss, head.parameters(), coords_per_tensor=8)
    assert max(errs.values()) < 1e-4, errs
