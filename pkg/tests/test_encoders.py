import numpy as np
import pytest

from manipdet import encoders
from manipdet.autodiff import Tensor, finite_diff_params
from manipdet.encoders import ImageEncoder, TextEncoder, TokenVocab, patchify, unpatchify

WORDS = ["alice", "bob", "carol", "looks", "happy", "sad", "at", "the", "park", "dock"]


@pytest.fixture
def vocab():
    return TokenVocab(WORDS)


def test_reserved_ids(vocab):
    assert vocab.token_to_id("[CLS]") == 0
    assert vocab.token_to_id("[PAD]") == 1
    assert vocab.token_to_id("alice") == 2


def test_tokenize_empty_text(vocab):
    ids, mask = vocab.tokenize([], max_len=12)
    assert np.all(ids == encoders.PAD_ID)
    assert not mask.any()


def test_tokenize_full_length(vocab):
    sentence = (WORDS * 2)[:12]
    ids, mask = vocab.tokenize(sentence, max_len=12)
    assert mask.all()
    assert encoders.PAD_ID not in ids


def test_tokenize_roundtrip(vocab):
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = rng.integers(0, 13)
        sentence = [WORDS[i] for i in rng.integers(0, len(WORDS), size=n)]
        ids, _ = vocab.tokenize(sentence, max_len=12)
        assert vocab.detokenize(ids) == sentence


def test_tokenize_unknown_rejected(vocab):
    with pytest.raises(ValueError, match="closed vocabulary"):
        vocab.tokenize(["mallory"], max_len=12)


def test_patchify_dimensions():
    img = np.random.default_rng(1).uniform(size=(32, 32))
    patches = patchify(img, 8)
    assert patches.shape == (16, 64)


def test_patchify_constant_image_identical_rows():
    patches = patchify(np.full((32, 32), 0.37), 8)
    assert np.all(patches == patches[0])


def test_patchify_roundtrip():
    img = np.random.default_rng(2).uniform(size=(32, 32))
    assert np.array_equal(unpatchify(patchify(img, 8), 32, 8), img)


def test_patchify_row_major_order():
    img = np.zeros((32, 32))
    img[0:8, 8:16] = 1.0  # second patch of the first patch row
    patches = patchify(img, 8)
    assert patches[1].sum() == 64 and patches[0].sum() == 0


def test_patchify_bad_dims_rejected():
    with pytest.raises(ValueError, match="divisible"):
        patchify(np.zeros((30, 32)), 8)


def small_encoders(vocab):
    rng = np.random.default_rng(3)
    img_enc = ImageEncoder(rng, d_model=8, n_heads=2, d_ff=16, n_layers=1)
    txt_enc = TextEncoder(rng, d_model=8, n_heads=2, d_ff=16, n_layers=1,
                          vocab_size=len(vocab), max_tokens=12)
    return img_enc, txt_enc


def test_encoder_output_shapes(vocab):
    img_enc, txt_enc = small_encoders(vocab)
    rng = np.random.default_rng(4)
    images = rng.uniform(size=(3, 32, 32))
    out_v = img_enc(images)
    assert out_v.full.shape == (3, 17, 8)
    assert out_v.cls.shape == (3, 8) and out_v.seq.shape == (3, 16, 8)

    ids, mask = vocab.tokenize(["alice", "looks", "happy"], max_len=12)
    out_t = txt_enc(np.stack([ids, ids]), np.stack([mask, mask]))
    assert out_t.full.shape == (2, 13, 8)
    assert out_t.cls.shape == (2, 8) and out_t.seq.shape == (2, 12, 8)


def test_pad_content_does_not_leak(vocab):
    _, txt_enc = small_encoders(vocab)
    ids, mask = vocab.tokenize(["alice", "looks", "happy"], max_len=12)
    out_a = txt_enc(ids, mask).full.data
    ids2 = ids.copy()
    ids2[7] = vocab.token_to_id("dock")  # padded position
    out_b = txt_enc(ids2, mask).full.data
    assert np.array_equal(out_a[0, :4], out_b[0, :4])  # CLS + 3 real tokens


def test_patch_positions_are_encoded(vocab):
    img_enc, _ = small_encoders(vocab)
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(32, 32))
    patches = patchify(img, 8)
    perm = rng.permutation(16)
    img_perm = unpatchify(patches[perm], 32, 8)
    out = img_enc(img).seq.data
    out_perm = img_enc(img_perm).seq.data
    # with position information, permuted patches must not reproduce the
    # original patch embeddings under the same permutation
    assert not np.allclose(out[0][perm], out_perm[0])


def test_encoder_gradients_pass_oracle(vocab):
    img_enc, txt_enc = small_encoders(vocab)
    rng = np.random.default_rng(6)
    images = rng.uniform(size=(2, 32, 32))
    ids, mask = vocab.tokenize(["bob", "looks", "sad", "at", "the", "park"], max_len=12)
    ids_b, mask_b = np.stack([ids, ids]), np.stack([mask, mask])

    def loss():
        return (img_enc(images).full.sum() + txt_enc(ids_b, mask_b).full.sum())

    params = {f"img.{k}": v for k, v in img_enc.parameters().items()}
    params.update({f"txt.{k}": v for k, v in txt_enc.parameters().items()})
    errs = finite_diff_params(loss, params, coords_per_tensor=4)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}
