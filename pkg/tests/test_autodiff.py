import numpy as np
import pytest

from manipdet import autodiff as ad
from manipdet.autodiff import Tape, Tensor, backward, finite_diff_check


def test_softmax_uniform_on_equal_logits():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_matmul_identity():
    x = np.arange(15, dtype=float).reshape(3, 5)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        y = x.sum()
        backward(tape, y)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square_analytic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
        backward(tape, y)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            backward(tape, x.sum())
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ValueError, match="scalar"):
            backward(tape, y)


def test_matmul_shape_mismatch_diagnostic():
    with pytest.raises(ValueError) as exc:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_add_shape_mismatch_diagnostic():
    with pytest.raises(ValueError) as exc:
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=5.0, size=(6, 9))
    out = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-9)
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_layer_norm_standardizes_rows():
    rng = np.random.default_rng(2)
    x = rng.normal(loc=3.0, scale=2.0, size=(4, 16))
    g = Tensor(np.ones(16))
    b = Tensor(np.zeros(16))
    out = ad.layer_norm(Tensor(x), g, b).data
    np.testing.assert_allclose(out.mean(axis=-1), np.zeros(4), atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), np.ones(4), atol=1e-5)


def test_finite_diff_sigmoid_sum():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=8), requires_grad=True)
    err = finite_diff_check(lambda t: ad.sigmoid(t).sum(), x)
    assert err < 1e-6


def test_finite_diff_constant_function():
    x = Tensor(np.ones(4), requires_grad=True)
    err = finite_diff_check(lambda t: Tensor(1.5) * Tensor(2.0), x)
    assert err == 0.0


def test_finite_diff_infonce_composition():
    # InfoNCE-style term on raw 4-dim embeddings: normalize, dot with a
    # positive and a bank of negatives, temperature-scaled log-softmax.
    rng = np.random.default_rng(4)
    pos = rng.normal(size=4)
    negs = rng.normal(size=(6, 4))
    negs /= np.linalg.norm(negs, axis=1, keepdims=True)
    tau = 0.07

    def loss(anchor):
        a2 = anchor.reshape(1, 4)
        norm = ad.sqrt((a2 * a2).sum(axis=-1, keepdims=True))
        unit = a2 / norm
        sims = ad.concat(
            [ad.matmul(unit, Tensor(pos.reshape(4, 1))), ad.matmul(unit, Tensor(negs.T))],
            axis=1,
        )
        logp = ad.log_softmax(sims / tau)
        return -ad.slice_(logp, (0, 0))

    x = Tensor(rng.normal(size=4), requires_grad=True)
    assert finite_diff_check(loss, x) < 1e-4


PRIMITIVE_CASES = [
    ("add", lambda t, c: ad.add(t, c["other"]).sum(), (3, 4), {"other": "same"}),
    ("add_broadcast", lambda t, c: ad.add(t, c["row"]).sum(), (3, 4), {"row": "row"}),
    ("sub", lambda t, c: ad.sub(c["other"], t).sum(), (3, 4), {"other": "same"}),
    ("mul", lambda t, c: ad.mul(t, c["other"]).sum(), (3, 4), {"other": "same"}),
    ("div", lambda t, c: ad.div(c["other"], ad.add(ad.mul(t, t), 1.0)).sum(), (3, 4), {"other": "same"}),
    ("neg", lambda t, c: ad.neg(t).sum(), (5,), {}),
    ("matmul", lambda t, c: ad.matmul(t, c["mat"]).sum(), (3, 4), {"mat": (4, 2)}),
    ("matmul_batched", lambda t, c: ad.matmul(t, c["mat3"]).sum(), (2, 3, 4), {"mat3": (2, 4, 3)}),
    ("matmul_fastpath", lambda t, c: ad.matmul(t, c["mat"]).sum(), (2, 3, 4), {"mat": (4, 2)}),
    ("transpose", lambda t, c: ad.mul(ad.transpose(t), ad.transpose(t)).sum(), (3, 4), {}),
    ("reshape", lambda t, c: ad.mul(ad.reshape(t, (2, 6)), 2.0).sum(), (3, 4), {}),
    ("concat", lambda t, c: ad.mul(ad.concat([t, t], axis=1), c["cat"]).sum(), (2, 3), {"cat": (2, 6)}),
    ("slice", lambda t, c: ad.mul(ad.slice_(t, (slice(1, 3), slice(0, 2))), 3.0).sum(), (4, 3), {}),
    ("take_rows", lambda t, c: ad.take_rows(t, np.array([0, 2, 2])).sum(), (4, 3), {}),
    ("embedding", lambda t, c: ad.embedding(t, np.array([[0, 1], [3, 1]])).sum(), (5, 3), {}),
    ("exp", lambda t, c: ad.exp(t).sum(), (6,), {}),
    ("log", lambda t, c: ad.log(ad.add(ad.mul(t, t), 0.5)).sum(), (6,), {}),
    ("sqrt", lambda t, c: ad.sqrt(ad.add(ad.mul(t, t), 0.5)).sum(), (6,), {}),
    ("tanh", lambda t, c: ad.tanh(t).sum(), (6,), {}),
    ("sigmoid", lambda t, c: ad.sigmoid(t).sum(), (6,), {}),
    ("gelu", lambda t, c: ad.gelu(t).sum(), (6,), {}),
    ("softmax", lambda t, c: ad.mul(ad.softmax(t), c["w"]).sum(), (3, 5), {"w": (3, 5)}),
    ("log_softmax", lambda t, c: ad.mul(ad.log_softmax(t), c["w"]).sum(), (3, 5), {"w": (3, 5)}),
    ("layer_norm", lambda t, c: ad.mul(ad.layer_norm(t, c["g"], c["b"]), c["w"]).sum(), (3, 8), {"g": (8,), "b": (8,), "w": (3, 8)}),
    ("layer_norm_gain", lambda t, c: ad.layer_norm(c["x"], t, c["b"]).sum(), (8,), {"x": (3, 8), "b": (8,)}),
    ("reduce_mean_axis", lambda t, c: ad.mul(ad.reduce_mean(t, axis=1), c["v"]).sum(), (3, 4), {"v": (3,)}),
    ("reduce_sum_keepdims", lambda t, c: ad.mul(ad.reduce_sum(t, axis=0, keepdims=True), 2.0).sum(), (3, 4), {}),
    ("maximum", lambda t, c: ad.maximum(t, c["other"]).sum(), (3, 4), {"other": "same"}),
    ("minimum", lambda t, c: ad.minimum(t, c["other"]).sum(), (3, 4), {"other": "same"}),
]


@pytest.mark.parametrize("name,fn,shape,consts", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_match_finite_differences(name, fn, shape, consts):
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(10):
        materialized = {}
        for key, spec in consts.items():
            if spec == "same":
                materialized[key] = Tensor(rng.normal(size=shape) + 2.0)
            elif spec == "row":
                materialized[key] = Tensor(rng.normal(size=shape[-1]))
            else:
                materialized[key] = Tensor(rng.normal(size=spec))
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        err = finite_diff_check(lambda t: fn(t, materialized), x)
        assert err < 1e-4, f"{name} trial {trial}: rel err {err}"


def test_backward_is_deterministic():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 6))

    def run():
        x = Tensor(data, requires_grad=True)
        with Tape() as tape:
            h = ad.gelu(ad.matmul(x, Tensor(w)))
            y = ad.softmax(h).sum() + ad.layer_norm(h, Tensor(np.ones(6)), Tensor(np.zeros(6))).mean()
            backward(tape, y)
        return x.grad.copy()

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_values_and_grads_finite_after_passes():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    with Tape() as tape:
        y = ad.log_softmax(ad.matmul(x, Tensor(rng.normal(size=(7, 4))))).sum()
        backward(tape, y)
    assert np.all(np.isfinite(y.data))
    assert np.all(np.isfinite(x.grad))


def test_no_recording_without_requires_grad():
    with Tape() as tape:
        a = ad.mul(Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert len(tape) == 0 and not a.requires_grad


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(ValueError, match="out of range"):
        ad.embedding(Tensor(np.zeros((4, 2))), np.array([0, 4]))
