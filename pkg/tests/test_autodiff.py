import numpy as np
import pytest

import dpsparse as dps
from oracles import fd_per_sample, random_small_model


def max_rel_err(got, want):
    """Inf-norm of the difference over the inf-norm of the reference."""
    scale = max(np.abs(want).max(), 1e-8)
    return np.abs(got - want).max() / scale


def test_per_sample_grads_match_fd_many_models():
    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(20):
        model, x, y = random_small_model(rng)
        got = dps.per_sample_gradients(model, x, y, model.full_mask()).grads
        want = fd_per_sample(model, x, y, model.full_mask())
        worst = max(worst, max_rel_err(got, want))
    assert worst < 1e-4, f"worst relative error {worst:.2e}"


def test_single_linear_layer_closed_form():
    # logits = W x, cross entropy: dl/dW = (softmax - onehot) outer x
    rng = np.random.default_rng(0)
    model = dps.build_model([5], [{"kind": "fully_connected", "out": 4}])
    dps.init_he_uniform(model, seed=1)
    x = rng.standard_normal((3, 5))
    y = np.array([0, 3, 1])
    W = model.layers[0].w.copy()
    logits = x @ W.T
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(3), y] -= 1.0
    got = dps.per_sample_gradients(model, x, y, model.full_mask()).grads
    for b in range(3):
        want = np.outer(p[b], x[b]).ravel()
        assert np.allclose(got[b], want, atol=1e-12, rtol=1e-12)


def test_batched_rows_equal_single_sample_rows():
    rng = np.random.default_rng(5)
    for _ in range(5):
        model, x, y = random_small_model(rng)
        full = model.full_mask()
        batched = dps.per_sample_gradients(model, x, y, full).grads
        for b in range(x.shape[0]):
            alone = dps.per_sample_gradients(model, x[b:b + 1], y[b:b + 1],
                                             full).grads[0]
            assert np.allclose(batched[b], alone, atol=1e-12, rtol=1e-12)


def test_mask_restriction_is_column_gather(tiny_cnn):
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 1, 8, 8))
    y = rng.integers(0, 4, size=4)
    full = tiny_cnn.full_mask()
    sub_ids = rng.choice(tiny_cnn.n_weights, size=11, replace=False)
    sub = tiny_cnn.mask_from(sub_ids)
    whole = dps.per_sample_gradients(tiny_cnn, x, y, full).grads
    part = dps.per_sample_gradients(tiny_cnn, x, y, sub).grads
    assert np.array_equal(part, whole[:, np.searchsorted(full.indices,
                                                         sub.indices)])


def test_empty_mask_and_empty_batch(tiny_mlp):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 8))
    y = np.array([0, 1, 2])
    g = dps.per_sample_gradients(tiny_mlp, x, y, tiny_mlp.empty_mask())
    assert g.grads.shape == (3, 0)
    g = dps.per_sample_gradients(tiny_mlp, x[:0], y[:0], tiny_mlp.full_mask())
    assert g.grads.shape == (0, tiny_mlp.n_weights)
    assert g.losses.shape == (0,)


def test_losses_are_cross_entropy(tiny_mlp):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 8))
    y = rng.integers(0, 3, size=6)
    g = dps.per_sample_gradients(tiny_mlp, x, y, tiny_mlp.empty_mask())
    logits = tiny_mlp.forward(x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    want = np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(6), y]
    assert np.allclose(g.losses, want, atol=1e-12)


def test_label_out_of_range_raises(tiny_mlp):
    x = np.zeros((2, 8))
    with pytest.raises(dps.DataFormatError):
        dps.per_sample_gradients(tiny_mlp, x, np.array([0, 3]),
                                 tiny_mlp.full_mask())
    with pytest.raises(dps.ConfigurationError):
        dps.loss_cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_nonfinite_gradient_names_a_layer(tiny_mlp):
    tiny_mlp.theta[:] = 1e308           # overflow on the first matmul
    x = np.ones((1, 8))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(dps.NumericalError, match="layer"):
            dps.per_sample_gradients(tiny_mlp, x, np.array([0]),
                                     tiny_mlp.full_mask())


def test_forward_rejects_wrong_input_shape(tiny_cnn):
    with pytest.raises(dps.ConfigurationError):
        tiny_cnn.forward(np.zeros((2, 1, 7, 8)))


def test_init_seeded_and_bounded():
    spec = [{"kind": "fully_connected", "out": 16}, {"kind": "relu"},
            {"kind": "fully_connected", "out": 4}]
    a = dps.init_he_uniform(dps.build_model([12], spec), seed=42)
    b = dps.init_he_uniform(dps.build_model([12], spec), seed=42)
    c = dps.init_he_uniform(dps.build_model([12], spec), seed=43)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, c.theta)
    bound0 = np.sqrt(6.0 / 12)
    assert np.abs(a.layers[0].w).max() <= bound0


def test_bias_layers_forward_but_stay_out_of_theta():
    spec = [{"kind": "fully_connected", "out": 5, "bias": True}]
    model = dps.init_he_uniform(dps.build_model([4], spec), seed=0)
    plain = dps.init_he_uniform(dps.build_model(
        [4], [{"kind": "fully_connected", "out": 5}]), seed=0)
    assert model.n_weights == plain.n_weights   # bias not in the flat vector
    x = np.random.default_rng(1).standard_normal((3, 4))
    assert np.array_equal(model.forward(x), plain.forward(x))  # init bias 0
    model.layers[0].b[:] = 1.5
    assert np.allclose(model.forward(x), plain.forward(x) + 1.5)


def test_model_copy_is_detached(tiny_cnn):
    twin = tiny_cnn.copy()
    assert np.array_equal(twin.theta, tiny_cnn.theta)
    twin.theta[0] += 1.0
    assert twin.theta[0] != tiny_cnn.theta[0]
