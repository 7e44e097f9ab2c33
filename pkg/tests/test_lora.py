"""Toy target model, LoRA factors, canvas packing and subspace aggregation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcodec import autodiff as ad
from fedcodec import lora
from fedcodec.lora import LoraFactors

from conftest import numeric_grad, rel_err


@pytest.fixture
def tiny():
    model, f0 = lora.init_model(d=6, n_layers=2, rank=2, n_classes=3, seed=3)
    rng = np.random.default_rng(5)
    factors = LoraFactors(f0.A, rng.normal(scale=0.3, size=f0.B.shape))
    X = rng.normal(size=(7, 6))
    y = rng.integers(0, 3, size=7)
    delta = rng.normal(scale=0.05, size=model.base.shape)
    return model, factors, X, y, delta


def random_factors(rng, L=2, r=3, d=5):
    return LoraFactors(rng.normal(size=(L, 4, r, d)), rng.normal(size=(L, 4, d, r)))


# ------------------------------------------------------------ parameter count


def test_transmitted_param_count_at_seven_billion_scale():
    # [PAPER] 4096 x 8 x 2 x 4 x 32 = 8,388,608
    assert lora.count_transmitted_params(4096, 8, 32, 4) == 8_388_608


def test_transmitted_param_count_desk_and_zero_rank():
    assert lora.count_transmitted_params(64, 4, 4, 4) == 8192  # [DERIVED] 64*4*2*4*4
    assert lora.count_transmitted_params(64, 0, 4, 4) == 0


@given(st.integers(1, 50), st.integers(1, 9), st.integers(1, 9), st.integers(1, 5), st.integers(2, 4))
def test_param_count_is_multiplicative(d, r, L, n, k):
    base = lora.count_transmitted_params(d, r, L, n)
    assert lora.count_transmitted_params(k * d, r, L, n) == k * base
    assert lora.count_transmitted_params(d, k * r, L, n) == k * base
    assert lora.count_transmitted_params(d, r, k * L, n) == k * base
    assert lora.count_transmitted_params(d, r, L, k * n) == k * base


def test_param_count_matches_canvas_size():
    model, f0 = lora.init_model(64, 4, 4, 8)
    assert lora.pack(f0).size == lora.count_transmitted_params(64, 4, 4)
    assert model.canvas_shape == (128, 64)


# ----------------------------------------------------------------- packing


def test_pack_layout_by_explicit_index(rng):
    f = random_factors(rng, L=2, r=3, d=5)
    canvas = lora.pack(f)
    assert canvas.shape == (2 * 3 * 4 * 2, 5)
    r = 3
    for l in range(2):
        for p in range(4):
            block = (l * 4 + p) * 2 * r
            np.testing.assert_array_equal(canvas[block : block + r], f.A[l, p])
            np.testing.assert_array_equal(canvas[block + r : block + 2 * r], f.B[l, p].T)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(5, 9), st.integers(0, 2**31 - 1))
def test_pack_unpack_round_trip(L, r, d, seed):
    f = random_factors(np.random.default_rng(seed), L, r, d)
    assert lora.unpack(lora.pack(f), r, L).equals(f)


def test_unpack_rejects_wrong_rows():
    with pytest.raises(ValueError):
        lora.unpack(np.zeros((10, 5)), rank=2, n_layers=1)


def test_factor_shape_validation():
    with pytest.raises(ValueError):
        LoraFactors(np.zeros((1, 4, 2, 5)), np.zeros((1, 4, 2, 5)))
    with pytest.raises(ValueError):
        lora.init_model(4, 1, 4, 2)  # rank must be below d


# ------------------------------------------------------------- aggregation


def test_aggregate_sums_factors_not_products(rng):
    fs = [random_factors(rng) for _ in range(3)]
    agg = lora.aggregate(fs)
    np.testing.assert_allclose(agg.A, fs[0].A + fs[1].A + fs[2].A)
    np.testing.assert_allclose(agg.B, fs[0].B + fs[1].B + fs[2].B)
    sum_of_products = sum(f.effective() for f in fs)
    assert not np.allclose(agg.effective(), sum_of_products)


def test_aggregate_mean_and_errors(rng):
    fs = [random_factors(rng) for _ in range(4)]
    np.testing.assert_allclose(lora.aggregate(fs, "mean").A, np.mean([f.A for f in fs], axis=0))
    with pytest.raises(ValueError):
        lora.aggregate([])
    with pytest.raises(ValueError):
        lora.aggregate(fs, "median")
    with pytest.raises(ValueError):
        lora.aggregate([fs[0], random_factors(rng, r=2)])


def test_apply_global_update_per_projection_loop(rng):
    agg = random_factors(rng, L=2, r=2, d=4)
    D = rng.normal(size=(2, 4, 4, 4))
    out = lora.apply_global_update(D, agg, eta=0.5)
    for l in range(2):
        for p in range(4):
            ref = D[l, p] + 0.5 * np.einsum("ik,kj->ij", agg.B[l, p], agg.A[l, p])
            np.testing.assert_allclose(out[l, p], ref, rtol=1e-13)
    with pytest.raises(ValueError):
        lora.apply_global_update(np.zeros((1, 4, 4, 4)), agg, 1.0)


# -------------------------------------------------------------- the model


def test_zero_b_makes_output_independent_of_a(tiny, rng):
    model, _, X, _, _ = tiny
    f1 = lora.init_factors(model, 1)
    f2 = lora.init_factors(model, 2)
    np.testing.assert_array_equal(lora.predict_logits(model, X, f1), lora.predict_logits(model, X, f2))


def test_graph_forward_matches_numpy_forward(tiny):
    model, factors, X, y, delta = tiny
    g = ad.Graph()
    A = [[g.constant(factors.A[l, p]) for p in range(4)] for l in range(2)]
    B = [[g.constant(factors.B[l, p]) for p in range(4)] for l in range(2)]
    out = lora.forward_graph(g, model, g.input(X), A, B, delta).data
    np.testing.assert_allclose(out, lora.predict_logits(model, X, factors, delta), rtol=1e-12, atol=1e-12)


def test_end_to_end_loss_gradient_against_finite_differences(tiny):
    model, factors, X, y, delta = tiny
    _, grads = lora.loss_and_grads(model, factors, X, y, delta)

    def loss_A(a):
        return lora.cross_entropy_np(lora.predict_logits(model, X, LoraFactors(a, factors.B), delta), y)

    def loss_B(b):
        return lora.cross_entropy_np(lora.predict_logits(model, X, LoraFactors(factors.A, b), delta), y)

    assert rel_err(grads.A, numeric_grad(loss_A, factors.A)) < 1e-4
    assert rel_err(grads.B, numeric_grad(loss_B, factors.B)) < 1e-4


def test_local_train_reduces_loss_and_is_deterministic(tiny):
    model, factors, X, y, delta = tiny
    before = lora.cross_entropy_np(lora.predict_logits(model, X, factors, delta), y)
    inc = lora.local_train(model, factors, X, y, epochs=20, lr=1e-2, batch_size=4, seed=9, delta=delta)
    after = lora.cross_entropy_np(lora.predict_logits(model, X, factors + inc, delta), y)
    assert after < before
    again = lora.local_train(model, factors, X, y, epochs=20, lr=1e-2, batch_size=4, seed=9, delta=delta)
    assert inc.equals(again)


def test_local_train_zero_epochs_and_empty_shard(tiny):
    model, factors, X, y, _ = tiny
    inc = lora.local_train(model, factors, X, y, epochs=0)
    assert not inc.A.any() and not inc.B.any()
    with pytest.raises(ValueError):
        lora.local_train(model, factors, X[:0], y[:0])


def test_local_train_does_not_mutate_start_factors(tiny):
    model, factors, X, y, _ = tiny
    snapshot = factors.copy()
    lora.local_train(model, factors, X, y, epochs=2)
    assert factors.equals(snapshot)


def test_base_weights_are_frozen():
    model, _ = lora.init_model(8, 1, 2, 3)
    with pytest.raises(ValueError):
        model.base[0, 0, 0, 0] = 1.0
