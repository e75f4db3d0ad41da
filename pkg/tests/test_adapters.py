import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, dense_lora_weight, dense_uora_weight, rel_err
from uora.adapters import (
    AdaptedLinear,
    FrozenLinear,
    LoraState,
    SharedHandle,
    SharedMatrices,
    UoraState,
    backward_lora,
    backward_uora,
    count_params,
    forward_lora,
    forward_uora,
    human_count,
    merge,
)
from uora.errors import ConfigError, ShapeError
from uora.linalg import InitKind


def random_uora(g, d_out, d_in, r):
    layer = FrozenLinear(g.normal(size=(d_out, d_in)), g.normal(size=d_out))
    s = UoraState(g.normal(size=(r, d_in)), g.normal(size=(d_out, r)), g.normal(size=r), g.normal(size=d_out))
    return layer, s


def random_lora(g, d_out, d_in, r):
    layer = FrozenLinear(g.normal(size=(d_out, d_in)), g.normal(size=d_out))
    return layer, LoraState(g.normal(size=(r, d_in)), g.normal(size=(d_out, r)))


def test_uora_forward_hand_example():
    layer = FrozenLinear(np.array([[1.0, 0.0], [0.0, 1.0]]))
    s = UoraState(a=[[1.0, 1.0]], bm=[[2.0], [0.0]], d=[0.5], bv=[3.0, 1.0])
    # A x = 3, d -> 1.5, B -> [3, 0], b -> [9, 0]
    np.testing.assert_array_equal(forward_uora(layer, s, [1.0, 2.0]), [10.0, 2.0])


def test_lora_forward_hand_example():
    layer = FrozenLinear(np.eye(2), np.array([0.5, 0.0]))
    s = LoraState(a=[[1.0, -1.0]], bm=[[1.0], [2.0]])
    np.testing.assert_array_equal(forward_lora(layer, s, [3.0, 1.0]), [5.5, 5.0])


def test_create_starts_as_exact_noop(rng):
    layer = FrozenLinear(rng.normal(size=(12, 20)), rng.normal(size=12))
    x = rng.normal(size=(5, 20))
    for s in (UoraState.create(12, 20, 4, seed=1), LoraState.create(12, 20, 4, seed=1)):
        adapted = AdaptedLinear("p", layer, s)
        assert np.array_equal(adapted.forward(x), layer.forward(x))
    u = UoraState.create(12, 20, 4, seed=1)
    assert np.all(u.d == 0.1) and np.all(u.bv == 0.0)


@pytest.mark.parametrize("shape", [(5, 7, 3), (8, 3, 2), (4, 4, 4)])
def test_forward_matches_dense_weight(rng, shape):
    d_out, d_in, r = shape
    x = rng.normal(size=(6, d_in))
    layer, s = random_uora(rng, d_out, d_in, r)
    w = dense_uora_weight(layer.weight, s.a, s.bm, s.d, s.bv)
    np.testing.assert_allclose(forward_uora(layer, s, x), x @ w.T + layer.bias, rtol=1e-12, atol=1e-12)
    layer, s = random_lora(rng, d_out, d_in, r)
    w = dense_lora_weight(layer.weight, s.a, s.bm)
    np.testing.assert_allclose(forward_lora(layer, s, x), x @ w.T + layer.bias, rtol=1e-12, atol=1e-12)


def test_batched_rows_equal_single_vectors(rng):
    layer, s = random_uora(rng, 6, 5, 2)
    x = rng.normal(size=(4, 5))
    batch = forward_uora(layer, s, x)
    for i in range(4):
        np.testing.assert_allclose(forward_uora(layer, s, x[i]), batch[i], rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 4), st.integers(0, 2**31))
def test_uora_gradients_match_finite_differences(d_out, d_in, r, seed):
    r = min(r, d_out, d_in)
    g = np.random.default_rng(seed)
    layer, s = random_uora(g, d_out, d_in, r)
    x = g.normal(size=(3, d_in))
    w = g.normal(size=(3, d_out))

    def loss_d(d):
        return float(np.sum(w * forward_uora(layer, UoraState(s.a, s.bm, d, s.bv), x)))

    def loss_b(b):
        return float(np.sum(w * forward_uora(layer, UoraState(s.a, s.bm, s.d, b), x)))

    def loss_x(xx):
        return float(np.sum(w * forward_uora(layer, s, xx)))

    gd, gb, gx = backward_uora(layer, s, x, w)
    assert rel_err(gd, central_diff(loss_d, s.d)) <= 1e-6
    assert rel_err(gb, central_diff(loss_b, s.bv)) <= 1e-6
    assert rel_err(gx, central_diff(loss_x, x)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 4), st.integers(0, 2**31))
def test_lora_gradients_match_finite_differences(d_out, d_in, r, seed):
    r = min(r, d_out, d_in)
    g = np.random.default_rng(seed)
    layer, s = random_lora(g, d_out, d_in, r)
    x = g.normal(size=(3, d_in))
    w = g.normal(size=(3, d_out))
    ga, gb, _ = backward_lora(layer, s, x, w)
    fa = central_diff(lambda a: float(np.sum(w * forward_lora(layer, LoraState(a, s.bm), x))), s.a)
    fb = central_diff(lambda b: float(np.sum(w * forward_lora(layer, LoraState(s.a, b), x))), s.bm)
    assert rel_err(ga, fa) <= 1e-6
    assert rel_err(gb, fb) <= 1e-6


def test_merge_equivalence(rng):
    for build in (random_uora, random_lora):
        layer, s = build(rng, 9, 7, 3)
        merged = merge(layer, s)
        x = rng.normal(size=(100, 7))
        fwd = forward_uora if isinstance(s, UoraState) else forward_lora
        assert np.max(np.abs(merged.forward(x) - fwd(layer, s, x))) <= 1e-9
        assert merged.bias is not layer.bias


@pytest.mark.parametrize("method,L,d,r,count,human", [
    ("lora", 24, 768, 8, 294_912, "294.9K"),
    ("vera", 24, 768, 256, 24_576, "24.6K"),
    ("uora", 24, 768, 32, 19_200, "19.2K"),
    ("lora", 48, 1024, 8, 786_432, "786.4K"),
    ("vera", 48, 1024, 256, 61_440, "61.4K"),
    ("uora", 48, 1024, 32, 50_688, "50.7K"),
])
def test_count_params_vit_goldens(method, L, d, r, count, human):
    report = count_params(method, L, d, r)
    assert report.trainable_count == count
    assert report.human() == human


def test_count_params_rejects_bad_input():
    for args in [("uora", 0, 768, 8), ("lora", 1, -3, 8), ("dora", 1, 8, 2), ("uora", 1.5, 8, 2)]:
        with pytest.raises(ConfigError):
            count_params(*args)
    assert human_count(999) == "999"
    assert human_count(2_500_000) == "2.5M"


def test_state_validation():
    with pytest.raises(ShapeError):
        UoraState(np.ones((2, 3)), np.ones((4, 2)), np.ones(3), np.ones(4))
    with pytest.raises(ShapeError):
        UoraState(np.ones((2, 3)), np.ones((4, 2)), np.ones(2), np.ones(3))
    with pytest.raises(ConfigError):
        UoraState.create(4, 4, 5, seed=0)
    with pytest.raises(ShapeError):
        forward_uora(FrozenLinear(np.ones((3, 3))), UoraState.create(4, 4, 2, seed=0), np.ones(4))
    with pytest.raises(ShapeError):
        forward_uora(FrozenLinear(np.ones((4, 4))), UoraState.create(4, 4, 2, seed=0), np.ones(3))


def test_shared_pool_aliases_until_privatized():
    pool = SharedMatrices()
    s1 = UoraState.create(8, 8, 2, seed=0, layer_id=0, shared=pool)
    s2 = UoraState.create(8, 8, 2, seed=0, layer_id=1, shared=pool, method="vera")
    assert s1.a is s2.a and isinstance(s1.provenance, SharedHandle)
    s1.privatize()
    s1.a[0, 0] += 1.0
    assert s2.a[0, 0] != s1.a[0, 0]
    assert s1.matrix_digest() != s2.matrix_digest()


def test_origin_redraws_initial_matrices():
    s = UoraState.create(6, 10, 3, seed=4, layer_id=2, init=InitKind("xavier"))
    a, bm = s.origin.draw(6, 10, 3)
    assert np.array_equal(a, s.a) and np.array_equal(bm, s.bm)


def test_adapted_linear_backward_keys(rng):
    layer, s = random_uora(rng, 4, 3, 2)
    grads, gx = AdaptedLinear("q", layer, s).backward(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)))
    assert set(grads) == {"d", "b"} and gx.shape == (2, 3)
    plain = AdaptedLinear("q", layer)
    assert plain.method == "none" and plain.backward(np.ones(3), np.ones(4))[0] == {}
