"""The compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest

from uora import _kernels_py, kernels

pytestmark = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                reason="compiled extension not built")


@pytest.fixture(scope="module")
def cy():
    return kernels.load_backend("cython")


def close(a, b):
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_backend_names(cy):
    assert cy.BACKEND == "cython"
    assert _kernels_py.BACKEND == "python"


def test_matmul_and_lerp(cy, rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    close(cy.matmul(a, b), _kernels_py.matmul(a, b))
    u, v = rng.normal(size=9), rng.normal(size=9)
    for alpha in (0.0, 0.3, 1.0):
        close(cy.lerp(u, v, alpha), _kernels_py.lerp(u, v, alpha))


def test_adapter_forward_backward(cy, rng):
    n, d_in, d_out, r = 6, 8, 5, 3
    x = rng.normal(size=(n, d_in))
    w0, bias = rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)
    a, bm = rng.normal(size=(r, d_in)), rng.normal(size=(d_out, r))
    d, bv = rng.normal(size=r), rng.normal(size=d_out)
    g = rng.normal(size=(n, d_out))
    close(cy.uora_forward(x, w0, bias, a, bm, d, bv), _kernels_py.uora_forward(x, w0, bias, a, bm, d, bv))
    for p, q in zip(cy.uora_backward(x, w0, a, bm, d, bv, g), _kernels_py.uora_backward(x, w0, a, bm, d, bv, g)):
        close(p, q)
    close(cy.lora_forward(x, w0, bias, a, bm), _kernels_py.lora_forward(x, w0, bias, a, bm))
    for p, q in zip(cy.lora_backward(x, w0, a, bm, g), _kernels_py.lora_backward(x, w0, a, bm, g)):
        close(p, q)


def test_observe_step_parity(cy, rng):
    c1 = np.zeros(6, dtype=np.int64)
    c2 = np.zeros(6, dtype=np.int64)
    for _ in range(50):
        d = rng.normal(scale=0.1, size=6)
        f1 = cy.observe_step(c1, d, 0.08, 2)
        f2 = _kernels_py.observe_step(c2, d, 0.08, 2)
        assert list(f1) == list(f2)
        assert np.array_equal(c1, c2)


def test_optimizer_steps(cy, rng):
    p1 = rng.normal(size=10)
    p2 = p1.copy()
    m1, v1, m2, v2 = (np.zeros(10) for _ in range(4))
    for t in range(1, 6):
        g = rng.normal(size=10)
        cy.adam_step(p1, g, m1, v1, 1e-2, 0.9, 0.999, 1e-8, 0.01, t)
        _kernels_py.adam_step(p2, g, m2, v2, 1e-2, 0.9, 0.999, 1e-8, 0.01, t)
        cy.sgd_step(p1, g, 0.1, 0.0)
        _kernels_py.sgd_step(p2, g, 0.1, 0.0)
    close(p1, p2)
    close(v1, v2)


def test_set_backend_round_trip():
    prev = kernels.set_backend("python")
    assert kernels.backend_name() == "python"
    kernels.set_backend(prev)
    assert kernels.backend_name() == prev
