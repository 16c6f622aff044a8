import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partfield import autodiff as ad
from partfield.autodiff import NonFiniteError, Tape


def scalar_tape(*values):
    tape = Tape()
    return tape, [tape.leaf(v) for v in values]


def test_product_gradients():
    tape, (x, y) = scalar_tape(2.0, 3.0)
    loss = ad.mul(x, y)
    gx, gy = tape.backward(loss, [x, y])
    assert gx == 3.0 and gy == 2.0


def test_stop_gradient_cuts_branch():
    tape, (x,) = scalar_tape(1.5)
    loss = ad.add(ad.square(x), ad.stop_gradient(ad.square(x)))
    (gx,) = tape.backward(loss, [x])
    assert gx == 3.0  # only the live branch contributes


def test_stop_gradient_primal_passthrough():
    tape, (x,) = scalar_tape(0.7)
    assert ad.stop_gradient(x).data == pytest.approx(0.7)


def test_logsumexp_duplicate():
    tape = Tape()
    v = tape.leaf([3.0, 3.0])
    out = ad.logsumexp(v, axis=0)
    assert out.data == pytest.approx(3.0 + np.log(2.0))


def test_tanh_derivative_at_zero():
    tape, (x,) = scalar_tape(0.0)
    (g,) = tape.backward(ad.tanh(x), [x])
    assert g == pytest.approx(1.0)


def test_backward_requires_scalar():
    tape = Tape()
    v = tape.leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        tape.backward(v, [v])


def test_backward_twice_identical():
    tape = Tape()
    x = tape.leaf([1.0, -2.0, 0.5])
    loss = ad.sum_(ad.mul(ad.tanh(x), ad.exp(x)))
    g1 = tape.backward(loss, [x])[0]
    g2 = tape.backward(loss, [x])[0]
    np.testing.assert_array_equal(g1, g2)


def test_linearity_of_backward():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=4)
    a, b = 1.7, -0.4

    def f(tape, x):
        return ad.sum_(ad.square(x))

    def g(tape, x):
        return ad.sum_(ad.mul(ad.sin(x), x))

    tape = Tape()
    x = tape.leaf(x0)
    combined = ad.add(ad.mul(tape.constant(a), f(tape, x)), ad.mul(tape.constant(b), g(tape, x)))
    gc = tape.backward(combined, [x])[0]
    tape2 = Tape()
    x2 = tape2.leaf(x0)
    gf = tape2.backward(f(tape2, x2), [x2])[0]
    tape3 = Tape()
    x3 = tape3.leaf(x0)
    gg = tape3.backward(g(tape3, x3), [x3])[0]
    np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-10)


def test_nonfinite_forward_raises():
    tape, (x,) = scalar_tape(1000.0)
    with pytest.raises(NonFiniteError):
        ad.exp(ad.mul(x, x))


def test_max_min_ties_go_first():
    tape = Tape()
    a = tape.leaf([1.0, 5.0])
    b = tape.leaf([1.0, 2.0])
    ga, gb = tape.backward(ad.sum_(ad.maximum(a, b)), [a, b])
    np.testing.assert_array_equal(ga, [1.0, 1.0])
    np.testing.assert_array_equal(gb, [0.0, 0.0])
    ga, gb = tape.backward(ad.sum_(ad.minimum(a, b)), [a, b])
    np.testing.assert_array_equal(ga, [1.0, 0.0])
    np.testing.assert_array_equal(gb, [0.0, 1.0])


def test_cumprod_zero_safe():
    tape = Tape()
    x = tape.leaf([2.0, 0.0, 3.0])
    out = ad.cumprod(x, axis=0)
    np.testing.assert_array_equal(out.data, [2.0, 0.0, 0.0])
    (g,) = tape.backward(ad.sum_(out), [x])
    # d/dx of (x0 + x0 x1 + x0 x1 x2) at (2, 0, 3)
    np.testing.assert_allclose(g, [1.0 + 0.0 + 0.0, 2.0 + 6.0, 0.0])


def test_scatter_rows():
    tape = Tape()
    x = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
    out = ad.scatter_rows(x, np.array([2, 0]), 4)
    np.testing.assert_array_equal(out.data, [[3, 4], [0, 0], [1, 2], [0, 0]])
    (g,) = tape.backward(ad.sum_(ad.mul(out, out)), [x])
    np.testing.assert_allclose(g, [[2.0, 4.0], [6.0, 8.0]])


# ---------------------------------------------------------------------------
# every forward op is exercised by a gradcheck property test


def _field_like(tape, leaves):
    x = leaves["x"]
    w = leaves["w"]
    h = ad.matmul(ad.reshape(x, (2, 3)), w)
    h = ad.softplus(h)
    h = ad.concatenate([h, ad.sigmoid(h)], axis=1)
    s = ad.softmax(h, axis=1)
    lse = ad.logsumexp(h, axis=1)
    prod = ad.cumprod(ad.sigmoid(h), axis=1)
    pieces = [
        ad.sum_(ad.mul(s, s)),
        ad.mean(lse),
        ad.sum_(prod),
        ad.sum_(ad.min_(h, axis=1)),
        ad.sum_(ad.max_(h, axis=1)),
        ad.sum_(ad.sqrt(ad.add(ad.square(h), h.tape.constant(0.3)))),
        ad.sum_(ad.tanh(ad.sin(x))),
        ad.sum_(ad.cos(ad.div(x, x.tape.constant(2.0)))),
        ad.sum_(ad.log(ad.add(ad.exp(x), x.tape.constant(1.0)))),
        ad.sum_(ad.take(h, np.array([1, 0, 1]), axis=0)),
        ad.sum_(ad.stack([ad.neg(ad.min_(h, 0)), ad.max_(h, 0)], axis=0)),
        ad.sum_(ad.scatter_rows(h, np.array([3, 1]), 5)),
        ad.sum_(ad.einsum("ab,cb->ac", h, h)),
        ad.sum_(ad.maximum(x, ad.neg(x))),
        ad.sum_(ad.minimum(x, x.tape.constant(np.linspace(-1, 1, 6)))),
        ad.mean(ad.where(np.arange(6) % 2 == 0, x, ad.neg(x))),
    ]
    total = pieces[0]
    for p in pieces[1:]:
        total = ad.add(total, p)
    return total


def test_gradcheck_composite_expression():
    rng = np.random.default_rng(7)
    arrays = {"x": rng.normal(size=6) * 0.8 + 0.1, "w": rng.normal(size=(3, 4)) * 0.5}
    report = ad.gradcheck(_field_like, arrays, h=1e-5, tol=1e-6, max_entries=18, rng=rng)
    assert report.passed, repr(report)


def test_gradcheck_simple_square():
    report = ad.gradcheck(
        lambda tape, leaves: ad.square(leaves["x"]), {"x": np.array(1.0)}, h=1e-5, tol=1e-8
    )
    assert report.passed, repr(report)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradcheck_random_small_graphs(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=5)

    def build(tape, leaves):
        x = leaves["x"]
        y = ad.mul(ad.sin(x), ad.exp(ad.mul(x, tape.constant(0.3))))
        z = ad.logsumexp(ad.concatenate([y, ad.square(x)], axis=0), axis=0)
        return ad.add(z, ad.mean(ad.softmax(y, axis=0)))

    report = ad.gradcheck(build, {"x": x0}, h=1e-5, tol=1e-4, rng=rng)
    assert report.passed, repr(report)
