import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bilopt import autodiff as ad
from bilopt.autodiff import NonFiniteError, ShapeError, Tape, TapeError, Tensor

from conftest import analytic_grad, fd_relative_error, relative_error
from gradcases import primitive_cases

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


# ----------------------------------------------------------------- forward examples


def test_mean_over_rows():
    out = ad.mean(Tensor([[1.0, 3.0], [5.0, 7.0]]), axis=0)
    np.testing.assert_array_equal(out.data, [3.0, 5.0])


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_matmul_gradient_matches_central_differences(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    w = rng.normal(size=(2, 2))
    err = fd_relative_error(lambda ts: ad.sum(ad.mul(ad.matmul(*ts), Tensor(w))), [a, b])
    assert err < 1e-6


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="do not broadcast"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_inputs_are_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0]))


def test_ops_record_only_when_an_input_requires_grad():
    with Tape() as tape:
        ad.add(Tensor([1.0]), Tensor([2.0]))
        assert len(tape) == 0
        ad.add(Tensor([1.0], requires_grad=True), Tensor([2.0]))
        assert len(tape) == 1


def test_tape_nodes_are_topologically_ordered(rng):
    with Tape() as tape:
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        y = ad.tanh(ad.matmul(x, x))
        ad.sum(ad.mul(y, x))
    position = {id(n.output): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        for t in node.inputs:
            if t.node is not None:
                assert position[id(t)] < i


# ----------------------------------------------------------------- backward


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_gradient_of_sum_is_all_ones(x):
    (g,) = analytic_grad(lambda ts: ad.sum(ts[0]), [x])
    np.testing.assert_array_equal(g, np.ones_like(x))


@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_gradient_of_half_squared_norm_is_identity(x):
    (g,) = analytic_grad(lambda ts: ad.mul(0.5, ad.sum(ad.mul(ts[0], ts[0]))), [x])
    np.testing.assert_allclose(g, x, rtol=1e-12, atol=1e-15)


def test_backward_fills_grad_and_zero_for_unreachable():
    with Tape():
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        loss = ad.sum(ad.mul(x, x))
        grads = ad.backward(loss, [x, unused])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    np.testing.assert_array_equal(unused.grad, [0.0])
    assert grads[x].shape == x.shape


def test_backward_rejects_non_scalar_loss():
    with Tape():
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            ad.backward(ad.mul(x, 2.0))


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_reusing_a_tensor_accumulates_per_use_gradients(x, w):
    both = analytic_grad(lambda ts: ad.add(ad.sum(ad.tanh(ts[0])), ad.sum(ad.mul(ts[0], Tensor(w)))), [x])[0]
    first = analytic_grad(lambda ts: ad.sum(ad.tanh(ts[0])), [x])[0]
    second = analytic_grad(lambda ts: ad.sum(ad.mul(ts[0], Tensor(w))), [x])[0]
    np.testing.assert_allclose(both, first + second, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("index", range(25))
def test_primitive_reverse_rules_match_finite_differences(index):
    for seed in range(3):
        name, fn, arrays_ = primitive_cases(np.random.default_rng(100 * index + seed))[index]
        assert fd_relative_error(fn, arrays_) < 1e-4, name


# ----------------------------------------------------------------- second order


def _quadratic_form(A):
    return lambda ts: ad.mul(0.5, ad.sum(ad.mul(ts[0], ad.matmul(Tensor(A), ts[0]))))


def test_hvp_of_quadratic_form_is_matrix_times_vector():
    A = np.diag([2.0, 4.0])
    with Tape(retain_for_higher_order=True):
        th = Tensor(np.array([0.3, -1.0]), requires_grad=True)
        loss = _quadratic_form(A)([th])
        (hv,) = ad.hvp(loss, [th], np.ones(2))
    np.testing.assert_allclose(hv, [2.0, 4.0])


def test_hvp_of_quartic():
    with Tape(retain_for_higher_order=True):
        th = Tensor(2.0, requires_grad=True)
        loss = ad.mul(0.25, ad.power(th, 4.0))
        (hv,) = ad.hvp(loss, [th], np.array(1.0))
    assert float(hv) == pytest.approx(12.0)


def test_hvp_requires_retained_tape():
    with Tape():
        th = Tensor([1.0], requires_grad=True)
        loss = ad.sum(ad.power(th, 3.0))
        with pytest.raises(TapeError):
            ad.hvp(loss, [th], np.ones(1))
        with pytest.raises(TapeError):
            ad.grad(loss, [th], create_graph=True)


def _smooth_loss(w):
    def fn(ts):
        x = ts[0]
        return ad.add(ad.sum(ad.tanh(ad.matmul(Tensor(w), x))), ad.mul(0.1, ad.sum(ad.power(x, 4.0))))

    return fn


@given(st.integers(0, 10_000))
def test_hessian_from_unit_hvps_is_symmetric(seed):
    r = np.random.default_rng(seed)
    w = r.normal(size=(3, 4))
    x0 = r.uniform(-1, 1, size=4)
    fn = _smooth_loss(w)
    with Tape(retain_for_higher_order=True):
        x = Tensor(x0, requires_grad=True)
        loss = fn([x])
        first = ad.grad(loss, [x], create_graph=True)
        H = np.stack([ad.hvp(loss, [x], e, first=first)[0] for e in np.eye(4)])
    assert np.max(np.abs(H - H.T)) < 1e-8


def test_hvp_matches_finite_differences_of_gradient(rng):
    w = rng.normal(size=(3, 4))
    x0 = rng.uniform(-1, 1, size=4)
    v = rng.normal(size=4)
    fn = _smooth_loss(w)
    with Tape(retain_for_higher_order=True):
        x = Tensor(x0, requires_grad=True)
        (hv,) = ad.hvp(fn([x]), [x], v)
    h = 1e-5
    g_hi = analytic_grad(fn, [x0 + h * v])[0]
    g_lo = analytic_grad(fn, [x0 - h * v])[0]
    assert relative_error([hv], [(g_hi - g_lo) / (2 * h)]) < 1e-4


def test_mixed_partial_of_product_and_squared_difference():
    with Tape(retain_for_higher_order=True):
        th, ph = Tensor(0.7, requires_grad=True), Tensor(-0.2, requires_grad=True)
        (m,) = ad.mixed_second_derivative(ad.mul(th, ph), [th], [ph], np.array(1.0))
        assert float(m) == pytest.approx(1.0)
        diff = ad.sub(th, ph)
        (m,) = ad.mixed_second_derivative(ad.mul(0.5, ad.mul(diff, diff)), [th], [ph], np.array(1.0))
        assert float(m) == pytest.approx(-1.0)


# ----------------------------------------------------------------- straight-through


def test_straight_through_forward_picks_argmax_block(rng):
    cands = rng.normal(size=(2, 3, 4))
    out = ad.straight_through_select(Tensor([0.1, 0.9]), Tensor(cands))
    assert out.data.tobytes() == cands[1].tobytes()


def test_straight_through_ties_go_to_lowest_index(rng):
    cands = rng.normal(size=(3, 2, 2))
    out = ad.straight_through_select(Tensor(np.full(3, 1 / 3)), Tensor(cands))
    assert out.data.tobytes() == cands[0].tobytes()


def test_straight_through_rejects_bad_inputs():
    with pytest.raises(ValueError, match="empty"):
        ad.straight_through_select(Tensor(np.zeros(0)), Tensor(np.zeros((0, 1, 1))))
    with pytest.raises(ValueError, match="simplex"):
        ad.straight_through_select(Tensor([0.5, 0.6]), Tensor(np.zeros((2, 1, 1))))


def straight_through_vs_mixture(seed: int) -> tuple[bool, float]:
    """Forward bit-equality with the argmax block and backward equality with the soft mixture."""
    r = np.random.default_rng(seed)
    n, l, d = int(r.integers(2, 6)), int(r.integers(1, 4)), int(r.integers(1, 4))
    logits0, cands0, w = r.normal(size=n), r.normal(size=(n, l, d)), r.normal(size=(l, d))
    with Tape():
        logits, cands = Tensor(logits0, requires_grad=True), Tensor(cands0, requires_grad=True)
        p = ad.softmax(logits)
        hard = ad.straight_through_select(p, cands)
        soft = ad.sum(ad.mul(cands, ad.reshape(p, (n, 1, 1))), axis=0)
        g_hard = ad.grad(ad.sum(ad.mul(hard, Tensor(w))), [logits, cands])
        g_soft = ad.grad(ad.sum(ad.mul(soft, Tensor(w))), [logits, cands])
    forward_ok = hard.data.tobytes() == cands0[int(np.argmax(p.data))].tobytes()
    err = max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(g_hard, g_soft))
    return forward_ok, err


@given(st.integers(0, 2**31 - 1))
def test_straight_through_backward_equals_soft_mixture(seed):
    forward_ok, err = straight_through_vs_mixture(seed)
    assert forward_ok
    assert err < 1e-12


def test_flatten_roundtrip_and_length_check(rng):
    parts = [rng.normal(size=(2, 3)), rng.normal(size=4)]
    back = ad.unflatten(ad.flatten(parts), parts)
    for a, b in zip(parts, back):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ShapeError):
        ad.unflatten(np.zeros(3), parts)
