import mpmath
import numpy as np
import pytest
from conftest import naive_conv2d
from hypothesis import given
from hypothesis import strategies as st

from diwa.tensor import (
    DetachedGraphError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    conv2d,
    dropout,
    finite_diff_check,
    group_norm,
    linear,
    resample2x,
    silu,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# --- conv2d -----------------------------------------------------------------


def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), padding=0)
    assert np.array_equal(out.data, x)


def test_conv2d_summation_case():
    out = conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 4.0


def test_conv2d_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
    assert np.max(np.abs(out.data - naive_conv2d(x, w, b, 1))) <= 1e-12


@pytest.mark.parametrize(
    "shape,cout,k,p",
    [((2, 3, 6, 7), 4, 3, 1), ((1, 1, 4, 4), 2, 3, 0), ((4, 8, 16, 16), 4, 3, 1), ((2, 5, 5, 5), 3, 1, 0), ((1, 2, 9, 9), 2, 5, 2)],
)
def test_conv2d_oracle_shapes(rng, shape, cout, k, p):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[1], k, k))
    b = rng.standard_normal(cout)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=p)
    ref = naive_conv2d(x, w, b, p)
    assert out.shape == ref.shape == (shape[0], cout, shape[2] + 2 * p - k + 1, shape[3] + 2 * p - k + 1)
    assert np.max(np.abs(out.data - ref)) <= 1e-12


def test_conv2d_shape_error_names_dimension():
    with pytest.raises(ShapeError) as exc:
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), None, 1)
    assert exc.value.dim == "in_channels"


# --- silu -------------------------------------------------------------------


def test_silu_values():
    assert silu(Tensor([0.0])).data[0] == 0.0
    # at x=20 the exact gap is 20*e^-20 ~ 4e-8, so saturation is checked further out
    assert abs(silu(Tensor([40.0])).data[0] - 40.0) <= 1e-8
    mpmath.mp.dps = 40
    expected = float(mpmath.mpf(1) / (1 + mpmath.e ** -1))
    assert abs(silu(Tensor([1.0])).data[0] - expected) <= 1e-15


def test_silu_extreme_inputs_finite():
    out = silu(Tensor([-1e4, -800.0, 800.0, 1e4]))
    assert np.all(np.isfinite(out.data))


# --- linear -----------------------------------------------------------------


def test_linear_identity_and_bias(rng):
    x = rng.standard_normal((2, 3))
    assert np.array_equal(linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    b = np.array([1.0, -2.0, 3.0, 0.5])
    out = linear(Tensor(x), Tensor(np.zeros((4, 3))), Tensor(b)).data
    assert np.array_equal(out, np.tile(b, (2, 1)))


def test_linear_matches_loop_oracle(rng):
    x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)
    ref = np.zeros((2, 4))
    for i in range(2):
        for g in range(4):
            ref[i, g] = b[g] + sum(x[i, f] * w[g, f] for f in range(3))
    assert np.max(np.abs(linear(Tensor(x), Tensor(w), Tensor(b)).data - ref)) <= 1e-12


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), None)


# --- resample2x -------------------------------------------------------------


def test_resample_constant_and_mean():
    c = np.full((1, 2, 4, 6), 0.37)
    assert np.array_equal(resample2x(Tensor(c), "down").data, np.full((1, 2, 2, 3), 0.37))
    assert np.array_equal(resample2x(Tensor(c), "up").data, np.full((1, 2, 8, 12), 0.37))
    assert resample2x(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), "down").data.item() == 2.5


def test_resample_up_then_down_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert np.allclose(resample2x(resample2x(Tensor(x), "up"), "down").data, x, atol=0, rtol=0)


def test_resample_down_rejects_odd():
    with pytest.raises(ShapeError):
        resample2x(Tensor(np.zeros((1, 1, 3, 4))), "down")


# --- backward ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.zeros((2, 3, 4)))
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_quadratic():
    x = leaf([1.0, 2.0])
    backward((x * x).sum())
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_reset():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    backward(loss)
    backward(loss)
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_backward_errors():
    with pytest.raises(ValueError):
        backward(leaf([1.0, 2.0]) * 2.0)
    with pytest.raises(DetachedGraphError):
        backward(Tensor([1.0, 2.0]).sum())


def test_backward_linearity(rng):
    w = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((1, 2, 5, 5))

    def loss_a(t):
        return silu(conv2d(Tensor(x), t, None, 1)).sum()

    def loss_b(t):
        return (conv2d(Tensor(x), t, None, 1) * conv2d(Tensor(x), t, None, 1)).mean()

    ta, tb, tab = leaf(w), leaf(w), leaf(w)
    backward(loss_a(ta))
    backward(loss_b(tb))
    backward(loss_a(tab) + loss_b(tab))
    assert np.allclose(tab.grad, ta.grad + tb.grad, rtol=1e-12, atol=1e-12)


def test_leaf_receives_single_accumulation_per_call():
    x = leaf([3.0])
    # x used three times in one graph
    backward((x * x + x).sum())
    assert x.grad.tolist() == [7.0]


def test_tape_is_execution_ordered():
    x = leaf([1.0, 2.0])
    a = x * 2.0
    b = silu(a)
    c = a + b
    loss = c.sum()
    tape = Tape.from_output(loss)
    seqs = [t._node.seq for t in tape]
    assert seqs == sorted(seqs)
    assert [t is n for t, n in zip(tape, [a, b, c, loss])] == [True] * 4


def test_dropout_inverted_and_eval_identity(rng):
    x = Tensor(np.ones((4, 4, 8, 8)))
    assert dropout(x, 0.1, rng, training=False) is x
    out = dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 2.0}


# --- finite_diff_check ------------------------------------------------------


def test_fd_check_trivial_functions(rng):
    assert finite_diff_check(lambda t: t.sum(), rng.standard_normal((3, 4)), eps=1e-5) <= 1e-10
    assert finite_diff_check(lambda t: (t * t).sum(), np.array([1.0, 2.0, 3.0]), eps=1e-5) <= 1e-8


def test_fd_check_conv_silu_chain(rng):
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    err = finite_diff_check(lambda t: silu(conv2d(t, w, None, 1)).sum(), rng.standard_normal((1, 2, 5, 5)))
    assert err <= 1e-4


def test_fd_check_reports_wrong_gradient():
    from diwa.tensor import record

    def bad(t):
        return record(t.data ** 2, (t,), lambda g: (g * 3.0,)).sum()

    assert finite_diff_check(bad, np.array([1.0, 2.0])) > 0.1


# every differentiable op, 10 random inputs each, eps 1e-5


def sq(t):
    return t * t


def _op_cases(r):
    """name -> (loss of one tensor argument, shape of that argument)."""
    w3 = Tensor(r.standard_normal((3, 2, 3, 3)))
    x3 = Tensor(r.standard_normal((2, 2, 5, 5)))
    gam, bet = Tensor(r.standard_normal(4)), Tensor(r.standard_normal(4))
    proj = Tensor(r.standard_normal((2, 4, 3, 3)))
    lw = Tensor(r.standard_normal((5, 3)))
    lx = Tensor(r.standard_normal((2, 3)))
    return {
        "conv2d_input": (lambda t: sq(conv2d(t, w3, Tensor(np.ones(3)), 1)).sum(), (1, 2, 5, 5)),
        "conv2d_weight": (lambda t: silu(conv2d(x3, t, None, 1)).sum(), (3, 2, 3, 3)),
        "conv2d_bias": (lambda t: sq(conv2d(x3, w3, t, 0)).sum(), (3,)),
        "silu": (lambda t: sq(silu(t)).sum(), (2, 3, 4)),
        "linear_input": (lambda t: silu(linear(t, lw, Tensor(np.ones(5)))).sum(), (2, 3)),
        "linear_weight": (lambda t: sq(linear(lx, t, None)).sum(), (5, 3)),
        "group_norm_input": (lambda t: (group_norm(t, gam, bet, 2) * proj).sum(), (2, 4, 3, 3)),
        "group_norm_affine": (lambda t: sq(group_norm(proj, t, bet, 2)).sum(), (4,)),
        "resample_down": (lambda t: sq(resample2x(t, "down")).sum(), (1, 2, 4, 4)),
        "resample_up": (lambda t: sq(resample2x(t, "up")).sum(), (1, 2, 3, 3)),
        "concat": (lambda t: sq(concat([t, t * 2.0], axis=1)).sum(), (1, 2, 3, 3)),
        "abs_mean": (lambda t: (t + 0.5).abs().mean(), (3, 5)),
        "getitem": (lambda t: sq(t[:, 1:3]).sum(), (2, 4, 3)),
        "reshape": (lambda t: sq(t.reshape(6, 2) * Tensor(np.arange(12.0).reshape(6, 2))).sum(), (3, 4)),
    }


@pytest.mark.parametrize("name", list(_op_cases(np.random.default_rng(0))))
def test_every_op_passes_fd_on_ten_inputs(name):
    for seed in range(10):
        r = np.random.default_rng(seed)
        fn, shape = _op_cases(r)[name]
        assert finite_diff_check(fn, r.standard_normal(shape), eps=1e-5) <= 1e-4, (name, seed)


@given(st.integers(0, 2**32 - 1))
def test_forward_ops_stay_finite(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((2, 8, 6, 6)) * 50)
    h = conv2d(x, Tensor(r.standard_normal((8, 8, 3, 3))), Tensor(r.standard_normal(8)), 1)
    h = group_norm(silu(h), Tensor(np.ones(8)), Tensor(np.zeros(8)), 8)
    h = resample2x(resample2x(h, "down"), "up")
    assert np.all(np.isfinite(h.data))
