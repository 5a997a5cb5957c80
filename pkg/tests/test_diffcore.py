import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowaug import diffcore as dc
from flowaug.diffcore import Tensor
from flowaug.flow import CouplingLayer

from conftest import central_diff


def test_square_value_and_gradient():
    value, (g,) = dc.evaluate_with_gradients(lambda x: x * x, [3.0])
    assert value.item() == 9.0
    assert g.item() == 6.0


@pytest.mark.parametrize("shape", [(3,), (2, 5), (2, 3, 4)])
def test_sum_gradient_is_ones(shape):
    x = np.random.default_rng(0).standard_normal(shape)
    _, (g,) = dc.evaluate_with_gradients(lambda t: dc.sum(t), [x])
    np.testing.assert_array_equal(g.data, np.ones(shape))


def _coupling(seed=0, dim=8):
    layer = CouplingLayer(dim, dim // 2, hidden=16, rng=seed, zero_init=False)
    layer.b1.data[...] = np.random.default_rng(seed + 1).normal(0, 0.3, layer.b1.shape)
    return layer


def test_coupling_forward_gradient_matches_finite_differences():
    layer = _coupling()
    x = np.random.default_rng(3).standard_normal((1, 8))

    def f(t):
        y, _ = layer.forward(t)
        return dc.sum(y)

    _, (g,) = dc.evaluate_with_gradients(f, [x])
    numeric = central_diff(lambda v: float(f(Tensor(v)).data), x, h=1e-4)
    rel = np.abs(g.data - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert rel.max() <= 1e-5


def _primitive_programs():
    w = np.random.default_rng(11).standard_normal((3, 4))
    m = np.random.default_rng(12).standard_normal((4, 2))
    return {
        "add": lambda t: dc.sum(dc.mul(dc.add(t, Tensor(w)), Tensor(w))),
        "sub": lambda t: dc.sum(dc.mul(dc.sub(Tensor(w), t), Tensor(w))),
        "mul": lambda t: dc.sum(dc.mul(t, t)),
        "div": lambda t: dc.sum(dc.div(Tensor(w), dc.add(dc.mul(t, t), 1.0))),
        "matmul": lambda t: dc.sum(dc.mul(dc.matmul(t, Tensor(m)), dc.matmul(t, Tensor(m)))),
        "exp": lambda t: dc.sum(dc.mul(dc.exp(t), Tensor(w))),
        "log": lambda t: dc.sum(dc.log(dc.add(dc.mul(t, t), 0.5))),
        "tanh": lambda t: dc.sum(dc.mul(dc.tanh(t), Tensor(w))),
        "relu": lambda t: dc.sum(dc.mul(dc.relu(t), Tensor(w))),
        "sum_axis": lambda t: dc.sum(dc.mul(dc.sum(t, axis=1), dc.sum(t, axis=1))),
        "mean": lambda t: dc.mul(dc.mean(t), dc.mean(t)),
        "slice": lambda t: dc.sum(dc.mul(t[1:, ::2], t[:2, 1::2])),
        "concat": lambda t: dc.sum(dc.mul(dc.concat([t, dc.mul(t, t)], axis=1),
                                          Tensor(np.hstack([w, w])))),
        "reshape": lambda t: dc.sum(dc.mul(dc.reshape(t, (2, 6)), Tensor(w.reshape(2, 6)))),
        "transpose": lambda t: dc.sum(dc.mul(dc.matmul(dc.transpose(t), t), dc.matmul(dc.transpose(t), t))),
        "logsumexp": lambda t: dc.sum(dc.mul(dc.logsumexp(t, axis=1), Tensor(w[:, 0]))),
        "log_softmax": lambda t: dc.sum(dc.mul(dc.log_softmax(t, axis=1), Tensor(w))),
    }


@pytest.mark.parametrize("name", sorted(_primitive_programs()))
def test_primitive_gradients_match_finite_differences(name):
    prog = _primitive_programs()[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((3, 4))
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        _, (g,) = dc.evaluate_with_gradients(prog, [x])
        numeric = central_diff(lambda v: float(prog(Tensor(v)).data), x, h=1e-5)
        rel = np.abs(g.data - numeric) / np.maximum(np.maximum(np.abs(g.data), np.abs(numeric)), 1e-4)
        worst = max(worst, rel.max())
    assert worst <= 1e-5, worst


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_of_sum_is_sum_of_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    f = lambda t: dc.sum(dc.tanh(dc.matmul(t, Tensor(b))))
    g = lambda t: dc.sum(dc.mul(dc.exp(dc.mul(t, 0.3)), Tensor(a)))
    _, (gf,) = dc.evaluate_with_gradients(f, [a])
    _, (gg,) = dc.evaluate_with_gradients(g, [a])
    _, (gs,) = dc.evaluate_with_gradients(lambda t: dc.add(f(t), g(t)), [a])
    np.testing.assert_allclose(gs.data, gf.data + gg.data, rtol=1e-12, atol=1e-14)


def test_forward_value_unchanged_by_gradient_tracking():
    x = np.random.default_rng(5).standard_normal((4, 8))
    layer = _coupling(2)
    plain, _ = layer.forward(Tensor(x))
    tracked, _ = dc.evaluate_with_gradients(lambda t: layer.forward(t)[0], [x],
                                             seed=np.ones((4, 8)))
    assert np.array_equal(plain.data, tracked.data)


def test_unsupported_primitive_is_named():
    with pytest.raises(dc.UnsupportedPrimitiveError, match="sin"):
        dc.evaluate_with_gradients(lambda t: np.sin(t), [1.0])


def test_numpy_scalar_operands_dispatch():
    value, (g,) = dc.evaluate_with_gradients(lambda t: np.float64(2.0) * t, [1.5])
    assert value.item() == 3.0 and g.item() == 2.0


def test_non_scalar_value_needs_seed():
    with pytest.raises(dc.ShapeError, match="seed"):
        dc.evaluate_with_gradients(lambda t: dc.mul(t, 2.0), [np.ones(3)])
    _, (g,) = dc.evaluate_with_gradients(lambda t: dc.mul(t, 2.0), [np.ones(3)], seed=np.arange(3.0))
    np.testing.assert_array_equal(g.data, [0.0, 2.0, 4.0])


def test_backward_replay_is_an_error():
    x = Tensor(2.0, requires_grad=True)
    with dc.Tape() as tape:
        y = dc.mul(x, x)
    tape.gradient(y, [x])
    assert len(tape) == 0
    with pytest.raises(dc.TapeError):
        tape.gradient(y, [x])


def test_implicit_rank_promotion_rejected():
    with pytest.raises(dc.ShapeError, match="rank"):
        dc.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    out = dc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))
    assert out.shape == (2, 3)


def test_broadcast_gradient_reduces_to_operand_shape():
    b = np.arange(3.0).reshape(1, 3)
    _, (gb,) = dc.evaluate_with_gradients(lambda t: dc.sum(dc.add(Tensor(np.ones((4, 3))), t)), [b])
    np.testing.assert_array_equal(gb.data, np.full((1, 3), 4.0))


def test_strict_mode_flags_non_finite():
    with pytest.raises(dc.NonFiniteError):
        dc.log(Tensor(np.array([-1.0])))
    with dc.strict(False):
        out = dc.log(Tensor(np.array([-1.0])))
    assert np.isnan(out.data).all()


def test_float32_precision_is_kept():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert dc.mul(x, 2.0).dtype == np.float32
    dc.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).dtype == np.float32
        assert Tensor(np.float64(1.0)).dtype == np.float64
        assert dc.sum(Tensor(np.ones(3, dtype=np.float64))).dtype == np.float64
    finally:
        dc.set_default_dtype(np.float64)


def test_finite_difference_check_exp_passes():
    rep = dc.finite_difference_check(lambda t: dc.sum(dc.exp(t)), np.array([0.0]), step=1e-5,
                                     tolerance=1e-5)
    assert rep.analytic[0] == 1.0
    assert abs(rep.numeric[0] - 1.0) < 1e-9
    assert rep.passed


def test_finite_difference_check_flags_kink():
    rep = dc.finite_difference_check(lambda t: dc.sum(dc.absolute(t)), np.array([0.0]),
                                     step=1e-5, tolerance=1e-5)
    assert rep.kinks == [0]
    assert not rep.passed


def test_finite_difference_check_coupling_logdet():
    layer = _coupling(4, dim=6)
    point = np.random.default_rng(9).standard_normal((1, 6))
    rep = dc.finite_difference_check(lambda t: dc.sum(layer.forward(t)[1]), point, step=1e-5,
                                     tolerance=1e-4)
    assert rep.passed, str(rep)


def test_finite_difference_check_rejects_non_finite_numeric():
    with dc.strict(False):
        with pytest.raises(dc.NonFiniteError, match="coordinate 0"):
            dc.finite_difference_check(lambda t: dc.sum(dc.log(t)), np.array([1e-7]), step=1e-5)
