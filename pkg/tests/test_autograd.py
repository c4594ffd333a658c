import numpy as np
import pytest

from qatts import autograd as ag
from qatts.autograd import OptimizerState, Tensor, adam_step
from qatts.errors import ShapeError

from conftest import analytic_grad, numeric_grad, rel_error
from gradcases import CASES


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(ag.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_hand_product():
    np.testing.assert_array_equal(ag.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data, [[11]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2\).*\(1, 2\)"):
        ag.matmul(Tensor([[1, 2]]), Tensor([[1, 2]]))


def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, np.log(2.0)])).data, [1 / 3, 2 / 3], rtol=1e-6)


def test_softmax_shift_invariance_and_rows():
    x = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
    a = ag.softmax(Tensor(x), axis=-1).data
    b = ag.softmax(Tensor(x + 100.0), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)
    assert (a > 0).all()


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(ag.layer_norm(Tensor([[4.0, 4.0]]), ones, zeros).data, [[0, 0]])
    np.testing.assert_allclose(ag.layer_norm(Tensor([[1.0, 3.0]]), ones, zeros, eps=0.0).data, [[-1, 1]])
    beta = Tensor([0.5, -2.0])
    out = ag.layer_norm(Tensor([[1.0, 3.0], [7.0, -1.0]]), Tensor(np.zeros(2)), beta).data
    np.testing.assert_array_equal(out, [[0.5, -2.0], [0.5, -2.0]])


def test_layer_norm_statistics():
    x = np.random.default_rng(1).normal(3.0, 5.0, (16, 32))
    y = ag.layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32)), 1e-5).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-5
    assert np.abs(y.var(axis=-1) - 1).max() < 1e-3


def test_layer_norm_affine_shape_error():
    with pytest.raises(ShapeError):
        ag.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_mse_examples():
    p = Tensor([0.0, 0.0])
    assert ag.mse_loss(p, Tensor([1.0, 3.0])).item() == 5.0
    assert ag.mse_loss(Tensor([1.0, 3.0]), Tensor([1.0, 3.0])).item() == 0.0
    a, b = Tensor([0.3, -1.0, 2.0]), Tensor([1.0, 0.5, 0.0])
    assert ag.mse_loss(a, b).item() == ag.mse_loss(b, a).item()
    with pytest.raises(ShapeError):
        ag.mse_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_backward_against_detached_copy_is_zero():
    w = Tensor(np.random.default_rng(0).standard_normal((3, 3)), requires_grad=True)
    pred = ag.matmul(w, Tensor(np.ones((3, 1))))
    ag.mse_loss(pred, pred.detach()).backward()
    np.testing.assert_array_equal(w.grad, 0)


def test_scalar_product_rule():
    x, w = Tensor(3.0), Tensor(2.0, requires_grad=True)
    (x * w).backward()
    assert w.grad == 3.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_shared_node_visited_once_and_accumulated():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    z = y + y  # 2x^2 -> dz/dx = 4x
    z.backward()
    assert x.grad == 8.0


def test_custom_gradient_registry():
    @ag.register_gradient("test_double_grad")
    def _rule(out, g):
        return (7.0 * g,)

    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ag.apply("test_double_grad", x.data * 2, (x,))
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [7.0, 7.0])


def test_unregistered_op_rejected():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(KeyError):
        ag.apply("no_such_op", x.data, (x,))


# gradient checks


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_float64(name):
    rng = np.random.default_rng(123)
    fn, arrays = CASES[name](rng)
    num = numeric_grad(fn, arrays)
    ana = analytic_grad(fn, arrays, np.float64)
    for n, a in zip(num, ana):
        assert rel_error(a, n) < 1e-5


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_float32_twenty_instances(name):
    rng = np.random.default_rng(7)
    for _ in range(20):
        fn, arrays = CASES[name](rng)
        num = numeric_grad(fn, arrays)
        ana = analytic_grad(fn, arrays, np.float32)
        for n, a in zip(num, ana):
            assert rel_error(a, n) < 1e-2


def test_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    a0, b0 = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))

    def run():
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        out = ag.mse_loss(ag.softmax(ag.matmul(a, b)), Tensor(np.eye(4)))
        out.backward()
        return out.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_no_grad_builds_constants():
    x = Tensor([1.0], requires_grad=True)
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.op is None


# adam


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2, np.float32)}, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    g = np.array([0.5, -3.0, 1e-2], np.float32)
    p = {"w": Tensor(np.zeros(3))}
    state = OptimizerState(lr=1e-3)
    adam_step(p, {"w": g}, state)
    np.testing.assert_allclose(p["w"].data, -1e-3 * np.sign(g), rtol=1e-4)
    assert state.step == 1


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = {"w": Tensor(rng.standard_normal(5))}
        state = OptimizerState(lr=1e-2)
        for _ in range(10):
            adam_step(p, {"w": rng.standard_normal(5).astype(np.float32)}, state)
        return p["w"].data.tobytes(), state.step

    assert run() == run()
    assert run()[1] == 10


def test_float32_default_dtype():
    assert Tensor([1, 2]).data.dtype == np.float32
    with ag.precision(np.float64):
        assert Tensor([1, 2]).data.dtype == np.float64
