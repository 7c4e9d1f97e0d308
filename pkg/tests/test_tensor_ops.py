import numpy as np
import pytest

from selectmae import numerics as nm
from selectmae.errors import ContractError, NumericError, ShapeError
from selectmae.numerics.gradcheck import check_gradients


def test_matmul_identity():
    a = nm.Tensor(np.eye(2))
    b = nm.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(nm.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_case():
    a = nm.Tensor([[1.0, 2.0]])
    b = nm.Tensor([[3.0], [4.0]])
    np.testing.assert_allclose(nm.matmul(a, b).data, [[11.0]])


def test_matmul_shape_error_names_shapes():
    a = nm.Tensor(np.zeros((2, 3)))
    b = nm.Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        nm.matmul(a, b)


def test_matmul_gradcheck():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))

    def loss(params):
        prod = nm.matmul(params[0], params[1])
        return nm.reduce_sum(nm.mul(prod, prod))

    check_gradients(loss, [a, b], rel_tol=1e-3)


def test_softmax_uniform_and_stability():
    out = nm.softmax(nm.Tensor([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.25] * 4, atol=1e-7)
    big = nm.softmax(nm.Tensor([1000.0, 0.0]))
    assert np.isfinite(big.data).all()
    np.testing.assert_allclose(big.data, [1.0, 0.0], atol=1e-6)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    x = nm.Tensor(rng.standard_normal((5, 8)))
    y = nm.softmax(x, axis=-1)
    np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(5), atol=1e-6)
    assert (y.data > 0).all()


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        nm.softmax(nm.Tensor([np.nan, 0.0]))


def test_softmax_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(8)
    w = rng.standard_normal(8)

    def loss(params):
        return nm.reduce_sum(nm.mul(nm.softmax(params[0]), nm.Tensor(w)))

    check_gradients(loss, [x], rel_tol=1e-3)


def test_layer_norm_constant_row_is_zero():
    x = nm.Tensor(np.full((2, 4), 3.0))
    y = nm.layer_norm(x, nm.Tensor(np.ones(4)), nm.Tensor(np.zeros(4)), eps=1e-5)
    np.testing.assert_allclose(y.data, np.zeros((2, 4)), atol=1e-6)


def test_layer_norm_two_point_row():
    x = nm.Tensor([[1.0, 3.0]])
    y = nm.layer_norm(x, nm.Tensor(np.ones(2)), nm.Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 8))
    gain = rng.standard_normal(8)
    bias = rng.standard_normal(8)

    def loss(params):
        y = nm.layer_norm(params[0], params[1], params[2])
        return nm.reduce_sum(nm.mul(y, nm.Tensor(np.arange(8.0))))

    check_gradients(loss, [x, gain, bias], rel_tol=1e-3)


def test_backward_sum_gives_ones():
    x = nm.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with nm.Tape() as tape:
        loss = nm.reduce_sum(x)
    nm.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    x = nm.Tensor(np.ones(3), requires_grad=True)
    with nm.Tape() as tape:
        y = nm.scale(x, 2.0)
    with pytest.raises(ContractError):
        nm.backward(y, tape)


def test_stop_gradient_is_absorbing():
    rng = np.random.default_rng(5)
    xv = rng.standard_normal(4)
    x = nm.Tensor(xv, requires_grad=True)
    y = nm.Tensor(rng.standard_normal(4), requires_grad=True)
    with nm.Tape() as tape:
        loss = nm.reduce_sum(nm.mul(nm.stop_gradient(x), y))
    nm.backward(loss, tape)
    assert x.grad is None
    np.testing.assert_allclose(y.grad, xv.astype(np.float32), rtol=1e-6)


def test_backward_accumulates_across_paths():
    x = nm.Tensor(np.array([2.0]), requires_grad=True)
    with nm.Tape() as tape:
        loss = nm.reduce_sum(nm.mul(x, x))  # d/dx x^2 = 2x via two-path accumulation
    nm.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [4.0])


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(6)
    w_init = rng.standard_normal((5, 5)).astype(np.float32)
    x_init = rng.standard_normal((3, 5)).astype(np.float32)

    def run():
        w = nm.Tensor(w_init.copy(), requires_grad=True)
        x = nm.Tensor(x_init.copy())
        with nm.Tape() as tape:
            h = nm.gelu(nm.matmul(x, w))
            loss = nm.reduce_mean(nm.mul(h, h))
        nm.backward(loss, tape)
        return w.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_gather_rows_scatter_add_duplicates():
    x = nm.Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    with nm.Tape() as tape:
        picked = nm.gather_rows(x, [1, 1, 3])
        loss = nm.reduce_sum(picked)
    nm.backward(loss, tape)
    expected = np.array([[0, 0], [2, 2], [0, 0], [1, 1]], dtype=np.float32)
    np.testing.assert_array_equal(x.grad, expected)


def test_gather_rows_out_of_range():
    x = nm.Tensor(np.zeros((3, 2)))
    with pytest.raises(IndexError):
        nm.gather_rows(x, [0, 3])


def test_gather_rows_gradcheck():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 3))

    def loss(params):
        picked = nm.gather_rows(params[0], [0, 2, 2, 5])
        return nm.reduce_sum(nm.mul(picked, picked))

    check_gradients(loss, [x], rel_tol=1e-3)


def test_concat_rows_roundtrip_grads():
    a = nm.Tensor(np.ones((2, 3)), requires_grad=True)
    b = nm.Tensor(np.ones((1, 3)), requires_grad=True)
    with nm.Tape() as tape:
        joined = nm.concat_rows([a, b])
        loss = nm.reduce_sum(nm.mul(joined, nm.Tensor(np.arange(9.0).reshape(3, 3))))
    nm.backward(loss, tape)
    np.testing.assert_array_equal(a.grad, np.arange(6.0).reshape(2, 3).astype(np.float32))
    np.testing.assert_array_equal(b.grad, np.array([[6.0, 7.0, 8.0]], dtype=np.float32))


@pytest.mark.parametrize("seed", range(3))
def test_elementwise_and_reduction_gradchecks(seed):
    rng = np.random.default_rng(100 + seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    c = rng.standard_normal(4)

    def loss(params):
        s = nm.add(params[0], params[2])  # broadcast add
        p = nm.mul(s, params[1])
        g = nm.gelu(p)
        return nm.add(
            nm.reduce_mean(nm.absolute(g)),
            nm.reduce_sum(nm.reduce_mean(g, axis=0)),
        )

    check_gradients(loss, [a, b, c], rel_tol=1e-3, rng=rng)


def test_transpose_reshape_gradcheck():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 4))

    def loss(params):
        t = nm.transpose(params[0], (1, 0, 2))
        r = nm.reshape(t, (3, 8))
        return nm.reduce_sum(nm.mul(r, r))

    check_gradients(loss, [x], rel_tol=1e-3)


def test_log_and_log_softmax_agree():
    rng = np.random.default_rng(9)
    z = rng.standard_normal(6)
    p = nm.softmax(nm.Tensor(z))
    lp = nm.log_softmax(nm.Tensor(z))
    np.testing.assert_allclose(np.log(p.data), lp.data, atol=1e-6)

    def loss(params):
        lsm = nm.log_softmax(params[0])
        return nm.reduce_sum(nm.mul(lsm, nm.Tensor(np.arange(6.0))))

    check_gradients(loss, [z], rel_tol=1e-3)


def test_mlp_composite_gradcheck_float64():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 5))
    w1 = rng.standard_normal((5, 7)) * 0.5
    b1 = rng.standard_normal(7) * 0.1
    w2 = rng.standard_normal((7, 2)) * 0.5
    b2 = rng.standard_normal(2) * 0.1

    def loss(params):
        h = nm.gelu(nm.add(nm.matmul(nm.Tensor(x), params[0]), params[1]))
        out = nm.add(nm.matmul(h, params[2]), params[3])
        return nm.reduce_mean(nm.mul(out, out))

    worst = check_gradients(loss, [w1, b1, w2, b2], rel_tol=1e-5, dtype=np.float64)
    assert worst <= 1e-5


def test_batched_matmul_gradcheck():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 4, 3))

    def loss(params):
        prod = nm.matmul(params[0], params[1])
        return nm.reduce_sum(nm.mul(prod, prod))

    check_gradients(loss, [a, b], rel_tol=1e-3)
