import numpy as np
import pytest

from mmcot import tensor as T
from mmcot.errors import (
    ContractError,
    DegenerateInputError,
    FileFormatError,
    NonFiniteError,
    ParameterError,
    ShapeError,
)
from mmcot.tensor import Tensor

from oracles import check_gradients, matmul_loops, mean_rows_loops, softmax_direct


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------

def test_shape_matches_data():
    t = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert t.shape == (2, 3)
    assert t.size == 6


def test_nan_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        Tensor([float("inf")])


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor(np.eye(2)))
    assert np.array_equal(out.data, a.data)


def test_matmul_column():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0], [7.0]])


def test_matmul_matches_triple_loop(rng):
    # BLAS-backed product: summation order differs from the naive loop,
    # so agreement is at float64 machine precision rather than bitwise
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = T.matmul(Tensor(a), Tensor(b))
    assert np.allclose(out.data, matmul_loops(a, b), rtol=1e-12, atol=1e-15)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# --------------------------------------------------------------------------
# softmax
# --------------------------------------------------------------------------

def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(4, 5))
    base = T.softmax_rows(Tensor(x)).data
    shifted = T.softmax_rows(Tensor(x + 11.25)).data
    assert np.allclose(base, shifted, atol=1e-12)


def test_softmax_direct_formula():
    out = T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    assert np.allclose(out, softmax_direct([1.0, 2.0, 3.0]), atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    x = rng.normal(size=(6, 7)) * 10
    out = T.softmax_rows(Tensor(x)).data
    assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-9


def test_softmax_empty_row_errors():
    with pytest.raises(ShapeError):
        T.softmax_rows(Tensor(np.ones((2, 0))))


# --------------------------------------------------------------------------
# sigmoid / elementwise / concat / mean
# --------------------------------------------------------------------------

def test_sigmoid_zero_and_symmetry(rng):
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    x = rng.normal(size=(3, 3))
    s1 = T.sigmoid(Tensor(x)).data
    s2 = T.sigmoid(Tensor(-x)).data
    assert np.allclose(s1 + s2, 1.0, atol=1e-12)


def test_sigmoid_value():
    assert abs(T.sigmoid(Tensor([2.0])).data[0] - 0.8807970779778823) < 1e-12


def test_elementwise_identities(rng):
    a = Tensor(rng.normal(size=(2, 3)))
    assert np.array_equal(T.elementwise("mul", a, Tensor(np.ones((2, 3)))).data, a.data)
    assert np.array_equal(T.elementwise("add", a, Tensor(np.zeros((2, 3)))).data, a.data)
    out = T.elementwise("mul", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [3.0, 8.0])


def test_elementwise_unknown_op():
    with pytest.raises(ParameterError):
        T.elementwise("div", Tensor([1.0]), Tensor([2.0]))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0]))


def test_concat_last():
    a = Tensor([[1.0], [3.0]])
    b = Tensor([[2.0], [4.0]])
    out = T.concat_last(a, b)
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])
    empty = Tensor(np.zeros((2, 0)))
    assert np.array_equal(T.concat_last(a, empty).data, a.data)
    wide = T.concat_last(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5))))
    assert wide.shape == (2, 8)
    with pytest.raises(ShapeError):
        T.concat_last(a, Tensor(np.ones((3, 1))))


def test_mean_rows(rng):
    row = rng.normal(size=(1, 4))
    assert np.array_equal(T.mean_rows(Tensor(row)).data, row[0])
    sym = T.mean_rows(Tensor([[1.0, 3.0], [3.0, 1.0]]))
    assert np.array_equal(sym.data, [2.0, 2.0])
    x = rng.normal(size=(4, 3))
    assert np.allclose(T.mean_rows(Tensor(x)).data, mean_rows_loops(x), atol=1e-15)
    with pytest.raises(ShapeError):
        T.mean_rows(Tensor(np.zeros((0, 3))))


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic_gives_2x():
    x = Tensor([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data, atol=1e-15)


def test_backward_requires_scalar():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    y = T.mul(x, x)
    with pytest.raises(ContractError):
        T.backward(y)


def test_backward_accumulates():
    x = Tensor([2.0], requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    first = x.grad.copy()
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.allclose(x.grad, 2 * first)


def test_backward_linearity(rng):
    # grad of (loss1 + loss2) equals separate passes summed
    data = rng.normal(size=(3, 2))
    x1 = Tensor(data.copy(), requires_grad=True)
    loss = T.add(T.sum_all(T.mul(x1, x1)), T.mean_all(x1))
    T.backward(loss)
    combined = x1.grad.copy()

    T.reset_tape()
    x2 = Tensor(data.copy(), requires_grad=True)
    T.backward(T.sum_all(T.mul(x2, x2)))
    T.backward(T.mean_all(x2))
    assert np.allclose(combined, x2.grad, atol=1e-15)


def test_backward_detached_loss_errors():
    with pytest.raises(ContractError):
        T.backward(Tensor(1.0))


# --------------------------------------------------------------------------
# gradient checks for every primitive
# --------------------------------------------------------------------------

def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_gradcheck_matmul(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    check_gradients(lambda: T.sum_all(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b])


def test_gradcheck_softmax(rng):
    x = _rand(rng, 3, 5)
    w = Tensor(rng.normal(size=(3, 5)))
    check_gradients(lambda: T.sum_all(T.mul(T.softmax_rows(x), w)), [x])


def test_gradcheck_sigmoid_relu_bias(rng):
    x, b = _rand(rng, 4, 3), _rand(rng, 3)
    check_gradients(
        lambda: T.sum_all(T.sigmoid(T.relu(T.add_bias(x, b)))), [x, b])


def test_gradcheck_logsumexp_gather_diag(rng):
    x = _rand(rng, 4, 4)
    cols = [1, 0, 3, 2]
    check_gradients(
        lambda: T.add(T.mean_all(T.sub(T.row_logsumexp(x), T.gather_cols(x, cols))),
                      T.sum_all(T.take_diag(x))),
        [x])


def test_gradcheck_embed_concat_transpose(rng):
    table = _rand(rng, 5, 3)
    ids = [0, 2, 2, 4]
    def loss():
        e = T.embed_rows(table, ids)
        both = T.concat_last(e, e)
        return T.sum_all(T.mul(T.transpose(both), T.transpose(both)))
    check_gradients(loss, [table])


def test_gradcheck_norm_stack_mean(rng):
    vs = [_rand(rng, 4) for _ in range(3)]
    def loss():
        normed = [T.l2_normalize(v) for v in vs]
        return T.mean_all(T.mean_rows(T.stack_rows(normed)))
    check_gradients(loss, vs)


def test_gradcheck_scale_sub(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
    check_gradients(lambda: T.sum_all(T.scale(T.sub(a, b), 2.5)), [a, b])


# --------------------------------------------------------------------------
# sgd
# --------------------------------------------------------------------------

def test_sgd_zero_lr_keeps_params():
    p = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum_all(p))
    before = p.data.copy()
    T.sgd_step([p], lr=0.0)
    assert np.array_equal(p.data, before)
    assert p.grad is None


def test_sgd_scalar_step():
    p = Tensor(1.0, requires_grad=True)
    p.grad = np.asarray(2.0)
    T.sgd_step([p], lr=0.5)
    assert p.data == 0.0


def test_sgd_missing_grad():
    with pytest.raises(ContractError):
        T.sgd_step([Tensor([1.0], requires_grad=True)], lr=0.1)


def test_sgd_descends_quadratic():
    p = Tensor([3.0], requires_grad=True)

    def loss_value():
        T.reset_tape()
        loss = T.sum_all(T.mul(p, p))
        return loss

    l0 = float(loss_value().data)
    for _ in range(2):
        loss = loss_value()
        T.backward(loss)
        T.sgd_step([p], lr=0.1)
    assert float(loss_value().data) < l0


# --------------------------------------------------------------------------
# determinism, normalization misc
# --------------------------------------------------------------------------

def test_determinism_same_seed_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        y = T.softmax_rows(T.matmul(x, T.transpose(x)))
        loss = T.mean_all(y)
        T.backward(loss)
        return loss.data.copy(), x.grad.copy()

    (l1, g1) = run()
    T.reset_tape()
    (l2, g2) = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_l2_normalize_zero_vector():
    with pytest.raises(DegenerateInputError):
        T.l2_normalize(Tensor([0.0, 0.0]))


def test_independent_tapes_per_thread():
    import threading

    results = {}

    def worker(name, scale):
        # each thread gets its own tape; graphs never interfere
        T.reset_tape()
        x = Tensor(np.full((2, 2), scale), requires_grad=True)
        for _ in range(50):
            loss = T.sum_all(T.mul(x, x))
        T.backward(loss)
        results[name] = x.grad.copy()

    threads = [threading.Thread(target=worker, args=(f"t{i}", float(i + 1)))
               for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        assert np.allclose(results[f"t{i}"], 2.0 * (i + 1), atol=1e-12)


def test_no_grad_blocks_recording():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.sum_all(T.mul(x, x))
    assert not y.requires_grad
    with pytest.raises(ContractError):
        T.backward(y)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def test_tensor_roundtrip_bits(tmp_path, rng):
    t = Tensor(rng.normal(size=(3, 4)) * 1e-7)
    path = tmp_path / "t.txt"
    T.save_tensor(t, path)
    back = T.load_tensor(path)
    assert back.shape == t.shape
    assert back.data.tobytes() == t.data.tobytes()


def test_tensor_roundtrip_1d_and_scalar(tmp_path):
    for data in ([1.5, -2.25, 3.125], 7.75):
        path = tmp_path / "t.txt"
        T.save_tensor(Tensor(data), path)
        back = T.load_tensor(path)
        assert back.data.tobytes() == Tensor(data).data.tobytes()


def test_named_tensor_roundtrip(tmp_path, rng):
    named = {"a/w": Tensor(rng.normal(size=(2, 2))),
             "b": Tensor(rng.normal(size=(3,)))}
    path = tmp_path / "params.txt"
    T.save_named_tensors(path, named)
    back = T.load_named_tensors(path)
    assert list(back) == ["a/w", "b"]
    for k in named:
        assert back[k].data.tobytes() == named[k].data.tobytes()


def test_malformed_tensor_file(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("shape: 2 2\n1.0 2.0\n3.0\n")
    with pytest.raises(FileFormatError):
        T.load_tensor(bad)
