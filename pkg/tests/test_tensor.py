import numpy as np
import pytest

from espt import tensor as T
from espt.gradcheck import finite_difference, max_relative_error
from espt.tensor import SolverError, Tensor


def gauss_jordan_solve(a, b):
    """Independent row-reduction oracle for A X = B (partial pivoting)."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = a.shape[0]
    rhs = b.reshape(n, -1)
    aug = np.hstack([a, rhs])
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[pivot, col]) == 0.0:
            raise ZeroDivisionError("singular matrix in oracle")
        aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] = aug[col] / aug[col, col]
        for row in range(n):
            if row != col:
                aug[row] = aug[row] - aug[row, col] * aug[col]
    x = aug[:, n:]
    return x.reshape(b.shape)


# ---------------------------------------------------------------- solve_spd


def test_solve_identity_system():
    b = np.arange(6.0).reshape(3, 2)
    x = T.solve_spd(np.eye(3), b)
    np.testing.assert_array_equal(x.data, b)


def test_solve_diagonal_system():
    x = T.solve_spd([[2.0, 0.0], [0.0, 4.0]], [[2.0], [8.0]])
    np.testing.assert_allclose(x.data, [[1.0], [2.0]], rtol=1e-15)


def test_solve_matches_gauss_jordan_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = rng.normal(size=(8, 8))
        a = m @ m.T + np.eye(8)
        b = rng.normal(size=(8, 3))
        x = T.solve_spd(a, b).data
        ref = gauss_jordan_solve(a, b)
        assert np.max(np.abs(x - ref)) / np.max(np.abs(ref)) < 1e-9


def test_solve_residual_at_condition_1e6():
    rng = np.random.default_rng(11)
    q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
    a = q @ np.diag(np.logspace(0, -6, 12)) @ q.T
    a = (a + a.T) / 2
    b = rng.normal(size=(12, 4))
    x = T.solve_spd(a, b).data
    residual = np.max(np.abs(a @ x - b)) / np.max(np.abs(b))
    assert residual <= 1e-8


def test_solve_rejects_non_square():
    with pytest.raises(SolverError, match="square"):
        T.solve_spd(np.ones((2, 3)), np.ones((2, 1)))


def test_solve_rejects_row_mismatch():
    with pytest.raises(SolverError, match="rows"):
        T.solve_spd(np.eye(3), np.ones((2, 1)))


def test_solve_rejects_indefinite():
    a = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues -1 and 3
    with pytest.raises(SolverError, match="factorization"):
        T.solve_spd(a, np.ones((2, 1)))


def test_solve_backward_matches_finite_differences():
    # A is symmetric by precondition, so the finite-difference probe must
    # perturb it symmetrically: nudging the (i, j) lower entry moves the
    # implied (j, i) entry too, picking up grad[i, j] + grad[j, i].
    rng = np.random.default_rng(7)
    m = rng.normal(size=(5, 5))
    a = Tensor(m @ m.T + 2 * np.eye(5), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    w = rng.normal(size=(5, 2))

    def loss_fn():
        x = T.solve_spd(a, b)
        return float((x.data * w).sum())

    x = T.solve_spd(a, b)
    loss = (x * Tensor(w)).sum()
    loss.backward()
    fd = finite_difference(loss_fn, {"a": a, "b": b}, step=1e-5)
    assert max_relative_error(b.grad, fd["b"]) < 1e-6
    sym = a.grad + a.grad.T - np.diag(np.diag(a.grad))
    assert max_relative_error(np.tril(sym), np.tril(fd["a"])) < 1e-6


# ---------------------------------------------------------------- backward


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = (x ** 2).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_stop_grad_is_identity_forward():
    x = Tensor([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
    y = T.stop_grad(x)
    np.testing.assert_array_equal(y.data, x.data)
    assert not y.requires_grad


def test_stop_grad_blocks_flow():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (T.stop_grad(x) * 3.0).sum()
    loss.backward()
    assert x.grad is None


def test_product_rule_with_one_branch_cut():
    # d/dx [x * sg(x)] = sg(x), not 2x
    x = Tensor([1.5, -0.5, 2.0], requires_grad=True)
    loss = (x * T.stop_grad(x)).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, x.data)


def test_gradients_accumulate_across_uses():
    x = Tensor([2.0], requires_grad=True)
    loss = (x * 3.0 + x * x).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, [3.0 + 2 * 2.0])


def test_grad_shape_matches_value_shape():
    x = Tensor(np.ones((2, 1, 3)), requires_grad=True)
    y = Tensor(np.ones((4, 1)), requires_grad=True)
    loss = (x * y).sum()
    loss.backward()
    assert x.grad.shape == x.shape
    assert y.grad.shape == y.shape


def test_mixed_tensor_dtypes_rejected():
    a = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.ones(3, dtype=np.float64))
    with pytest.raises(TypeError, match="mixed"):
        a + b


# ------------------------------------------------- per-op gradient checks


def _check_op(build, arrays, tol=1e-4, step=1e-5):
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}

    def loss_fn():
        return build(params).item()

    loss = build(params)
    loss.backward()
    fd = finite_difference(loss_fn, params, step=step)
    for name, t in params.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = max_relative_error(grad, fd[name])
        assert err < tol, f"{name}: relative error {err}"


def _rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def test_grad_add_broadcast():
    _check_op(lambda p: ((p["a"] + p["b"]) ** 2).sum(),
              {"a": _rand((3, 4), 0), "b": _rand((4,), 1)})


def test_grad_sub_and_div():
    _check_op(lambda p: ((p["a"] - p["b"]) / (p["b"] * p["b"] + 2.0)).sum(),
              {"a": _rand((2, 3), 2), "b": _rand((2, 3), 3)})


def test_grad_mul_broadcast_scalar():
    _check_op(lambda p: (p["a"] * p["s"]).sum(),
              {"a": _rand((2, 2), 4), "s": _rand((), 5)})


def test_grad_pow():
    _check_op(lambda p: ((p["a"] ** 3) + (p["a"] ** -1)).sum(),
              {"a": np.abs(_rand((3, 3), 6)) + 1.0})


def test_grad_exp_log_sqrt():
    _check_op(lambda p: (p["a"].exp().log() * p["a"].sqrt()).sum(),
              {"a": np.abs(_rand((4,), 7)) + 0.5})


def test_grad_leaky_relu():
    a = _rand((5, 5), 8)
    a[np.abs(a) < 1e-2] += 0.1  # keep coordinates away from the kink
    _check_op(lambda p: (T.leaky_relu(p["a"], 0.1) ** 2).sum(), {"a": a})


def test_grad_sum_axes():
    _check_op(lambda p: (p["a"].sum(axis=(0, 2)) ** 2).sum(),
              {"a": _rand((2, 3, 4), 9)})


def test_grad_mean_axis_keepdims():
    _check_op(lambda p: ((p["a"] - p["a"].mean(axis=1, keepdims=True)) ** 2).mean(),
              {"a": _rand((3, 5), 10)})


def test_grad_reshape_transpose():
    _check_op(lambda p: (p["a"].reshape(6, 2).transpose(1, 0) ** 2).sum(),
              {"a": _rand((3, 4), 11)})


def test_grad_concat_stack():
    def build(p):
        c = T.concat([p["a"], p["b"]], axis=1)
        s = T.stack([p["a"], p["b"]], axis=0)
        return (c ** 2).sum() + (s ** 3).sum()
    _check_op(build, {"a": _rand((2, 3), 12), "b": _rand((2, 3), 13)})


def test_grad_take_with_repeats():
    _check_op(lambda p: (T.take(p["a"], [0, 2, 2, 1]) ** 2).sum(),
              {"a": _rand((3, 4), 14)})


@pytest.mark.parametrize("turns", [1, 2, 3])
def test_grad_rot90(turns):
    _check_op(lambda p: (T.rot90(p["a"], turns, axes=(1, 2)) * p["w"]).sum(),
              {"a": _rand((2, 4, 4, 3), 15), "w": _rand((2, 4, 4, 3), 16)})


def test_grad_matmul():
    _check_op(lambda p: ((p["a"] @ p["b"]) ** 2).sum(),
              {"a": _rand((3, 4), 17), "b": _rand((4, 2), 18)})


@pytest.mark.parametrize("kernel", [1, 3])
def test_grad_conv2d(kernel):
    _check_op(lambda p: ((T.conv2d(p["x"], p["w"])) ** 2).sum(),
              {"x": _rand((2, 3, 4, 4), 19), "w": _rand((5, 3, kernel, kernel), 20)})


def test_grad_maxpool2d():
    rng = np.random.default_rng(21)
    x = rng.permutation(64).astype(np.float64).reshape(1, 4, 4, 4)  # no ties
    _check_op(lambda p: (T.maxpool2d(p["x"]) ** 2).sum(), {"x": x})


def test_grad_solve_inside_composite():
    rng = np.random.default_rng(22)
    xc = rng.normal(size=(4, 3))

    def build(p):
        a = p["xc"] @ p["xc"].transpose(1, 0) + Tensor(0.5 * np.eye(4))
        w = T.solve_spd(a, p["xc"] @ p["f"].reshape(3, 1))
        return (w ** 2).sum()

    _check_op(build, {"xc": xc, "f": rng.normal(size=(3,))})


# ------------------------------------------------------------- op forward


def test_rot90_single_turn_counterclockwise():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    y = T.rot90(x, 1, axes=(0, 1))
    np.testing.assert_array_equal(y.data, [[2.0, 4.0], [1.0, 3.0]])


def test_rot90_rejects_non_square_quarter_turn():
    with pytest.raises(ValueError, match="square"):
        T.rot90(Tensor(np.ones((2, 3))), 1, axes=(0, 1))
    T.rot90(Tensor(np.ones((2, 3))), 2, axes=(0, 1))  # half turn is fine


def test_conv2d_delta_kernel_is_identity():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(2, 2, 5, 5))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    y = T.conv2d(Tensor(x), Tensor(w))
    np.testing.assert_allclose(y.data, x, atol=1e-12)


def test_maxpool_forward():
    x = np.array([[1.0, 2.0, 5.0, 0.0],
                  [3.0, 4.0, 1.0, 1.0],
                  [0.0, 0.0, 2.0, 2.0],
                  [9.0, 0.0, 0.0, 3.0]]).reshape(1, 1, 4, 4)
    y = T.maxpool2d(Tensor(x))
    np.testing.assert_array_equal(y.data.reshape(2, 2), [[4.0, 5.0], [9.0, 3.0]])


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        y = T.maxpool2d(T.conv2d(x, w))
        return T.leaky_relu(y).sum().item()

    assert run() == run()


# ------------------------------------------------------------ blob format


def test_blob_roundtrip(tmp_path):
    arr = np.random.default_rng(1).normal(size=(3, 2, 5))
    path = tmp_path / "t.bin"
    T.write_tensor_blob(path, arr)
    back = T.read_tensor_blob(path)
    np.testing.assert_array_equal(back, arr)
    assert back.dtype == np.float64


def test_blob_scalar_roundtrip(tmp_path):
    path = tmp_path / "s.bin"
    T.write_tensor_blob(path, np.float64(4.25))
    assert T.read_tensor_blob(path) == 4.25


def test_blob_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(ValueError, match="magic"):
        T.read_tensor_blob(path)


def test_blob_rejects_truncation(tmp_path):
    path = tmp_path / "t.bin"
    T.write_tensor_blob(path, np.ones((4, 4)))
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError, match="size"):
        T.read_tensor_blob(path)
