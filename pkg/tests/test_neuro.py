import numpy as np
import pytest
from hypothesis import given, strategies as st

from csilab import gradcheck, neuro
from csilab.errors import FormatError, NumericalError


def conv_loops(x, w, stride):
    """Loop reference: circular cross-correlation with pad 1."""
    N, C, H, W = x.shape
    Ho, Wo = neuro.conv_output_size(H, stride[0]), neuro.conv_output_size(W, stride[1])
    y = np.zeros((N, w.shape[0], Ho, Wo))
    for n in range(N):
        for o in range(w.shape[0]):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(C):
                        for a in range(3):
                            for b in range(3):
                                s += w[o, c, a, b] * x[n, c, (i * stride[0] + a - 1) % H,
                                                       (j * stride[1] + b - 1) % W]
                    y[n, o, i, j] = s
    return y


def conv_zero_pad(x, w):
    H, W = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros((x.shape[0], w.shape[0], H, W))
    for i in range(H):
        for j in range(W):
            y[:, :, i, j] = np.einsum("ncab,ocab->no", xp[:, :, i:i + 3, j:j + 3], w)
    return y


# ---------------------------------------------------------------- conv

def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    y, _ = neuro.conv2d_circular(x, w)
    assert np.array_equal(y, x)


def test_conv_delta_is_cyclic_shift():
    x = np.random.default_rng(0).standard_normal((1, 1, 4, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 2] = 1          # reads x[i-1, j+1]
    y, _ = neuro.conv2d_circular(x, w)
    assert np.allclose(y, np.roll(x, (1, -1), axis=(2, 3)))
    assert not np.allclose(y, conv_zero_pad(x, w))


@pytest.mark.parametrize("stride", [(1, 1), (3, 1), (3, 3), (2, 2)])
def test_conv_matches_loops(stride):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 6, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    y, _ = neuro.conv2d_circular(x, w, stride)
    assert np.abs(y - conv_loops(x, w, stride)).max() < 1e-12


def test_conv_output_size_trace():
    trace = [(32, 8)]
    for s in [(1, 1), (1, 1), (3, 1), (3, 3), (3, 3), (3, 3)][1:]:
        h, w = trace[-1]
        trace.append((neuro.conv_output_size(h, s[0]), neuro.conv_output_size(w, s[1])))
    assert trace == [(32, 8), (32, 8), (11, 8), (4, 3), (2, 1), (1, 1)]


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        neuro.conv2d_circular(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


@given(st.integers(0, 3), st.integers(0, 4), st.integers(0, 2 ** 31))
def test_conv_shift_equivariance(dh, dw, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    shift = lambda a: np.roll(a, (dh, dw), axis=(2, 3))
    y, _ = neuro.conv2d_circular(shift(x), w)
    y0, _ = neuro.conv2d_circular(x, w)
    assert np.allclose(y, shift(y0), atol=1e-12)


def test_zero_padding_breaks_equivariance():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 1, 4, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    shift = lambda a: np.roll(a, (1, 2), axis=(2, 3))
    assert not np.allclose(conv_zero_pad(shift(x), w), shift(conv_zero_pad(x, w)))


# ---------------------------------------------------------------- batch norm

def test_batchnorm_train_statistics():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 3, 4, 2)) * 5 + 2
    rm, rv = np.zeros(3), np.ones(3)
    y, _ = neuro.batchnorm2d(x, np.ones(3), np.zeros(3), rm, rv, True, eps=0.0)
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-5
    n = 8 * 4 * 2
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_batchnorm_eval_identity():
    x = np.random.default_rng(4).standard_normal((1, 3, 2, 2))
    y, _ = neuro.batchnorm2d(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), False, eps=0.0)
    assert np.array_equal(y, x)


def test_batchnorm_rejects_single_sample():
    with pytest.raises(ValueError):
        neuro.batchnorm2d(np.ones((1, 2, 2, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)


# ---------------------------------------------------------------- pointwise and pooling

def test_leaky_relu_examples():
    assert np.allclose(neuro.leaky_relu(np.array([2.0, -2.0])), [2.0, -0.2])


def test_pool_examples():
    c = np.full((1, 2, 3, 4), 1.5)
    for kind in ("max", "avg"):
        assert np.allclose(neuro.global_pool(c, kind)[0], 1.5)
    h = np.zeros((1, 1, 3, 4))
    h[0, 0, 2, 1] = 6.0
    assert neuro.global_pool(h, "max")[0][0, 0] == 6.0
    assert neuro.global_pool(h, "avg")[0][0, 0] == pytest.approx(0.5)


def test_max_pool_tie_goes_to_first_index():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 0, 1] = x[0, 0, 1, 0] = 1.0
    _, cache = neuro.global_pool(x, "max")
    dx = neuro.global_pool_backward(np.ones((1, 1)), cache)
    assert dx[0, 0, 0, 1] == 1 and dx.sum() == 1


def test_sigmoid_and_dropout():
    assert neuro.sigmoid(np.array(0.0)) == 0.5
    x = np.arange(6.0)
    assert np.array_equal(neuro.dropout(x, 0.3, False, None)[0], x)
    rng = np.random.default_rng(5)
    mean = np.mean([neuro.dropout(x, 0.3, True, rng)[0] for _ in range(10_000)], axis=0)
    assert np.allclose(mean, x, atol=0.05 * x.max())


# ---------------------------------------------------------------- complex solve

def gauss_solve(A, B):
    """Gaussian elimination with partial pivoting."""
    A, B = A.astype(complex).copy(), B.astype(complex).copy()
    n = len(A)
    for i in range(n):
        p = i + np.argmax(np.abs(A[i:, i]))
        A[[i, p]], B[[i, p]] = A[[p, i]], B[[p, i]]
        for r in range(i + 1, n):
            f = A[r, i] / A[i, i]
            A[r] -= f * A[i]
            B[r] -= f * B[i]
    X = np.zeros_like(B)
    for i in reversed(range(n)):
        X[i] = (B[i] - A[i, i + 1:] @ X[i + 1:]) / A[i, i]
    return X


def test_complex_solve_identity_and_diagonal():
    rng = np.random.default_rng(6)
    B = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    X, back = neuro.complex_solve_grad(np.eye(2, dtype=complex), B)
    assert np.allclose(X, B)
    G = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    assert np.allclose(back(G)[1], G)
    D = np.diag([2.0, -4j])
    X, _ = neuro.complex_solve_grad(D, B)
    assert np.allclose(X, B / np.array([[2.0], [-4j]]))


def test_complex_solve_vs_elimination():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    B = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
    X, _ = neuro.complex_solve_grad(A, B)
    assert np.abs(X - gauss_solve(A, B)).max() < 1e-10
    assert all(r.passed for r in gradcheck.check_complex_solve(rng, 4, 2))


def test_complex_solve_singular():
    with pytest.raises(NumericalError):
        neuro.complex_solve_grad(np.ones((2, 2), complex), np.ones((2, 1), complex))


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_is_noop():
    p = neuro.ParamTensor(np.array([1.0, -2.0]))
    neuro.adam_step([p], neuro.AdamState(lr=0.1))
    assert np.array_equal(p.value, [1.0, -2.0])


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e6])
def test_adam_first_step_magnitude(scale):
    p = neuro.ParamTensor(np.array([0.0]))
    p.grad[:] = scale
    neuro.adam_step([p], neuro.AdamState(lr=1e-3))
    assert -p.value[0] == pytest.approx(1e-3, rel=1e-2)


def test_adam_quadratic_descends():
    p = neuro.ParamTensor(np.array([3.0]))
    st_ = neuro.AdamState(lr=1e-2)
    losses = []
    for _ in range(100):
        losses.append(float(p.value[0] ** 2))
        p.grad[:] = 2 * p.value
        neuro.adam_step([p], st_)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert st_.step == 100 and st_.m[0].shape == p.shape


def test_adam_default_lr():
    assert neuro.AdamState().lr == 3e-6


# ---------------------------------------------------------------- grad check

def test_linear_graph_exact():
    rng = np.random.default_rng(8)
    a = rng.standard_normal(5)
    x = rng.standard_normal(5)
    res = neuro.grad_check(lambda: (float(a @ x), {"x": a}), {"x": x})
    assert res[0].max_rel_error < 1e-10


def test_composed_graph():
    rng = np.random.default_rng(9)
    net = neuro.Sequential(neuro.Conv2dCircular(2, 3, (1, 1), rng, np.float64),
                           neuro.BatchNorm2d(3, dtype=np.float64), neuro.LeakyReLU(),
                           neuro.GlobalPool("max"), neuro.Dense(3, 2, rng, np.float64))
    x = rng.standard_normal((3, 2, 4, 3))
    r = rng.standard_normal((3, 2))
    arrays = {f"{i}": p.value for i, p in enumerate(net.params())}
    arrays["x"] = x

    def f():
        for p in net.params():
            p.zero_grad()
        y = net.forward(x, train=True)
        dx = net.backward(r)
        g = {f"{i}": p.grad.copy() for i, p in enumerate(net.params())}
        g["x"] = dx
        return float(np.sum(r * y)), g
    assert all(c.max_rel_error < 1e-4 for c in neuro.grad_check(f, arrays))


@pytest.mark.parametrize("name", [n for n in gradcheck.REGISTRY
                                  if n not in ("selector_network", "reconstructor_network")])
def test_registry_op(name):
    res = gradcheck.REGISTRY[name](np.random.default_rng(10))
    assert res and all(r.passed for r in res), [(r.name, r.max_rel_error) for r in res]


def test_negative_control_is_flagged():
    assert not all(r.passed for r in gradcheck.corrupted_control(np.random.default_rng(11)))


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    arrays = [np.arange(6, dtype=np.float32).reshape(2, 3), np.array([1.5], np.float32)]
    path = tmp_path / "m.csik"
    neuro.save_checkpoint(path, {"kind": "x"}, arrays)
    man, back = neuro.load_checkpoint(path)
    assert man["kind"] == "x" and man["shapes"] == [[2, 3], [1]]
    assert all(np.array_equal(a, b) for a, b in zip(arrays, back))


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing", "version"])
def test_checkpoint_corruption(tmp_path, mutate):
    path = tmp_path / "m.csik"
    neuro.save_checkpoint(path, {}, [np.zeros(4, np.float32)])
    data = bytearray(path.read_bytes())
    if mutate == "magic":
        data[0] ^= 1
    elif mutate == "truncate":
        data = data[:-2]
    elif mutate == "trailing":
        data += b"\0"
    else:
        data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        neuro.load_checkpoint(path)
