"""Registry of finite-difference checks for every differentiable op.

Each check runs in float64 on a small random instance and returns one
:class:`~csilab.neuro.GradCheckResult` per checked input. ``run_all`` is what
``csilab gradcheck`` prints; ``corrupted_control`` is a deliberately wrong
backward that must fail.
"""
from __future__ import annotations

import numpy as np

from . import models, neuro
from .neuro import GradCheckResult, grad_check
from .xform import build_angular_basis, build_delay_basis

TOL = 1e-4
TOL_SOLVE = 1e-3


def _linear_probe(rng, shape):
    return rng.standard_normal(shape)


def check_conv(rng, stride=(1, 1)):
    x = rng.standard_normal((2, 3, 7, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    r = _linear_probe(rng, (2, 4, neuro.conv_output_size(7, stride[0]),
                            neuro.conv_output_size(5, stride[1])))

    def f():
        y, cache = neuro.conv2d_circular(x, w, stride)
        dx, dw = neuro.conv2d_circular_backward(r, cache)
        return np.sum(r * y), {"x": dx, "w": dw}
    return grad_check(f, {"x": x, "w": w}, TOL)


def check_batchnorm(rng, train=True):
    x = rng.standard_normal((4, 3, 3, 2)) * 2 + 1
    g = rng.standard_normal(3)
    b = rng.standard_normal(3)
    r = _linear_probe(rng, x.shape)

    def f():
        y, cache = neuro.batchnorm2d(x, g, b, np.zeros(3), np.ones(3) * 1.5, train)
        dx, dg, db = neuro.batchnorm2d_backward(r, cache)
        return np.sum(r * y), {"x": dx, "gamma": dg, "beta": db}
    return grad_check(f, {"x": x, "gamma": g, "beta": b}, TOL)


def _elementwise(rng, fwd, bwd, shape=(3, 4)):
    x = rng.standard_normal(shape)
    x[np.abs(x) < 1e-3] += 0.01       # keep clear of kinks
    r = _linear_probe(rng, shape)

    def f():
        y = fwd(x)
        return np.sum(r * y), {"x": bwd(r, x, y)}
    return grad_check(f, {"x": x}, TOL)


def check_leaky_relu(rng):
    return _elementwise(rng, neuro.leaky_relu, lambda r, x, y: neuro.leaky_relu_backward(r, x))


def check_sigmoid(rng):
    return _elementwise(rng, neuro.sigmoid, lambda r, x, y: neuro.sigmoid_backward(r, y))


def corrupted_control(rng):
    """LeakyReLU with a wrong negative slope in backward; must fail."""
    return _elementwise(rng, neuro.leaky_relu,
                        lambda r, x, y: neuro.leaky_relu_backward(r, x, slope=0.2))


def check_pool(rng, kind="max"):
    x = rng.standard_normal((2, 3, 4, 3))
    r = _linear_probe(rng, (2, 3))

    def f():
        y, cache = neuro.global_pool(x, kind)
        return np.sum(r * y), {"x": neuro.global_pool_backward(r, cache)}
    return grad_check(f, {"x": x}, TOL)


def check_dense(rng):
    layer = neuro.Dense(5, 4, rng=rng, dtype=np.float64)
    x = rng.standard_normal((3, 5))
    r = _linear_probe(rng, (3, 4))
    W, b = layer.weight.value, layer.bias.value

    def f():
        layer.weight.zero_grad()
        layer.bias.zero_grad()
        y = layer.forward(x)
        dx = layer.backward(r)
        return np.sum(r * y), {"x": dx, "weight": layer.weight.grad, "bias": layer.bias.grad}
    return grad_check(f, {"x": x, "weight": W, "bias": b}, TOL)


def check_dropout(rng):
    x = rng.standard_normal((4, 6))
    r = _linear_probe(rng, x.shape)

    def f():
        y, mask = neuro.dropout(x, 0.3, True, np.random.default_rng(7))
        return np.sum(r * y), {"x": r * mask}
    return grad_check(f, {"x": x}, TOL)


def check_complex_solve(rng, n=3, k=2):
    Ar = rng.standard_normal((n, n)) + 3 * np.eye(n)
    Ai = rng.standard_normal((n, n))
    Br = rng.standard_normal((n, k))
    Bi = rng.standard_normal((n, k))
    R = rng.standard_normal((n, k)) + 1j * rng.standard_normal((n, k))

    def f():
        xr, xi, cache = neuro.complex_solve(Ar, Ai, Br, Bi)
        # L = Re sum conj(R) X, so dL/dX = R in the Re + j Im convention
        loss = np.sum(R.real * xr + R.imag * xi)
        ar, ai, br, bi = neuro.complex_solve_backward(R.real, R.imag, cache)
        return loss, {"A_re": ar, "A_im": ai, "B_re": br, "B_im": bi}
    return grad_check(f, {"A_re": Ar, "A_im": Ai, "B_re": Br, "B_im": Bi}, TOL_SOLVE)


def check_zf_sum_rate(rng, K=2, N=4, M=2):
    Hr = rng.standard_normal((K, N, M))
    Hi = rng.standard_normal((K, N, M))
    H_true = Hr + 0.3 * rng.standard_normal((K, N, M)) + 1j * (Hi + 0.3 * rng.standard_normal((K, N, M)))

    def f():
        R, back = neuro.zf_sum_rate(Hr + 1j * Hi, H_true, 4.0, 0.5)
        g = back(1.0)
        return R, {"H_re": g.real, "H_im": g.imag}
    return grad_check(f, {"H_re": Hr, "H_im": Hi}, TOL_SOLVE)


def _loss_check(rng, loss_fn):
    o = rng.uniform(0.05, 0.95, (2, 8))
    I = np.zeros((2, 8))
    I[:, :2] = 1

    def f():
        v, g = loss_fn(o, I)
        return v, {"o": g}
    return grad_check(f, {"o": o}, TOL)


def check_bce(rng):
    return _loss_check(rng, models.bce_loss)


def check_focal(rng):
    return _loss_check(rng, lambda o, I: models.focal_bce_loss(o, I, 2, 2.0))


def check_mse(rng):
    a = rng.standard_normal((2, 3, 2))
    b = rng.standard_normal((2, 3, 2))
    ref = rng.standard_normal((2, 3, 2)) + 1j * rng.standard_normal((2, 3, 2))

    def f():
        v, g = models.mse_loss(a + 1j * b, ref)
        return v, {"re": g.real, "im": g.imag}
    return grad_check(f, {"re": a, "im": b}, TOL)


def _net_check(rng, net, out_shape, tol=TOL):
    net.astype(np.float64)
    x = rng.standard_normal((3, 2, net.n_tx, net.M))
    r = _linear_probe(rng, out_shape)
    arrays = {f"{i}:{p.name}": p.value for i, p in enumerate(net.params())}
    arrays["input"] = x

    def f():
        net.set_rng(np.random.default_rng(3))
        net.zero_grad()
        y = net.forward(x, train=True)
        dx = net.backward(r)
        grads = {f"{i}:{p.name}": p.grad.copy() for i, p in enumerate(net.params())}
        grads["input"] = dx
        return np.sum(r * y), grads
    res = grad_check(f, arrays, tol)
    worst = max(res, key=lambda c: c.max_rel_error)
    return [GradCheckResult("all", worst.max_rel_error, all(c.passed for c in res))]


def check_selector_net(rng, channels=(4, 6)):
    net = models.SelectorNetwork(32, 8, channels, seed=int(rng.integers(1 << 30)))
    return _net_check(rng, net, (3, 256))


def check_reconstructor_net(rng, channels=(4, 6)):
    net = models.ReconstructorNetwork(32, 8, channels, w=0.5, seed=int(rng.integers(1 << 30)))
    return _net_check(rng, net, (3, 2, 32, 8))


def check_stage2(rng, K=2):
    ab = build_angular_basis(2, 1)
    db = build_delay_basis(1)
    N = ab.W_A.shape[0]
    Gr = rng.standard_normal((K, N, 1))
    Gi = rng.standard_normal((K, N, 1))
    ref = Gr + 0.2 * rng.standard_normal((K, N, 1)) + 1j * Gi
    H_true = ab.W_A @ ref @ db.W_D.conj().T

    def f():
        t = models.stage2_loss(Gr + 1j * Gi, ref, H_true, ab, db, 2.0, 0.1, mu=3.0)
        return t.loss, {"G_re": t.grad.real, "G_im": t.grad.imag}
    return grad_check(f, {"G_re": Gr, "G_im": Gi}, TOL_SOLVE)


REGISTRY = {
    "conv2d_circular(1,1)": lambda rng: check_conv(rng, (1, 1)),
    "conv2d_circular(3,1)": lambda rng: check_conv(rng, (3, 1)),
    "conv2d_circular(3,3)": lambda rng: check_conv(rng, (3, 3)),
    "batchnorm2d(train)": lambda rng: check_batchnorm(rng, True),
    "batchnorm2d(eval)": lambda rng: check_batchnorm(rng, False),
    "leaky_relu": check_leaky_relu,
    "sigmoid": check_sigmoid,
    "global_pool(max)": lambda rng: check_pool(rng, "max"),
    "global_pool(avg)": lambda rng: check_pool(rng, "avg"),
    "dense": check_dense,
    "dropout": check_dropout,
    "complex_solve": check_complex_solve,
    "zf_sum_rate": check_zf_sum_rate,
    "bce_loss": check_bce,
    "focal_bce_loss": check_focal,
    "mse_loss": check_mse,
    "selector_network": check_selector_net,
    "reconstructor_network": check_reconstructor_net,
    "stage2_loss": check_stage2,
}


def run_all(seed: int = 0, names=None) -> list[tuple[str, GradCheckResult]]:
    out = []
    for name, fn in REGISTRY.items():
        if names and name not in names:
            continue
        for r in fn(np.random.default_rng([seed, len(out)])):
            out.append((name, r))
    return out


def format_report(results, control=None) -> str:
    lines = [f"{'op':28s} {'input':14s} {'max_rel_err':>12s}  status"]
    for name, r in results:
        lines.append(f"{name:28s} {r.name:14s} {r.max_rel_error:12.3e}  {'ok' if r.passed else 'FAIL'}")
    if control is not None:
        ok = not all(c.passed for c in control)
        worst = max(c.max_rel_error for c in control)
        lines.append(f"{'corrupted-control':28s} {'x':14s} {worst:12.3e}  "
                     f"{'ok (fails as expected)' if ok else 'FAIL (control passed)'}")
    return "\n".join(lines)
