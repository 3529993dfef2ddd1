"""Small numpy autodiff kernel: exactly the layers the two CNNs need, each with
a hand-written backward pass, plus Adam, a finite-difference checker and a
checkpoint format.

Layers follow one protocol: ``forward(x, train)`` caches what ``backward``
needs, ``backward(dy)`` accumulates parameter gradients and returns ``dx``.
Complex quantities enter as paired real arrays; gradients of a real loss
with respect to a complex ``Z`` are carried as ``dL/dRe Z + 1j*dL/dIm Z``.
"""
from __future__ import annotations

import json
import math
import struct
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, NumericalError


@dataclass
class ParamTensor:
    value: np.ndarray
    name: str = ""
    requires_grad: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


class Layer:
    def params(self) -> list[ParamTensor]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def astype(self, dtype):
        for p in self.params():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.1) -> np.ndarray:
    gain = math.sqrt(2.0 / (1 + slope ** 2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


# ------------------------------------------------------------ convolution

def conv_output_size(n: int, stride: int) -> int:
    """Pad 1, kernel 3: ``floor((n + 2 - 3) / stride) + 1`` (equals ``ceil(n/stride)``)."""
    return (n - 1) // stride + 1


def _circular_taps(n: int, stride: int) -> np.ndarray:
    out = conv_output_size(n, stride)
    return (np.arange(out)[:, None] * stride + np.arange(3)[None, :] - 1) % n   # (out, 3)


def conv2d_circular(x: np.ndarray, w: np.ndarray, stride=(1, 1)):
    """3x3 convolution (cross-correlation) with circular padding of 1.

    ``x``: N x C_in x H x W, ``w``: C_out x C_in x 3 x 3. Returns ``(y, cache)``.
    """
    N, C, H, W = x.shape
    O, C2, kh, kw = w.shape
    if C2 != C or (kh, kw) != (3, 3):
        raise ValueError(f"kernel {w.shape} incompatible with input {x.shape}")
    rows = _circular_taps(H, stride[0])
    cols = _circular_taps(W, stride[1])
    Ho, Wo = len(rows), len(cols)
    xt = np.ascontiguousarray(x.transpose(0, 2, 3, 1))  # N,H,W,C
    patches = xt[:, rows[:, None, :, None], cols[None, :, None, :], :]        # N,Ho,Wo,3,3,C
    patches = patches.reshape(N * Ho * Wo, 9 * C)
    wm = w.transpose(0, 2, 3, 1).reshape(O, 9 * C)
    y = patches @ wm.T
    y = y.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (x.shape, patches, wm, w.shape, rows, cols)


def conv2d_circular_backward(dy: np.ndarray, cache):
    (N, C, H, W), patches, wm, wshape, rows, cols = cache
    O = wm.shape[0]
    Ho, Wo = len(rows), len(cols)
    dy2 = dy.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
    dw = (dy2.T @ patches).reshape(O, 3, 3, C).transpose(0, 3, 1, 2)
    L = Ho * Wo * 9
    dp = (dy2 @ wm).reshape(N, L, C).transpose(1, 0, 2).reshape(L, N * C)
    dx = _col2im_matrix(H, W, Ho, Wo, rows.tobytes(), cols.tobytes()) @ dp
    dx = dx.astype(dy.dtype, copy=False).reshape(H, W, N, C).transpose(2, 3, 0, 1)
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw)


@lru_cache(maxsize=64)
def _col2im_matrix(H, W, Ho, Wo, rows_b, cols_b):
    """Sparse 0/1 map summing patch entries back onto the input grid."""
    rows = np.frombuffer(rows_b, dtype=np.int64).reshape(Ho, 3)
    cols = np.frombuffer(cols_b, dtype=np.int64).reshape(Wo, 3)
    idx = (rows[:, None, :, None] * W + cols[None, :, None, :]).reshape(-1)
    return sp.csr_matrix((np.ones(idx.size, np.float32), (idx, np.arange(idx.size))),
                         shape=(H * W, idx.size))


class Conv2dCircular(Layer):
    def __init__(self, c_in, c_out, stride=(1, 1), rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.stride = tuple(stride)
        self.weight = ParamTensor(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9).astype(dtype), "weight")

    def params(self):
        return [self.weight]

    def forward(self, x, train=True):
        y, self._cache = conv2d_circular(x, self.weight.value, self.stride)
        return y

    def backward(self, dy):
        dx, dw = conv2d_circular_backward(dy, self._cache)
        self.weight.grad += dw
        return dx


# ------------------------------------------------------------ batch norm

def batchnorm2d(x, gamma, beta, running_mean, running_var, train: bool,
                momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization over (N, H, W). In train mode the running
    statistics are updated in place (unbiased variance, as is customary)."""
    if train:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv, gamma, train)


def batchnorm2d_backward(dy, cache):
    xhat, inv, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if train:
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dx = (inv[None, :, None, None] / n) * (
            n * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
    else:
        dx = dxhat * inv[None, :, None, None]
    return dx, dgamma, dbeta


class BatchNorm2d(Layer):
    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = ParamTensor(np.ones(c, dtype=dtype), "gamma")
        self.beta = ParamTensor(np.zeros(c, dtype=dtype), "beta")
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def forward(self, x, train=True):
        y, self._cache = batchnorm2d(x, self.gamma.value, self.beta.value, self.running_mean,
                                     self.running_var, train, self.momentum, self.eps)
        return y

    def backward(self, dy):
        dx, dg, db = batchnorm2d_backward(dy, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


# ------------------------------------------------------------ activations

def leaky_relu(x, slope=0.1):
    return np.maximum(x, slope * x) if 0 <= slope <= 1 else np.where(x > 0, x, slope * x)


def leaky_relu_backward(dy, x, slope=0.1):
    return np.where(x > 0, dy, slope * dy)


class LeakyReLU(Layer):
    def __init__(self, slope=0.1):
        self.slope = slope

    def forward(self, x, train=True):
        self._x = x
        return leaky_relu(x, self.slope)

    def backward(self, dy):
        return leaky_relu_backward(dy, self._x, self.slope)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)


class Sigmoid(Layer):
    def forward(self, x, train=True):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        return sigmoid_backward(dy, self._y)


# ------------------------------------------------------------ pooling / dense / dropout

def global_pool(x, kind="max"):
    N, C, H, W = x.shape
    flat = x.reshape(N, C, H * W)
    if kind == "max":
        idx = flat.argmax(axis=2)          # first maximal index on ties
        return np.take_along_axis(flat, idx[..., None], axis=2)[..., 0], (kind, x.shape, idx)
    if kind == "avg":
        return flat.mean(axis=2), (kind, x.shape, None)
    raise ValueError(f"unknown pooling {kind!r}")


def global_pool_backward(dy, cache):
    kind, shape, idx = cache
    N, C, H, W = shape
    if kind == "max":
        dx = np.zeros((N, C, H * W), dtype=dy.dtype)
        np.put_along_axis(dx, idx[..., None], dy[..., None], axis=2)
        return dx.reshape(shape)
    return np.broadcast_to((dy / (H * W))[..., None, None], shape).copy()


class GlobalPool(Layer):
    def __init__(self, kind="max"):
        self.kind = kind

    def forward(self, x, train=True):
        y, self._cache = global_pool(x, self.kind)
        return y

    def backward(self, dy):
        return global_pool_backward(dy, self._cache)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.weight = ParamTensor(kaiming_uniform(rng, (n_in, n_out), n_in).astype(dtype), "weight")
        bound = 1 / math.sqrt(n_in)
        self.bias = ParamTensor(rng.uniform(-bound, bound, n_out).astype(dtype), "bias")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=True):
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy):
        self.weight.grad += self._x.T @ dy
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value.T


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not train or rate == 0:
        return x, None
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * mask, mask


class Dropout(Layer):
    def __init__(self, rate):
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x, train=True):
        if train and self.rate > 0 and self.rng is None:
            raise RuntimeError("dropout needs an explicit rng in train mode")
        y, self._mask = dropout(x, self.rate, train, self.rng)
        return y

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self):
        return [p for l in self.layers for p in l.params()]

    def buffers(self):
        return [b for l in self.layers for b in l.buffers()]

    def astype(self, dtype):
        for l in self.layers:
            l.astype(dtype)
        return self

    def forward(self, x, train=True):
        for l in self.layers:
            x = l.forward(x, train)
        return x

    def backward(self, dy):
        for l in reversed(self.layers):
            dy = l.backward(dy)
        return dy


# ------------------------------------------------------------ complex solve

MAX_SOLVE_COND = 1e8


def complex_solve(A_re, A_im, B_re, B_im):
    """Solve ``A X = B`` for complex ``A`` given as real/imag pairs.

    Returns ``(X_re, X_im, cache)``. Raises :class:`NumericalError` when the
    condition number exceeds ``MAX_SOLVE_COND``.
    """
    A = np.asarray(A_re) + 1j * np.asarray(A_im)
    B = np.asarray(B_re) + 1j * np.asarray(B_im)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_SOLVE_COND:
        raise NumericalError(f"ill-conditioned solve (cond={cond:.3g})")
    X = np.linalg.solve(A, B)
    return X.real, X.imag, (A, X)


def complex_solve_backward(dX_re, dX_im, cache):
    """``dB = A^-H G``, ``dA = -dB X^H`` with ``G = dX_re + 1j*dX_im``."""
    A, X = cache
    G = np.asarray(dX_re) + 1j * np.asarray(dX_im)
    dB = np.linalg.solve(A.conj().T, G)
    dA = -dB @ X.conj().T
    return dA.real, dA.imag, dB.real, dB.imag


def complex_solve_grad(A: np.ndarray, B: np.ndarray):
    """Complex-array convenience wrapper: returns ``X`` and a backward closure
    mapping ``dL/dX`` to ``(dL/dA, dL/dB)`` in the same convention."""
    xr, xi, cache = complex_solve(A.real, A.imag, B.real, B.imag)

    def backward(G):
        ar, ai, br, bi = complex_solve_backward(G.real, G.imag, cache)
        return ar + 1j * ai, br + 1j * bi

    return xr + 1j * xi, backward


# ------------------------------------------------------------ differentiable ZF sum rate

def zf_sum_rate(H_hat: np.ndarray, H_true: np.ndarray, p_tx: float, sigma2: float):
    """Average sum rate of equal-power ZF built from estimates.

    ``H_hat``/``H_true``: (K, N_tx, M) complex. Returns ``(R_avg, backward)``
    where ``backward(g)`` gives ``d(g*R_avg)/dH_hat`` (complex convention).
    The estimates are row-normalized per subband before the Gram inverse, as
    in :func:`csilab.precoding.zf_precode`.
    """
    K, N, M = H_hat.shape
    p_col = p_tx / (M * K)
    R_total = 0.0
    tapes = []
    for m in range(M):
        h = H_hat[:, :, m]                              # K x N (rows h_k)
        nrm = np.linalg.norm(h, axis=1)
        if np.any(nrm == 0):
            raise NumericalError(f"zero channel estimate on subband {m}")
        hn = h / nrm[:, None]
        A = hn.conj()                                   # rows h^H
        gram = A @ A.conj().T
        Ginv, solve_bwd = complex_solve_grad(gram, np.eye(K, dtype=complex))
        U = A.conj().T @ Ginv                           # N x K
        un = np.linalg.norm(U, axis=0)
        V = U / un[None, :] * math.sqrt(p_col)
        T = H_true[:, :, m].conj() @ V                  # K x K, T[k, j] = h_k^H v_j
        g = np.abs(T) ** 2
        sig = np.diag(g).copy()
        tot = g.sum(axis=1) + sigma2
        R_total += np.sum(np.log2(tot) - np.log2(tot - sig))
        tapes.append((h, nrm, hn, A, Ginv, solve_bwd, U, un, V, T, tot, sig, m))
    R_avg = R_total / M

    def backward(grad_out=1.0):
        dH = np.zeros_like(H_hat)
        c = grad_out / (M * math.log(2))
        for h, nrm, hn, A, Ginv, solve_bwd, U, un, V, T, tot, sig, m in tapes:
            # R = sum_k log(tot_k) - log(tot_k - sig_k), g = |T|^2
            dtot = 1 / tot - 1 / (tot - sig)
            dg = np.repeat(dtot[:, None], K, axis=1)
            dg[np.diag_indices(K)] += 1 / (tot - sig)
            dT = c * 2 * T * dg
            dV = H_true[:, :, m].T @ dT                 # T[k,j] = h_k^H v_j
            # V = U / un * s
            s = math.sqrt(p_col)
            dU = s * (dV / un[None, :] - U * (np.real(np.sum(U.conj() * dV, axis=0)) / un ** 3)[None, :])
            # U = A^H Ginv
            dAH = dU @ Ginv.conj().T
            dGinv = A @ dU
            dgram, _ = solve_bwd(dGinv)
            # gram = A A^H
            dA = dAH.conj().T + (dgram + dgram.conj().T) @ A
            dhn = dA.conj()
            # hn = h / nrm
            dh = dhn / nrm[:, None] - h * (np.real(np.sum(h.conj() * dhn, axis=1)) / nrm ** 3)[:, None]
            dH[:, :, m] = dh
        return dH

    return R_avg, backward


# ------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: float = 3e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init(self, params):
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        return self


def adam_step(params: list[ParamTensor], state: AdamState) -> None:
    if not state.m:
        state.init(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if not p.requires_grad:
            continue
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.value -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.value.dtype)


# ------------------------------------------------------------ gradient check

@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    passed: bool


def rel_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def grad_check(loss_and_grads, arrays: dict[str, np.ndarray], tol: float = 1e-4,
               h: float = 1e-6) -> list[GradCheckResult]:
    """Compare analytic gradients against central differences.

    ``loss_and_grads()`` returns ``(loss, {name: grad})`` evaluated at the
    current contents of ``arrays`` (which the checker perturbs in place).
    The relative error is max-abs difference over max-abs magnitude.
    """
    _, analytic = loss_and_grads()
    analytic = {k: np.array(v, dtype=float) for k, v in analytic.items()}
    out = []
    for name, x in arrays.items():
        num = numeric_grad(lambda: float(loss_and_grads()[0]), x, h)
        err = rel_error(analytic[name], num)
        out.append(GradCheckResult(name, err, bool(err < tol)))
    return out


# ------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"CSIK"
CKPT_VERSION = 1


def save_checkpoint(path, manifest: dict, arrays: list[np.ndarray]) -> None:
    """Manifest JSON followed by little-endian float32 blobs in declaration order."""
    manifest = dict(manifest, version=CKPT_VERSION,
                    shapes=[list(a.shape) for a in arrays])
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(head)))
        f.write(head)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, n = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(data[12:12 + n])
    pos = 12 + n
    arrays = []
    for shape in manifest["shapes"]:
        cnt = int(np.prod(shape)) if shape else 1
        end = pos + 4 * cnt
        if end > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        arrays.append(np.frombuffer(data[pos:end], dtype="<f4").reshape(shape).copy())
        pos = end
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return manifest, arrays
