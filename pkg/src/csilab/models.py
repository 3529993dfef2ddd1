"""Port selector and CSI reconstructor networks, their losses and training loops.

Both networks share a five-block circular-padded conv trunk that maps a
2 x N_tx x M real tensor (real/imag planes of an angular-delay grid) down to a
1 x 1 map:

    32x8 -(1,1)-> 32x8 -(3,1)-> 11x8 -(3,3)-> 4x3 -(3,3)-> 2x1 -(3,3)-> 1x1

The selector ends in max pooling, dropout 0.3, a dense layer and a sigmoid;
the reconstructor in average pooling, dropout 0.1 and a dense layer whose
output is scaled by ``w`` and added back to the input grid.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import neuro
from .codebook import PortIndexSet, top_p_indices
from .errors import NumericalError
from .neuro import (BatchNorm2d, Conv2dCircular, Dense, Dropout, GlobalPool, Layer,
                    LeakyReLU, Sequential, Sigmoid)
from .xform import AngularBasis, DelayBasis

STRIDES = ((1, 1), (3, 1), (3, 3), (3, 3), (3, 3))
EPS = 1e-7


# ------------------------------------------------------------ preprocessing

def grid_to_planes(G: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(..., N, M) complex -> (..., 2, N, M) real."""
    return np.stack([G.real, G.imag], axis=-3).astype(dtype)


def planes_to_grid(x: np.ndarray) -> np.ndarray:
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def preprocess_selector_input(H: np.ndarray, ab: AngularBasis, db: DelayBasis,
                              dtype=np.float32) -> np.ndarray:
    """Angular-delay transform, max-modulus normalization, real/imag split.

    ``H`` is N_tx x M or a stack (..., N_tx, M); each matrix is normalized on
    its own.
    """
    H = np.asarray(H)
    G = ab.W_A.conj().T @ H @ db.W_D
    peak = np.max(np.abs(G), axis=(-2, -1), keepdims=True)
    if np.any(peak == 0) or not np.all(np.isfinite(peak)):
        raise ValueError("selector input must be finite and nonzero")
    return grid_to_planes(G / peak, dtype)


def frobenius_normalize(G: np.ndarray) -> np.ndarray:
    """Scale each trailing (N, M) grid to unit Frobenius norm."""
    nrm = np.linalg.norm(G, axis=(-2, -1), keepdims=True)
    if np.any(nrm == 0):
        raise ValueError("cannot normalize an all-zero grid")
    return G / nrm


# ------------------------------------------------------------ networks

def conv_block(c_in, c_out, stride, rng, dtype=np.float32) -> Sequential:
    return Sequential(Conv2dCircular(c_in, c_out, stride, rng=rng, dtype=dtype),
                      BatchNorm2d(c_out, dtype=dtype), LeakyReLU(0.1))


def conv_trunk(channels=(64, 128), rng=None, dtype=np.float32) -> Sequential:
    c1, c2 = channels
    chans = [(2, c1), (c1, c2), (c2, c2), (c2, c2), (c2, c2)]
    return Sequential(*[conv_block(a, b, s, rng, dtype) for (a, b), s in zip(chans, STRIDES)])


def trunk_output_size(n_tx: int, M: int) -> tuple[int, int]:
    h, w = n_tx, M
    for sh, sw in STRIDES:
        h, w = neuro.conv_output_size(h, sh), neuro.conv_output_size(w, sw)
    return h, w


class _Net(Layer):
    """Shared plumbing: parameters, buffers, dropout rng, state arrays."""

    def params(self):
        return self.body.params()

    def buffers(self):
        return self.body.buffers()

    def astype(self, dtype):
        self.body.astype(dtype)
        self.dtype = dtype
        return self

    def set_rng(self, rng: np.random.Generator | None):
        self.dropout.rng = rng

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def state_arrays(self) -> list[np.ndarray]:
        return [p.value for p in self.params()] + self.buffers()

    def load_state_arrays(self, arrays):
        targets = self.state_arrays()
        if len(arrays) != len(targets):
            raise ValueError(f"expected {len(targets)} arrays, got {len(arrays)}")
        for t, a in zip(targets, arrays):
            if t.shape != a.shape:
                raise ValueError(f"shape mismatch {t.shape} vs {a.shape}")
            t[...] = a

    def copy_state(self) -> list[np.ndarray]:
        return [a.copy() for a in self.state_arrays()]


class SelectorNetwork(_Net):
    """Multi-label port-priority network. Input (B, 2, N_tx, M), output (B, N_tx*M)."""

    def __init__(self, n_tx: int = 32, M: int = 8, channels=(64, 128), dropout: float = 0.3,
                 seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.n_tx, self.M, self.channels, self.dtype = n_tx, M, tuple(channels), dtype
        self.dropout = Dropout(dropout)
        self.head = Dense(channels[1], n_tx * M, rng=rng, dtype=dtype)
        self.body = Sequential(conv_trunk(channels, rng, dtype), GlobalPool("max"),
                               self.dropout, self.head, Sigmoid())

    def forward(self, x, train=True):
        return self.body.forward(x, train)

    def backward(self, dy):
        return self.body.backward(dy)


class ReconstructorNetwork(_Net):
    """Weighted-shortcut grid refiner: y = x + w * branch(x), shapes (B, 2, N_tx, M)."""

    def __init__(self, n_tx: int = 32, M: int = 8, channels=(64, 128), dropout: float = 0.1,
                 w: float = 0.05, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.n_tx, self.M, self.channels, self.dtype = n_tx, M, tuple(channels), dtype
        self.w = w
        self.dropout = Dropout(dropout)
        self.head = Dense(channels[1], 2 * n_tx * M, rng=rng, dtype=dtype)
        self.body = Sequential(conv_trunk(channels, rng, dtype), GlobalPool("avg"),
                               self.dropout, self.head)

    def forward(self, x, train=True):
        branch = self.body.forward(x, train).reshape(x.shape)
        return x + self.w * branch

    def backward(self, dy):
        dx_branch = self.body.backward(self.w * dy.reshape(dy.shape[0], -1))
        return dy + dx_branch


def selector_forward(net: SelectorNetwork, x: np.ndarray) -> np.ndarray:
    """Deterministic (eval-mode) priorities for one input or a batch."""
    single = x.ndim == 3
    out = net.forward(x[None] if single else x, train=False)
    return out[0] if single else out


def reconstructor_forward(net: ReconstructorNetwork, G: np.ndarray) -> np.ndarray:
    """Refine normalized complex grid(s) (..., N_tx, M) in eval mode."""
    single = G.ndim == 2
    x = grid_to_planes(G[None] if single else G, net.dtype)
    y = planes_to_grid(net.forward(x, train=False).astype(float))
    return y[0] if single else y


# ------------------------------------------------------------ selection

def top_p_ports(o: np.ndarray, P: int, n_tx: int, M: int) -> PortIndexSet:
    """The P ports with the largest priorities; ties go to the lower row-major index."""
    o = np.asarray(o).reshape(-1)
    if o.size != n_tx * M:
        raise ValueError(f"expected {n_tx * M} priorities, got {o.size}")
    return PortIndexSet.from_flat(top_p_indices(o, P), n_tx, M)


def port_labels(grid_power: np.ndarray, P: int) -> np.ndarray:
    """Binary labels marking the P strongest ports of each grid (..., N, M) -> (..., N*M)."""
    flat = grid_power.reshape(*grid_power.shape[:-2], -1)
    order = np.argsort(-flat, axis=-1, kind="stable")[..., :P]
    lab = np.zeros(flat.shape, dtype=np.float32)
    np.put_along_axis(lab, order, 1.0, axis=-1)
    return lab


# ------------------------------------------------------------ losses

def _clamp(o):
    o = np.asarray(o, dtype=float)
    inside = (o > EPS) & (o < 1 - EPS)
    return np.clip(o, EPS, 1 - EPS), inside


def bce_loss(o: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy over all ports (and batch). Returns (loss, dloss/do)."""
    oc, inside = _clamp(o)
    I = np.asarray(labels, dtype=float)
    n = oc.size
    loss = -np.sum(I * np.log(oc) + (1 - I) * np.log(1 - oc)) / n
    grad = -(I / oc - (1 - I) / (1 - oc)) / n
    return float(loss), grad * inside


def focal_bce_loss(o: np.ndarray, labels: np.ndarray, P: int, gamma: float = 2.0
                   ) -> tuple[float, np.ndarray]:
    """Class-balanced focal BCE. Positive ports are weighted by (N-P)/N*(1-o)^gamma,
    negative ports by P/N*o^gamma, where N is the number of ports per sample.
    Returns (loss, dloss/do); the loss is averaged over ports and batch."""
    oc, inside = _clamp(o)
    I = np.asarray(labels, dtype=float)
    n_ports = oc.shape[-1]
    a_pos = (n_ports - P) / n_ports
    a_neg = P / n_ports
    lo, l1 = np.log(oc), np.log(1 - oc)
    mod_pos = (1 - oc) ** gamma
    mod_neg = oc ** gamma
    n = oc.size
    loss = -np.sum(a_pos * mod_pos * I * lo + a_neg * mod_neg * (1 - I) * l1) / n
    # d/do of (1-o)^g log o and o^g log(1-o)
    d_pos = -gamma * (1 - oc) ** (gamma - 1) * lo + mod_pos / oc
    d_neg = gamma * oc ** (gamma - 1) * l1 - mod_neg / (1 - oc)
    grad = -(a_pos * I * d_pos + a_neg * (1 - I) * d_neg) / n
    return float(loss), grad * inside


def mse_loss(G_hat: np.ndarray, G_ref: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over UEs of ||G_hat - G_ref||_F^2 / (N_tx*M) for stacks (K, N_tx, M).

    The gradient uses the complex convention dL/dRe + j dL/dIm.
    """
    G_hat, G_ref = np.asarray(G_hat), np.asarray(G_ref)
    if G_hat.ndim == 2:
        G_hat, G_ref = G_hat[None], G_ref[None]
    d = G_hat - G_ref
    n = d.size
    return float(np.sum(np.abs(d) ** 2) / n), 2 * d / n


@dataclass
class Stage2Terms:
    loss: float
    R_avg: float
    mse: float
    grad: np.ndarray


def stage2_loss(G_hat: np.ndarray, G_ref: np.ndarray, H_true: np.ndarray,
                ab: AngularBasis, db: DelayBasis, p_tx: float, sigma2: float,
                mu: float = 2000.0) -> Stage2Terms:
    """-R_avg + mu*MSE for the K UEs of one drop.

    ``G_hat``/``G_ref``: (K, N_tx, M) angular-delay grids (normalized),
    ``H_true``: (K, N_tx, M) true DL channels. ZF precoders are built from the
    space-frequency channels of ``G_hat``; any per-UE scale of ``G_hat`` is
    irrelevant to the rate. Raises :class:`NumericalError` on a singular
    Gram matrix so the caller can skip the sample.
    """
    H_hat = ab.W_A @ G_hat @ db.W_D.conj().T
    R, back = neuro.zf_sum_rate(H_hat, H_true, p_tx, sigma2)
    mse, dmse = mse_loss(G_hat, G_ref)
    dH = back(-1.0)
    dG = ab.W_A.conj().T @ dH @ db.W_D
    return Stage2Terms(-R + mu * mse, R, mse, dG + mu * dmse)


def should_switch(val_rates, delta: float = 0.02, patience: int = 5) -> int | None:
    """Epoch index (0-based) after which stage 2 starts, or None.

    The switch fires once ``patience`` consecutive epochs each improve the
    validation R_avg by less than ``delta`` over the previous epoch.
    """
    run = 0
    for e in range(1, len(val_rates)):
        if val_rates[e] - val_rates[e - 1] < delta:
            run += 1
            if run >= patience:
                return e
        else:
            run = 0
    return None


# ------------------------------------------------------------ training data

@dataclass
class SelectorData:
    """Flattened per-UE samples for the selector.

    ``inputs``: (S, n, 2, N, M) preprocessed noisy UL, one slab per SNR in
    ``snr_list``; ``labels``: (n, N*M) top-P of the clean UL grid;
    ``dl_power``: (n, N*M) DL port powers for P_N.
    """
    inputs: np.ndarray
    labels: np.ndarray
    dl_power: np.ndarray
    snr_list: tuple
    P: int

    def __len__(self):
        return self.labels.shape[0]

    def snr_index(self, snr_db: float) -> int:
        return list(self.snr_list).index(float(snr_db))


def _grid_power(H, ab, db):
    G = ab.W_A.conj().T @ H @ db.W_D
    return np.abs(G) ** 2


def prepare_selector_data(ds, ab: AngularBasis, db: DelayBasis, P: int,
                          snr_list=None) -> SelectorData:
    snr_list = tuple(float(s) for s in (snr_list if snr_list is not None else ds.snr_list))
    N, M = ds.ul_clean.shape[-2:]
    flat = lambda a: a.reshape(-1, N, M).astype(complex)
    inputs = np.stack([preprocess_selector_input(flat(ds.noisy(s)), ab, db) for s in snr_list])
    labels = port_labels(_grid_power(flat(ds.ul_clean), ab, db), P)
    dl_power = _grid_power(flat(ds.dl), ab, db).reshape(-1, N * M)
    return SelectorData(inputs, labels, dl_power, snr_list, P)


def normalized_power_batch(dl_power: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """P_N per row: power on ``chosen`` flat indices over total power."""
    return np.take_along_axis(dl_power, chosen, axis=1).sum(axis=1) / dl_power.sum(axis=1)


def select_flat(scores: np.ndarray, P: int) -> np.ndarray:
    """Row-wise top-P flat indices (stable, lower index wins ties)."""
    return np.argsort(-scores, axis=1, kind="stable")[:, :P]


def predict_priorities(net: SelectorNetwork, x: np.ndarray, batch: int = 256) -> np.ndarray:
    return np.concatenate([net.forward(x[i:i + batch], train=False)
                           for i in range(0, len(x), batch)])


# ------------------------------------------------------------ selector training

@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = -math.inf
    switch_epoch: int | None = None
    skipped: int = 0

    def to_dict(self):
        return {"rows": self.rows, "best_epoch": self.best_epoch,
                "best_metric": self.best_metric, "switch_epoch": self.switch_epoch,
                "skipped": self.skipped}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""
    net: _Net
    adam: neuro.AdamState
    history: TrainHistory
    best_state: list
    epoch: int = 0                 # next epoch to run
    stage: int = 1


def _epoch_rngs(seed: int, epoch: int):
    return (np.random.default_rng([seed, epoch, 0]), np.random.default_rng([seed, epoch, 1]))


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        b = order[i:i + size]
        if len(b) >= 2:                # batch norm needs two samples
            yield b


def evaluate_selector(net: SelectorNetwork, data: SelectorData, snr_db: float) -> np.ndarray:
    """Per-sample P_N of the network's top-P choice at one SNR."""
    o = predict_priorities(net, data.inputs[data.snr_index(snr_db)])
    return normalized_power_batch(data.dl_power, select_flat(o, data.P))


def new_selector_state(cfg, n_tx: int, M: int) -> TrainState:
    net = SelectorNetwork(n_tx, M, cfg.channels, seed=cfg.seed)
    return TrainState(net, neuro.AdamState(lr=cfg.lr), TrainHistory(), net.copy_state())


def train_selector(train: SelectorData, val: SelectorData, cfg, state: TrainState | None = None,
                   epochs: int | None = None, log=None) -> TrainState:
    """Minibatch Adam on the focal loss. Each sample's SNR is redrawn every
    epoch from ``cfg.snr_list``. Runs until ``cfg.epochs`` (or ``epochs``
    more epochs when given) and keeps the weights with the best validation P_N.
    """
    n_tx, M = train.inputs.shape[-2:]
    state = state or new_selector_state(cfg, n_tx, M)
    net = state.net
    snr_pick = [train.snr_index(s) for s in cfg.snr_list]
    stop = cfg.epochs if epochs is None else min(cfg.epochs, state.epoch + epochs)
    while state.epoch < stop:
        e = state.epoch
        rng, drop_rng = _epoch_rngs(cfg.seed, e)
        order = rng.permutation(len(train))
        snr_idx = np.asarray(snr_pick)[rng.integers(0, len(snr_pick), len(train))]
        net.set_rng(drop_rng)
        tot, cnt = 0.0, 0
        for b in _batches(order, cfg.batch_size):
            x = train.inputs[snr_idx[b], b]
            net.zero_grad()
            o = net.forward(x, train=True)
            loss, g = focal_bce_loss(o, train.labels[b], train.P, cfg.gamma)
            net.backward(g.astype(net.dtype))
            neuro.adam_step(net.params(), state.adam)
            tot += loss * len(b)
            cnt += len(b)
        pn = float(evaluate_selector(net, val, cfg.eval_snr_db).mean())
        row = {"epoch": e, "loss": float(tot / max(cnt, 1)), "val_P_N": pn}
        state.history.rows.append(row)
        if pn > state.history.best_metric:
            state.history.best_metric, state.history.best_epoch = pn, e
            state.best_state = net.copy_state()
        if log:
            log(row)
        state.epoch += 1
    return state


# ------------------------------------------------------------ reconstructor data

@dataclass
class ReconData:
    """Drop-aligned reconstructor samples: normalized Type-II grids ``x``,
    aligned normalized perfect grids ``y`` and true DL channels, all (D, K, N, M)."""
    x: np.ndarray
    y: np.ndarray
    H_dl: np.ndarray
    p_tx: float
    sigma2: float

    def __len__(self):
        return self.x.shape[0]


def prepare_recon_data(ds, ab: AngularBasis, db: DelayBasis, cfg_scn, P: int,
                       selections=None, snr_db: float = 5.0) -> ReconData:
    """Build inputs from the quantized feedback on the chosen ports.

    Ports default to power selection on the noisy UL at ``snr_db``. The
    perfect grid is divided by the measured strongest coefficient so that it
    shares the feedback's phase reference, then both grids are scaled to unit
    Frobenius norm. Drops containing a degenerate UE are left out.
    """
    from .codebook import (dequantize_feedback, measure_port_coefficients,
                           quantize_feedback, select_ports_by_power, sparse_grid)
    from .errors import DegeneratePayloadError
    from .precoding import noise_power

    xs, ys, hs = [], [], []
    noisy = ds.noisy(snr_db) if selections is None else None
    for d in range(ds.n_drops):
        gx, gy = [], []
        try:
            for k in range(ds.ul_clean.shape[1]):
                H_dl = ds.dl[d, k].astype(complex)
                if selections is None:
                    ports = select_ports_by_power(_grid_power(noisy[d, k].astype(complex), ab, db), P)
                else:
                    ports = selections[d][k]
                c = measure_port_coefficients(H_dl, ports, ab, db)
                pay = quantize_feedback(c, ports, cfg_scn.Q_w, cfg_scn.Q_na, cfg_scn.Q_np,
                                        ab.n_per_pol)
                c_bar = dequantize_feedback(pay, ports, ab.n_per_pol)
                gx.append(sparse_grid(c_bar, ports, ab, db))
                G = ab.W_A.conj().T @ H_dl @ db.W_D / (ab.W_A.shape[0] * db.M)
                gy.append(G / c[pay.sci])
        except DegeneratePayloadError:
            continue
        xs.append(frobenius_normalize(np.array(gx)))
        ys.append(frobenius_normalize(np.array(gy)))
        hs.append(ds.dl[d].astype(complex))
    return ReconData(np.array(xs), np.array(ys), np.array(hs), cfg_scn.p_tx_w,
                     noise_power(cfg_scn))


def typeii_val_rates(data: ReconData, ab, db, G=None) -> np.ndarray:
    """Per-drop R_avg of ZF built from grids ``G`` (default: the Type-II inputs)."""
    from .precoding import average_sum_rate, zf_precode
    from .errors import SingularChannelError
    G = data.x if G is None else G
    out = np.full(len(data), np.nan)
    for d in range(len(data)):
        H_hat = ab.W_A @ G[d] @ db.W_D.conj().T
        try:
            prec = zf_precode(list(H_hat), data.p_tx)
        except SingularChannelError:
            continue
        out[d] = average_sum_rate(list(data.H_dl[d]), prec, data.sigma2).R_avg
    return out


def refine_grids(net: ReconstructorNetwork, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Eval-mode refinement of grids with any leading shape (..., N, M)."""
    lead = x.shape[:-2]
    flat = x.reshape(-1, *x.shape[-2:])
    out = np.concatenate([reconstructor_forward(net, flat[i:i + batch])
                          for i in range(0, len(flat), batch)])
    return out.reshape(*lead, *x.shape[-2:])


def evaluate_reconstructor(net, data: ReconData, ab, db) -> tuple[float, float]:
    """(mean R_avg over drops, MSE) on a validation set."""
    G = refine_grids(net, data.x)
    rates = typeii_val_rates(data, ab, db, G)
    mse = float(np.mean(np.abs(G - data.y) ** 2))
    return float(np.nanmean(rates)), mse


def new_recon_state(cfg, n_tx: int, M: int) -> TrainState:
    net = ReconstructorNetwork(n_tx, M, cfg.channels, w=cfg.w_shortcut, seed=cfg.seed)
    return TrainState(net, neuro.AdamState(lr=cfg.lr), TrainHistory(), net.copy_state())


def train_reconstructor(train: ReconData, val: ReconData, ab, db, cfg,
                        state: TrainState | None = None, epochs: int | None = None,
                        log=None) -> TrainState:
    """Two-stage training on drop-aligned batches.

    Stage 1 minimizes the grid MSE. Once validation R_avg improves by less
    than ``cfg.switch_delta`` for ``cfg.switch_patience`` consecutive epochs,
    stage 2 minimizes ``-R_avg + mu*MSE`` per drop (unless ``stage1_only``).
    Drops whose ZF Gram matrix is singular are skipped and counted.
    """
    K, n_tx, M = train.x.shape[1:]
    state = state or new_recon_state(cfg, n_tx, M)
    net = state.net
    drops_per_batch = max(cfg.batch_size // K, 1)
    stop = cfg.epochs if epochs is None else min(cfg.epochs, state.epoch + epochs)
    while state.epoch < stop:
        e = state.epoch
        rng, drop_rng = _epoch_rngs(cfg.seed, e)
        order = rng.permutation(len(train))
        net.set_rng(drop_rng)
        tot, cnt = 0.0, 0
        for i in range(0, len(order), drops_per_batch):
            b = order[i:i + drops_per_batch]
            if len(b) * K < 2:
                continue
            xin = grid_to_planes(train.x[b].reshape(-1, n_tx, M), net.dtype)
            net.zero_grad()
            yp = net.forward(xin, train=True)
            G_hat = planes_to_grid(yp.astype(float)).reshape(len(b), K, n_tx, M)
            if state.stage == 1:
                loss, dG = mse_loss(G_hat.reshape(-1, n_tx, M), train.y[b].reshape(-1, n_tx, M))
                dG = dG.reshape(G_hat.shape)
            else:
                dG = np.zeros_like(G_hat)
                loss, used = 0.0, 0
                for j, d in enumerate(b):
                    try:
                        t = stage2_loss(G_hat[j], train.y[d], train.H_dl[d], ab, db,
                                        train.p_tx, train.sigma2, cfg.mu)
                    except NumericalError:
                        state.history.skipped += 1
                        continue
                    loss += t.loss
                    dG[j] = t.grad
                    used += 1
                if used == 0:
                    continue
                loss /= used
                dG /= used
            dy = grid_to_planes(dG.reshape(-1, n_tx, M), net.dtype)
            net.backward(dy)
            neuro.adam_step(net.params(), state.adam)
            tot += loss * len(b)
            cnt += len(b)
        R, mse = evaluate_reconstructor(net, val, ab, db)
        row = {"epoch": e, "stage": state.stage, "loss": float(tot / max(cnt, 1)),
               "val_R_avg": R, "val_mse": mse}
        state.history.rows.append(row)
        if R > state.history.best_metric:
            state.history.best_metric, state.history.best_epoch = R, e
            state.best_state = net.copy_state()
        if state.stage == 1 and not cfg.stage1_only:
            rates = [r["val_R_avg"] for r in state.history.rows]
            if should_switch(rates, cfg.switch_delta, cfg.switch_patience) is not None:
                state.stage = 2
                state.history.switch_epoch = e + 1
        if log:
            log(row)
        state.epoch += 1
    return state


def train_reconstructor_ablation(train: ReconData, val: ReconData, ab, db, cfg,
                                 log=None) -> tuple[TrainState, TrainState]:
    """Two-stage run plus its stage-1-only twin, sharing the epochs before the switch.

    Up to the switch both schedules make identical updates (the per-epoch rng
    streams depend only on seed and epoch), so the twin is forked from the
    two-stage state at that point. Returns ``(two_stage, stage1_only)``.
    """
    s1_cfg = replace(cfg, stage1_only=True)
    state = new_recon_state(cfg, *train.x.shape[2:])
    twin = None
    while state.epoch < cfg.epochs:
        train_reconstructor(train, val, ab, db, cfg, state, epochs=1,
                            log=(lambda r: log("two-stage", r)) if log else None)
        if twin is None and state.stage == 2:
            twin = copy.deepcopy(state)
            twin.stage, twin.history.switch_epoch = 1, None
    if twin is None:                   # never switched: the schedules coincide
        twin = copy.deepcopy(state)
    train_reconstructor(train, val, ab, db, s1_cfg, twin,
                        log=(lambda r: log("stage1-only", r)) if log else None)
    return state, twin

