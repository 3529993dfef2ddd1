"""Zero-forcing multi-user precoding, achievable rate / average sum rate, and
the normalized selected-port power metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.constants import Boltzmann

from .errors import SingularChannelError
from .xform import AngularDelayGrid

T0_KELVIN = 290.0
MAX_GRAM_COND = 1e12


@dataclass
class PrecodingSet:
    V: np.ndarray          # (M, N_tx, K)
    p_sub: np.ndarray      # (M,) power per subband, W

    @property
    def M(self) -> int:
        return self.V.shape[0]

    def total_power(self) -> float:
        return float(np.sum(np.abs(self.V) ** 2))


@dataclass
class RateReport:
    rates: np.ndarray      # (K, M) bits/s/Hz
    sigma2: float

    @property
    def R_avg(self) -> float:
        return float(self.rates.sum() / self.rates.shape[1])


def stack_channels(H_list) -> np.ndarray:
    """K channels (N_tx x M) -> array (M, K, N_tx) of per-subband rows h_k,m."""
    H = np.stack([np.asarray(h) for h in H_list])     # (K, N_tx, M)
    return np.transpose(H, (2, 0, 1))


def zf_precode(H_hat_list, p_tx: float, ridge: float = 0.0) -> PrecodingSet:
    """Equal-power ZF per subband.

    Each estimated ``h_k,m`` is scaled to unit norm, directions are
    ``A^H (A A^H + ridge*I)^-1`` with row k of ``A`` equal to ``h_k,m^H``,
    and each column gets power ``p_tx / (M*K)``. Without ``ridge`` a
    rank-deficient subband raises :class:`SingularChannelError`.
    """
    Hs = stack_channels(H_hat_list)                   # (M, K, N)
    M, K, N = Hs.shape
    if K > N:
        raise SingularChannelError(f"K={K} users exceed N_tx={N} antennas")
    V = np.empty((M, N, K), dtype=complex)
    p_col = p_tx / (M * K)
    for m in range(M):
        h = Hs[m]
        norms = np.linalg.norm(h, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise SingularChannelError(f"zero or non-finite channel on subband {m}", subband=m)
        A = (h / norms[:, None]).conj()               # rows h^H
        gram = A @ A.conj().T
        if ridge == 0.0 and np.linalg.cond(gram) > MAX_GRAM_COND:
            raise SingularChannelError(f"rank-deficient channel matrix on subband {m}", subband=m)
        U = A.conj().T @ np.linalg.solve(gram + ridge * np.eye(K), np.eye(K))
        V[m] = U * np.sqrt(p_col) / np.linalg.norm(U, axis=0)
    return PrecodingSet(V, np.full(M, p_tx / M))


def user_rate(h: np.ndarray, V_m: np.ndarray, k: int, sigma2: float) -> float:
    """Achievable rate of user ``k`` on one subband with true channel ``h``."""
    if sigma2 <= 0:
        raise ValueError("noise power must be positive")
    g = np.abs(np.conj(h) @ V_m) ** 2
    interf = g.sum() - g[k]
    return float(np.log2(1 + g[k] / (interf + sigma2)))


def rate_matrix(H_true_list, V: np.ndarray, sigma2: float) -> np.ndarray:
    Hs = stack_channels(H_true_list)                  # (M, K, N)
    g = np.abs(np.einsum("mkn,mnj->mkj", Hs.conj(), V)) ** 2
    sig = np.einsum("mkk->mk", g)
    interf = g.sum(axis=2) - sig
    return np.log2(1 + sig / (interf + sigma2)).T     # (K, M)


def average_sum_rate(H_true_list, prec: PrecodingSet | np.ndarray, sigma2: float) -> RateReport:
    if sigma2 <= 0:
        raise ValueError("noise power must be positive")
    V = prec.V if isinstance(prec, PrecodingSet) else np.asarray(prec)
    return RateReport(rate_matrix(H_true_list, V, sigma2), sigma2)


def noise_power(cfg) -> float:
    """Thermal noise per subband, ``k_B * T0 * B * 10^(NF/10)``."""
    return Boltzmann * T0_KELVIN * cfg.subband_bandwidth * 10 ** (cfg.noise_figure_db / 10)


def normalized_port_power(grid_dl: AngularDelayGrid | np.ndarray, ports) -> float:
    """Fraction of the DL angular-delay power on the selected ports."""
    G = grid_dl.G if isinstance(grid_dl, AngularDelayGrid) else np.asarray(grid_dl)
    pw = np.abs(G) ** 2
    total = pw.sum()
    if not total > 0:
        raise ValueError("zero-power grid")
    return float(pw[ports.angular, ports.delay].sum() / total)
