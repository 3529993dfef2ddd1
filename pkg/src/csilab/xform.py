"""Angular and delay DFT bases and the antenna-frequency <-> angular-delay
transforms.

Bases use the unnormalized exponent form (leading entry 1), so that::

    H = W_A @ G @ W_D^H,    G = W_A^H @ H @ W_D / (N_h*N_v*M)

and ``||G||_F^2 = ||H||_F^2 / PARSEVAL`` with ``PARSEVAL = N_h*N_v*M``.
Antenna index within a polarization block is ``h*N_v + v``; the two
polarization blocks are stacked ``[pol0; pol1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AngularBasis:
    D: np.ndarray
    W_A: np.ndarray
    N_h: int
    N_v: int
    O_h: int = 1
    O_v: int = 1
    q_h: int = 0
    q_v: int = 0

    @property
    def n_per_pol(self) -> int:
        return self.N_h * self.N_v


@dataclass(frozen=True)
class DelayBasis:
    W_D: np.ndarray

    @property
    def M(self) -> int:
        return self.W_D.shape[0]


@dataclass(frozen=True)
class AngularDelayGrid:
    G: np.ndarray
    ab: AngularBasis
    db: DelayBasis


def dft_vector(n: int, index: int, oversampling: int = 1) -> np.ndarray:
    """``[1, e^{j2*pi*index/(O*n)}, ..., e^{j2*pi*index*(n-1)/(O*n)}]``."""
    return np.exp(2j * np.pi * index * np.arange(n) / (oversampling * n))


def build_angular_basis(N_h: int, N_v: int, O_h: int = 1, O_v: int = 1,
                        q_h: int = 0, q_v: int = 0) -> AngularBasis:
    if not (0 <= q_h < O_h and 0 <= q_v < O_v):
        raise ValueError(f"rotation ({q_h}, {q_v}) out of range for oversampling ({O_h}, {O_v})")
    cols = [np.kron(dft_vector(N_h, t1 * O_h + q_h, O_h), dft_vector(N_v, t2 * O_v + q_v, O_v))
            for t1 in range(N_h) for t2 in range(N_v)]
    D = np.stack(cols, axis=1)
    n = N_h * N_v
    W_A = np.zeros((2 * n, 2 * n), dtype=complex)
    W_A[:n, :n] = D
    W_A[n:, n:] = D
    return AngularBasis(D, W_A, N_h, N_v, O_h, O_v, q_h, q_v)


def build_delay_basis(M: int) -> DelayBasis:
    if M < 1:
        raise ValueError("M must be >= 1")
    m = np.arange(M)
    return DelayBasis(np.exp(2j * np.pi * np.outer(m, m) / M))


def parseval_constant(ab: AngularBasis, db: DelayBasis) -> int:
    return ab.n_per_pol * db.M


def _check_shape(H, ab, db):
    if H.shape != (ab.W_A.shape[0], db.M):
        raise ValueError(f"shape {H.shape} does not match bases ({ab.W_A.shape[0]}, {db.M})")


def to_angular_delay(H: np.ndarray, ab: AngularBasis, db: DelayBasis) -> AngularDelayGrid:
    """Transform one ``N_tx x M`` channel (or a stack ``... x N_tx x M``)."""
    H = np.asarray(H)
    _check_shape(H[(0,) * (H.ndim - 2)] if H.ndim > 2 else H, ab, db)
    G = ab.W_A.conj().T @ H @ db.W_D / parseval_constant(ab, db)
    return AngularDelayGrid(G, ab, db)


def from_angular_delay(grid: AngularDelayGrid | np.ndarray, ab: AngularBasis | None = None,
                       db: DelayBasis | None = None) -> np.ndarray:
    if isinstance(grid, AngularDelayGrid):
        G, ab, db = grid.G, ab or grid.ab, db or grid.db
    else:
        G = np.asarray(grid)
    _check_shape(G[(0,) * (G.ndim - 2)] if G.ndim > 2 else G, ab, db)
    return ab.W_A @ G @ db.W_D.conj().T


def port_power(H: np.ndarray, ab: AngularBasis, db: DelayBasis) -> np.ndarray:
    return np.abs(to_angular_delay(H, ab, db).G) ** 2


def select_rotation(H_ul: np.ndarray, N_h: int, N_v: int, O_h: int, O_v: int, P: int,
                    db: DelayBasis | None = None) -> tuple[int, int]:
    """Oversampling rotation whose P strongest ports hold the most uplink power.

    Ties go to the lexicographically smallest ``(q_h, q_v)``.
    """
    db = db or build_delay_basis(H_ul.shape[1])
    best, best_val = (0, 0), -np.inf
    for q_h in range(O_h):
        for q_v in range(O_v):
            ab = build_angular_basis(N_h, N_v, O_h, O_v, q_h, q_v)
            pw = port_power(H_ul, ab, db).ravel()
            val = np.sort(pw)[::-1][:P].sum()
            if val > best_val:
                best, best_val = (q_h, q_v), val
    return best
