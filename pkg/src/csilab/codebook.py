"""Type-II port-selection codebook: power-based port selection, port
coefficient measurement, two-stage quantization with a bit-exact payload, and
reconstruction.

Quantizer tables (for bit widths ``Q_w/Q_na/Q_np``):

* wideband ratio ``2^(-i/4)`` for ``i < 2^Q_w - 1``; the last index means 0,
* narrowband amplitude ``2^(-j/2)`` for ``j < 2^Q_na - 1``; the last index means 0,
* phase ``2*pi*q / 2^Q_np``.

The strongest coefficient (SCI) is normalized to ``1+0j`` and costs
``ceil(log2 P)`` bits instead of an amplitude/phase pair. The polarization
holding the SCI is the amplitude reference; the other polarization is
referenced to the quantized wideband ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegeneratePayloadError, FormatError
from .xform import AngularBasis, AngularDelayGrid, DelayBasis, parseval_constant

_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class PortIndexSet:
    """Selected ports as ``(angular, delay)`` rows, strongest first."""

    ports: np.ndarray  # (P, 2) int
    n_tx: int
    M: int

    def __post_init__(self):
        p = np.asarray(self.ports, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "ports", p)
        if len(p) and (p.min() < 0 or p[:, 0].max() >= self.n_tx or p[:, 1].max() >= self.M):
            raise ValueError("port index out of range")
        if len(p) > 1 and np.bincount(self.flat).max() > 1:
            raise ValueError("ports must be distinct")

    def __len__(self):
        return len(self.ports)

    @property
    def angular(self) -> np.ndarray:
        return self.ports[:, 0]

    @property
    def delay(self) -> np.ndarray:
        return self.ports[:, 1]

    @property
    def flat(self) -> np.ndarray:
        return self.ports[:, 0] * self.M + self.ports[:, 1]

    @classmethod
    def from_flat(cls, flat, n_tx: int, M: int) -> "PortIndexSet":
        flat = np.asarray(flat, dtype=np.int64)
        return cls(np.stack([flat // M, flat % M], axis=1), n_tx, M)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(d)) for a, d in self.ports}

    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_tx * self.M, dtype=bool)
        m[self.flat] = True
        return m


def top_p_indices(metric: np.ndarray, P: int) -> np.ndarray:
    """Flat indices of the ``P`` largest entries, ties to the smaller index."""
    metric = np.asarray(metric).ravel()
    if not 1 <= P <= metric.size:
        raise ValueError(f"P={P} out of range [1, {metric.size}]")
    return np.argsort(-metric, kind="stable")[:P]


def select_ports_by_power(grid: AngularDelayGrid | np.ndarray, P: int) -> PortIndexSet:
    G = grid.G if isinstance(grid, AngularDelayGrid) else np.asarray(grid)
    n_tx, M = G.shape
    return PortIndexSet.from_flat(top_p_indices(np.abs(G) ** 2, P), n_tx, M)


def port_bases(ports: PortIndexSet, ab: AngularBasis, db: DelayBasis):
    return ab.W_A[:, ports.angular], db.W_D[:, ports.delay]


def measure_port_coefficients(H_dl: np.ndarray, ports: PortIndexSet, ab: AngularBasis,
                              db: DelayBasis) -> np.ndarray:
    """``c_p = w_A,p^H H w_D,p``, i.e. ``Tr(H Phi_p^H)`` with ``Phi_p = w_A,p w_D,p^H``."""
    wa, wd = port_bases(ports, ab, db)
    return np.einsum("ap,am,mp->p", wa.conj(), H_dl, wd)


def reconstruct_typeii(c_bar: np.ndarray, ports: PortIndexSet, ab: AngularBasis,
                       db: DelayBasis) -> np.ndarray:
    """``H = sum_p c_p w_A,p w_D,p^H``."""
    wa, wd = port_bases(ports, ab, db)
    return (wa * np.asarray(c_bar)[None, :]) @ wd.conj().T


def sparse_grid(c_bar: np.ndarray, ports: PortIndexSet, ab: AngularBasis, db: DelayBasis) -> np.ndarray:
    """Angular-delay grid holding the coefficients on their ports (zeros elsewhere)."""
    G = np.zeros((ports.n_tx, ports.M), dtype=complex)
    G[ports.angular, ports.delay] = np.asarray(c_bar) / parseval_constant(ab, db)
    return G


# ---------------------------------------------------------------- quantizer

def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@lru_cache(maxsize=None)
def wideband_table(Q_w: int) -> np.ndarray:
    n = 2 ** Q_w
    return _frozen(np.append(2.0 ** (-np.arange(n - 1) / 4), 0.0))


@lru_cache(maxsize=None)
def amplitude_table(Q_na: int) -> np.ndarray:
    n = 2 ** Q_na
    return _frozen(np.append(2.0 ** (-np.arange(n - 1) / 2), 0.0))


@lru_cache(maxsize=None)
def phase_table(Q_np: int) -> np.ndarray:
    n = 2 ** Q_np
    t = np.exp(2j * np.pi * np.arange(n) / n)
    t[0] = 1.0 + 0.0j
    return _frozen(t)


def _log_quantize(x: np.ndarray, step: float, n_codes: int) -> np.ndarray:
    """Nearest code of ``2^(-idx*step)``; the last code (zero) catches underflow."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        idx = np.rint(-np.log2(x) / step)
    ok = (x > 0) & (idx <= n_codes - 2)
    return np.where(ok, np.maximum(idx, 0), n_codes - 1).astype(np.int64)


def polarization(ports: PortIndexSet, n_per_pol: int) -> np.ndarray:
    return (ports.angular >= n_per_pol).astype(np.int64)


@dataclass(frozen=True)
class FeedbackPayload:
    sci: int
    wideband_idx: int
    amp_idx: np.ndarray    # (P-1,) in port order, SCI skipped
    phase_idx: np.ndarray  # (P-1,)
    P: int
    Q_w: int
    Q_na: int
    Q_np: int

    @property
    def sci_bits(self) -> int:
        return math.ceil(math.log2(self.P)) if self.P > 1 else 0

    @property
    def total_bits(self) -> int:
        return self.sci_bits + self.Q_w + (self.P - 1) * (self.Q_na + self.Q_np)

    def full_codes(self) -> tuple[np.ndarray, np.ndarray]:
        """Length-P (amp, phase) codes with the SCI entry set to (0, 0)."""
        a, p, s = np.asarray(self.amp_idx), np.asarray(self.phase_idx), self.sci
        zero = np.zeros(1, dtype=np.int64)
        return np.concatenate((a[:s], zero, a[s:])), np.concatenate((p[:s], zero, p[s:]))

    def to_bits(self) -> np.ndarray:
        fields = [(self.sci, self.sci_bits), (self.wideband_idx, self.Q_w)]
        for a, p in zip(self.amp_idx, self.phase_idx):
            fields += [(int(a), self.Q_na), (int(p), self.Q_np)]
        bits = [(v >> (w - 1 - i)) & 1 for v, w in fields for i in range(w)]
        return np.array(bits, dtype=np.uint8)

    def to_bytes(self) -> bytes:
        return np.packbits(self.to_bits(), bitorder="big").tobytes()

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_bytes(cls, data: bytes, P: int, Q_w: int, Q_na: int, Q_np: int) -> "FeedbackPayload":
        sci_bits = math.ceil(math.log2(P)) if P > 1 else 0
        n_bits = sci_bits + Q_w + (P - 1) * (Q_na + Q_np)
        if len(data) != (n_bits + 7) // 8:
            raise FormatError(f"payload has {len(data)} bytes, expected {(n_bits + 7) // 8}")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")
        if np.any(bits[n_bits:]):
            raise FormatError("non-zero padding bits")
        pos = 0

        def take(w):
            nonlocal pos
            v = 0
            for b in bits[pos:pos + w]:
                v = (v << 1) | int(b)
            pos += w
            return v

        sci = take(sci_bits)
        wb = take(Q_w)
        amp, ph = [], []
        for _ in range(P - 1):
            amp.append(take(Q_na))
            ph.append(take(Q_np))
        if sci >= P:
            raise FormatError(f"SCI {sci} out of range for P={P}")
        return cls(sci, wb, np.array(amp, dtype=np.int64), np.array(ph, dtype=np.int64), P, Q_w, Q_na, Q_np)


def _choose_sci(c: np.ndarray) -> np.ndarray:
    """Per row: strongest entry; near-ties go to the smallest |phase|, then the lowest index."""
    amp = np.abs(c)
    m = amp.max(axis=1)
    if not np.all(m > 0):
        row = int(np.flatnonzero(~(m > 0))[0])
        raise DegeneratePayloadError(f"all port coefficients are zero (row {row})")
    cand = amp >= m[:, None] * (1 - _TIE_RTOL)
    ang = np.where(cand, np.abs(np.angle(c)), np.inf)
    return np.argmax(cand & (ang <= ang.min(axis=1, keepdims=True) + 1e-9), axis=1)


def quantize_codes(c: np.ndarray, pol: np.ndarray, Q_w: int, Q_na: int, Q_np: int):
    """Vectorized quantizer over rows of ``c`` (B, P) with port polarizations ``pol`` (B, P).

    Returns ``(sci, wideband_idx, amp, phase)``; ``amp`` and ``phase`` are
    length-P code rows with the SCI entry set to 0.
    """
    c = np.asarray(c, dtype=complex)
    if not np.all(np.isfinite(c)):
        raise ValueError("non-finite port coefficients")
    B, P = c.shape
    rows = np.arange(B)
    sci = _choose_sci(c)
    rel = c / c[rows, sci][:, None]
    weak = pol != pol[rows, sci][:, None]
    weak[rows, sci] = False
    mag = np.abs(rel)

    wb = _log_quantize(np.where(weak, mag, 0.0).max(axis=1), 0.25, 2 ** Q_w)
    ref = np.where(weak, wideband_table(Q_w)[wb][:, None], 1.0)

    n_amp = 2 ** Q_na
    amp_rel = np.divide(mag, ref, out=np.zeros(c.shape), where=ref > 0)
    amp = _log_quantize(amp_rel, 0.5, n_amp)
    n_ph = 2 ** Q_np
    ph = np.mod(np.rint(np.angle(rel) * n_ph / (2 * np.pi)), n_ph).astype(np.int64)
    ph[amp == n_amp - 1] = 0
    amp[rows, sci] = 0
    ph[rows, sci] = 0

    # Ports that dequantize to exactly 1+0j are indistinguishable from the SCI;
    # report the first of them so that requantization is a fixed point.
    sci = np.argmax((amp == 0) & (ph == 0) & (ref == 1.0), axis=1)
    return sci, wb, amp, ph


def dequantize_codes(sci, wideband_idx, amp, ph, pol, Q_w: int, Q_na: int, Q_np: int) -> np.ndarray:
    """Inverse of :func:`quantize_codes` on full-length code rows."""
    amp, ph = np.asarray(amp), np.asarray(ph)
    sci, wideband_idx = np.asarray(sci), np.asarray(wideband_idx)
    if (np.any(amp < 0) or np.any(amp >= 2 ** Q_na) or np.any(ph < 0) or np.any(ph >= 2 ** Q_np)
            or np.any(wideband_idx < 0) or np.any(wideband_idx >= 2 ** Q_w)):
        raise FormatError("code index out of range")
    rows = np.arange(len(sci))
    weak = pol != pol[rows, sci][:, None]
    ref = np.where(weak, wideband_table(Q_w)[wideband_idx][:, None], 1.0)
    c = ref * amplitude_table(Q_na)[amp] * phase_table(Q_np)[ph]
    c[rows, sci] = 1.0 + 0.0j
    return c


def quantize_feedback(c: np.ndarray, ports: PortIndexSet, Q_w: int, Q_na: int, Q_np: int,
                      n_per_pol: int) -> FeedbackPayload:
    c = np.asarray(c, dtype=complex)
    P = len(c)
    if len(ports) != P:
        raise ValueError("coefficients and ports differ in length")
    sci, wb, amp, ph = quantize_codes(c[None], polarization(ports, n_per_pol)[None], Q_w, Q_na, Q_np)
    s = int(sci[0])
    keep = np.arange(P) != s
    return FeedbackPayload(s, int(wb[0]), amp[0, keep], ph[0, keep], P, Q_w, Q_na, Q_np)


def dequantize_feedback(payload: FeedbackPayload, ports: PortIndexSet, n_per_pol: int) -> np.ndarray:
    if len(ports) != payload.P:
        raise FormatError("payload does not match port set size")
    amp, ph = payload.full_codes()
    return dequantize_codes(np.array([payload.sci]), np.array([payload.wideband_idx]), amp[None],
                            ph[None], polarization(ports, n_per_pol)[None],
                            payload.Q_w, payload.Q_na, payload.Q_np)[0]


# ---------------------------------------------------------------- pipeline

@dataclass
class CodebookResult:
    H_hat: np.ndarray | None
    ports: PortIndexSet
    coefficients: np.ndarray | None
    payload: FeedbackPayload | None
    error: str | None = None


def run_codebook_pipeline(H_dl_list, ab: AngularBasis, db: DelayBasis, selections, cfg,
                          quantize: bool = True) -> list[CodebookResult]:
    """Measure, quantize, dequantize and reconstruct each UE's DL channel on
    its selected ports. ``quantize=False`` bypasses the quantizer (ablation).

    A UE whose coefficients are all zero gets ``H_hat=None`` and an error
    string instead of aborting the whole drop.
    """
    out = []
    for H_dl, ports in zip(H_dl_list, selections):
        c = measure_port_coefficients(H_dl, ports, ab, db)
        if not quantize:
            out.append(CodebookResult(reconstruct_typeii(c, ports, ab, db), ports, c, None))
            continue
        try:
            payload = quantize_feedback(c, ports, cfg.Q_w, cfg.Q_na, cfg.Q_np, ab.n_per_pol)
        except DegeneratePayloadError as e:
            out.append(CodebookResult(None, ports, c, None, str(e)))
            continue
        c_bar = dequantize_feedback(payload, ports, ab.n_per_pol)
        out.append(CodebookResult(reconstruct_typeii(c_bar, ports, ab, db), ports, c_bar, payload))
    return out
