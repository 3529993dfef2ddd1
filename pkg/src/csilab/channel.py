"""Simplified clustered multipath generator with angular-delay partial
reciprocity between uplink and downlink.

This is a reduced stand-in for the 3GPP UMa clustered-delay-line model: LOS
probability and pathloss keep their UMa core terms, clusters follow the usual
exponential delay / lognormal power construction, and each cluster holds
``n_rays`` rays placed at fixed Laplacian quantiles. UL and DL share every
delay, angle and power. Under the default ``phase_model="shared"`` they also
share the per-ray initial phases (carrier phase absorbed into them, delays
applied at baseband), so the links differ only through the carrier-dependent
array response. ``"carrier"`` additionally applies the duplex-gap delay phase
per ray and ``"independent"`` redraws all DL phases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig

C_LIGHT = 299_792_458.0
UL, DL = "UL", "DL"


@dataclass
class UEGeometry:
    distance_m: float
    azimuth_rad: float
    height_m: float
    is_los: bool
    cluster_delays: np.ndarray        # (C,) seconds, first = 0
    cluster_powers: np.ndarray        # (C,) linear, sums to 1
    cluster_azimuth: np.ndarray       # (C,) rad
    cluster_zenith: np.ndarray        # (C,) rad
    ray_azimuth: np.ndarray           # (C, R) rad, absolute
    ray_zenith: np.ndarray            # (C, R) rad, absolute
    ray_delays: np.ndarray            # (C, R) seconds, absolute
    phases: dict = field(default_factory=dict)      # link -> (C, R, 2) rad
    los_phases: dict = field(default_factory=dict)  # link -> (2,) rad
    los_azimuth: float = 0.0
    los_zenith: float = math.pi / 2
    k_factor: float = 0.0             # linear Ricean K, 0 for NLOS
    pathloss_db: float = 0.0


@dataclass
class UEChannels:
    H_ul_clean: np.ndarray
    H_ul_noisy: dict                  # snr_db -> N_tx x M
    H_dl: np.ndarray
    geometry: UEGeometry


@dataclass
class Drop:
    drop_id: int
    ues: list


def los_probability(d: np.ndarray | float) -> np.ndarray | float:
    """UMa outdoor LOS probability core term."""
    d = np.asarray(d, dtype=float)
    p = np.minimum(18.0 / d, 1.0) * (1 - np.exp(-d / 63.0)) + np.exp(-d / 63.0)
    return p if p.ndim else float(p)


def pathloss_db(cfg: ScenarioConfig, d3d: float, is_los: bool, f_c: float | None = None) -> float:
    f_ghz = (f_c or cfg.f_c_dl) / 1e9
    a, b = cfg.pl_los
    pl_los = a + 20 * math.log10(f_ghz) + 10 * b * math.log10(d3d)
    if is_los:
        return pl_los
    a, b = cfg.pl_nlos
    return max(pl_los, a + 20 * math.log10(f_ghz) + 10 * b * math.log10(d3d))


def _laplace_quantiles(n: int) -> np.ndarray:
    # unit-std Laplacian evaluated at mid-point quantiles; symmetric, zero mean
    u = (np.arange(n) + 0.5) / n - 0.5
    q = -np.sign(u) * np.log(1 - 2 * np.abs(u)) / math.sqrt(2)
    return q / np.sqrt(np.mean(q ** 2))


def _exp_quantiles(n: int) -> np.ndarray:
    u = (np.arange(n) + 0.5) / n
    return -np.log(1 - u)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def draw_geometry(cfg: ScenarioConfig, rng: np.random.Generator) -> UEGeometry:
    d0, d1 = cfg.ue_distance_range_m
    d = math.sqrt(rng.uniform(d0 ** 2, d1 ** 2)) if d1 > d0 else d0
    half = math.radians(cfg.sector_deg) / 2
    az = rng.uniform(-half, half)
    h0, h1 = cfg.ue_height_range_m
    h = rng.uniform(h0, h1) if h1 > h0 else h0
    is_los = bool(rng.random() < los_probability(d))
    s = 0 if is_los else 1

    n_c, n_r = cfg.n_clusters[s], cfg.n_rays
    ds = cfg.cluster_ds_ns[s] * 1e-9
    tau = np.sort(rng.exponential(ds, n_c))
    tau -= tau[0]
    z = rng.normal(0.0, cfg.cluster_shadow_db, n_c)
    pw = np.exp(-tau / ds) * 10 ** (-z / 10)
    pw /= pw.sum()

    # BS-side departure angles; zenith measured from the array's vertical axis
    zen_los = math.pi / 2 + math.atan2(cfg.h_bs_m - h, d)
    as_c = math.radians(cfg.cluster_as_deg[s])
    c_az = _wrap(az + rng.normal(0.0, as_c, n_c))
    c_zen = np.clip(zen_los + rng.normal(0.0, as_c / 3, n_c), 0.0, math.pi)

    as_r = math.radians(cfg.ray_as_deg[s])
    lap = _laplace_quantiles(n_r)
    dly = _exp_quantiles(n_r) * cfg.ray_ds_ns * 1e-9
    perm_zen = np.stack([rng.permutation(n_r) for _ in range(n_c)])
    perm_dly = np.stack([rng.permutation(n_r) for _ in range(n_c)])
    r_az = _wrap(c_az[:, None] + as_r * lap[None, :])
    r_zen = np.clip(c_zen[:, None] + as_r / 3 * lap[perm_zen], 0.0, math.pi)
    r_tau = tau[:, None] + dly[perm_dly]

    phases = {UL: rng.uniform(-np.pi, np.pi, (n_c, n_r, 2))}
    los_phases = {UL: rng.uniform(-np.pi, np.pi, 2)}
    if cfg.phase_model == "independent":
        phases[DL] = rng.uniform(-np.pi, np.pi, (n_c, n_r, 2))
        los_phases[DL] = rng.uniform(-np.pi, np.pi, 2)
    elif cfg.phase_model == "carrier":
        # delay phase evaluated at the absolute carrier instead of baseband
        shift = 2 * np.pi * (cfg.f_c_dl - cfg.f_c_ul)
        phases[DL] = _wrap(phases[UL] - shift * r_tau[..., None])
        los_phases[DL] = los_phases[UL].copy()
    else:
        phases[DL] = phases[UL].copy()
        los_phases[DL] = los_phases[UL].copy()
    d3d = math.hypot(d, cfg.h_bs_m - h)
    return UEGeometry(
        distance_m=d, azimuth_rad=az, height_m=h, is_los=is_los,
        cluster_delays=tau, cluster_powers=pw, cluster_azimuth=c_az, cluster_zenith=c_zen,
        ray_azimuth=r_az, ray_zenith=r_zen, ray_delays=r_tau,
        phases=phases, los_phases=los_phases, los_azimuth=az, los_zenith=zen_los,
        k_factor=10 ** (cfg.k_factor_db / 10) if is_los else 0.0,
        pathloss_db=pathloss_db(cfg, d3d, is_los),
    )


def steering(cfg: ScenarioConfig, azimuth, zenith, f_c: float) -> np.ndarray:
    """Single-polarization UPA response, shape ``(..., N_h*N_v)``.

    Elements sit half a DL wavelength apart, so the UL response is slightly
    compressed in angle.
    """
    scale = f_c / cfg.f_c_dl
    azimuth, zenith = np.asarray(azimuth), np.asarray(zenith)
    u_h = np.sin(zenith) * np.sin(azimuth)
    u_v = np.cos(zenith)
    n_h = np.arange(cfg.N_h)
    n_v = np.arange(cfg.N_v)
    ph = np.pi * scale * (u_h[..., None, None] * n_h[:, None] + u_v[..., None, None] * n_v[None, :])
    return np.exp(1j * ph).reshape(*u_h.shape, cfg.N_h * cfg.N_v)


def subband_offsets(cfg: ScenarioConfig) -> np.ndarray:
    return (np.arange(cfg.M) - (cfg.M - 1) / 2) * cfg.subband_bandwidth


def synthesize_rays(cfg: ScenarioConfig, gains: np.ndarray, azimuth, zenith, delays,
                    f_c: float) -> np.ndarray:
    """Sum of rays. ``gains`` has shape ``(n, 2)`` (one complex gain per
    polarization); angles/delays have shape ``(n,)``."""
    a = steering(cfg, azimuth, zenith, f_c)                               # (n, A)
    ramp = np.exp(-2j * np.pi * np.outer(delays, subband_offsets(cfg)))   # (n, M)
    blocks = [np.einsum("r,ra,rm->am", gains[:, p], a, ramp) for p in range(2)]
    return np.concatenate(blocks, axis=0)


def synthesize_channel(geom: UEGeometry, cfg: ScenarioConfig, link: str) -> np.ndarray:
    f_c = cfg.f_c_ul if link == UL else cfg.f_c_dl
    n_c, n_r = geom.ray_azimuth.shape
    k = geom.k_factor
    ray_pw = np.repeat(geom.cluster_powers / (k + 1) / n_r, n_r)
    gains = np.sqrt(ray_pw)[:, None] * np.exp(1j * geom.phases[link].reshape(-1, 2))
    az = geom.ray_azimuth.ravel()
    zen = geom.ray_zenith.ravel()
    tau = geom.ray_delays.ravel()
    if geom.is_los:
        los_gain = math.sqrt(k / (k + 1)) * np.exp(1j * geom.los_phases[link])
        gains = np.vstack([los_gain[None, :], gains])
        az = np.concatenate([[geom.los_azimuth], az])
        zen = np.concatenate([[geom.los_zenith], zen])
        tau = np.concatenate([[0.0], tau])
    amp = 10 ** (-geom.pathloss_db / 20)
    return amp * synthesize_rays(cfg, gains, az, zen, tau, f_c)


def add_measurement_noise(H: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular Gaussian noise at a Frobenius-aggregate SNR.

    Per-element variance is ``||H||_F^2 / (H.size * 10^(snr/10))``; ``inf``
    returns ``H`` unchanged.
    """
    H = np.asarray(H)
    if not np.all(np.isfinite(H)):
        raise ValueError("channel contains non-finite entries")
    if math.isinf(snr_db) and snr_db > 0:
        return H.copy()
    var = np.sum(np.abs(H) ** 2) / (H.size * 10 ** (snr_db / 10))
    noise = rng.normal(size=H.shape) + 1j * rng.normal(size=H.shape)
    return H + math.sqrt(var / 2) * noise


def drop_rng(seed: int, drop_id: int, ue: int | None = None) -> np.random.Generator:
    """Counter-derived stream: independent of generation order."""
    key = [seed, drop_id] if ue is None else [seed, drop_id, ue]
    return np.random.default_rng(np.random.SeedSequence(key))


def generate_drop(cfg: ScenarioConfig, seed: int, drop_id: int,
                  snr_list=(5.0,)) -> Drop:
    ues = []
    for k in range(cfg.K):
        rng = drop_rng(seed, drop_id, k)
        geom = draw_geometry(cfg, rng)
        H_ul = synthesize_channel(geom, cfg, UL)
        H_dl = synthesize_channel(geom, cfg, DL)
        noisy = {float(s): add_measurement_noise(H_ul, s, rng) for s in snr_list}
        ues.append(UEChannels(H_ul, noisy, H_dl, geom))
    return Drop(drop_id, ues)
