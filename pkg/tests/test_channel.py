import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from csilab.channel import (DL, UL, UEGeometry, add_measurement_noise, draw_geometry,
                            generate_drop, los_probability, pathloss_db, subband_offsets,
                            synthesize_channel)
from csilab.config import ScenarioConfig
from csilab.errors import ConfigError
from csilab.xform import port_power

from conftest import crandn


def _one_ray_geometry(tau=0.0, az=0.0, zen=math.pi / 2):
    z = np.zeros((1, 1))
    return UEGeometry(
        distance_m=50.0, azimuth_rad=az, height_m=1.5, is_los=False,
        cluster_delays=np.zeros(1), cluster_powers=np.ones(1),
        cluster_azimuth=np.full(1, az), cluster_zenith=np.full(1, zen),
        ray_azimuth=z + az, ray_zenith=z + zen, ray_delays=z + tau,
        phases={UL: np.zeros((1, 1, 2)), DL: np.zeros((1, 1, 2))},
        los_phases={UL: np.zeros(2), DL: np.zeros(2)}, pathloss_db=0.0)


def test_config_defaults_and_validation(cfg):
    assert cfg.N_tx == 32 and cfg.n_ports == 256 and cfg.M == 8 and cfg.K == 5
    assert (cfg.Q_w, cfg.Q_na, cfg.Q_np, cfg.P) == (5, 3, 4, 32)
    with pytest.raises(ConfigError):
        ScenarioConfig(f_c_dl=3.4e9)
    with pytest.raises(ConfigError):
        ScenarioConfig(M=0)
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_degenerate_distance_range():
    cfg = ScenarioConfig(ue_distance_range_m=(35.0, 35.0))
    rng = np.random.default_rng(0)
    assert all(draw_geometry(cfg, rng).distance_m == 35.0 for _ in range(20))


def test_geometry_determinism(cfg):
    a = draw_geometry(cfg, np.random.default_rng(7))
    b = draw_geometry(cfg, np.random.default_rng(7))
    assert np.array_equal(a.ray_delays, b.ray_delays)
    assert np.array_equal(a.phases[DL], b.phases[DL]) and a.is_los == b.is_los


def test_geometry_invariants(cfg):
    rng = np.random.default_rng(3)
    for _ in range(50):
        g = draw_geometry(cfg, rng)
        lo, hi = cfg.ue_distance_range_m
        assert lo <= g.distance_m <= hi
        assert len(g.cluster_delays) == cfg.n_clusters[0 if g.is_los else 1]
        assert g.cluster_delays[0] == 0 and np.all(np.diff(g.cluster_delays) >= 0)
        assert np.all(g.cluster_powers >= 0) and abs(g.cluster_powers.sum() - 1) < 1e-12
        # UL and DL share every large-scale parameter; only phases are per link
        assert set(g.phases) == {UL, DL}


def test_los_fraction_matches_integrated_probability(cfg):
    rng = np.random.default_rng(11)
    n = 10_000
    hits = sum(draw_geometry(cfg, rng).is_los for _ in range(n))
    d0, d1 = cfg.ue_distance_range_m
    p, _ = integrate.quad(lambda d: los_probability(d) * 2 * d / (d1 ** 2 - d0 ** 2), d0, d1)
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(hits / n - p) < 3 * sigma


def test_los_probability_and_pathloss_shape(cfg):
    assert los_probability(10.0) == pytest.approx(1.0)
    assert los_probability(200.0) < los_probability(50.0)
    los = pathloss_db(cfg, 100.0, True)
    assert los == pytest.approx(28 + 20 * math.log10(3.5) + 22 * math.log10(100.0))
    assert pathloss_db(cfg, 100.0, False) >= los


def test_single_ray_broadside(cfg):
    H = synthesize_channel(_one_ray_geometry(), cfg, DL)
    assert np.allclose(H, H[:, :1])                       # same column on every subband
    n = cfg.N_h * cfg.N_v
    for pol in range(2):
        mags = np.abs(H[pol * n:(pol + 1) * n])
        assert np.allclose(mags, mags[0, 0])


def test_single_ray_delay_ramp(cfg):
    tau = 37e-9
    H = synthesize_channel(_one_ray_geometry(tau, az=0.3, zen=1.2), cfg, UL)
    f = subband_offsets(cfg)
    for m in range(1, cfg.M):
        ratio = H[:, m] / H[:, 0]
        assert np.allclose(ratio, np.exp(-2j * np.pi * (f[m] - f[0]) * tau))


def test_ul_dl_port_power_correlation(cfg, ab, db):
    rng = np.random.default_rng(5)
    corr = []
    for _ in range(100):
        g = draw_geometry(cfg, rng)
        pu = port_power(synthesize_channel(g, cfg, UL), ab, db).ravel()
        pd = port_power(synthesize_channel(g, cfg, DL), ab, db).ravel()
        corr.append(np.corrcoef(pu, pd)[0, 1])
    assert np.mean(corr) > 0.9


def test_noise_examples():
    rng = np.random.default_rng(0)
    H = crandn(rng, 32, 8)
    assert np.array_equal(add_measurement_noise(H, math.inf, rng), H)
    ratios = [np.sum(np.abs(add_measurement_noise(H, 0.0, rng) - H) ** 2) / np.sum(np.abs(H) ** 2)
              for _ in range(1000)]
    assert abs(np.mean(ratios) - 1.0) < 0.05
    Hu = H / np.linalg.norm(H)
    e = np.mean([np.sum(np.abs(add_measurement_noise(Hu, 5.0, rng) - Hu) ** 2) for _ in range(2000)])
    assert e == pytest.approx(10 ** -0.5, rel=0.05)
    with pytest.raises(ValueError):
        add_measurement_noise(H * np.nan, 5.0, rng)


def test_noise_power_example_with_four_rbs():
    from csilab.precoding import noise_power
    # 4 RBs of 12 x 15 kHz, NF 5 dB, 290 K
    cfg = ScenarioConfig(N_s=4)
    assert cfg.subband_bandwidth == 720e3
    expect = 1.380649e-23 * 290 * 720e3 * 10 ** 0.5
    assert noise_power(cfg) == pytest.approx(expect, rel=1e-12)


@given(st.integers(0, 1000), st.integers(0, 10_000))
def test_drop_determinism(seed, drop_id):
    cfg = ScenarioConfig(K=2, n_clusters=(2, 3), n_rays=4)
    a = generate_drop(cfg, seed, drop_id, (0.0, 5.0))
    b = generate_drop(cfg, seed, drop_id, (0.0, 5.0))
    for ua, ub in zip(a.ues, b.ues):
        assert np.array_equal(ua.H_dl, ub.H_dl) and np.array_equal(ua.H_ul_noisy[5.0], ub.H_ul_noisy[5.0])
        assert np.sum(np.abs(ua.H_dl) ** 2) > 0


def test_phase_models_share_large_scale(cfg):
    for model in ("shared", "carrier", "independent"):
        c = cfg.replace(phase_model=model)
        g = draw_geometry(c, np.random.default_rng(1))
        H_ul, H_dl = synthesize_channel(g, c, UL), synthesize_channel(g, c, DL)
        assert H_ul.shape == H_dl.shape == (32, 8)
        if model == "shared":
            assert np.array_equal(g.phases[UL], g.phases[DL])
