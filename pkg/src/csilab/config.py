"""Scenario and training configuration.

All defaults reproduce the system-parameter table of the reference setup
(3.4/3.5 GHz FDD, K=5, dual-polarized 4x4 UPA, 8 subbands, P=32, 5/3/4-bit
quantization).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError


PHASE_MODELS = ("shared", "carrier", "independent")


@dataclass(frozen=True)
class ScenarioConfig:
    f_c_ul: float = 3.4e9
    f_c_dl: float = 3.5e9
    K: int = 5
    N_h: int = 4
    N_v: int = 4
    M: int = 8
    N_s: int = 1
    subcarrier_spacing: float = 15e3
    sector_deg: float = 120.0
    h_bs_m: float = 25.0
    ue_height_range_m: tuple[float, float] = (1.5, 22.5)
    ue_distance_range_m: tuple[float, float] = (35.0, 250.0)
    p_tx_dbm: float = 35.0
    noise_figure_db: float = 5.0
    # cluster model, (LOS, NLOS) pairs
    n_clusters: tuple[int, int] = (12, 20)
    n_rays: int = 20
    cluster_ds_ns: tuple[float, float] = (98.3, 406.5)
    cluster_as_deg: tuple[float, float] = (13.2, 27.4)
    ray_ds_ns: float = 4.7
    ray_as_deg: tuple[float, float] = (5.0, 2.0)
    cluster_shadow_db: float = 3.0
    k_factor_db: float = 9.0
    # UL/DL small-scale phases: shared | carrier | independent
    phase_model: str = "shared"
    # pathloss: PL = alpha + 10*beta*log10(d), alpha includes 20log10(f/GHz)
    pl_los: tuple[float, float] = (28.0, 2.2)
    pl_nlos: tuple[float, float] = (13.54, 3.9)
    # codebook
    P: int = 32
    Q_w: int = 5
    Q_na: int = 3
    Q_np: int = 4
    O_h: int = 1
    O_v: int = 1

    def __post_init__(self):
        for name in ("K", "N_h", "N_v", "M", "N_s", "n_rays", "P", "Q_w", "Q_na", "Q_np", "O_h", "O_v"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.f_c_ul == self.f_c_dl:
            raise ConfigError("uplink and downlink carriers must differ (FDD)")
        if self.phase_model not in PHASE_MODELS:
            raise ConfigError(f"phase_model must be one of {PHASE_MODELS}")
        if min(self.n_clusters) < 1:
            raise ConfigError("cluster counts must be >= 1")
        d0, d1 = self.ue_distance_range_m
        if not 0 < d0 <= d1:
            raise ConfigError("ue_distance_range_m must satisfy 0 < d_min <= d_max")
        h0, h1 = self.ue_height_range_m
        if not 0 < h0 <= h1:
            raise ConfigError("ue_height_range_m must satisfy 0 < h_min <= h_max")
        if self.P > self.n_ports:
            raise ConfigError(f"P={self.P} exceeds the {self.n_ports} available ports")
        if self.K > self.N_tx:
            raise ConfigError("K must not exceed N_tx for zero-forcing")

    @property
    def N_tx(self) -> int:
        return 2 * self.N_h * self.N_v

    @property
    def n_ports(self) -> int:
        return self.N_tx * self.M

    @property
    def subband_bandwidth(self) -> float:
        return self.N_s * 12 * self.subcarrier_spacing

    @property
    def p_tx_w(self) -> float:
        return 10 ** (self.p_tx_dbm / 10) * 1e-3

    @property
    def payload_bits(self) -> int:
        sci = math.ceil(math.log2(self.P)) if self.P > 1 else 0
        return sci + self.Q_w + (self.P - 1) * (self.Q_na + self.Q_np)

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass
class TrainConfig:
    """Training hyper-parameters. Key names are part of the config file format."""

    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 64
    gamma: float = 2.0
    w_shortcut: float = 0.05
    mu: float = 2000.0
    switch_delta: float = 0.02
    switch_patience: int = 5
    seed: int = 0
    snr_list: list[float] = field(default_factory=lambda: [-5.0, 0.0, 5.0, 10.0, 15.0])
    P: int = 32
    channels: tuple[int, int] = (64, 128)
    stage1_only: bool = False
    eval_snr_db: float = 5.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        self.channels = tuple(self.channels)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


PRESETS: dict[str, dict[str, Any]] = {
    # desk: reduced width/epochs so a CPU finishes in hours
    "desk": {"train_drops": 8192, "val_drops": 512,
             "train": {"epochs": 50, "lr": 1e-4, "channels": [64, 128]}},
    "paper": {"train_drops": 20480, "val_drops": 512,
              "train": {"epochs": 200, "lr": 3e-6, "channels": [256, 512]}},
}


def load_config_file(path) -> dict[str, Any]:
    """Read a JSON config with optional ``scenario`` and ``train`` sections."""
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    return d
