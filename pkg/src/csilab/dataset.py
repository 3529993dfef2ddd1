"""Channel datasets: generation and the binary ``CSIL`` file format.

Layout (all little-endian)::

    b"CSIL" | u32 version | u32 manifest_len | manifest JSON (utf-8)
    payload: per drop
        u32 drop_id
        K x { H_ul_clean, H_ul_noisy[snr_0], ..., H_ul_noisy[snr_S-1], H_dl }
        each matrix N_tx x M complex64, row-major, interleaved re/im
    32-byte SHA-256 of the payload

A JSON sidecar ``<file>.geom.json`` holds per-UE geometry summaries.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .channel import generate_drop
from .config import ScenarioConfig
from .errors import FormatError

MAGIC = b"CSIL"
VERSION = 1
VAL_DROP_OFFSET = 1_000_000


@dataclass
class ChannelDataset:
    cfg: ScenarioConfig
    seed: int
    snr_list: tuple
    drop_ids: np.ndarray                 # (D,) strictly increasing
    ul_clean: np.ndarray                 # (D, K, N, M) complex64
    ul_noisy: np.ndarray                 # (S, D, K, N, M) complex64
    dl: np.ndarray                       # (D, K, N, M) complex64
    geometry: list = field(default_factory=list)   # per drop: list of K dicts

    def __post_init__(self):
        self.snr_list = tuple(float(s) for s in self.snr_list)
        if len(self.drop_ids) > 1 and np.any(np.diff(self.drop_ids) <= 0):
            raise FormatError("drop ids must be strictly increasing")

    @property
    def n_drops(self) -> int:
        return len(self.drop_ids)

    def noisy(self, snr_db: float) -> np.ndarray:
        try:
            return self.ul_noisy[self.snr_list.index(float(snr_db))]
        except ValueError:
            raise KeyError(f"SNR {snr_db} dB not in dataset {self.snr_list}") from None

    def subset(self, idx) -> "ChannelDataset":
        idx = np.asarray(idx)
        geom = [self.geometry[i] for i in idx] if self.geometry else []
        return ChannelDataset(self.cfg, self.seed, self.snr_list, self.drop_ids[idx],
                              self.ul_clean[idx], self.ul_noisy[:, idx], self.dl[idx], geom)

    def manifest(self) -> dict:
        K, N, M = self.ul_clean.shape[1:]
        return {
            "format": "csilab-dataset",
            "version": VERSION,
            "scenario": self.cfg.to_dict(),
            "seed": int(self.seed),
            "n_drops": int(self.n_drops),
            "snr_list": list(self.snr_list),
            "layout": {
                "record": "u32 drop_id, then per UE: ul_clean, ul_noisy[snr_list], dl",
                "K": int(K), "matrix": [int(N), int(M)], "dtype": "<c8",
            },
            "checksum": "sha256",
        }


def _geometry_summary(geom) -> dict:
    return {
        "distance_m": round(float(geom.distance_m), 9),
        "azimuth_rad": round(float(geom.azimuth_rad), 9),
        "height_m": round(float(geom.height_m), 9),
        "is_los": bool(geom.is_los),
        "n_clusters": int(len(geom.cluster_delays)),
        "k_factor": round(float(geom.k_factor), 9),
        "pathloss_db": round(float(geom.pathloss_db), 9),
    }


def generate_dataset(cfg: ScenarioConfig, seed: int, n_drops: int, snr_list=(5.0,),
                     first_drop: int = 0) -> ChannelDataset:
    """Drops ``first_drop .. first_drop+n_drops-1``; each is seeded independently,
    so any range of drop ids can be regenerated on its own."""
    snr_list = tuple(float(s) for s in snr_list)
    K, N, M = cfg.K, cfg.N_tx, cfg.M
    ul = np.empty((n_drops, K, N, M), np.complex64)
    dl = np.empty_like(ul)
    noisy = np.empty((len(snr_list), n_drops, K, N, M), np.complex64)
    geometry = []
    for i in range(n_drops):
        drop = generate_drop(cfg, seed, first_drop + i, snr_list)
        for k, ue in enumerate(drop.ues):
            ul[i, k] = ue.H_ul_clean
            dl[i, k] = ue.H_dl
            for s, snr in enumerate(snr_list):
                noisy[s, i, k] = ue.H_ul_noisy[snr]
        geometry.append([_geometry_summary(ue.geometry) for ue in drop.ues])
    ids = np.arange(first_drop, first_drop + n_drops, dtype=np.int64)
    return ChannelDataset(cfg, seed, snr_list, ids, ul, noisy, dl, geometry)


def _payload(ds: ChannelDataset) -> bytes:
    S = len(ds.snr_list)
    # per drop: K x (1 + S + 1) matrices
    mats = np.concatenate([ds.ul_clean[:, :, None], np.moveaxis(ds.ul_noisy, 0, 2),
                           ds.dl[:, :, None]], axis=2).astype("<c8")
    rec = mats.reshape(ds.n_drops, -1).view("<f4").view(np.uint8).reshape(ds.n_drops, -1)
    ids = ds.drop_ids.astype("<u4").view(np.uint8).reshape(-1, 4)
    assert rec.shape[1] == ds.ul_clean[0].size * (S + 2) * 8
    return np.concatenate([ids, rec], axis=1).tobytes()


def save_dataset(ds: ChannelDataset, path) -> None:
    head = json.dumps(ds.manifest(), sort_keys=True).encode()
    payload = _payload(ds)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(head)))
        f.write(head)
        f.write(payload)
        f.write(hashlib.sha256(payload).digest())
    with open(str(path) + ".geom.json", "w") as f:
        json.dump({"drop_ids": ds.drop_ids.tolist(), "ues": ds.geometry}, f, sort_keys=True)


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise FormatError(f"{path}: not a csilab dataset")
        version, n = struct.unpack("<II", head[4:])
        if version != VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        try:
            return json.loads(f.read(n))
        except ValueError as e:
            raise FormatError(f"{path}: bad manifest ({e})") from None


def load_dataset(path, verify: bool = True) -> ChannelDataset:
    man = read_manifest(path)
    with open(path, "rb") as f:
        data = f.read()
    n_head = struct.unpack("<I", data[8:12])[0]
    payload, digest = data[12 + n_head:-32], data[-32:]
    if verify and hashlib.sha256(payload).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch")
    lay = man["layout"]
    K, (N, M) = lay["K"], lay["matrix"]
    S, D = len(man["snr_list"]), man["n_drops"]
    rec_bytes = 4 + K * (S + 2) * N * M * 8
    if len(payload) != D * rec_bytes:
        raise FormatError(f"{path}: payload length {len(payload)} != {D} x {rec_bytes}")
    raw = np.frombuffer(payload, np.uint8).reshape(D, rec_bytes)
    ids = raw[:, :4].copy().view("<u4").reshape(D).astype(np.int64)
    mats = raw[:, 4:].copy().view("<c8").reshape(D, K, S + 2, N, M).astype(np.complex64)
    cfg = ScenarioConfig.from_dict(man["scenario"])
    geom = []
    side = str(path) + ".geom.json"
    if os.path.exists(side):
        with open(side) as f:
            geom = json.load(f)["ues"]
    return ChannelDataset(cfg, man["seed"], tuple(man["snr_list"]), ids,
                          mats[:, :, 0], np.moveaxis(mats[:, :, 1:S + 1], 2, 0).copy(),
                          mats[:, :, S + 1], geom)
