"""Evaluation sweeps and training orchestration behind the CLI."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import models, neuro
from .codebook import (PortIndexSet, dequantize_feedback, measure_port_coefficients,
                       quantize_feedback, reconstruct_typeii, select_ports_by_power,
                       sparse_grid)
from .config import TrainConfig
from .dataset import ChannelDataset, load_dataset
from .errors import ConfigError, FormatError
from .precoding import average_sum_rate, noise_power, zf_precode
from .xform import build_angular_basis, build_delay_basis

log = logging.getLogger(__name__)

MODES = ("typeii-baseline", "perfect-ul-bound", "dl-select", "dl-recon", "dl-both",
         "perfect-csi-bound")
NEEDS_SELECTOR = {"dl-select", "dl-both"}
NEEDS_RECON = {"dl-recon", "dl-both"}
CSV_COLUMNS = ["mode", "snr_db", "P", "n_drops", "P_N_mean", "P_N_std",
               "R_avg_mean", "R_avg_std", "seed"]


@dataclass
class SweepSpec:
    modes: list
    snr_list: list
    P_list: list
    dataset: str
    selector: str | None = None
    reconstructor: str | None = None
    out: str | None = None
    seed: int = 0
    zf_ridge: float = 0.0
    quantize: bool = True
    max_drops: int | None = None

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown sweep modes {bad}; choose from {list(MODES)}")
        if not os.path.exists(self.dataset):
            raise ConfigError(f"dataset {self.dataset} not found")
        if NEEDS_SELECTOR & set(self.modes) and not self.selector:
            raise ConfigError("modes dl-select/dl-both need --selector")
        if NEEDS_RECON & set(self.modes) and not self.reconstructor:
            raise ConfigError("modes dl-recon/dl-both need --reconstructor")
        for p in (self.selector, self.reconstructor):
            if p and not os.path.exists(p):
                raise ConfigError(f"model file {p} not found")


# ------------------------------------------------------------ model files

def save_model(path, net, kind: str, cfg: TrainConfig, extra: dict | None = None):
    man = {"kind": kind, "n_tx": net.n_tx, "M": net.M, "channels": list(net.channels),
           "train": cfg.to_dict()}
    if kind == "reconstructor":
        man["w"] = net.w
    man.update(extra or {})
    neuro.save_checkpoint(path, man, net.state_arrays())


def load_model(path, kind: str | None = None):
    man, arrays = neuro.load_checkpoint(path)
    if kind and man.get("kind") != kind:
        raise FormatError(f"{path} holds a {man.get('kind')} model, expected {kind}")
    if man["kind"] == "selector":
        net = models.SelectorNetwork(man["n_tx"], man["M"], man["channels"])
    elif man["kind"] == "reconstructor":
        net = models.ReconstructorNetwork(man["n_tx"], man["M"], man["channels"], w=man["w"])
    else:
        raise FormatError(f"{path}: unknown model kind {man['kind']!r}")
    net.load_state_arrays(arrays)
    return net, man


# ------------------------------------------------------------ evaluation

@dataclass
class DropResult:
    P_N: np.ndarray          # (K,)
    R_avg: float


class Evaluator:
    """Runs one sweep mode on single drops of a dataset."""

    def __init__(self, ds: ChannelDataset, selector=None, reconstructor=None,
                 zf_ridge: float = 0.0, quantize: bool = True):
        cfg = ds.cfg
        self.ds, self.cfg = ds, cfg
        self.ab = build_angular_basis(cfg.N_h, cfg.N_v, cfg.O_h, cfg.O_v)
        self.db = build_delay_basis(cfg.M)
        self.selector, self.reconstructor = selector, reconstructor
        self.ridge, self.quantize = zf_ridge, quantize
        self.sigma2 = noise_power(cfg)

    def grid(self, H):
        return self.ab.W_A.conj().T @ np.asarray(H, complex) @ self.db.W_D

    def ports(self, mode, d, snr_db, P):
        ds = self.ds
        if mode == "perfect-ul-bound":
            src = ds.ul_clean[d]
        else:
            src = ds.noisy(snr_db)[d]
        if mode in NEEDS_SELECTOR:
            x = models.preprocess_selector_input(src.astype(complex), self.ab, self.db)
            o = self.selector.forward(x, train=False)
            return [models.top_p_ports(o[k], P, self.cfg.N_tx, self.cfg.M) for k in range(len(o))]
        return [select_ports_by_power(np.abs(self.grid(H)) ** 2, P) for H in src]

    def feedback_grid(self, H_dl, ports):
        """Returns (grid of fed-back coefficients, reconstructed channel)."""
        c = measure_port_coefficients(H_dl, ports, self.ab, self.db)
        if self.quantize:
            pay = quantize_feedback(c, ports, self.cfg.Q_w, self.cfg.Q_na, self.cfg.Q_np,
                                    self.ab.n_per_pol)
            c = dequantize_feedback(pay, ports, self.ab.n_per_pol)
        return sparse_grid(c, ports, self.ab, self.db), reconstruct_typeii(c, ports, self.ab, self.db)

    def run_drop(self, mode, d, snr_db, P) -> DropResult:
        H_dl = self.ds.dl[d].astype(complex)
        if mode == "perfect-csi-bound":
            H_hat = list(H_dl)
            pn = np.ones(len(H_dl))
        else:
            sel = self.ports(mode, d, snr_db, P)
            pn = np.empty(len(H_dl))
            H_hat = []
            grids = []
            for k, (H, ports) in enumerate(zip(H_dl, sel)):
                pw = np.abs(self.grid(H)) ** 2
                pn[k] = pw[ports.angular, ports.delay].sum() / pw.sum()
                g, Hh = self.feedback_grid(H, ports)
                grids.append(g)
                H_hat.append(Hh)
            if mode in NEEDS_RECON:
                G = models.frobenius_normalize(np.array(grids))
                G = models.refine_grids(self.reconstructor, G)
                H_hat = list(self.ab.W_A @ G @ self.db.W_D.conj().T)
        prec = zf_precode(H_hat, self.cfg.p_tx_w, ridge=self.ridge)
        R = average_sum_rate(list(H_dl), prec, self.sigma2).R_avg
        return DropResult(pn, R)

    def run(self, mode, snr_db, P, drops=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-UE P_N (n, K) and per-drop R_avg (n,) in drop-id order."""
        drops = range(self.ds.n_drops) if drops is None else drops
        res = [self.run_drop(mode, d, snr_db, P) for d in drops]
        return np.array([r.P_N for r in res]), np.array([r.R_avg for r in res])


def _fmt(x) -> str:
    return format(float(x), ".10g")


def cmd_eval(spec: SweepSpec) -> str:
    """Run the sweep and return (and optionally write) the CSV text.

    P_N statistics are over all UEs of all drops; R_avg statistics over drops.
    """
    ds = load_dataset(spec.dataset)
    if spec.max_drops:
        ds = ds.subset(np.arange(min(spec.max_drops, ds.n_drops)))
    missing = [s for s in spec.snr_list if float(s) not in ds.snr_list]
    if missing:
        raise ConfigError(f"SNRs {missing} not in dataset (has {list(ds.snr_list)})")
    sel = load_model(spec.selector, "selector")[0] if spec.selector else None
    rec = load_model(spec.reconstructor, "reconstructor")[0] if spec.reconstructor else None
    ev = Evaluator(ds, sel, rec, spec.zf_ridge, spec.quantize)
    with open(spec.dataset, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()[:16]
    header = {"modes": list(spec.modes), "snr_list": list(spec.snr_list),
              "P_list": list(spec.P_list), "dataset_sha256": digest,
              "n_drops": ds.n_drops, "zf_ridge": spec.zf_ridge, "quantize": spec.quantize,
              "selector": os.path.basename(spec.selector) if spec.selector else None,
              "reconstructor": os.path.basename(spec.reconstructor) if spec.reconstructor else None}
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for mode in spec.modes:
        for snr in spec.snr_list:
            for P in spec.P_list:
                pn, R = ev.run(mode, float(snr), int(P))
                w.writerow([mode, _fmt(snr), int(P), ds.n_drops, _fmt(pn.mean()), _fmt(pn.std()),
                            _fmt(R.mean()), _fmt(R.std()), spec.seed])
                log.info("%s snr=%s P=%s P_N=%.4f R_avg=%.3f", mode, snr, P, pn.mean(), R.mean())
    text = buf.getvalue()
    if spec.out:
        with open(spec.out, "w") as f:
            f.write(text)
    return text


def read_results_csv(path_or_text) -> list[dict]:
    text = path_or_text
    if os.path.exists(str(path_or_text)):
        with open(path_or_text) as f:
            text = f.read()
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


# ------------------------------------------------------------ training

STATE_FILE = "state.csik"
MODEL_FILE = "model.csik"
HISTORY_FILE = "history.csv"


def _save_state(path, kind, st: models.TrainState, cfg: TrainConfig):
    arrays = st.net.state_arrays() + list(st.adam.m) + list(st.adam.v) + st.best_state
    man = {"kind": kind, "n_tx": st.net.n_tx, "M": st.net.M, "epoch": st.epoch,
           "stage": st.stage, "adam_step": st.adam.step, "history": st.history.to_dict(),
           "train": cfg.to_dict(), "n_state": len(st.best_state), "n_params": len(st.adam.m)}
    neuro.save_checkpoint(path, man, arrays)


def _load_state(path, kind, cfg: TrainConfig) -> models.TrainState:
    man, arrays = neuro.load_checkpoint(path)
    if man.get("kind") != kind:
        raise FormatError(f"{path}: state is for {man.get('kind')}, not {kind}")
    new = models.new_selector_state if kind == "selector" else models.new_recon_state
    st = new(cfg, man["n_tx"], man["M"])
    n_s, n_p = man["n_state"], man["n_params"]
    st.net.load_state_arrays(arrays[:n_s])
    st.adam.step = man["adam_step"]
    if n_p:
        st.adam.m = arrays[n_s:n_s + n_p]
        st.adam.v = arrays[n_s + n_p:n_s + 2 * n_p]
    st.best_state = arrays[n_s + 2 * n_p:]
    st.history = models.TrainHistory.from_dict(man["history"])
    st.epoch, st.stage = man["epoch"], man["stage"]
    return st


def write_history(path, rows):
    with open(path, "w", newline="") as f:
        # fixed column order, whatever order the rows were built or reloaded in
        keys = sorted(rows[0], key=lambda k: (k not in ("epoch", "run"), k)) if rows else ["epoch"]
        w = csv.DictWriter(f, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class TrainInputs:
    kind: str
    train: ChannelDataset
    val: ChannelDataset
    cfg: TrainConfig
    data: tuple = field(default=None, repr=False)

    def prepared(self):
        if self.data is None:
            scn = self.train.cfg
            ab = build_angular_basis(scn.N_h, scn.N_v, scn.O_h, scn.O_v)
            db = build_delay_basis(scn.M)
            if self.kind == "selector":
                snrs = sorted(set(self.cfg.snr_list) | {float(self.cfg.eval_snr_db)})
                for ds in (self.train, self.val):
                    miss = [s for s in snrs if float(s) not in ds.snr_list]
                    if miss:
                        raise ConfigError(f"dataset lacks SNRs {miss}")
                tr = models.prepare_selector_data(self.train, ab, db, self.cfg.P, snrs)
                va = models.prepare_selector_data(self.val, ab, db, self.cfg.P, snrs)
            else:
                tr = models.prepare_recon_data(self.train, ab, db, scn, self.cfg.P,
                                               snr_db=self.cfg.eval_snr_db)
                va = models.prepare_recon_data(self.val, ab, db, scn, self.cfg.P,
                                               snr_db=self.cfg.eval_snr_db)
            self.data = (tr, va, ab, db)
        return self.data


def train_one(inp: TrainInputs, out_dir, resume: bool = False, epochs: int | None = None):
    """Train one run into ``out_dir``; the training state is saved after each
    epoch so an interrupted run can resume. Returns the final TrainState."""
    os.makedirs(out_dir, exist_ok=True)
    tr, va, ab, db = inp.prepared()
    state_path = os.path.join(out_dir, STATE_FILE)
    st = _load_state(state_path, inp.kind, inp.cfg) if resume and os.path.exists(state_path) else None

    def on_epoch(row):
        log.info("%s seed=%d %s", inp.kind, inp.cfg.seed, row)

    remaining = inp.cfg.epochs - (st.epoch if st else 0) if epochs is None else epochs
    for _ in range(max(remaining, 0)):
        if inp.kind == "selector":
            st = models.train_selector(tr, va, inp.cfg, st, epochs=1, log=on_epoch)
        else:
            st = models.train_reconstructor(tr, va, ab, db, inp.cfg, st, epochs=1, log=on_epoch)
        _save_state(state_path, inp.kind, st, inp.cfg)
    if st is None:
        new = models.new_selector_state if inp.kind == "selector" else models.new_recon_state
        st = new(inp.cfg, inp.train.cfg.N_tx, inp.train.cfg.M)
    write_history(os.path.join(out_dir, HISTORY_FILE), st.history.rows)
    final = st.net.copy_state()
    st.net.load_state_arrays(st.best_state)
    save_model(os.path.join(out_dir, MODEL_FILE), st.net, inp.kind, inp.cfg,
               {"best_epoch": st.history.best_epoch, "switch_epoch": st.history.switch_epoch})
    st.net.load_state_arrays(final)
    return st


def cmd_train(kind: str, train_path, val_path, cfg: TrainConfig, out, runs: int = 1,
              resume: bool = False) -> list[dict]:
    """Train ``runs`` models with seeds ``cfg.seed + i`` and write a summary CSV
    with per-run rows plus ``mean``/``std``/``best`` aggregate rows."""
    if kind not in ("selector", "reconstructor"):
        raise ConfigError(f"unknown model kind {kind!r}")
    inp = TrainInputs(kind, load_dataset(train_path), load_dataset(val_path), cfg)
    metric = "val_P_N" if kind == "selector" else "val_R_avg"
    rows = []
    for i in range(runs):
        c = TrainConfig.from_dict(dict(cfg.to_dict(), seed=cfg.seed + i))
        inp.cfg = c
        st = train_one(inp, os.path.join(out, f"run{i}"), resume)
        h = st.history
        rows.append({"run": str(i), "seed": c.seed, "best_epoch": h.best_epoch,
                     "best_" + metric: h.best_metric,
                     "final_" + metric: h.rows[-1][metric] if h.rows else float("nan"),
                     "switch_epoch": h.switch_epoch if h.switch_epoch is not None else ""})
    for name, fn in (("mean", np.mean), ("std", np.std), ("best", np.max)):
        rows.append({"run": name, "seed": "", "best_epoch": "",
                     "best_" + metric: float(fn([r["best_" + metric] for r in rows[:runs]])),
                     "final_" + metric: float(fn([r["final_" + metric] for r in rows[:runs]])),
                     "switch_epoch": ""})
    os.makedirs(out, exist_ok=True)
    write_history(os.path.join(out, "summary.csv"), rows)
    return rows


# ------------------------------------------------------------ payload dump

def cmd_payload(dataset, drop: int, ue: int, snr_db: float = 5.0, P: int | None = None) -> dict:
    """Quantized feedback for one UE, ports chosen by noisy-UL power."""
    ds = load_dataset(dataset)
    idx = np.flatnonzero(ds.drop_ids == drop)
    if not len(idx):
        raise ConfigError(f"drop {drop} not in dataset")
    if not 0 <= ue < ds.cfg.K:
        raise ConfigError(f"ue must be in [0, {ds.cfg.K})")
    ev = Evaluator(ds)
    d = int(idx[0])
    P = P or ds.cfg.P
    ports = select_ports_by_power(np.abs(ev.grid(ds.noisy(snr_db)[d, ue])) ** 2, P)
    c = measure_port_coefficients(ds.dl[d, ue].astype(complex), ports, ev.ab, ev.db)
    pay = quantize_feedback(c, ports, ds.cfg.Q_w, ds.cfg.Q_na, ds.cfg.Q_np, ev.ab.n_per_pol)
    return {"drop": drop, "ue": ue, "snr_db": snr_db, "P": P, "bits": pay.total_bits,
            "sci": int(pay.sci), "strongest": int(np.argmax(np.abs(c))),
            "ports": ports.flat.tolist(), "hex": pay.hex()}
