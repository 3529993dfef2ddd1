"""Regenerate the frozen values in tests/fixtures/.

Golden numbers come from straight-line reimplementations here (explicit
loops, pseudo-inverse ZF), not from the library code under test. Run from the
repository root:  python3 scripts/regen_golden.py
"""
import json
import math
import os

import numpy as np

from csilab.channel import generate_drop
from csilab.config import ScenarioConfig
from csilab.dataset import generate_dataset, save_dataset

HERE = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures")
K_B = 1.380649e-23


def oracle_sum_rate(H_list, p_tx, sigma2):
    K = len(H_list)
    N, M = H_list[0].shape
    total = 0.0
    for m in range(M):
        A = np.array([H[:, m] / np.linalg.norm(H[:, m]) for H in H_list]).conj()
        U = np.linalg.pinv(A)
        V = [U[:, k] / np.linalg.norm(U[:, k]) * math.sqrt(p_tx / (M * K)) for k in range(K)]
        for k in range(K):
            h = H_list[k][:, m]
            sig = abs(np.vdot(h, V[k])) ** 2
            interf = sum(abs(np.vdot(h, V[j])) ** 2 for j in range(K) if j != k)
            total += math.log2(1 + sig / (interf + sigma2))
    return total / M


def main():
    os.makedirs(HERE, exist_ok=True)
    cfg = ScenarioConfig()
    drop = generate_drop(cfg, 1234, 0)
    p_tx = 10 ** (cfg.p_tx_dbm / 10) / 1000
    sigma2 = K_B * 290 * cfg.N_s * 12 * cfg.subcarrier_spacing * 10 ** (cfg.noise_figure_db / 10)
    golden = {
        "drop_seed": 1234, "drop_id": 0,
        "R_avg_perfect_csi": oracle_sum_rate([u.H_dl for u in drop.ues], p_tx, sigma2),
        "sigma2": sigma2,
        "H_dl_ue0_sum": [float(drop.ues[0].H_dl.sum().real), float(drop.ues[0].H_dl.sum().imag)],
    }
    with open(os.path.join(HERE, "golden.json"), "w") as f:
        json.dump(golden, f, indent=1, sort_keys=True)
    # format-stability fixture: a tiny dataset written by the current version
    small = ScenarioConfig(K=2, N_h=2, N_v=1, M=2, P=4, n_clusters=(2, 3), n_rays=3)
    save_dataset(generate_dataset(small, 5, 3, (0.0, 5.0)), os.path.join(HERE, "tiny_v1.csil"))
    print(json.dumps(golden, indent=1))


if __name__ == "__main__":
    main()
