"""Generate a validation set and sweep P and SNR for the untrained modes.

Writes ``<out>/val.csil``, ``<out>/sweep_P.csv`` and ``<out>/sweep_snr.csv``.
Trained modes need ``--selector``/``--reconstructor`` checkpoints from
``csilab train``.

    python3 scripts/run_sweeps.py --out runs/desk --drops 200
"""
import argparse
import os
import sys

from csilab.cli import main as csilab


def run(argv):
    print("csilab", " ".join(argv))
    code = csilab(argv)
    if code:
        sys.exit(code)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--drops", type=int, default=512)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--selector")
    p.add_argument("--reconstructor")
    args = p.parse_args()
    os.makedirs(args.out, exist_ok=True)
    val = os.path.join(args.out, "val.csil")
    snrs = ["-5", "0", "5", "10", "15"]
    if not os.path.exists(val):
        run(["gen", "--val", "--drops", str(args.drops), "--seed", str(args.seed),
             "--out", val, "--snr", *snrs])
    modes = ["typeii-baseline", "perfect-ul-bound", "perfect-csi-bound"]
    extra = []
    if args.selector:
        modes.append("dl-select")
        extra += ["--selector", args.selector]
    if args.reconstructor:
        modes.append("dl-recon")
        extra += ["--reconstructor", args.reconstructor]
    if args.selector and args.reconstructor:
        modes.append("dl-both")
    run(["eval", "--dataset", val, "--modes", *modes, "--snr", "5", "--P", "8,16,24,32,48,64",
         "--out", os.path.join(args.out, "sweep_P.csv"), *extra])
    run(["eval", "--dataset", val, "--modes", *modes, "--snr", *snrs, "--P", "32",
         "--out", os.path.join(args.out, "sweep_snr.csv"), *extra])


if __name__ == "__main__":
    main()
