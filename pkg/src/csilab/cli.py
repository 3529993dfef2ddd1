"""``csilab gen|eval|train|gradcheck|payload``.

Exit codes: 0 ok, 2 configuration error, 3 numerical error, 4 format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import PRESETS, ScenarioConfig, TrainConfig, load_config_file
from .errors import ConfigError, FormatError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4


def _floats(s):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def _ints(s):
    return [int(v) for v in _floats(s)]


def _flat(lists):
    return [v for sub in lists for v in sub]


def _configs(args) -> tuple[ScenarioConfig, dict, dict]:
    """Scenario config, training-key overrides and preset, from --preset then --config."""
    preset = PRESETS[args.preset]
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - {"scenario", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    scn = ScenarioConfig.from_dict(file_cfg.get("scenario", {}))
    train = dict(preset["train"], **file_cfg.get("train", {}))
    return scn, train, preset


def cmd_gen(args):
    from .dataset import VAL_DROP_OFFSET, generate_dataset, save_dataset
    scn, _, preset = _configs(args)
    n = args.drops if args.drops is not None else preset["val_drops" if args.val else "train_drops"]
    first = args.first_drop if args.first_drop is not None else (VAL_DROP_OFFSET if args.val else 0)
    ds = generate_dataset(scn, args.seed, n, _flat(args.snr), first)
    save_dataset(ds, args.out)
    print(f"wrote {n} drops ({ds.cfg.K} UEs each) to {args.out}")


def cmd_eval(args):
    from .experiments import MODES, SweepSpec, cmd_eval as run
    modes = MODES if args.modes == ["all"] else args.modes
    spec = SweepSpec(list(modes), _flat(args.snr), _flat(args.P), args.dataset, args.selector,
                     args.reconstructor, args.out, args.seed, args.zf_ridge,
                     not args.no_quantize, args.max_drops)
    text = run(spec)
    if not args.out:
        sys.stdout.write(text)


def cmd_train(args):
    from .experiments import cmd_train as run
    _, train, _ = _configs(args)
    if args.seed is not None:
        train["seed"] = args.seed
    if args.epochs is not None:
        train["epochs"] = args.epochs
    cfg = TrainConfig.from_dict(train)
    rows = run(args.kind, args.train, args.val, cfg, args.out, args.runs, args.resume)
    for r in rows:
        print(json.dumps(r))


def cmd_gradcheck(args):
    from .gradcheck import corrupted_control, format_report, run_all
    res = run_all(args.seed, args.only)
    control = corrupted_control(np.random.default_rng(args.seed))
    print(format_report(res, control))
    if not all(r.passed for _, r in res):
        raise NumericalError("gradient check failed")


def cmd_payload(args):
    from .experiments import cmd_payload as run
    print(json.dumps(run(args.dataset, args.drop, args.ue, args.snr, args.P), indent=1))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csilab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--config", help="JSON file with 'scenario' and/or 'train' sections")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        sp.add_argument("--seed", type=int, default=seed_default)

    g = sub.add_parser("gen", help="generate a channel dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--drops", type=int)
    g.add_argument("--first-drop", type=int)
    g.add_argument("--val", action="store_true", help="validation split (preset size, offset ids)")
    g.add_argument("--snr", type=_floats, nargs="+", default=[[-5.0, 0.0, 5.0, 10.0, 15.0]],
                   help="SNRs in dB, space or comma separated")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("eval", help="run an evaluation sweep to CSV")
    e.add_argument("--dataset", required=True)
    e.add_argument("--modes", nargs="+", default=["typeii-baseline", "perfect-ul-bound",
                                                  "perfect-csi-bound"])
    e.add_argument("--snr", type=_floats, nargs="+", default=[[5.0]])
    e.add_argument("--P", type=_ints, nargs="+", default=[[32]])
    e.add_argument("--selector")
    e.add_argument("--reconstructor")
    e.add_argument("--out")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--zf-ridge", type=float, default=0.0)
    e.add_argument("--no-quantize", action="store_true")
    e.add_argument("--max-drops", type=int)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train", help="train selector or reconstructor")
    t.add_argument("kind", choices=["selector", "reconstructor"])
    common(t, seed_default=None)
    t.add_argument("--train", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--runs", type=int, default=1)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("gradcheck", help="finite-difference check of all ops")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--only", nargs="*")
    c.set_defaults(func=cmd_gradcheck)

    y = sub.add_parser("payload", help="hex dump of one UE's feedback payload")
    y.add_argument("--dataset", required=True)
    y.add_argument("--drop", type=int, required=True)
    y.add_argument("--ue", type=int, default=0)
    y.add_argument("--snr", type=float, default=5.0)
    y.add_argument("--P", type=int)
    y.set_defaults(func=cmd_payload)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
