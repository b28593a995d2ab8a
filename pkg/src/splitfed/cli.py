"""``splitfed`` command line: traffic tables, training runs, gradient checks and synthetic data.

Exit status is 0 on success, 1 when a run fails and 2 for bad
configuration (including a missing config or architecture file).
Set ``SPLITFED_LOG`` to a logging level name (e.g. ``INFO``) for progress logs.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

from splitfed import gradcheck
from splitfed.cfgfile import ConfigError
from splitfed.data import write_segments, synth_generate
from splitfed.experiment import (
    TRAFFIC_DEVICES, load_experiment, run_experiment, set_field, traffic_table, write_traffic_csv,
)
from splitfed.nn import load_architecture

log = logging.getLogger("splitfed")

# flag destination -> ExperimentConfig field
_FLAG_FIELDS = {
    "seed": "seed",
    "scheme": "scheme",
    "devices": "devices",
    "k": "k",
    "rounds": "rounds",
    "error_feedback": "error_feedback",
    "topk_scope": "topk_scope",
    "arch": "architecture",
}


def _common(p):
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", help="output directory (default: the config's output.dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--scheme")
    p.add_argument("--devices", type=int)
    p.add_argument("--k", type=float, help="fraction of cut entries kept, in (0, 1]")
    p.add_argument("--rounds", type=int)
    p.add_argument("--error-feedback", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--topk-scope", choices=("tensor", "sample"))
    p.add_argument("--arch", help="architecture file or shipped config name")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitfed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("traffic", help="per-iteration traffic table for FedAvg, SplitNN and the sparse split")
    _common(p)
    p.add_argument("--batch", type=int, help="per-device batch size (default: from config)")

    p = sub.add_parser("train", help="run a training experiment and write metrics.csv")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every layer and the split backward")
    _common(p)
    p.add_argument("--cases", type=int, default=50, help="randomized cases per suite")
    p.add_argument("--suite", action="append", help="restrict to these layer suites")
    p.add_argument("--no-split", action="store_true", help="skip the end-to-end split check")

    p = sub.add_parser("synth-data", help="write synthetic train.csv and test.csv")
    _common(p)
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    return parser


def load_config(args):
    """Config file, then ``--set`` overrides, then the dedicated flags."""
    cfg = load_experiment(args.config, args.set)
    for dest, name in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_field(cfg, name, value)
    return cfg


def _fmt_bytes(n):
    for unit, size in (("GiB", 2**30), ("MiB", 2**20), ("KiB", 2**10)):
        if n >= size:
            return f"{n / size:.2f} {unit}"
    return f"{n} B"


def cmd_traffic(args, cfg):
    arch = load_architecture(cfg.resolve(cfg.architecture))
    model = arch.build(seed=cfg.seed)
    batch = args.batch or cfg.batch_size
    cut = cfg.cut_index if cfg.cut_index is not None else arch.default_cut
    rows = traffic_table(model, batch, cfg.k, TRAFFIC_DEVICES, cut, cfg.topk_scope)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_traffic_csv(rows, out / "traffic_table.csv")

    table = defaultdict(dict)
    for r in rows:
        table[r["devices"]][r["scheme"]] = r
    schemes = ("FedAvg", "SplitNN", "Proposed")
    print(f"{arch.name}: batch {batch}, k {cfg.k}, cut after layer {cut}")
    for mode, key in (("values-only", "values_only_bytes"), ("on-wire", "on_wire_bytes")):
        print(f"\n[{mode}]")
        print(f"{'devices':>8}" + "".join(f"{s:>14}" for s in schemes))
        for m in TRAFFIC_DEVICES:
            print(f"{m:>8}" + "".join(f"{_fmt_bytes(table[m][s][key]):>14}" for s in schemes))
    print(f"\nwrote {out / 'traffic_table.csv'}")
    return 0


def cmd_train(args, cfg):
    def show(m):
        acc = "" if m.pooled_acc is None else f"  pooled_acc {m.pooled_acc:.4f}"
        print(f"round {m.round:>5}  loss {m.loss:.4f}{acc}  bytes {m.bytes_values_only}", flush=True)

    out = Path(args.out or cfg.out_dir)
    series = run_experiment(cfg, out, on_round=show)
    print(f"{len(series)} rounds -> {out / 'metrics.csv'}")
    return 0


def cmd_gradcheck(args, cfg):
    suites = gradcheck.LAYER_SUITES
    if args.suite:
        unknown = sorted(set(args.suite) - set(suites))
        if unknown:
            raise ConfigError(f"unknown gradcheck suite(s): {', '.join(unknown)}; have {', '.join(suites)}")
        suites = {k: v for k, v in suites.items() if k in args.suite}
    results = gradcheck.run_gradcheck(args.cases, cfg.seed, suites, include_split=not args.no_split)
    by_suite = defaultdict(list)
    for r in results:
        by_suite[r.suite].append(r)
    failed = 0
    for suite, rs in by_suite.items():
        bad = [r for r in rs if not r.passed]
        failed += len(bad)
        worst = max(r.error for r in rs)
        print(f"{'FAIL' if bad else 'ok':4} {suite:12} {len(rs):5} checks  max rel error {worst:.2e}")
        for r in bad[:5]:
            print(f"       case {r.case}: {r.target} rel error {r.error:.3e}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_synth(args, cfg):
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    sizes = {"train": args.train_size or cfg.train_size, "test": args.test_size or cfg.test_size}
    for offset, (split, n) in enumerate(sizes.items()):
        ds = synth_generate(n, seed=2 * seed + offset, positive_rate=cfg.positive_rate, noise=cfg.noise)
        write_segments(ds, out / f"{split}.csv")
        print(f"wrote {n} segments to {out / f'{split}.csv'}")
    return 0


COMMANDS = {"traffic": cmd_traffic, "train": cmd_train, "gradcheck": cmd_gradcheck, "synth-data": cmd_synth}


def main(argv=None) -> int:
    level = os.environ.get("SPLITFED_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"splitfed: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("run failed", exc_info=True)
        print(f"splitfed: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
