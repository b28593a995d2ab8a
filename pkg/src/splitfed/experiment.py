"""Experiment configuration files and the end-to-end experiment runner.

    [experiment]
    scheme = split-sparse
    devices = 8
    k = 0.1
    rounds = 300
    architecture = desk_small.cfg

    [data]
    source = synthetic
    train_size = 4096

    [output]
    dir = runs/desk

Relative ``architecture``/``train_path``/``test_path`` values resolve
against the config file's directory first, then the shipped configs.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

from splitfed import cfgfile, protocol
from splitfed.cfgfile import ConfigError
from splitfed.data import load_segments, synth_generate
from splitfed.federation import RoundMetrics, Scheme, evaluate, init_states, run_round
from splitfed.nn import load_architecture

log = logging.getLogger(__name__)


def _bool(v):
    low = str(v).lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v):
    return None if str(v).lower() in ("", "none", "default") else int(v)


# (section, key) -> (field name, converter, check, description of the check)
_SCHEMA = {
    ("experiment", "scheme"): ("scheme", str, lambda v: v in protocol.SCHEMES, f"one of {protocol.SCHEMES}"),
    ("experiment", "devices"): ("devices", int, lambda v: v >= 1, ">= 1"),
    ("experiment", "k"): ("k", float, lambda v: 0 < v <= 1, "in (0, 1]"),
    ("experiment", "error_feedback"): ("error_feedback", _bool, None, ""),
    ("experiment", "topk_scope"): ("topk_scope", str, lambda v: v in ("tensor", "sample"), "'tensor' or 'sample'"),
    ("experiment", "rounds"): ("rounds", int, lambda v: v >= 0, ">= 0"),
    ("experiment", "batch_size"): ("batch_size", int, lambda v: v >= 1, ">= 1"),
    ("experiment", "seed"): ("seed", int, lambda v: v >= 0, ">= 0"),
    ("experiment", "lr"): ("lr", float, lambda v: v > 0, "> 0"),
    ("experiment", "momentum"): ("momentum", float, lambda v: 0 <= v < 1, "in [0, 1)"),
    ("experiment", "local_steps"): ("local_steps", int, lambda v: v >= 1, ">= 1"),
    ("experiment", "eval_every"): ("eval_every", int, lambda v: v >= 1, ">= 1"),
    ("experiment", "architecture"): ("architecture", str, None, ""),
    ("experiment", "cut_index"): ("cut_index", _opt_int, None, ""),
    ("data", "source"): ("data_source", str, lambda v: v in ("synthetic", "csv"), "'synthetic' or 'csv'"),
    ("data", "train_size"): ("train_size", int, lambda v: v >= 1, ">= 1"),
    ("data", "test_size"): ("test_size", int, lambda v: v >= 1, ">= 1"),
    ("data", "positive_rate"): ("positive_rate", float, lambda v: 0 <= v <= 1, "in [0, 1]"),
    ("data", "noise"): ("noise", float, lambda v: v >= 0, ">= 0"),
    ("data", "seed"): ("data_seed", _opt_int, None, ""),
    ("data", "train_path"): ("train_path", str, None, ""),
    ("data", "test_path"): ("test_path", str, None, ""),
    ("data", "sharding"): ("sharding", str, lambda v: v in ("iid", "label-sorted"), "'iid' or 'label-sorted'"),
    ("data", "reference_train_size"): ("reference_train_size", int, None, ""),
    ("data", "reference_test_size"): ("reference_test_size", int, None, ""),
    ("output", "dir"): ("out_dir", str, None, ""),
}


@dataclass
class ExperimentConfig:
    scheme: str = "split-sparse"
    devices: int = 8
    k: float = 0.1
    error_feedback: bool = False
    topk_scope: str = "tensor"
    rounds: int = 300
    batch_size: int = 32
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    local_steps: int = 1
    eval_every: int = 1
    architecture: str = "desk_small.cfg"
    cut_index: int | None = None
    data_source: str = "synthetic"
    train_size: int = 4096
    test_size: int = 1024
    positive_rate: float = 0.5
    noise: float = 0.15
    data_seed: int | None = None
    train_path: str = ""
    test_path: str = ""
    sharding: str = "iid"
    reference_train_size: int = 74275
    reference_test_size: int = 13107
    out_dir: str = "runs/experiment"
    base_dir: str = "."

    def scheme_spec(self) -> Scheme:
        return Scheme(self.scheme, self.k, self.error_feedback, self.topk_scope, self.local_steps)

    def resolve(self, value) -> Path:
        p = Path(value)
        if not p.is_absolute() and (Path(self.base_dir) / p).is_file():
            return Path(self.base_dir) / p
        return p

    def to_text(self) -> str:
        """Serialise back to config-file syntax (effective values after overrides)."""
        by_section = {}
        for (section, key), (name, *_rest) in _SCHEMA.items():
            v = getattr(self, name)
            if v is None or v == "":
                continue
            if name in ("architecture", "train_path", "test_path"):
                v = str(self.resolve(v))
            by_section.setdefault(section, []).append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in by_section.items())


_FIELD_KEYS = {name: (section, key) for (section, key), (name, *_rest) in _SCHEMA.items()}


def _apply(cfg, section, key, raw, where):
    """Set one value; ``where`` is a callable building a ConfigError for this location."""
    if (section, key) not in _SCHEMA:
        raise where(f"unknown key {key!r} in [{section}]")
    name, conv, check, desc = _SCHEMA[(section, key)]
    try:
        value = conv(raw)
    except ValueError:
        raise where(f"{section}.{key}: cannot parse {raw!r}") from None
    if check is not None and value is not None and not check(value):
        raise where(f"{section}.{key} must be {desc}, got {raw!r}")
    setattr(cfg, name, value)


def parse_experiment(cf: cfgfile.ConfigFile) -> ExperimentConfig:
    cfg = ExperimentConfig(base_dir=str(Path(cf.path).parent))
    for sname, sec in cf.sections.items():
        if sname not in ("experiment", "data", "output"):
            raise ConfigError(f"unknown section [{sname}]", cf.path, sec.line)
        for key, raw in sec.values.items():
            _apply(cfg, sname, key, raw, lambda msg, s=sname, k=key: cf.error(msg, s, k))
    return cfg


def load_experiment(path=None, overrides=None) -> ExperimentConfig:
    """Load a config file (or defaults when ``path`` is None) and apply ``section.key=value`` overrides."""
    cfg = parse_experiment(cfgfile.load(path, list_sections=())) if path else ExperimentConfig()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        if "." in dotted:
            section, key = dotted.split(".", 1)
        else:
            matches = [sk for sk in _SCHEMA if sk[1] == dotted]
            if ("experiment", dotted) in matches:  # bare keys prefer [experiment] (e.g. seed)
                matches = [("experiment", dotted)]
            if len(matches) != 1:
                raise ConfigError(f"unknown override key {dotted!r}")
            section, key = matches[0]
        _apply(cfg, section, key, raw.strip(), lambda msg: ConfigError(f"override {item!r}: {msg}"))
    return cfg


def set_field(cfg: ExperimentConfig, name: str, value) -> None:
    """Type-checked assignment by field name, used for command-line flags."""
    section, key = _FIELD_KEYS[name]
    _apply(cfg, section, key, str(value), lambda msg: ConfigError(f"--{key.replace('_', '-')}: {msg}"))


def load_datasets(cfg: ExperimentConfig):
    if cfg.data_source == "csv":
        if not cfg.train_path or not cfg.test_path:
            raise ConfigError("csv data source needs data.train_path and data.test_path")
        return load_segments(cfg.resolve(cfg.train_path)), load_segments(cfg.resolve(cfg.test_path))
    seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    train = synth_generate(cfg.train_size, seed=2 * seed, positive_rate=cfg.positive_rate, noise=cfg.noise)
    test = synth_generate(cfg.test_size, seed=2 * seed + 1, positive_rate=cfg.positive_rate, noise=cfg.noise)
    return train, test


def metrics_header(devices):
    return (["round", "loss", "pooled_acc"] + [f"client_{j}_acc" for j in range(devices)]
            + ["bytes_values_only", "bytes_on_wire", "bytes_up_on_wire", "bytes_down_on_wire"])


def metrics_row(m: RoundMetrics, devices):
    accs = [""] * (devices + 1)
    if m.pooled_acc is not None:
        accs = [f"{m.pooled_acc:.6f}"] + [f"{a:.6f}" for a in m.client_acc]
    return ([m.round, f"{m.loss:.8f}"] + accs
            + [m.bytes_values_only, m.bytes_on_wire, m.bytes_up_wire, m.bytes_down_wire])


TRAFFIC_DEVICES = (16, 32, 64)


def traffic_table(model, batch, k, devices=TRAFFIC_DEVICES, cut_index=None, scope="tensor"):
    """Rows of (scheme, devices, values-only bytes, on-wire bytes) for the per-iteration traffic table."""
    rows = []
    for scheme, label in (("fedavg", "FedAvg"), ("splitnn", "SplitNN"), ("split-sparse", "Proposed")):
        for m in devices:
            vo = protocol.traffic_bytes(scheme, model, m, batch, k, "values-only", cut_index, scope)
            ow = protocol.traffic_bytes(scheme, model, m, batch, k, "on-wire", cut_index, scope)
            rows.append({"scheme": label, "devices": m, "values_only_bytes": vo, "on_wire_bytes": ow})
    return rows


def write_traffic_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "devices", "values_only_bytes", "values_only_mib", "on_wire_bytes", "on_wire_mib"])
        for r in rows:
            w.writerow([r["scheme"], r["devices"], r["values_only_bytes"], f"{r['values_only_bytes'] / 2**20:.4f}",
                        r["on_wire_bytes"], f"{r['on_wire_bytes'] / 2**20:.4f}"])


def run_experiment(cfg: ExperimentConfig, out_dir=None, on_round=None):
    """Train for ``cfg.rounds`` rounds; writes metrics.csv, traffic_table.csv, summary.json and the effective config.

    Output files depend only on the config, so identical configs give
    byte-identical files. ``on_round`` is called with each RoundMetrics.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arch = load_architecture(cfg.resolve(cfg.architecture))
    scheme = cfg.scheme_spec()
    model = arch.build(seed=cfg.seed)
    cut = cfg.cut_index if cfg.cut_index is not None else arch.default_cut
    train, test = load_datasets(cfg)
    clients, server = init_states(scheme, model, train, cfg.devices, cfg.batch_size, cfg.seed,
                                  cfg.lr, cfg.momentum, cfg.sharding, cut)
    transport = protocol.LoopbackTransport(scheme.name)
    (out / "config.cfg").write_text(cfg.to_text())
    write_traffic_csv(traffic_table(model, cfg.batch_size, cfg.k, cut_index=server.cut_index or cut,
                                    scope=cfg.topk_scope), out / "traffic_table.csv")
    series = []
    started = time.perf_counter()
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(cfg.devices))
        for r in range(cfg.rounds):
            m = run_round(scheme, clients, server, transport)
            if (r + 1) % cfg.eval_every == 0 or r + 1 == cfg.rounds:
                m.pooled_acc, m.client_acc = evaluate(scheme, clients, server, test, cfg.batch_size)
            w.writerow(metrics_row(m, cfg.devices))
            fh.flush()
            series.append(m)
            log.info("round %d loss %.4f acc %s", m.round, m.loss, "-" if m.pooled_acc is None else f"{m.pooled_acc:.4f}")
            if on_round is not None:
                on_round(m)
    final = series[-1] if series else None
    summary = {
        "scheme": scheme.name,
        "devices": cfg.devices,
        "k": cfg.k,
        "error_feedback": cfg.error_feedback,
        "rounds": cfg.rounds,
        "seed": cfg.seed,
        "final_loss": None if final is None else round(final.loss, 8),
        "final_pooled_acc": None if final is None else final.pooled_acc,
        "final_client_acc": None if final is None else final.client_acc,
        "total_bytes_values_only": transport.ledger.total("values-only"),
        "total_bytes_on_wire": transport.ledger.total("on-wire"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("finished %d rounds in %.1fs", cfg.rounds, time.perf_counter() - started)
    return series
