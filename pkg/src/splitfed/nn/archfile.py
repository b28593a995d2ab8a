"""Architecture description files (see ``splitfed.cfgfile`` for the syntax).

    [model]
    name = desk_small
    input_channels = 1
    input_length = 256
    num_classes = 2

    [layers]
    conv1d in=1 out=16 kernel=16
    relu
    ...
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from splitfed import cfgfile
from splitfed.cfgfile import ConfigError
from splitfed.nn import layers as L
from splitfed.nn.errors import ShapeError
from splitfed.nn.model import ModelGraph, build_model, infer_shapes

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _int(v):
    return int(v)


def _bool(v):
    if v.lower() not in _BOOL:
        raise ValueError(f"not a boolean: {v!r}")
    return _BOOL[v.lower()]


# kind -> (layer class, {option: (argument name, converter)})
_SCHEMA = {
    "conv1d": (L.Conv1D, {"in": ("in_channels", _int), "out": ("out_channels", _int), "kernel": ("kernel", _int),
                          "stride": ("stride", _int), "padding": ("padding", str), "bias": ("bias", _bool)}),
    "batchnorm1d": (L.BatchNorm1D, {"channels": ("channels", _int), "eps": ("epsilon", float),
                                    "momentum": ("momentum", float)}),
    "relu": (L.ReLU, {}),
    "maxpool1d": (L.MaxPool1D, {"window": ("window", _int), "stride": ("stride", _int)}),
    "gap": (L.GlobalAveragePool1D, {}),
    "dense": (L.Dense, {"in": ("in_features", _int), "out": ("out_features", _int), "bias": ("bias", _bool)}),
    "residual_start": (L.ResidualStart, {}),
    "residual_end": (L.ResidualEnd, {"pool": ("pool", _int), "pad": ("pad", _bool)}),
}


@dataclass
class Architecture:
    name: str
    layers: tuple
    input_shape: tuple
    num_classes: int
    default_cut: int | None
    path: str

    def build(self, seed=0, dtype=np.float32) -> ModelGraph:
        return build_model(self.layers, self.input_shape, seed=seed, dtype=dtype, name=self.name)


def resolve(path) -> Path:
    """A path as given, or the name of a config shipped with the package."""
    p = Path(path)
    if p.is_file():
        return p
    shipped = CONFIG_DIR / p.name
    if p.parent == Path(".") and shipped.is_file():
        return shipped
    raise FileNotFoundError(f"architecture file not found: {path}")


def _make_layer(entry, path):
    if entry.kind not in _SCHEMA:
        raise ConfigError(f"unknown layer kind {entry.kind!r}", path, entry.line)
    cls, opts = _SCHEMA[entry.kind]
    kwargs = {}
    for key, raw in entry.options.items():
        if key not in opts:
            raise ConfigError(f"{entry.kind}: unknown option {key!r}", path, entry.line)
        arg, conv = opts[key]
        try:
            kwargs[arg] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{entry.kind}: bad value for {key}: {exc}", path, entry.line) from None
    try:
        return cls(**kwargs)
    except (TypeError, ShapeError) as exc:
        raise ConfigError(f"{entry.kind}: {exc}", path, entry.line) from None


def parse_architecture(cfg: cfgfile.ConfigFile) -> Architecture:
    model = cfg.section("model")
    known = {"name", "input_channels", "input_length", "num_classes", "default_cut"}
    for key in model.values:
        if key not in known:
            raise cfg.error(f"unknown key {key!r} in [model]", "model", key)
    vals = {}
    for key in ("input_channels", "input_length", "num_classes", "default_cut"):
        if key in model.values:
            try:
                vals[key] = int(model.values[key])
            except ValueError:
                raise cfg.error(f"{key} must be an integer", "model", key) from None
    for key in ("input_channels", "input_length", "num_classes"):
        if key not in vals:
            raise cfg.error(f"missing key {key!r}", "model")
    entries = cfg.section("layers").entries
    layers = tuple(_make_layer(e, cfg.path) for e in entries)
    input_shape = (vals["input_channels"], vals["input_length"])
    try:
        shapes = infer_shapes(layers, input_shape)
    except ShapeError as exc:
        raise ConfigError(f"shape check failed: {exc}", cfg.path) from None
    if shapes[-1] != (vals["num_classes"],):
        raise ConfigError(f"network output {shapes[-1]} does not match num_classes={vals['num_classes']}", cfg.path)
    return Architecture(
        model.values.get("name", Path(cfg.path).stem), layers, input_shape,
        vals["num_classes"], vals.get("default_cut"), cfg.path,
    )


def load_architecture(path) -> Architecture:
    return parse_architecture(cfgfile.load(resolve(path)))
