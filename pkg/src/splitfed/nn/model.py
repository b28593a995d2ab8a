"""Layer-chain models: static shape checking, forward with a tape, backward."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from splitfed.nn.errors import NonFiniteError, ShapeError, TapeMismatchError
from splitfed.nn.layers import Layer, ResidualEnd, ResidualStart


def infer_shapes(layers, input_shape):
    """Per-sample shapes before each layer plus the final output shape.

    Also checks residual marker nesting and skip/trunk agreement at each merge.
    """
    shapes = [tuple(input_shape)]
    stack = []
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        if isinstance(layer, ResidualStart):
            stack.append(shape)
        elif isinstance(layer, ResidualEnd):
            if not stack:
                raise ShapeError(f"layer {i}: residual_end without matching residual_start")
            shape = layer.check_merge(shape, stack.pop())
        else:
            shape = tuple(layer.out_shape(shape))
        shapes.append(shape)
    if stack:
        raise ShapeError(f"{len(stack)} residual block(s) left open")
    return shapes


def residual_depth(layers):
    """Nesting depth *after* each layer; a cut at ``i`` is legal iff depth[i-1] == 0."""
    depth, out = 0, []
    for layer in layers:
        if isinstance(layer, ResidualStart):
            depth += 1
        elif isinstance(layer, ResidualEnd):
            depth -= 1
        out.append(depth)
    return out


@dataclass
class ModelGraph:
    """An ordered layer chain with its parameters and running statistics.

    ``params`` and ``buffers`` hold one dict per layer (empty for
    parameter-free layers). Slices made with :meth:`slice` share these dicts
    with the parent.
    """

    layers: tuple
    input_shape: tuple
    params: list = field(default_factory=list)
    buffers: list = field(default_factory=list)
    name: str = "model"

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(self.input_shape)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        if len(self.params) != len(self.layers) or len(self.buffers) != len(self.layers):
            raise ShapeError("params/buffers must have one entry per layer")

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def dtype(self):
        for p in self.params:
            for v in p.values():
                return v.dtype
        return np.dtype(np.float32)

    def slice(self, start, stop=None):
        stop = self.n_layers if stop is None else stop
        return ModelGraph(
            self.layers[start:stop],
            self.shapes[start],
            self.params[start:stop],
            self.buffers[start:stop],
            name=f"{self.name}[{start}:{stop}]",
        )

    def copy(self):
        return ModelGraph(self.layers, self.input_shape, copy.deepcopy(self.params), copy.deepcopy(self.buffers), self.name)

    def astype(self, dtype):
        cast = lambda group: [{k: v.astype(dtype) for k, v in d.items()} for d in group]
        return ModelGraph(self.layers, self.input_shape, cast(self.params), cast(self.buffers), self.name)


def build_model(layers, input_shape, seed=0, dtype=np.float32, name="model"):
    """Initialise parameters deterministically from ``seed`` (He-uniform weights, zero biases)."""
    layers = tuple(layers)
    shapes = infer_shapes(layers, input_shape)
    rng = np.random.default_rng(seed)
    params = [layer.init_params(shapes[i], rng, dtype) for i, layer in enumerate(layers)]
    buffers = [layer.init_buffers(shapes[i], dtype) for i, layer in enumerate(layers)]
    return ModelGraph(layers, input_shape, params, buffers, name)


def concat(front: ModelGraph, back: ModelGraph) -> ModelGraph:
    if tuple(front.output_shape) != tuple(back.input_shape):
        raise ShapeError(f"cannot chain output {front.output_shape} into input {back.input_shape}")
    return ModelGraph(
        front.layers + back.layers,
        front.input_shape,
        list(front.params) + list(back.params),
        list(front.buffers) + list(back.buffers),
        name=f"{front.name}+{back.name}",
    )


def param_count(model: ModelGraph) -> int:
    """Trainable scalar count (running statistics excluded)."""
    return sum(int(v.size) for p in model.params for v in p.values())


def buffer_count(model: ModelGraph) -> int:
    """Non-trainable scalars (batch-norm running statistics) that a full model sync must also carry."""
    return sum(int(v.size) for b in model.buffers for v in b.values())


@dataclass
class ActivationTape:
    layers: tuple
    caches: list
    skip_shapes: dict
    train: bool
    input_shape: tuple


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def forward(model: ModelGraph, batch: np.ndarray, mode: str = "train"):
    """Run the chain; returns ``(tape, output)``.

    In train mode batch-norm layers normalise with batch statistics and update
    their running averages in ``model.buffers``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = np.asarray(batch)
    if batch.ndim < 1 or batch.shape[0] < 1 or tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match model input (B, {model.input_shape})")
    train = mode == "train"
    x = batch
    caches, skips, skip_shapes = [], [], {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, ResidualStart):
            skips.append((i, x))
            cache = None
        elif isinstance(layer, ResidualEnd):
            start, skip = skips.pop()
            skip_shapes[i] = (start, skip.shape[1:])
            x, cache = layer.merge(x, skip)
        else:
            x, cache = layer.forward(x, model.params[i], model.buffers[i], train)
        _check_finite(x, f"output of layer {i} ({layer.kind})")
        caches.append(cache)
    return ActivationTape(model.layers, caches, skip_shapes, train, tuple(batch.shape)), x


def backward(model: ModelGraph, tape: ActivationTape, loss_grad: np.ndarray):
    """Reverse pass; returns ``(grads, input_grad)`` with ``grads`` mirroring ``model.params``."""
    if tape.layers != model.layers or len(tape.caches) != model.n_layers:
        raise TapeMismatchError("tape was recorded on a different model")
    if not tape.train:
        raise TapeMismatchError("backward needs a tape recorded in train mode")
    dx = np.asarray(loss_grad)
    expected = (tape.input_shape[0],) + tuple(model.output_shape)
    if dx.shape != expected:
        raise ShapeError(f"loss gradient shape {dx.shape} != model output {expected}")
    grads = [dict() for _ in model.layers]
    pending = {}
    for i in range(model.n_layers - 1, -1, -1):
        layer = model.layers[i]
        cache = tape.caches[i]
        if isinstance(layer, ResidualEnd):
            start, skip_shape = tape.skip_shapes[i]
            dx, pending[start] = layer.merge_backward(dx, cache, skip_shape)
        elif isinstance(layer, ResidualStart):
            dx = dx + pending.pop(i)
        else:
            dx, grads[i] = layer.backward(dx, cache, model.params[i])
            for name, g in grads[i].items():
                _check_finite(g, f"gradient of layer {i} ({layer.kind}) {name}")
        _check_finite(dx, f"input gradient of layer {i} ({layer.kind})")
    return grads, dx


def predict(model: ModelGraph, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode class predictions, chunked to bound memory."""
    out = []
    for lo in range(0, x.shape[0], batch_size):
        _, logits = forward(model, x[lo : lo + batch_size], mode="eval")
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
