"""Cutting a model into a client front and a server tail, and the split training handshake.

Server-side entry points accept only :class:`CutActivation` values, so raw
input batches cannot reach the server through this API.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splitfed.nn import Conv1D, ModelGraph, ReLU, ShapeError, backward, forward, softmax_cross_entropy
from splitfed.nn.model import residual_depth


class SplitError(ValueError):
    pass


@dataclass
class SplitModel:
    client_part: ModelGraph
    server_part: ModelGraph
    cut_index: int

    @property
    def cut_shape(self):
        return self.server_part.input_shape


@dataclass
class CutActivation:
    tensor: np.ndarray
    round: int = 0
    client_id: int = 0


@dataclass
class CutGradient:
    tensor: np.ndarray
    round: int = 0
    client_id: int = 0


def default_cut(model: ModelGraph) -> int:
    """Index just after the first convolution, keeping a directly following ReLU on the client."""
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv1D):
            cut = i + 1
            if cut < model.n_layers and isinstance(model.layers[cut], ReLU):
                cut += 1
            return cut
    raise SplitError("model has no convolution to place on the client")


def split_at(model: ModelGraph, cut_index: int | None = None) -> SplitModel:
    """Partition ``model`` so layers ``[0, cut)`` run on the client. Parameters are shared, not copied."""
    cut = default_cut(model) if cut_index is None else int(cut_index)
    n = model.n_layers
    if not 1 <= cut <= n - 1:
        raise SplitError(f"cut index {cut} outside [1, {n - 1}]")
    if residual_depth(model.layers)[cut - 1] != 0:
        raise SplitError(f"cut index {cut} falls inside a residual block")
    return SplitModel(model.slice(0, cut), model.slice(cut), cut)


def client_forward(split: SplitModel, batch, round=0, client_id=0, mode="train"):
    tape, act = forward(split.client_part, batch, mode)
    return tape, CutActivation(act, round, client_id)


def server_step(split: SplitModel, act: CutActivation, labels):
    """Finish the forward pass on the server; returns ``(loss, server grads, CutGradient)``."""
    if not isinstance(act, CutActivation):
        raise TypeError("server_step accepts only a CutActivation")
    x = np.asarray(act.tensor)
    if tuple(x.shape[1:]) != tuple(split.cut_shape):
        raise ShapeError(f"activation shape {x.shape[1:]} != server input {split.cut_shape}")
    tape, logits = forward(split.server_part, x, "train")
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads, dact = backward(split.server_part, tape, dlogits)
    return loss, grads, CutGradient(dact, act.round, act.client_id)


def server_logits(split: SplitModel, act: CutActivation, mode="eval"):
    if not isinstance(act, CutActivation):
        raise TypeError("server_logits accepts only a CutActivation")
    return forward(split.server_part, act.tensor, mode)[1]


def client_backward(split: SplitModel, tape, cut_grad: CutGradient):
    grads, _ = backward(split.client_part, tape, np.asarray(cut_grad.tensor))
    return grads
