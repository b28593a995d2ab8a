"""Deterministic multi-client training simulator for the four training schemes.

* ``centralized``: one SGD step per round on the pooled batch of all devices.
* ``fedavg``: every client takes ``local_steps`` SGD steps on its full model
  copy, uploads it, the server averages weighted by shard size and sends the
  average back down. Synchronisation happens every round.
* ``splitnn``: each client runs its front, ships the dense cut activation,
  the server finishes forward/backward and returns the dense cut gradient.
* ``split-sparse``: as ``splitnn`` but both cut tensors travel top-K sparse,
  optionally with error feedback.

In the split schemes every client front is updated as soon as its gradient
arrives; the shared server tail applies one step per round with the mean of
the per-client tail gradients. Clients are processed in id order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from splitfed import protocol
from splitfed.data import BatchCursor, SegmentDataset, partition_shards
from splitfed.nn import ModelGraph, OptimizerState, backward, concat, forward, predict, sgd_step, softmax_cross_entropy
from splitfed.partition import (
    CutActivation, CutGradient, SplitModel, client_backward, client_forward, server_logits, server_step, split_at,
)
from splitfed.sparse import densify, residual_sparsify, topk_sparsify

log = logging.getLogger(__name__)

SPLIT_SCHEMES = ("splitnn", "split-sparse")


@dataclass(frozen=True)
class Scheme:
    name: str
    k: float = 1.0
    error_feedback: bool = False
    scope: str = "tensor"
    local_steps: int = 1

    def __post_init__(self):
        if self.name not in protocol.SCHEMES:
            raise ValueError(f"unknown scheme {self.name!r}; expected one of {protocol.SCHEMES}")
        if not 0 < self.k <= 1:
            raise ValueError(f"K must lie in (0, 1], got {self.k}")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")

    @property
    def is_split(self):
        return self.name in SPLIT_SCHEMES


@dataclass
class ClientState:
    client_id: int
    shard: SegmentDataset
    model: ModelGraph  # front for split schemes, full copy otherwise
    opt: OptimizerState
    cursor: BatchCursor
    act_residual: np.ndarray | None = None
    grad_residual: np.ndarray | None = None


@dataclass
class ServerState:
    model: ModelGraph | None  # shared tail (split) or global model (fedavg)
    opt: OptimizerState | None
    devices: int
    cut_index: int | None = None
    round: int = 0


@dataclass
class RoundMetrics:
    round: int
    loss: float
    pooled_acc: float | None = None
    client_acc: list | None = None
    bytes_up_values: int = 0
    bytes_down_values: int = 0
    bytes_up_wire: int = 0
    bytes_down_wire: int = 0

    @property
    def bytes_values_only(self):
        return self.bytes_up_values + self.bytes_down_values

    @property
    def bytes_on_wire(self):
        return self.bytes_up_wire + self.bytes_down_wire


def _cursor_seed(seed, client_id):
    return np.random.SeedSequence([seed, client_id])


def init_states(scheme: Scheme, model: ModelGraph, train: SegmentDataset, devices: int, batch: int,
                seed: int = 0, lr: float = 0.01, momentum: float = 0.9, sharding: str = "iid",
                cut_index: int | None = None):
    """Build client and server states from an initialised model. ``model`` is not modified."""
    if scheme.name == "centralized":
        client = ClientState(0, train, model.copy(), OptimizerState(lr, momentum),
                             BatchCursor(len(train), batch * devices, _cursor_seed(seed, 0)))
        return [client], ServerState(None, None, devices)
    shards = partition_shards(train, devices, sharding, seed)
    if scheme.is_split:
        split = split_at(model.copy(), cut_index)
        fronts, tail = split.client_part, split.server_part
        server = ServerState(tail, OptimizerState(lr, momentum), devices, split.cut_index)
    else:
        fronts = model
        server = ServerState(model.copy(), None, devices)
    clients = [
        ClientState(j, shards[j], fronts.copy(), OptimizerState(lr, momentum),
                    BatchCursor(len(shards[j]), batch, _cursor_seed(seed, j)))
        for j in range(devices)
    ]
    return clients, server


def flatten(group) -> np.ndarray:
    arrays = [v.reshape(-1) for d in group for v in d.values()]
    return np.concatenate(arrays).astype(np.float32) if arrays else np.zeros(0, np.float32)


def unflatten_into(group, flat) -> None:
    pos = 0
    for d in group:
        for name, v in d.items():
            d[name] = flat[pos : pos + v.size].reshape(v.shape).astype(v.dtype)
            pos += v.size
    if pos != flat.size:
        raise ValueError(f"blob has {flat.size} values, model needs {pos}")


def fedavg_aggregate(params_list, weights):
    """Elementwise mean of parameter sets weighted by ``weights`` (normalised to sum to 1)."""
    if not params_list:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(params_list),) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per parameter set")
    w = w / w.sum()
    ref = params_list[0]
    out = []
    for i, layer in enumerate(ref):
        agg = {}
        for name, v in layer.items():
            stack = []
            for p in params_list:
                if p[i].keys() != layer.keys() or p[i][name].shape != v.shape:
                    raise ValueError(f"shape mismatch at layer {i} {name}")
                stack.append(p[i][name].astype(np.float64))
            agg[name] = np.tensordot(w, np.stack(stack), axes=1).astype(v.dtype)
        out.append(agg)
    return out


def _up_message(scheme, client, act, rnd):
    t = act.tensor
    if scheme.name == "splitnn":
        return protocol.DenseActivation(rnd, client.client_id, t)
    if scheme.error_feedback:
        if client.act_residual is None:
            client.act_residual = np.zeros_like(t)
        s, client.act_residual = residual_sparsify(t, client.act_residual, scheme.k, scheme.scope)
    else:
        s = topk_sparsify(t, scheme.k, scheme.scope)
    return protocol.ForwardActivation(rnd, client.client_id, s)


def _down_message(scheme, client, grad, rnd):
    t = grad.tensor
    if scheme.name == "splitnn":
        return protocol.DenseGradient(rnd, client.client_id, t)
    if scheme.error_feedback:
        if client.grad_residual is None:
            client.grad_residual = np.zeros_like(t)
        s, client.grad_residual = residual_sparsify(t, client.grad_residual, scheme.k, scheme.scope)
    else:
        s = topk_sparsify(t, scheme.k, scheme.scope)
    return protocol.ActivationGradient(rnd, client.client_id, s)


def _received_tensor(msg):
    return densify(msg.tensor) if isinstance(msg, protocol.SparseMessage) else msg.tensor


def _split_round(scheme, clients, server, transport, rnd):
    losses = []
    tail_sum = None
    for c in clients:
        idx = c.cursor.next()
        x, y = c.shard.inputs[idx], c.shard.labels[idx]
        split = SplitModel(c.model, server.model, server.cut_index)
        tape, act = client_forward(split, x, rnd, c.client_id)
        up = transport.send(_up_message(scheme, c, act, rnd), rnd, "up")
        # labels travel out of band; only the cut activation crosses the wire
        loss, tail_grads, cut_grad = server_step(split, CutActivation(_received_tensor(up), rnd, c.client_id), y)
        down = transport.send(_down_message(scheme, c, cut_grad, rnd), rnd, "down")
        front_grads = client_backward(split, tape, CutGradient(_received_tensor(down), rnd, c.client_id))
        sgd_step(c.model.params, front_grads, c.opt)
        losses.append(loss)
        if tail_sum is None:
            tail_sum = [{k: g.copy() for k, g in d.items()} for d in tail_grads]
        else:
            for acc, d in zip(tail_sum, tail_grads):
                for k, g in d.items():
                    acc[k] += g
    for d in tail_sum:
        for g in d.values():
            g /= len(clients)
    sgd_step(server.model.params, tail_sum, server.opt)
    return losses


def _local_step(c):
    idx = c.cursor.next()
    tape, logits = forward(c.model, c.shard.inputs[idx], "train")
    loss, dlogits = softmax_cross_entropy(logits, c.shard.labels[idx])
    grads, _ = backward(c.model, tape, dlogits)
    sgd_step(c.model.params, grads, c.opt)
    return loss


def _fedavg_round(scheme, clients, server, transport, rnd):
    losses, uploaded, weights = [], [], []
    for c in clients:
        for _ in range(scheme.local_steps):
            loss = _local_step(c)
        losses.append(loss)
        msg = protocol.ModelSync("up", rnd, c.client_id, flatten(c.model.params), flatten(c.model.buffers))
        got = transport.send(msg, rnd, "up")
        params = [{k: np.empty_like(v) for k, v in d.items()} for d in server.model.params]
        buffers = [{k: np.empty_like(v) for k, v in d.items()} for d in server.model.buffers]
        unflatten_into(params, got.params)
        unflatten_into(buffers, got.buffers)
        uploaded.append((params, buffers))
        weights.append(len(c.shard))
    new_params = fedavg_aggregate([p for p, _ in uploaded], weights)
    new_buffers = fedavg_aggregate([b for _, b in uploaded], weights)
    server.model.params[:] = new_params
    server.model.buffers[:] = new_buffers
    blob_p, blob_b = flatten(new_params), flatten(new_buffers)
    for c in clients:
        got = transport.send(protocol.ModelSync("down", rnd, c.client_id, blob_p, blob_b), rnd, "down")
        unflatten_into(c.model.params, got.params)
        unflatten_into(c.model.buffers, got.buffers)
    return losses


def run_round(scheme: Scheme, clients, server: ServerState, transport: protocol.LoopbackTransport | None = None):
    """Advance every state by one round in place and return the round's metrics (without accuracy)."""
    transport = transport if transport is not None else protocol.LoopbackTransport(scheme.name)
    rnd = server.round
    if scheme.name == "centralized":
        losses = [_local_step(clients[0])]
    elif scheme.is_split:
        losses = _split_round(scheme, clients, server, transport, rnd)
    else:
        losses = _fedavg_round(scheme, clients, server, transport, rnd)
    server.round += 1
    led = transport.ledger
    return RoundMetrics(
        rnd, float(np.mean(losses)),
        bytes_up_values=led.values_only.get((scheme.name, rnd, "up"), 0),
        bytes_down_values=led.values_only.get((scheme.name, rnd, "down"), 0),
        bytes_up_wire=led.on_wire.get((scheme.name, rnd, "up"), 0),
        bytes_down_wire=led.on_wire.get((scheme.name, rnd, "down"), 0),
    )


def _accuracy(model, test):
    return float(np.mean(predict(model, test.inputs) == test.labels))


def _sparse_accuracy(scheme, front, tail, test, batch):
    # inference traffic is sparsified like training traffic, batch by batch
    hits = 0
    for lo in range(0, len(test), batch):
        act = forward(front, test.inputs[lo : lo + batch], "eval")[1]
        act = densify(topk_sparsify(act, scheme.k, scheme.scope))
        logits = server_logits(SplitModel(front, tail, 0), CutActivation(act))
        hits += int(np.sum(logits.argmax(axis=1) == test.labels[lo : lo + batch]))
    return hits / len(test)


def evaluate(scheme: Scheme, clients, server: ServerState, test: SegmentDataset, batch: int = 32):
    """Returns ``(pooled accuracy, per-client accuracies)``.

    Split schemes evaluate each client front composed with the shared tail
    and pool by the mean; with sparsification the cut activation of each
    ``batch``-sized test chunk goes through the same top-K filter used in
    training. Other schemes evaluate the single global model.
    """
    if len(test) == 0:
        raise ValueError("test set is empty")
    if scheme.name == "split-sparse" and scheme.k < 1:
        per_client = [_sparse_accuracy(scheme, c.model, server.model, test, batch) for c in clients]
        return float(np.mean(per_client)), per_client
    if scheme.is_split:
        per_client = [_accuracy(concat(c.model, server.model), test) for c in clients]
        return float(np.mean(per_client)), per_client
    model = clients[0].model if scheme.name == "centralized" else server.model
    acc = _accuracy(model, test)
    return acc, [acc] * server.devices
